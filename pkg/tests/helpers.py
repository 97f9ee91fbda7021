"""Shared test utilities: polling waits and a single-threaded delivery pump."""

import time

import pytest


def wait_until(predicate, timeout=10.0, interval=0.005, desc="condition"):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        value = predicate()
        if value:
            return value
        time.sleep(interval)
    pytest.fail(f"timed out after {timeout}s waiting for {desc}")


def pump(runtime, broker, consumer="pump", max_steps=5000, settle=0.0):
    """Drain the broker by fetching and executing serially on this thread.

    settle > 0 retries once after a pause, for messages parked behind a
    requeue delay.
    """
    steps = 0
    while True:
        fetched = broker.fetch(consumer, runtime.all_queues())
        if fetched is None:
            if settle:
                time.sleep(settle)
                fetched = broker.fetch(consumer, runtime.all_queues())
            if fetched is None:
                return steps
        runtime.execute_delivery(*fetched)
        steps += 1
        if steps >= max_steps:
            raise AssertionError(f"pump exceeded {max_steps} deliveries without draining")
