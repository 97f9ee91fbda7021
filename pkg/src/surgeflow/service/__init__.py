from .engine import ConfigError, Engine, EngineConfig, TaskGraph, TaskGraphNode, serve

__all__ = ["ConfigError", "Engine", "EngineConfig", "TaskGraph", "TaskGraphNode", "serve"]
