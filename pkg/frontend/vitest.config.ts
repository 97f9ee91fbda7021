import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["tests/**/*.test.ts"],
    environment: "happy-dom",
    testTimeout: 30000,
    hookTimeout: 60000,
    pool: "forks",
  },
});
