import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["test/**/*.test.ts"],
    // several tests spawn python or the compiled CLI, so leave room
    testTimeout: 120_000,
    hookTimeout: 120_000,
  },
});
