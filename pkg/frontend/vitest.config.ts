import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["test/**/*.test.ts"],
    // the live loop test boots the python service and trains a small model
    testTimeout: 180_000,
    hookTimeout: 180_000,
  },
});
