/// <reference types="vitest/config" />
import { defineConfig } from "vitest/config";

export default defineConfig({
  build: {
    target: "es2022",
  },
  test: {
    environment: "node",
    testTimeout: 30_000,
  },
});
