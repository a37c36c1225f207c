import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    environment: "jsdom",
    include: ["e2e/**/*.test.ts", "src/**/*.test.ts"],
    // the e2e test drives a real service process end to end
    testTimeout: 120_000,
    hookTimeout: 60_000,
    pool: "forks",
  },
});
