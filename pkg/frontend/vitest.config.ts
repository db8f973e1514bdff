import { defineConfig } from 'vitest/config';

export default defineConfig({
    test: {
        environment: 'jsdom',
        include: ['test/**/*.test.ts'],
        testTimeout: 120_000,
        hookTimeout: 60_000
    }
});
