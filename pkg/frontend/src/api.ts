import type { Choice, NextTrialResponse, SubmitResult, TrialPayload, TrialView } from './types';

export type FetchFn = typeof fetch;

export class ServiceError extends Error {
    constructor(message: string, readonly status?: number) {
        super(message);
        this.name = 'ServiceError';
    }
}

export function toTrialView(baseUrl: string, trial: TrialPayload): TrialView {
    const blob = (digest: string) => `${baseUrl}/blobs/${digest}`;
    return {
        trialId: trial.trial_id,
        originalUrl: blob(trial.original_digest),
        instructionEn: trial.instruction_en,
        instructionZh: trial.instruction_zh,
        leftUrl: blob(trial.left_digest),
        rightUrl: blob(trial.right_digest),
        progressDone: trial.progress.done,
        progressTotal: trial.progress.total,
        criteria: trial.criteria
    };
}

/** Thin typed client over the preference service HTTP API. */
export class PrefApi {
    constructor(
        readonly baseUrl: string,
        private readonly fetchFn: FetchFn = fetch
    ) {}

    async nextTrial(sessionId: string, judge: string): Promise<NextTrialResponse> {
        const url = `${this.baseUrl}/sessions/${encodeURIComponent(sessionId)}/next` +
            `?judge=${encodeURIComponent(judge)}`;
        const response = await this.fetchFn(url);
        if (!response.ok) {
            throw new ServiceError(`next trial failed: ${response.status}`, response.status);
        }
        return (await response.json()) as NextTrialResponse;
    }

    /**
     * Submit a judgment. A 409 means the (trial, judge) pair is already
     * recorded — the caller treats that as success and advances.
     */
    async submitJudgment(
        sessionId: string,
        trialId: string,
        choice: Choice,
        judge: string
    ): Promise<SubmitResult> {
        const url = `${this.baseUrl}/sessions/${encodeURIComponent(sessionId)}/judgments`;
        const response = await this.fetchFn(url, {
            method: 'POST',
            headers: { 'Content-Type': 'application/json' },
            body: JSON.stringify({ trial_id: trialId, choice, judge })
        });
        if (response.status === 409) {
            return 'conflict';
        }
        if (!response.ok) {
            throw new ServiceError(`submit failed: ${response.status}`, response.status);
        }
        return 'recorded';
    }
}

export interface RetryOptions {
    attempts: number;
    delayMs: number;
    onRetry?: (attempt: number) => void;
}

/**
 * Retry a submission across network failures. Safe because the service keys
 * judgments by (trial, judge): a duplicate lands as a conflict, never as a
 * second row.
 */
export async function submitWithRetry(
    api: PrefApi,
    sessionId: string,
    trialId: string,
    choice: Choice,
    judge: string,
    options: RetryOptions = { attempts: 3, delayMs: 500 }
): Promise<SubmitResult> {
    let lastError: unknown;
    for (let attempt = 0; attempt < options.attempts; attempt++) {
        if (attempt > 0) {
            options.onRetry?.(attempt);
            await new Promise((resolve) => setTimeout(resolve, options.delayMs));
        }
        try {
            return await api.submitJudgment(sessionId, trialId, choice, judge);
        } catch (error) {
            lastError = error;
        }
    }
    throw lastError instanceof Error ? lastError : new ServiceError('submit failed');
}
