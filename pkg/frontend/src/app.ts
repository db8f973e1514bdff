import { PrefApi, submitWithRetry, toTrialView } from './api';
import type { Choice, TrialView } from './types';
import { clearRetryBanner, renderDone, renderTrial, showNotice, showRetryBanner } from './view';

/**
 * Drives one judge through a session. Stateless by design: every piece of
 * progress lives in the service, so refreshing the page resumes at the first
 * unjudged trial.
 */
export class JudgeApp {
    private current: TrialView | null = null;
    private submitting = false;
    private finished = false;
    judged = 0;

    constructor(
        private readonly api: PrefApi,
        private readonly sessionId: string,
        private readonly judge: string,
        private readonly root: HTMLElement
    ) {}

    get view(): TrialView | null {
        return this.current;
    }

    get done(): boolean {
        return this.finished;
    }

    /** Fetch and render the first unjudged trial (or the completion screen). */
    async start(): Promise<void> {
        await this.advance();
    }

    /** Submit the judge's pick for the current trial, then advance. */
    async choose(choice: Choice): Promise<void> {
        if (!this.current || this.submitting) {
            return; // at most one in-flight submission
        }
        this.submitting = true;
        try {
            const result = await submitWithRetry(
                this.api,
                this.sessionId,
                this.current.trialId,
                choice,
                this.judge,
                { attempts: 3, delayMs: 300, onRetry: (n) => showRetryBanner(this.root, n) }
            );
            clearRetryBanner(this.root);
            this.judged += 1;
            await this.advance();
            if (result === 'conflict') {
                showNotice(this.root, 'Already recorded — moving on.');
            }
        } finally {
            this.submitting = false;
        }
    }

    private async advance(): Promise<void> {
        const next = await this.api.nextTrial(this.sessionId, this.judge);
        if (next.done || !next.trial) {
            const total = this.current?.progressTotal ?? this.judged;
            this.current = null;
            this.finished = true;
            renderDone(this.root, this.judged, total);
            return;
        }
        this.current = toTrialView(this.api.baseUrl, next.trial);
        this.judged = this.current.progressDone;
        renderTrial(this.root, this.current, { onChoice: (choice) => void this.choose(choice) });
    }
}
