export type Choice = 'left' | 'right' | 'tie';

/** Raw trial payload as served by the preference service (already blinded). */
export interface TrialPayload {
    trial_id: string;
    original_digest: string;
    instruction_en: string;
    instruction_zh: string;
    left_digest: string;
    right_digest: string;
    progress: { done: number; total: number };
    criteria: string;
}

export interface NextTrialResponse {
    done: boolean;
    trial?: TrialPayload;
}

/**
 * What the judge sees. Built only from the blinded trial payload, so model
 * identifiers cannot appear here by construction.
 */
export interface TrialView {
    trialId: string;
    originalUrl: string;
    instructionEn: string;
    instructionZh: string;
    leftUrl: string;
    rightUrl: string;
    progressDone: number;
    progressTotal: number;
    criteria: string;
}

export type SubmitResult = 'recorded' | 'conflict';
