const TOKEN_KEY = 'judge_token';

/**
 * The judge identity is an opaque token kept in session storage so a page
 * refresh resumes at the first unjudged trial instead of starting over.
 */
export function judgeToken(storage: Storage): string {
    const existing = storage.getItem(TOKEN_KEY);
    if (existing) {
        return existing;
    }
    const token = `judge-${Math.random().toString(36).slice(2, 12)}`;
    storage.setItem(TOKEN_KEY, token);
    return token;
}

export interface AppConfig {
    serviceUrl: string;
    sessionId: string;
}

/** Configuration comes entirely from the URL: ?service=...&session=... */
export function configFromLocation(location: Location): AppConfig {
    const params = new URLSearchParams(location.search);
    return {
        serviceUrl: params.get('service') ?? location.origin,
        sessionId: params.get('session') ?? ''
    };
}
