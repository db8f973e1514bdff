import { PrefApi } from './api';
import { JudgeApp } from './app';
import { configFromLocation, judgeToken } from './session';

function mount(): void {
    const root = document.getElementById('app');
    if (!root) {
        throw new Error('missing #app mount point');
    }
    const config = configFromLocation(window.location);
    if (!config.sessionId) {
        root.textContent = 'Missing ?session=<id> in the URL.';
        return;
    }
    const api = new PrefApi(config.serviceUrl);
    const app = new JudgeApp(api, config.sessionId, judgeToken(window.sessionStorage), root);
    void app.start().catch((error) => {
        root.textContent = `Could not reach the study service: ${error}`;
    });
}

if (document.readyState === 'loading') {
    document.addEventListener('DOMContentLoaded', mount);
} else {
    mount();
}
