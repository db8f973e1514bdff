import { ChildProcess, spawn } from 'node:child_process';
import { mkdtempSync, readFileSync, readdirSync } from 'node:fs';
import { tmpdir } from 'node:os';
import { join } from 'node:path';

import { afterAll, beforeAll, describe, expect, it } from 'vitest';

import { PrefApi } from '../src/api';
import { JudgeApp } from '../src/app';
import type { Choice } from '../src/types';

const PORT = 8931;
const BASE = `http://127.0.0.1:${PORT}`;

let server: ChildProcess;
let storeDir: string;

async function waitForService(timeoutMs = 30_000): Promise<void> {
    const deadline = Date.now() + timeoutMs;
    while (Date.now() < deadline) {
        try {
            await fetch(`${BASE}/docs`);
            return;
        } catch {
            await new Promise((resolve) => setTimeout(resolve, 200));
        }
    }
    throw new Error('preference service did not come up');
}

async function waitFor(condition: () => boolean, timeoutMs = 10_000): Promise<void> {
    const deadline = Date.now() + timeoutMs;
    while (!condition()) {
        if (Date.now() > deadline) {
            throw new Error('timed out waiting for UI state');
        }
        await new Promise((resolve) => setTimeout(resolve, 20));
    }
}

function expectedOutcome(assignment: string, choice: Choice): string {
    if (choice === 'tie') {
        return 'tie';
    }
    const pickedLeft = choice === 'left';
    const aIsLeft = assignment === 'a_left';
    return pickedLeft === aIsLeft ? 'a_wins' : 'b_wins';
}

beforeAll(async () => {
    storeDir = mkdtempSync(join(tmpdir(), 'judge-ui-e2e-'));
    server = spawn('editforge', ['pref', 'serve', '--port', String(PORT), '--store', storeDir], {
        stdio: 'ignore'
    });
    await waitForService();
});

afterAll(() => {
    server?.kill();
});

describe('scripted judging session against the live service', () => {
    it('records 3 judgments with correct outcome mapping and a blinded DOM', async () => {
        const items = [0, 1, 2].map((i) => ({
            item_id: `item-${i}`,
            image_digest: 'f'.repeat(64),
            instruction_en: `edit ${i}`,
            instruction_zh: `[zh] edit ${i}`
        }));
        const outputs = (prefix: string) =>
            Object.fromEntries(items.map((item, i) => [item.item_id, `${prefix}${i}`.padEnd(64, '0')]));

        const created = await fetch(`${BASE}/sessions`, {
            method: 'POST',
            headers: { 'Content-Type': 'application/json' },
            body: JSON.stringify({
                items,
                outputs_a: outputs('a'),
                outputs_b: outputs('b'),
                model_a: 'model-A',
                model_b: 'model-B',
                seed: 42
            })
        }).then((r) => r.json());
        expect(created.trials).toBe(3);
        const sessionId: string = created.session_id;

        const root = document.createElement('div');
        document.body.replaceChildren(root);
        const app = new JudgeApp(new PrefApi(BASE), sessionId, 'e2e-judge', root);
        await app.start();

        const picks: Choice[] = ['left', 'tie', 'right'];
        for (const [index, pick] of picks.entries()) {
            await waitFor(() => root.querySelector('.progress') !== null);
            expect(root.querySelector('.progress')?.textContent).toBe(`Trial ${index + 1} of 3`);
            // blinding: nothing model-shaped ever reaches the DOM
            const html = root.innerHTML;
            expect(html).not.toContain('model-A');
            expect(html).not.toContain('model-B');
            expect(html.toLowerCase()).not.toContain('assignment');
            root.querySelector<HTMLButtonElement>(`.choice-${pick}`)?.click();
            await waitFor(
                () =>
                    app.done ||
                    root.querySelector('.progress')?.textContent === `Trial ${index + 2} of 3`
            );
        }

        await waitFor(() => app.done);
        expect(app.judged).toBe(3);
        expect(root.querySelector('.done')?.textContent).toBe(
            'All done — 3/3 judgments recorded.'
        );

        // the service's log must map each screen-side pick back to the right model
        const sessionFile = readdirSync(join(storeDir, 'sessions')).find((f) =>
            f.startsWith(sessionId)
        );
        const session = JSON.parse(readFileSync(join(storeDir, 'sessions', sessionFile!), 'utf8'));
        const log = readFileSync(join(storeDir, 'judgments.jsonl'), 'utf8')
            .trim()
            .split('\n')
            .map((line) => JSON.parse(line))
            .filter((row) => row.session_id === sessionId);
        expect(log).toHaveLength(3);
        for (const [index, row] of log.entries()) {
            const trial = session.trials.find((t: { trial_id: string }) => t.trial_id === row.trial_id);
            expect(row.choice).toBe(picks[index]);
            expect(row.outcome).toBe(expectedOutcome(trial.assignment, picks[index]));
        }

        const tally = await fetch(`${BASE}/tallies?pair=model-A,model-B`).then((r) => r.json());
        expect(tally.judgments).toBe(3);
        expect(tally.wins + tally.losses + tally.ties).toBe(3);
    });

    it('auto-advances past a duplicate-submission conflict', async () => {
        const items = [
            {
                item_id: 'only',
                image_digest: 'f'.repeat(64),
                instruction_en: 'edit it',
                instruction_zh: '[zh] edit it'
            }
        ];
        const created = await fetch(`${BASE}/sessions`, {
            method: 'POST',
            headers: { 'Content-Type': 'application/json' },
            body: JSON.stringify({
                items,
                outputs_a: { only: 'a'.repeat(64) },
                outputs_b: { only: 'b'.repeat(64) },
                model_a: 'model-A',
                model_b: 'model-B',
                seed: 1
            })
        }).then((r) => r.json());
        const sessionId: string = created.session_id;

        // judge the trial out-of-band first so the UI's submit lands as 409
        const trial = await fetch(`${BASE}/sessions/${sessionId}/next?judge=dup-judge`).then((r) =>
            r.json()
        );
        await fetch(`${BASE}/sessions/${sessionId}/judgments`, {
            method: 'POST',
            headers: { 'Content-Type': 'application/json' },
            body: JSON.stringify({ trial_id: trial.trial.trial_id, choice: 'left', judge: 'dup-judge' })
        });

        const root = document.createElement('div');
        document.body.replaceChildren(root);
        const app = new JudgeApp(new PrefApi(BASE), sessionId, 'dup-judge', root);
        await app.start();
        // service already saw this judge's judgment, so the session is complete
        expect(app.done).toBe(true);

        // a second judge whose submit conflicts mid-flight advances with a notice
        const app2 = new JudgeApp(new PrefApi(BASE), sessionId, 'second-judge', root);
        await app2.start();
        const current = app2.view!;
        await fetch(`${BASE}/sessions/${sessionId}/judgments`, {
            method: 'POST',
            headers: { 'Content-Type': 'application/json' },
            body: JSON.stringify({ trial_id: current.trialId, choice: 'right', judge: 'second-judge' })
        });
        await app2.choose('left');
        expect(app2.done).toBe(true);
        expect(root.querySelector('.notice')?.textContent).toContain('Already recorded');
    });
});
