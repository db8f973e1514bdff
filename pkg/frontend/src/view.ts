import type { Choice, TrialView } from './types';

export interface ViewHandlers {
    onChoice: (choice: Choice) => void;
}

const CHOICE_LABELS: Record<Choice, string> = {
    left: 'Prefer left',
    tie: 'Tie',
    right: 'Prefer right'
};

function el<K extends keyof HTMLElementTagNameMap>(
    doc: Document,
    tag: K,
    className: string,
    text?: string
): HTMLElementTagNameMap[K] {
    const node = doc.createElement(tag);
    node.className = className;
    if (text !== undefined) {
        node.textContent = text;
    }
    return node;
}

/** Render one blinded trial: original, bilingual instruction, two candidates. */
export function renderTrial(root: HTMLElement, view: TrialView, handlers: ViewHandlers): void {
    const doc = root.ownerDocument;
    root.replaceChildren();

    const progress = el(
        doc,
        'div',
        'progress',
        `Trial ${view.progressDone + 1} of ${view.progressTotal}`
    );
    root.appendChild(progress);

    const original = el(doc, 'img', 'original');
    original.src = view.originalUrl;
    original.alt = 'original image';
    root.appendChild(original);

    root.appendChild(el(doc, 'p', 'instruction instruction-en', view.instructionEn));
    root.appendChild(el(doc, 'p', 'instruction instruction-zh', view.instructionZh));

    const candidates = el(doc, 'div', 'candidates');
    for (const [side, url] of [
        ['left', view.leftUrl],
        ['right', view.rightUrl]
    ] as const) {
        const img = el(doc, 'img', `candidate candidate-${side}`);
        img.src = url;
        img.alt = `${side} candidate`;
        candidates.appendChild(img);
    }
    root.appendChild(candidates);

    root.appendChild(el(doc, 'p', 'criteria', `Judge on: ${view.criteria}`));

    const controls = el(doc, 'div', 'controls');
    for (const choice of ['left', 'tie', 'right'] as const) {
        const button = el(doc, 'button', `choice choice-${choice}`, CHOICE_LABELS[choice]);
        button.addEventListener('click', () => handlers.onChoice(choice));
        controls.appendChild(button);
    }
    root.appendChild(controls);
}

export function renderDone(root: HTMLElement, judged: number, total: number): void {
    const doc = root.ownerDocument;
    root.replaceChildren();
    root.appendChild(el(doc, 'div', 'done', `All done — ${judged}/${total} judgments recorded.`));
}

export function showRetryBanner(root: HTMLElement, attempt: number): void {
    const doc = root.ownerDocument;
    let banner = root.querySelector<HTMLElement>('.retry-banner');
    if (!banner) {
        banner = el(doc, 'div', 'retry-banner');
        root.prepend(banner);
    }
    banner.textContent = `Connection problem — retrying (attempt ${attempt})…`;
}

export function clearRetryBanner(root: HTMLElement): void {
    root.querySelector('.retry-banner')?.remove();
}

/** Non-blocking notice, e.g. "already recorded" after a submit conflict. */
export function showNotice(root: HTMLElement, message: string): void {
    const doc = root.ownerDocument;
    let notice = root.querySelector<HTMLElement>('.notice');
    if (!notice) {
        notice = el(doc, 'div', 'notice');
        root.prepend(notice);
    }
    notice.textContent = message;
}
