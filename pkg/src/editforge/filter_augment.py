"""Quality filtering and bilingual instruction augmentation.

Constructed pairs are scored by a VLM judge on instruction following,
source/edited consistency, and image quality. A two-band threshold routes
each pair to accepted / needs_review / rejected; the review band feeds a
manual inspection loop via export/import manifests. Accepted pairs get
their instructions translated and rephrased for training.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

from .adapters import AdapterClient
from .records import EditPair, InstructionRecord, PairStore, QualityScores
from .util import read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

DIMENSIONS = ("instruction_following", "consistency", "image_quality")

JUDGE_PROMPT_VERSION = "judge-prompt-v1"
JUDGE_PROMPT = (
    "Score the edited image against the source image and the instruction "
    "on three dimensions from 0 to 10: instruction_following, consistency, "
    "image_quality. Reply with the three numbers and a short rationale."
)


@dataclass
class FilterThresholds:
    accept_min: dict = field(
        default_factory=lambda: {d: 7.0 for d in DIMENSIONS}
    )
    review_min: dict = field(
        default_factory=lambda: {d: 5.0 for d in DIMENSIONS}
    )

    def __post_init__(self):
        for dim in DIMENSIONS:
            if self.review_min[dim] > self.accept_min[dim]:
                raise ValueError(f"review_min must be <= accept_min for {dim}")

    @classmethod
    def from_record(cls, rec: dict) -> "FilterThresholds":
        return cls(accept_min=dict(rec["accept_min"]), review_min=dict(rec["review_min"]))


def _parse_judge_body(body: dict, judge_id: str) -> QualityScores:
    values = {}
    for dim in DIMENSIONS:
        v = body.get(dim)
        if not isinstance(v, (int, float)):
            raise ValueError(f"missing or non-numeric {dim}")
        values[dim] = float(v)
    # out-of-range scores are protocol violations, never clamped
    return QualityScores(judge_id=judge_id, rationale=body.get("rationale", ""), **values)


def score_pair(pair: EditPair, client: AdapterClient, judge_adapter: str, store: PairStore) -> EditPair:
    """Judge one pair; unparseable responses get one reprompt, then review."""
    judge_id = f"{judge_adapter}:{JUDGE_PROMPT_VERSION}"
    payload = {
        "source_digest": pair.source_id,
        "edited_digest": pair.edited_id,
        "instruction": pair.instruction.primary_en,
        "prompt": JUDGE_PROMPT,
        "prompt_version": JUDGE_PROMPT_VERSION,
    }
    scores = None
    for attempt in range(2):
        resp = client.call(judge_adapter, "vlm_judge", dict(payload, reprompt=attempt))
        if resp.ok:
            store.audit("judge_response", pair_id=pair.pair_id, body=resp.body, attempt=attempt)
            try:
                scores = _parse_judge_body(resp.body or {}, judge_id)
                break
            except ValueError as exc:
                logger.warning("judge response rejected for %s: %s", pair.pair_id, exc)
        else:
            store.audit("judge_error", pair_id=pair.pair_id, status=resp.status, attempt=attempt)
    pair.transition("scored")
    if scores is None:
        pair.transition("needs_review")
        pair.flags.append("judge_unparseable")
    else:
        pair.scores = scores
    store.put_pair(pair)
    return pair


def apply_thresholds(scores: QualityScores, thr: FilterThresholds) -> str:
    """Total decision function: accepted / needs_review / rejected."""
    values = {dim: getattr(scores, dim) for dim in DIMENSIONS}
    if all(values[d] >= thr.accept_min[d] for d in DIMENSIONS):
        return "accepted"
    if any(values[d] < thr.review_min[d] for d in DIMENSIONS):
        return "rejected"
    return "needs_review"


def decide_pair(pair: EditPair, thr: FilterThresholds, store: PairStore) -> str:
    if pair.scores is None:
        raise ValueError("pair has no scores to decide on")
    decision = apply_thresholds(pair.scores, thr)
    pair.transition(decision)
    store.put_pair(pair)
    return decision


def export_review_queue(store: PairStore, out_path: Path | str) -> int:
    """Write the manual-inspection manifest for all needs_review pairs."""
    rows = [
        {
            "pair_id": p.pair_id,
            "source_id": p.source_id,
            "edited_id": p.edited_id,
            "instruction": p.instruction.primary_en,
            "scores": p.scores.to_record() if p.scores else None,
            "flags": p.flags,
        }
        for p in store.pairs(status="needs_review")
    ]
    return write_jsonl(out_path, rows)


def import_review_results(store: PairStore, verdicts_path: Path | str) -> dict:
    """Apply human verdicts; unknown ids and bad verdicts are reported."""
    applied = 0
    errors: list[dict] = []
    for row_no, row in enumerate(read_jsonl(verdicts_path), start=1):
        pair_id = row.get("pair_id")
        verdict = row.get("verdict")
        if verdict not in {"accept", "reject"}:
            errors.append({"row": row_no, "reason": f"invalid verdict: {verdict}"})
            continue
        pair = store.get_pair(pair_id) if pair_id else None
        if pair is None:
            errors.append({"row": row_no, "reason": f"unknown pair_id: {pair_id}"})
            continue
        target = "accepted" if verdict == "accept" else "rejected"
        if pair.status != target:
            pair.transition(target)
            store.put_pair(pair)
        applied += 1
    return {"applied": applied, "errors": errors}


def augment_instructions(
    rec: InstructionRecord,
    client: AdapterClient,
    llm_id: str,
    styles: set[str],
    include_zh: bool = True,
) -> InstructionRecord:
    """Translate to Chinese and add styled rephrasings in both languages.

    Adapter failures skip the affected variant and never block the pair.
    Variants are deduplicated case-insensitively.
    """
    if include_zh and rec.primary_zh is None:
        resp = client.call(llm_id, "llm_text", {"op": "translate_zh", "text": rec.primary_en})
        if resp.ok and (resp.body or {}).get("text"):
            rec.primary_zh = resp.body["text"]
            rec.provenance.append({"step": "translate_zh", "request": resp.to_record()["status"]})
        else:
            rec.provenance.append({"step": "translate_zh_failed", "status": resp.status})

    languages = ["en"] + (["zh"] if include_zh and rec.primary_zh else [])
    seen = {v["text"].lower() for v in rec.variants}
    seen.add(rec.primary_en.lower())
    if rec.primary_zh:
        seen.add(rec.primary_zh.lower())
    for style in sorted(styles):
        for language in languages:
            base = rec.primary_en if language == "en" else rec.primary_zh
            resp = client.call(
                llm_id,
                "llm_text",
                {"op": f"style_{style}", "text": base, "language": language},
            )
            if not resp.ok or not (resp.body or {}).get("text"):
                rec.provenance.append(
                    {"step": f"style_{style}_{language}_failed", "status": resp.status}
                )
                continue
            text = resp.body["text"]
            if text.lower() in seen:
                continue
            seen.add(text.lower())
            rec.variants.append({"text": text, "language": language, "style": style})
            rec.provenance.append({"step": f"style_{style}_{language}", "status": resp.status})
    return rec


def compile_instruction_bank(store: PairStore, out_path: Path | str) -> dict:
    """Flatten accepted pairs' instructions into the training bank file."""
    rows: list[dict] = []
    for pair in store.pairs(status="accepted"):
        rec = pair.instruction
        rows.append(
            {"pair_id": pair.pair_id, "text": rec.primary_en, "language": "en", "style": "declarative"}
        )
        if rec.primary_zh:
            rows.append(
                {"pair_id": pair.pair_id, "text": rec.primary_zh, "language": "zh", "style": "declarative"}
            )
        for v in rec.variants:
            rows.append(
                {"pair_id": pair.pair_id, "text": v["text"], "language": v["language"], "style": v["style"]}
            )
    write_jsonl(out_path, rows)
    summary: dict = {"rows": len(rows), "by_language": {}, "by_style": {}}
    for row in rows:
        summary["by_language"][row["language"]] = summary["by_language"].get(row["language"], 0) + 1
        summary["by_style"][row["style"]] = summary["by_style"].get(row["style"], 0) + 1
    return summary


def load_instruction_bank(path: Path | str) -> list[dict]:
    return list(read_jsonl(path))
