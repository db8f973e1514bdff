"""Benchmark runner: judge-scored evaluation with exclusion bookkeeping.

Loads a bench manifest, runs a model adapter per item, collects the three
judge scores, combines semantic-consistency and perceptual-quality into a
per-item overall score, and aggregates per model into a rendered table.
Items refused by a hosted model's security filter are excluded and
counted; judge failures are counted separately.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .adapters import STATUS_SECURITY_FILTERED, AdapterClient
from .filter_augment import JUDGE_PROMPT, JUDGE_PROMPT_VERSION, _parse_judge_body
from .records import TASKS, QualityScores
from .util import read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

EXCLUDED = "excluded"
JUDGE_FAILED = "judge_failed"
SCORED = "scored"


class BenchError(Exception):
    pass


@dataclass
class BenchItem:
    item_id: str
    image_digest: str
    instruction_en: str
    instruction_zh: str
    category: str

    def __post_init__(self):
        if not self.instruction_en or not self.instruction_zh:
            raise ValueError("both instructions must be non-empty")
        if self.category not in TASKS:
            raise ValueError(f"unknown category: {self.category}")


@dataclass
class ItemResult:
    item_id: str
    model_id: str
    state: str  # scored | excluded | judge_failed
    output_digest: Optional[str] = None
    scores: Optional[QualityScores] = None
    vie_overall: Optional[float] = None

    def __post_init__(self):
        if self.state == SCORED and (self.scores is None or self.vie_overall is None):
            raise ValueError("scored items must carry scores and vie_overall")
        if self.state != SCORED and (self.scores is not None or self.vie_overall is not None):
            raise ValueError("non-scored items must not carry scores")

    def to_record(self) -> dict:
        return {
            "item_id": self.item_id,
            "model_id": self.model_id,
            "state": self.state,
            "output_digest": self.output_digest,
            "scores": self.scores.to_record() if self.scores else None,
            "vie_overall": self.vie_overall,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ItemResult":
        scores = rec.get("scores")
        return cls(
            item_id=rec["item_id"],
            model_id=rec["model_id"],
            state=rec["state"],
            output_digest=rec.get("output_digest"),
            scores=QualityScores.from_record(scores) if scores else None,
            vie_overall=rec.get("vie_overall"),
        )


def load_bench(manifest_path: Path | str) -> list[BenchItem]:
    items: list[BenchItem] = []
    seen: set[str] = set()
    for row_no, rec in enumerate(read_jsonl(manifest_path), start=1):
        try:
            item = BenchItem(
                item_id=rec["item_id"],
                image_digest=rec["image_digest"],
                instruction_en=rec["instruction_en"],
                instruction_zh=rec["instruction_zh"],
                category=rec["category"],
            )
        except (KeyError, ValueError) as exc:
            raise BenchError(f"bench manifest row {row_no}: {exc}")
        if item.item_id in seen:
            raise BenchError(f"bench manifest row {row_no}: duplicate item_id {item.item_id}")
        seen.add(item.item_id)
        items.append(item)
    if not items:
        logger.warning("bench manifest %s is empty", manifest_path)
    return items


def vie_item(sc: float, pq: float) -> float:
    """Per-item overall score: geometric mean of the two dimensions."""
    if not 0.0 <= sc <= 10.0 or not 0.0 <= pq <= 10.0:
        raise ValueError("dimension scores must lie in [0, 10]")
    return math.sqrt(sc * pq)


def semantic_consistency(scores: QualityScores) -> float:
    """Conservative SC composition: min of adherence and consistency."""
    return min(scores.instruction_following, scores.consistency)


def run_model_on_bench(
    bench: list[BenchItem],
    client: AdapterClient,
    model_id: str,
    judge_id: str,
    lang: str = "en",
    results_path: Optional[Path | str] = None,
) -> list[ItemResult]:
    """Evaluate one model over the bench; raw judge responses are cached
    by the adapter layer, results optionally persisted as JSONL."""
    results: list[ItemResult] = []
    for item in bench:
        instruction = item.instruction_en if lang == "en" else item.instruction_zh
        model_resp = client.call(
            model_id, "expert_edit", {"image_digest": item.image_digest, "instruction": instruction}
        )
        if model_resp.status == STATUS_SECURITY_FILTERED:
            results.append(ItemResult(item_id=item.item_id, model_id=model_id, state=EXCLUDED))
            continue
        output = (model_resp.body or {}).get("image_digest") if model_resp.ok else None
        if not output:
            results.append(ItemResult(item_id=item.item_id, model_id=model_id, state=JUDGE_FAILED))
            continue
        judge_resp = client.call(
            judge_id,
            "vlm_judge",
            {
                "source_digest": item.image_digest,
                "edited_digest": output,
                "instruction": instruction,
                "prompt": JUDGE_PROMPT,
                "prompt_version": JUDGE_PROMPT_VERSION,
            },
        )
        if not judge_resp.ok:
            results.append(
                ItemResult(
                    item_id=item.item_id, model_id=model_id, state=JUDGE_FAILED, output_digest=output
                )
            )
            continue
        try:
            scores = _parse_judge_body(judge_resp.body or {}, f"{judge_id}:{JUDGE_PROMPT_VERSION}")
        except ValueError:
            results.append(
                ItemResult(
                    item_id=item.item_id, model_id=model_id, state=JUDGE_FAILED, output_digest=output
                )
            )
            continue
        overall = vie_item(semantic_consistency(scores), scores.image_quality)
        results.append(
            ItemResult(
                item_id=item.item_id,
                model_id=model_id,
                state=SCORED,
                output_digest=output,
                scores=scores,
                vie_overall=overall,
            )
        )
    results.sort(key=lambda r: r.item_id)
    if results_path is not None:
        write_jsonl(results_path, (r.to_record() for r in results))
    return results


@dataclass
class ModelAggregate:
    model_id: str
    g_sc: Optional[float]
    g_pq: Optional[float]
    g_o: Optional[float]
    scored: int
    excluded: int
    judge_failed: int


def aggregate(results: list[ItemResult]) -> list[ModelAggregate]:
    """Per-model means over scored items; overall is mean of per-item
    geometric means, not the geometric mean of the dimension means."""
    if not results:
        raise BenchError("no results to aggregate")
    by_model: dict[str, list[ItemResult]] = {}
    for r in results:
        by_model.setdefault(r.model_id, []).append(r)
    out = []
    for model_id in sorted(by_model):
        rows = by_model[model_id]
        scored = [r for r in rows if r.state == SCORED]
        excluded = sum(1 for r in rows if r.state == EXCLUDED)
        failed = sum(1 for r in rows if r.state == JUDGE_FAILED)
        if scored:
            g_sc = sum(semantic_consistency(r.scores) for r in scored) / len(scored)
            g_pq = sum(r.scores.image_quality for r in scored) / len(scored)
            g_o = sum(r.vie_overall for r in scored) / len(scored)
        else:
            g_sc = g_pq = g_o = None
        out.append(
            ModelAggregate(
                model_id=model_id, g_sc=g_sc, g_pq=g_pq, g_o=g_o,
                scored=len(scored), excluded=excluded, judge_failed=failed,
            )
        )
    return out


def render_table(aggregates: list[ModelAggregate]) -> str:
    """Plain-text table: Model, G_SC, G_PQ, G_O at 3 decimals, column
    maxima marked with an asterisk."""
    def colmax(getter):
        vals = [getter(a) for a in aggregates if getter(a) is not None]
        return max(vals) if vals else None

    maxima = {
        "g_sc": colmax(lambda a: a.g_sc),
        "g_pq": colmax(lambda a: a.g_pq),
        "g_o": colmax(lambda a: a.g_o),
    }

    def cell(value, col):
        if value is None:
            return "n/a"
        text = f"{value:.3f}"
        if maxima[col] is not None and abs(value - maxima[col]) < 5e-13:
            text = "*" + text
        return text

    name_w = max(len("Model"), max(len(a.model_id) for a in aggregates))
    lines = [f"{'Model':<{name_w}}  {'G_SC':>7}  {'G_PQ':>7}  {'G_O':>7}"]
    for a in aggregates:
        lines.append(
            f"{a.model_id:<{name_w}}  {cell(a.g_sc, 'g_sc'):>7}  "
            f"{cell(a.g_pq, 'g_pq'):>7}  {cell(a.g_o, 'g_o'):>7}"
        )
    return "\n".join(lines) + "\n"


def summary_records(aggregates: list[ModelAggregate]) -> list[dict]:
    return [
        {
            "model_id": a.model_id,
            "g_sc": a.g_sc,
            "g_pq": a.g_pq,
            "g_o": a.g_o,
            "scored": a.scored,
            "excluded": a.excluded,
            "judge_failed": a.judge_failed,
        }
        for a in aggregates
    ]
