"""Run-config driven orchestration of the four pipeline stages.

Stage order is fixed: collection -> construction -> filtering ->
post-processing. Each stage is resumable: per-item completion is tracked
in a progress ledger inside the workspace, so a rerun of a completed run
reports zero new items everywhere.
"""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path

from .adapters import AdapterClient
from .construct import (
    InContextLayout,
    TemplateSpec,
    build_expert_pair,
    lora_flow,
    split_incontext,
    template_apply,
)
from .corpus import CollectionPolicy, CorpusStore, filter_collection, ingest
from .filter_augment import (
    FilterThresholds,
    augment_instructions,
    compile_instruction_bank,
    decide_pair,
    score_pair,
)
from .mocks import build_mock
from .records import PairStore
from .util import append_jsonl, read_jsonl

logger = logging.getLogger(__name__)

STAGES = ("collection", "construction", "filtering", "postprocess")

DEFAULT_BANK_TEMPLATES = [
    "remove the {object}",
    "add another {object}",
    "replace the {object} with something similar",
]


class PipelineError(Exception):
    def __init__(self, stage: str, cause: str):
        super().__init__(f"stage {stage}: {cause}")
        self.stage = stage
        self.cause = cause


class Progress:
    """Append-only ledger of completed (stage, item) keys."""

    def __init__(self, path: Path):
        self.path = path
        self._done: set[str] = set()
        if path.exists():
            for rec in read_jsonl(path):
                self._done.add(rec["key"])

    def done(self, key: str) -> bool:
        return key in self._done

    def mark(self, key: str) -> None:
        if key not in self._done:
            self._done.add(key)
            append_jsonl(self.path, {"key": key})


def load_config(path: Path | str) -> dict:
    config = json.loads(Path(path).read_text())
    validate_config(config)
    return config


def validate_config(config: dict) -> None:
    if "workspace" not in config:
        raise ValueError("config needs a workspace directory")
    if "seed" not in config:
        raise ValueError("config needs an explicit seed (no implicit entropy)")
    adapters = config.get("adapters", {})
    for role in ("vlm", "expert", "judge", "llm", "detect"):
        if role not in adapters:
            raise ValueError(f"config missing adapter binding for role: {role}")
    stages = config.get("stages", {})
    for stage in STAGES:
        if stage not in stages:
            raise ValueError(f"config missing stage: {stage}")


def build_client(config: dict, workspace: Path, blobs) -> AdapterClient:
    client = AdapterClient(
        cache_dir=workspace / "cache", blobs=blobs, backoff_base=config.get("backoff_base", 0.05)
    )
    for adapter_id, binding in config.get("adapters", {}).items():
        if binding == "env" or str(binding).startswith("env:"):
            client.register_from_env(adapter_id)
        else:
            client.register_mock(adapter_id, build_mock(str(binding), blobs))
    return client


def run_pipeline(config: dict, dry_run: bool = False) -> dict:
    validate_config(config)
    workspace = Path(config["workspace"])
    workspace.mkdir(parents=True, exist_ok=True)
    corpus = CorpusStore(workspace / "corpus")
    pairs = PairStore(workspace / "pairs")
    try:
        client = build_client(config, workspace, corpus)
    except Exception as exc:
        raise PipelineError("validation", str(exc))
    if dry_run:
        return {"dry_run": True, "stages": list(STAGES)}

    progress = Progress(workspace / "progress.jsonl")
    report: dict = {"stages": {}}
    stages_cfg = config["stages"]

    accepted = _stage_collection(stages_cfg["collection"], corpus, client, progress, report)
    _stage_construction(
        stages_cfg["construction"], config, accepted, corpus, pairs, client, progress, report
    )
    _stage_filtering(stages_cfg["filtering"], pairs, client, progress, report)
    _stage_postprocess(stages_cfg["postprocess"], workspace, pairs, client, progress, report)

    (workspace / "run_report.json").write_text(json.dumps(report, indent=2))
    return report


def _stage_collection(cfg, corpus, client, progress, report) -> list[str]:
    start = time.monotonic()
    manifest = cfg.get("manifest")
    if not manifest or not Path(manifest).exists():
        raise PipelineError("collection", f"manifest not readable: {manifest}")
    ingest_report = ingest(manifest, corpus)
    policy = CollectionPolicy(**cfg.get("policy", {}))
    partition = filter_collection(
        corpus, policy, client if policy.require_aesthetic else None, scorer_id="aesthetic"
    )
    accepted = partition["accepted"]
    report["stages"]["collection"] = {
        "new": ingest_report["registered"],
        "duplicate": ingest_report["duplicate"],
        "undecodable": ingest_report["undecodable"],
        "accepted": len(accepted),
        "rejected": len(partition["rejected"]),
        "seconds": round(time.monotonic() - start, 3),
    }
    return accepted


def _stage_construction(cfg, config, accepted, corpus, pairs, client, progress, report):
    start = time.monotonic()
    if not accepted:
        raise PipelineError("construction", "no accepted source images")
    methods = cfg.get("methods", ["expert", "template"])
    bank_templates = cfg.get("bank_templates", DEFAULT_BANK_TEMPLATES)
    new = 0
    counts = {m: 0 for m in methods}

    if "expert" in methods:
        for image_id in accepted:
            key = f"construct:expert:{image_id}"
            if progress.done(key):
                continue
            detect = client.call("detect", "detect", {"image_digest": image_id})
            detections = [
                (c, n) for c, n in (detect.body or {}).get("detections", [])
            ] if detect.ok else []
            pair = build_expert_pair(
                image_id, detections, bank_templates, client, corpus, pairs,
                vlm_id="vlm", expert_id="expert",
            )
            progress.mark(key)
            if pair is not None:
                new += 1
                counts["expert"] += 1

    if "template" in methods:
        specs = [TemplateSpec(
            kind=s["kind"], payload=s["payload"], region=tuple(s["region"]),
            direction=s.get("direction", "forward_is_add"),
        ) for s in cfg.get("template_specs", [])]
        if not specs:
            raise PipelineError("construction", "template method enabled without template_specs")
        for image_id in accepted:
            for i, spec in enumerate(specs):
                key = f"construct:template:{image_id}:{i}"
                if progress.done(key):
                    continue
                try:
                    template_apply(image_id, spec, corpus, pairs)
                    new += 1
                    counts["template"] += 1
                except Exception as exc:
                    pairs.audit("template_failed", source_id=image_id, reason=str(exc))
                progress.mark(key)

    if "in_context" in methods:
        ic = cfg.get("incontext", {})
        layout = InContextLayout(**ic.get("layout", {"rows": 1, "cols": 2}))
        for sheet_path in ic.get("sheets", []):
            digest = corpus.put(Path(sheet_path).read_bytes())
            key = f"construct:incontext:{digest}"
            if progress.done(key):
                continue
            made = split_incontext(digest, layout, client, corpus, pairs, vlm_id="vlm")
            new += len(made)
            counts["in_context"] += len(made)
            progress.mark(key)

    if "lora_flow" in methods:
        lf = cfg.get("loraflow", {})
        key = "construct:loraflow"
        if not progress.done(key):
            seeds = pairs.pairs()
            raws = [
                (image_id, lf.get("instruction", "invert the colors of the image"))
                for image_id in accepted[: lf.get("max_raws", len(accepted))]
            ]
            made = lora_flow(
                seeds, raws, client, pairs,
                trainer_id=lf.get("trainer", "trainer"), vlm_id="vlm",
                min_seeds=lf.get("min_seeds", 24), max_seeds=lf.get("max_seeds", 512),
            )
            new += len(made)
            counts["lora_flow"] = len(made)
            progress.mark(key)
        else:
            counts.setdefault("lora_flow", 0)

    report["stages"]["construction"] = {
        "new": new, "by_method": counts, "seconds": round(time.monotonic() - start, 3),
    }


def _stage_filtering(cfg, pairs, client, progress, report):
    start = time.monotonic()
    thresholds = (
        FilterThresholds.from_record(cfg["thresholds"]) if "thresholds" in cfg else FilterThresholds()
    )
    new = 0
    decisions = {"accepted": 0, "rejected": 0, "needs_review": 0}
    for pair in pairs.pairs():
        if pair.status == "raw":
            pair = score_pair(pair, client, cfg.get("judge", "judge"), pairs)
            new += 1
        if pair.status == "scored":
            decide_pair(pair, thresholds, pairs)
    for pair in pairs.pairs():
        if pair.status in decisions:
            decisions[pair.status] += 1
    report["stages"]["filtering"] = {
        "new": new, **decisions, "seconds": round(time.monotonic() - start, 3),
    }


def _stage_postprocess(cfg, workspace, pairs, client, progress, report):
    start = time.monotonic()
    styles = set(cfg.get("styles", ["synonym", "interrogative", "passive"]))
    include_zh = cfg.get("zh", True)
    new = 0
    for pair in pairs.pairs(status="accepted"):
        key = f"augment:{pair.pair_id}"
        if progress.done(key):
            continue
        augment_instructions(pair.instruction, client, cfg.get("llm", "llm"), styles, include_zh)
        pairs.put_pair(pair)
        progress.mark(key)
        new += 1
    bank_path = workspace / cfg.get("bank", "bank.jsonl")
    summary = compile_instruction_bank(pairs, bank_path)
    report["stages"]["postprocess"] = {
        "new": new, "bank": summary, "seconds": round(time.monotonic() - start, 3),
    }
