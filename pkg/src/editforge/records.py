"""Shared domain records for the editing-pair pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .store import IndexedStore
from .util import digest_of

TASKS = frozenset(
    {
        "object_add",
        "object_remove",
        "object_replace",
        "background_replace",
        "pose_edit",
        "hairstyle_edit",
        "accessory_add",
        "text_edit",
        "watermark_remove",
        "lighting_adjust",
        "other",
    }
)

METHODS = frozenset({"expert", "template", "in_context", "lora_flow"})

LANGUAGES = frozenset({"en", "zh"})
STYLES = frozenset({"declarative", "synonym", "interrogative", "passive"})

PAIR_STATUSES = frozenset({"raw", "scored", "accepted", "rejected", "needs_review"})
_STATUS_TRANSITIONS = {
    "raw": {"scored"},
    "scored": {"accepted", "rejected", "needs_review"},
    "needs_review": {"accepted", "rejected"},
    "accepted": set(),
    "rejected": set(),
}


class StatusError(Exception):
    """Illegal pair status transition."""


@dataclass
class InstructionRecord:
    primary_en: str
    primary_zh: Optional[str] = None
    variants: list[dict] = field(default_factory=list)
    provenance: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not self.primary_en:
            raise ValueError("primary_en must be non-empty")
        for v in self.variants:
            if not v.get("text"):
                raise ValueError("instruction variant must be non-empty")
            if v.get("language") not in LANGUAGES:
                raise ValueError(f"unknown variant language: {v.get('language')}")
            if v.get("style") not in STYLES:
                raise ValueError(f"unknown variant style: {v.get('style')}")

    def to_record(self) -> dict:
        return {
            "primary_en": self.primary_en,
            "primary_zh": self.primary_zh,
            "variants": self.variants,
            "provenance": self.provenance,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "InstructionRecord":
        return cls(
            primary_en=rec["primary_en"],
            primary_zh=rec.get("primary_zh"),
            variants=list(rec.get("variants", [])),
            provenance=list(rec.get("provenance", [])),
        )


@dataclass
class QualityScores:
    instruction_following: float
    consistency: float
    image_quality: float
    judge_id: str
    rationale: str = ""

    def __post_init__(self):
        for name in ("instruction_following", "consistency", "image_quality"):
            v = getattr(self, name)
            if not 0.0 <= v <= 10.0:
                raise ValueError(f"{name} out of [0, 10]: {v}")
        if not self.judge_id:
            raise ValueError("judge_id must be non-empty")

    def to_record(self) -> dict:
        return {
            "instruction_following": self.instruction_following,
            "consistency": self.consistency,
            "image_quality": self.image_quality,
            "judge_id": self.judge_id,
            "rationale": self.rationale,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "QualityScores":
        return cls(
            instruction_following=rec["instruction_following"],
            consistency=rec["consistency"],
            image_quality=rec["image_quality"],
            judge_id=rec["judge_id"],
            rationale=rec.get("rationale", ""),
        )


@dataclass
class EditPair:
    pair_id: str
    source_id: str
    edited_id: str
    instruction: InstructionRecord
    task: str
    method: str
    region_mask: Optional[str] = None  # digest of a 1-bit PNG mask blob
    scores: Optional[QualityScores] = None
    status: str = "raw"
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.source_id == self.edited_id:
            raise ValueError("an edit must change at least one byte")
        if self.task not in TASKS:
            raise ValueError(f"unknown task: {self.task}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method: {self.method}")
        if self.status not in PAIR_STATUSES:
            raise ValueError(f"unknown status: {self.status}")

    def transition(self, new_status: str) -> None:
        if new_status not in _STATUS_TRANSITIONS.get(self.status, set()):
            raise StatusError(f"illegal transition {self.status} -> {new_status}")
        self.status = new_status

    def to_record(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "source_id": self.source_id,
            "edited_id": self.edited_id,
            "instruction": self.instruction.to_record(),
            "task": self.task,
            "method": self.method,
            "region_mask": self.region_mask,
            "scores": self.scores.to_record() if self.scores else None,
            "status": self.status,
            "flags": self.flags,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "EditPair":
        scores = rec.get("scores")
        return cls(
            pair_id=rec["pair_id"],
            source_id=rec["source_id"],
            edited_id=rec["edited_id"],
            instruction=InstructionRecord.from_record(rec["instruction"]),
            task=rec["task"],
            method=rec["method"],
            region_mask=rec.get("region_mask"),
            scores=QualityScores.from_record(scores) if scores else None,
            status=rec.get("status", "raw"),
            flags=list(rec.get("flags", [])),
        )


def make_pair_id(source_id: str, edited_id: str, instruction: str, method: str) -> str:
    return digest_of(
        {"source": source_id, "edited": edited_id, "instruction": instruction, "method": method}
    )


class PairStore(IndexedStore):
    """Pair metadata index + image blobs + 1-bit PNG masks + audit log."""

    def __init__(self, root: Path | str):
        super().__init__(root, index_name="pairs.jsonl", key_field="pair_id")
        self.mask_dir = self.root / "masks"
        self.mask_dir.mkdir(parents=True, exist_ok=True)
        self.audit_path = self.root / "audits.jsonl"

    def put_pair(self, pair: EditPair) -> None:
        self.upsert(pair.to_record())

    def get_pair(self, pair_id: str) -> Optional[EditPair]:
        rec = self.get_record(pair_id)
        return EditPair.from_record(rec) if rec else None

    def pairs(self, status: Optional[str] = None) -> list[EditPair]:
        out = [EditPair.from_record(r) for r in self.records()]
        if status is not None:
            out = [p for p in out if p.status == status]
        return out

    def audit(self, event: str, **details) -> None:
        from .util import append_jsonl

        append_jsonl(self.audit_path, {"event": event, **details})

    def audits(self) -> list[dict]:
        from .util import read_jsonl

        if not self.audit_path.exists():
            return []
        return list(read_jsonl(self.audit_path))
