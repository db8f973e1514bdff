"""Pairwise preference study backend.

Sessions hold one blinded A/B trial per bench item with a seeded random
left/right assignment. Judges fetch the next unjudged trial, submit
left/right/tie, and the service maps the choice back to model identities.
Judgments are an append-only log; all session state is derived from it.
"""

from __future__ import annotations

import random
import threading
import time
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, HTTPException, Query
from fastapi.responses import Response
from pydantic import BaseModel

from .store import BlobStore
from .util import append_jsonl, canonical_json, read_jsonl

CHOICES = frozenset({"left", "right", "tie"})
ASSIGNMENTS = frozenset({"a_left", "b_left"})


class PrefError(Exception):
    pass


class DuplicateJudgment(PrefError):
    pass


@dataclass
class PreferenceTrial:
    trial_id: str
    item_id: str
    model_a: str
    model_b: str
    assignment: str
    original_digest: str
    instruction_en: str
    instruction_zh: str
    left_digest: str
    right_digest: str

    def __post_init__(self):
        if self.model_a == self.model_b:
            raise ValueError("a trial needs two distinct models")
        if self.assignment not in ASSIGNMENTS:
            raise ValueError(f"unknown assignment: {self.assignment}")

    def payload(self, index: int, total: int) -> dict:
        """What a judge sees: no model identities anywhere."""
        return {
            "trial_id": self.trial_id,
            "original_digest": self.original_digest,
            "instruction_en": self.instruction_en,
            "instruction_zh": self.instruction_zh,
            "left_digest": self.left_digest,
            "right_digest": self.right_digest,
            "progress": {"done": index, "total": total},
            "criteria": "instruction adherence, image quality, and consistency preservation",
        }


def resolve_outcome(assignment: str, choice: str) -> str:
    if choice == "tie":
        return "tie"
    left_is_a = assignment == "a_left"
    picked_left = choice == "left"
    return "a_wins" if picked_left == left_is_a else "b_wins"


class PrefStore:
    """Session definition files + one append-only judgment log."""

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.session_dir = self.root / "sessions"
        self.session_dir.mkdir(parents=True, exist_ok=True)
        self.log_path = self.root / "judgments.jsonl"
        self._lock = threading.Lock()

    # -- sessions

    def create_session(
        self,
        items: list[dict],
        outputs_a: dict[str, str],
        outputs_b: dict[str, str],
        model_a: str,
        model_b: str,
        seed: int,
    ) -> dict:
        """One trial per item with a seeded left/right assignment.

        ``items`` rows need item_id, image_digest, instruction_en,
        instruction_zh. Items missing an output on either side are skipped
        with an audit note.
        """
        rng = random.Random(seed)
        session_id = uuid.uuid4().hex[:12]
        trials = []
        skipped = []
        for item in items:
            item_id = item["item_id"]
            out_a = outputs_a.get(item_id)
            out_b = outputs_b.get(item_id)
            if not out_a or not out_b:
                skipped.append({"item_id": item_id, "reason": "missing_output"})
                continue
            assignment = "a_left" if rng.random() < 0.5 else "b_left"
            left, right = (out_a, out_b) if assignment == "a_left" else (out_b, out_a)
            trials.append(
                PreferenceTrial(
                    trial_id=f"{session_id}-{len(trials)}",
                    item_id=item_id,
                    model_a=model_a,
                    model_b=model_b,
                    assignment=assignment,
                    original_digest=item["image_digest"],
                    instruction_en=item["instruction_en"],
                    instruction_zh=item["instruction_zh"],
                    left_digest=left,
                    right_digest=right,
                ).__dict__
            )
        session = {
            "session_id": session_id,
            "model_a": model_a,
            "model_b": model_b,
            "seed": seed,
            "trials": trials,
            "skipped": skipped,
        }
        # persist before serving
        (self.session_dir / f"{session_id}.json").write_text(canonical_json(session))
        return session

    def get_session(self, session_id: str) -> dict:
        path = self.session_dir / f"{session_id}.json"
        if not path.exists():
            raise KeyError(session_id)
        import json

        return json.loads(path.read_text())

    def sessions(self) -> list[dict]:
        return [self.get_session(p.stem) for p in sorted(self.session_dir.glob("*.json"))]

    # -- judgments

    def judgments(self, session_id: Optional[str] = None) -> list[dict]:
        if not self.log_path.exists():
            return []
        rows = list(read_jsonl(self.log_path))
        if session_id is not None:
            rows = [r for r in rows if r["session_id"] == session_id]
        return rows

    def next_trial(self, session_id: str, judge_token: str) -> Optional[dict]:
        session = self.get_session(session_id)
        judged = {
            r["trial_id"] for r in self.judgments(session_id) if r["judge_token"] == judge_token
        }
        total = len(session["trials"])
        for trial_rec in session["trials"]:
            if trial_rec["trial_id"] not in judged:
                trial = PreferenceTrial(**trial_rec)
                return trial.payload(index=len(judged), total=total)
        return None

    def submit_judgment(
        self, session_id: str, trial_id: str, choice: str, judge_token: str
    ) -> dict:
        if choice not in CHOICES:
            raise ValueError(f"invalid choice: {choice}")
        with self._lock:
            session = self.get_session(session_id)
            trial_rec = next(
                (t for t in session["trials"] if t["trial_id"] == trial_id), None
            )
            if trial_rec is None:
                raise KeyError(trial_id)
            for row in self.judgments(session_id):
                if row["trial_id"] == trial_id and row["judge_token"] == judge_token:
                    raise DuplicateJudgment(trial_id)
            outcome = resolve_outcome(trial_rec["assignment"], choice)
            record = {
                "session_id": session_id,
                "trial_id": trial_id,
                "choice": choice,
                "judge_token": judge_token,
                "outcome": outcome,
                "model_a": session["model_a"],
                "model_b": session["model_b"],
                "timestamp": time.time(),
            }
            append_jsonl(self.log_path, record)
        return record

    def tally(self, model_a: str, model_b: str) -> dict:
        """Win/loss/tie percentages for a model pair, pooled over judges."""
        rows = [
            r
            for r in self.judgments()
            if r["model_a"] == model_a and r["model_b"] == model_b
        ]
        if not rows:
            raise PrefError("empty_tally")
        total = len(rows)
        wins = sum(1 for r in rows if r["outcome"] == "a_wins")
        losses = sum(1 for r in rows if r["outcome"] == "b_wins")
        ties = total - wins - losses
        return {
            "model_a": model_a,
            "model_b": model_b,
            "judgments": total,
            "wins": wins,
            "losses": losses,
            "ties": ties,
            "win_pct": 100.0 * wins / total,
            "loss_pct": 100.0 * losses / total,
            "tie_pct": 100.0 * ties / total,
        }


def render_tally_row(tally: dict) -> str:
    return (
        f"{tally['model_a']} vs {tally['model_b']} | "
        f"{tally['win_pct']:.2f}% | {tally['loss_pct']:.2f}% | {tally['tie_pct']:.2f}%"
    )


# -- HTTP API -----------------------------------------------------------------


class CreateSessionRequest(BaseModel):
    items: list[dict]
    outputs_a: dict[str, str]
    outputs_b: dict[str, str]
    model_a: str
    model_b: str
    seed: int = 0


class JudgmentRequest(BaseModel):
    trial_id: str
    choice: str
    judge: str


def create_app(store_dir: Path | str, blobs: Optional[BlobStore] = None) -> FastAPI:
    store = PrefStore(store_dir)
    app = FastAPI(title="preference study service")
    app.state.store = store

    @app.post("/sessions")
    def create_session(req: CreateSessionRequest):
        session = store.create_session(
            req.items, req.outputs_a, req.outputs_b, req.model_a, req.model_b, req.seed
        )
        return {
            "session_id": session["session_id"],
            "trials": len(session["trials"]),
            "skipped": session["skipped"],
        }

    @app.get("/sessions/{session_id}/next")
    def next_trial(session_id: str, judge: str = Query(...)):
        try:
            payload = store.next_trial(session_id, judge)
        except KeyError:
            raise HTTPException(status_code=404, detail="unknown session")
        if payload is None:
            return {"done": True}
        return {"done": False, "trial": payload}

    @app.post("/sessions/{session_id}/judgments")
    def submit(session_id: str, req: JudgmentRequest):
        try:
            record = store.submit_judgment(session_id, req.trial_id, req.choice, req.judge)
        except DuplicateJudgment:
            raise HTTPException(status_code=409, detail="judgment already recorded")
        except KeyError:
            raise HTTPException(status_code=404, detail="unknown session or trial")
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return {"trial_id": record["trial_id"], "choice": record["choice"]}

    @app.get("/tallies")
    def tallies(pair: str = Query(...)):
        model_a, _, model_b = pair.partition(",")
        try:
            tally = store.tally(model_a, model_b)
        except PrefError:
            raise HTTPException(status_code=404, detail="empty_tally")
        tally["row"] = render_tally_row(tally)
        return tally

    @app.get("/blobs/{digest}")
    def blob(digest: str):
        if blobs is None or not blobs.has(digest):
            raise HTTPException(status_code=404, detail="unknown blob")
        return Response(content=blobs.get(digest), media_type="image/png")

    return app
