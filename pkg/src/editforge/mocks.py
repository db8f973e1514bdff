"""Deterministic built-in mock behaviors for offline pipeline runs.

Mock specs are strings of the form ``name`` or ``name:arg1,arg2`` and are
resolvable from CLI/run configs, e.g. ``judge_const:9,9,9``. All mocks are
pure functions of the request (plus the blob store for image outputs), so
repeated runs reproduce byte-identical results.
"""

from __future__ import annotations

import io
import random

from PIL import Image

from .adapters import STATUS_OK, STATUS_SECURITY_FILTERED, AdapterRequest
from .store import BlobStore


def _load_image(blobs: BlobStore, digest: str) -> Image.Image:
    return Image.open(io.BytesIO(blobs.get(digest))).convert("RGB")


def _store_image(blobs: BlobStore, img: Image.Image) -> str:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return blobs.put(buf.getvalue())


def instruct_echo(request: AdapterRequest) -> dict:
    """Return the first applicable predefined instruction, else a stock edit."""
    if request.payload.get("op") == "refine":
        return refine_suffix(request)
    if request.payload.get("op") == "describe_pair":
        return {"instruction": "transform the subject as shown", "task": "other"}
    aux = request.payload.get("auxiliary", {})
    predefined = aux.get("predefined_instructions", [])
    if predefined:
        return {"instruction": predefined[0], "task": _guess_task(predefined[0])}
    return {"instruction": "convert the image to grayscale", "task": "other"}


def instruct_roundrobin(request: AdapterRequest) -> dict:
    """Vary task tag deterministically by request digest (diversity smoke)."""
    if request.payload.get("op") == "refine":
        return refine_suffix(request)
    if request.payload.get("op") == "describe_pair":
        tasks = ["pose_edit", "hairstyle_edit", "object_replace"]
        task = tasks[int(request.request_digest[:8], 16) % len(tasks)]
        return {"instruction": f"apply the shown {task.replace('_', ' ')}", "task": task}
    tasks = ["object_remove", "object_add", "background_replace", "text_edit"]
    verbs = {
        "object_remove": "remove the {o}",
        "object_add": "add another {o}",
        "background_replace": "replace the background behind the {o}",
        "text_edit": "change the label near the {o}",
    }
    aux = request.payload.get("auxiliary", {})
    counts = aux.get("object_counts", [])
    obj = counts[0][0] if counts else "object"
    task = tasks[int(request.request_digest[:8], 16) % len(tasks)]
    return {"instruction": verbs[task].format(o=obj), "task": task}


def _guess_task(instruction: str) -> str:
    text = instruction.lower()
    for needle, task in [
        ("remove the watermark", "watermark_remove"),
        ("watermark", "watermark_remove"),
        ("remove", "object_remove"),
        ("add", "object_add"),
        ("replace the background", "background_replace"),
        ("replace", "object_replace"),
        ("text", "text_edit"),
        ("light", "lighting_adjust"),
    ]:
        if needle in text:
            return task
    return "other"


def refine_suffix(request: AdapterRequest) -> dict:
    seed = request.payload.get("instruction", "")
    return {"instruction": seed + ", keeping everything else unchanged"}


class ExpertGrayscale:
    """Editing expert that converts the source image to grayscale."""

    def __init__(self, blobs: BlobStore):
        self.blobs = blobs

    def __call__(self, request: AdapterRequest) -> dict:
        src = _load_image(self.blobs, request.payload["image_digest"])
        out = src.convert("L").convert("RGB")
        return {"image_digest": _store_image(self.blobs, out)}


class ExpertIdentity:
    """Returns the input unchanged; exercises the no_change rejection path."""

    def __init__(self, blobs: BlobStore):
        self.blobs = blobs

    def __call__(self, request: AdapterRequest) -> dict:
        return {"image_digest": request.payload["image_digest"]}


class ExpertInvert:
    """Task-LoRA stand-in: train is a no-op, infer inverts colors."""

    def __init__(self, blobs: BlobStore):
        self.blobs = blobs

    def __call__(self, request: AdapterRequest) -> dict:
        if request.kind == "expert_train":
            return {"model_ref": "mock-lora-" + request.request_digest[:12]}
        src = _load_image(self.blobs, request.payload["image_digest"])
        out = Image.eval(src, lambda v: 255 - v)
        return {"image_digest": _store_image(self.blobs, out)}


class SecurityFilterEvery:
    """Delegates to an inner expert but security-filters every k-th item."""

    def __init__(self, inner, every: int):
        self.inner = inner
        self.every = every
        self._n = 0

    def __call__(self, request: AdapterRequest) -> dict:
        self._n += 1
        if self.every > 0 and self._n % self.every == 0:
            return {"status": STATUS_SECURITY_FILTERED}
        return self.inner(request)


def judge_const(instruction_following: float, consistency: float, image_quality: float):
    def behavior(request: AdapterRequest) -> dict:
        return {
            "instruction_following": instruction_following,
            "consistency": consistency,
            "image_quality": image_quality,
            "rationale": "constant mock judge",
        }

    return behavior


def judge_seeded(seed: int, low: float = 5.0, high: float = 10.0):
    """Scores derived from (seed, request digest); same seed, same scores."""

    def behavior(request: AdapterRequest) -> dict:
        rng = random.Random(f"{seed}:{request.request_digest}")
        return {
            "instruction_following": round(rng.uniform(low, high), 1),
            "consistency": round(rng.uniform(low, high), 1),
            "image_quality": round(rng.uniform(low, high), 1),
            "rationale": "seeded mock judge",
        }

    return behavior


def llm_simple(request: AdapterRequest) -> dict:
    """Deterministic translator/paraphraser used by instruction augmentation."""
    text = request.payload.get("text", "")
    op = request.payload.get("op", "")
    language = request.payload.get("language", "en")
    if op == "translate_zh":
        return {"text": "[zh] " + text}
    prefix = "[zh] " if language == "zh" else ""
    base = text[5:] if text.startswith("[zh] ") else text
    if op == "style_synonym":
        return {"text": prefix + "please " + base}
    if op == "style_interrogative":
        return {"text": prefix + "could you " + base + "?"}
    if op == "style_passive":
        return {"text": prefix + "let " + base + " be done"}
    return {"text": text}


def aesthetic_const(score: float):
    def behavior(request: AdapterRequest) -> dict:
        return {"score": score}

    return behavior


def detect_fixed(pairs: list[tuple[str, int]]):
    def behavior(request: AdapterRequest) -> dict:
        return {"detections": [[c, n] for c, n in pairs]}

    return behavior


def build_mock(spec: str, blobs: BlobStore):
    """Resolve a mock spec string from a run config into a behavior."""
    name, _, args = spec.partition(":")
    if name == "instruct_echo":
        return instruct_echo
    if name == "instruct_roundrobin":
        return instruct_roundrobin
    if name == "refine_suffix":
        return refine_suffix
    if name == "expert_grayscale":
        return ExpertGrayscale(blobs)
    if name == "expert_identity":
        return ExpertIdentity(blobs)
    if name == "expert_invert":
        return ExpertInvert(blobs)
    if name == "judge_const":
        vals = [float(v) for v in args.split(",")]
        return judge_const(*vals)
    if name == "judge_seeded":
        return judge_seeded(int(args or 0))
    if name == "llm_simple":
        return llm_simple
    if name == "aesthetic_const":
        return aesthetic_const(float(args))
    if name == "detect_fixed":
        pairs = []
        for item in args.split(","):
            cat, _, cnt = item.partition("=")
            pairs.append((cat, int(cnt)))
        return detect_fixed(pairs)
    raise ValueError(f"unknown mock spec: {spec}")
