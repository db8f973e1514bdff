"""Editing-pair construction via four strategies.

Strategies: expert-model edits driven by VLM-generated instructions,
template compositing (watermarks, text, lighting), splitting of
identity-preserving in-context sheets, and a less-to-more flow that trains
a task adapter on seed pairs and mass-generates from raw images. All
external models are adapters; this module only orchestrates.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass
from typing import Optional

from PIL import Image, ImageDraw

from .adapters import STATUS_OK, AdapterClient
from .records import EditPair, InstructionRecord, PairStore, make_pair_id
from .store import BlobStore

logger = logging.getLogger(__name__)

TEMPLATE_KINDS = frozenset({"watermark_overlay", "text_overlay", "text_modify", "lighting_adjust"})
PAIRINGS = frozenset({"adjacent", "first_vs_each"})


class ConstructError(Exception):
    """Pair construction failure with a machine-readable reason."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


class ConstructionDeferred(Exception):
    """Adapter unavailable after retries; the item should be retried later."""


@dataclass
class AuxiliaryInfo:
    object_counts: list[tuple[str, int]]
    predefined_instructions: list[str]
    bank_version: str = "unversioned"

    def __post_init__(self):
        for cat, count in self.object_counts:
            if not cat:
                raise ValueError("category must be a non-empty string")
            if count < 1:
                raise ValueError("object counts must be >= 1")

    def to_payload(self) -> dict:
        return {
            "object_counts": [[c, n] for c, n in self.object_counts],
            "predefined_instructions": self.predefined_instructions,
            "bank_version": self.bank_version,
        }


@dataclass
class TemplateSpec:
    kind: str
    payload: dict
    region: tuple[int, int, int, int]  # x, y, w, h in source coordinates
    direction: str = "forward_is_add"

    def __post_init__(self):
        if self.kind not in TEMPLATE_KINDS:
            raise ValueError(f"unknown template kind: {self.kind}")
        if self.direction not in {"forward_is_add", "forward_is_remove"}:
            raise ValueError(f"unknown direction: {self.direction}")
        x, y, w, h = self.region
        if w < 1 or h < 1 or x < 0 or y < 0:
            raise ValueError("region must be a positive rectangle at nonnegative offset")
        if self.kind == "lighting_adjust":
            curve = self.payload.get("curve")
            if not curve or len(curve) != 256:
                raise ValueError("lighting_adjust payload needs a 256-entry curve")
            if any(b < a for a, b in zip(curve, curve[1:])):
                raise ValueError("lighting curve must be monotone on [0, 255]")


@dataclass
class InContextLayout:
    rows: int
    cols: int
    gutter: int = 0
    pairing: str = "adjacent"

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("rows and cols must be >= 1")
        if self.rows * self.cols < 2:
            raise ValueError("layout must produce at least 2 tiles")
        if self.gutter < 0:
            raise ValueError("gutter must be >= 0")
        if self.pairing not in PAIRINGS:
            raise ValueError(f"unknown pairing: {self.pairing}")


# -- auxiliary information & instruction generation -------------------------


def build_auxiliary_info(
    detections: list[tuple[str, int]],
    bank_templates: list[str],
    bank_version: str = "unversioned",
) -> AuxiliaryInfo:
    """Assemble the two auxiliary channels for instruction generation.

    Zero-count detections are dropped. A predefined template applies when
    it carries an ``{object}`` placeholder (expanded once per detected
    category) or literally mentions a detected category.
    """
    counts = [(c, n) for c, n in detections if n >= 1]
    categories = [c for c, _ in counts]
    applicable: list[str] = []
    for template in bank_templates:
        if "{object}" in template:
            applicable.extend(template.replace("{object}", cat) for cat in categories)
        elif any(cat.lower() in template.lower() for cat in categories):
            applicable.append(template)
    if not counts and not applicable:
        raise ConstructError("no_edit_affordance")
    return AuxiliaryInfo(
        object_counts=counts, predefined_instructions=applicable, bank_version=bank_version
    )


def gen_instruction(
    image_digest: str, aux: AuxiliaryInfo, client: AdapterClient, vlm_id: str
) -> tuple[str, str]:
    """Ask the VLM for an instruction seed, conditioned on both channels."""
    resp = client.call(
        vlm_id,
        "vlm_instruct",
        {"op": "generate", "image_digest": image_digest, "auxiliary": aux.to_payload()},
    )
    if resp.status != STATUS_OK:
        raise ConstructionDeferred(f"vlm adapter unavailable: {resp.status}")
    instruction = (resp.body or {}).get("instruction", "")
    if not instruction:
        raise ConstructError("empty_instruction")
    task = (resp.body or {}).get("task", "other")
    return instruction, task


def expert_edit(
    image_digest: str,
    instruction: str,
    expert_id: str,
    client: AdapterClient,
    blobs: BlobStore,
) -> str:
    """Run a task-specific editing expert; returns the output image digest."""
    resp = client.call(
        expert_id, "expert_edit", {"image_digest": image_digest, "instruction": instruction}
    )
    if resp.status != STATUS_OK:
        raise ConstructError("expert_unavailable", resp.status)
    digest = (resp.body or {}).get("image_digest")
    if not digest or not blobs.has(digest):
        raise ConstructError("expert_bad_output", "missing output blob")
    try:
        with Image.open(io.BytesIO(blobs.get(digest))) as img:
            img.load()
    except Exception as exc:
        raise ConstructError("expert_bad_output", str(exc))
    return digest


def refine_instruction(pair: EditPair, client: AdapterClient, vlm_id: str) -> EditPair:
    """Replace the seed instruction with a detailed one; seed kept in provenance."""
    seed = pair.instruction.primary_en
    resp = client.call(
        vlm_id,
        "vlm_instruct",
        {
            "op": "refine",
            "source_digest": pair.source_id,
            "edited_digest": pair.edited_id,
            "instruction": seed,
        },
    )
    refined = (resp.body or {}).get("instruction", "") if resp.ok else ""
    if not refined:
        if "unrefined" not in pair.flags:
            pair.flags.append("unrefined")
        return pair
    pair.instruction.provenance.append({"step": "seed", "text": seed})
    pair.instruction.primary_en = refined
    return pair


def build_expert_pair(
    image_digest: str,
    detections: list[tuple[str, int]],
    bank_templates: list[str],
    client: AdapterClient,
    blobs: BlobStore,
    store: PairStore,
    vlm_id: str = "vlm",
    expert_id: str = "expert",
) -> Optional[EditPair]:
    """Full expert-based flow for one image; audited discard returns None."""
    aux = build_auxiliary_info(detections, bank_templates)
    instruction, task = gen_instruction(image_digest, aux, client, vlm_id)
    edited = expert_edit(image_digest, instruction, expert_id, client, blobs)
    if edited == image_digest:
        store.audit("pair_discarded", source_id=image_digest, reason="no_change")
        return None
    pair = EditPair(
        pair_id=make_pair_id(image_digest, edited, instruction, "expert"),
        source_id=image_digest,
        edited_id=edited,
        instruction=InstructionRecord(primary_en=instruction),
        task=task,
        method="expert",
    )
    pair = refine_instruction(pair, client, vlm_id)
    store.put_pair(pair)
    return pair


# -- template-based construction ---------------------------------------------


def _render_template(img: Image.Image, spec: TemplateSpec, blobs: Optional[BlobStore]) -> Image.Image:
    x, y, w, h = spec.region
    out = img.copy()
    if spec.kind == "watermark_overlay":
        if "image_blob" in spec.payload:
            if blobs is None:
                raise ConstructError("payload_undecodable", "no blob store for template asset")
            try:
                overlay = Image.open(io.BytesIO(blobs.get(spec.payload["image_blob"])))
                overlay = overlay.convert("RGBA").resize((w, h))
            except Exception as exc:
                raise ConstructError("payload_undecodable", str(exc))
        else:
            text = spec.payload.get("text", "WATERMARK")
            overlay = Image.new("RGBA", (w, h), (0, 0, 0, 0))
            draw = ImageDraw.Draw(overlay)
            draw.text((2, 2), text, fill=(255, 255, 255, 160))
        out.paste(overlay, (x, y), overlay)
    elif spec.kind in {"text_overlay", "text_modify"}:
        text = spec.payload.get("text")
        if not text:
            raise ConstructError("payload_undecodable", "text payload missing")
        fill = tuple(spec.payload.get("fill", [255, 0, 0]))
        # draw into a region-sized patch so long text clips at the region edge
        patch = out.crop((x, y, x + w, y + h))
        draw = ImageDraw.Draw(patch)
        if spec.kind == "text_modify":
            draw.rectangle([0, 0, w - 1, h - 1], fill=tuple(spec.payload.get("bg", [255, 255, 255])))
        draw.text((2, 2), text, fill=fill)
        out.paste(patch, (x, y))
    else:  # lighting_adjust
        curve = spec.payload["curve"]
        region = out.crop((x, y, x + w, y + h))
        region = region.point(list(curve) * len(region.getbands()))
        out.paste(region, (x, y))
    return out


def _rule_instruction(spec: TemplateSpec) -> tuple[str, str]:
    text = spec.payload.get("text", "")
    remove = spec.direction == "forward_is_remove"
    if spec.kind == "watermark_overlay":
        return ("remove the watermark", "watermark_remove") if remove else (
            "add a watermark",
            "other",
        )
    if spec.kind == "text_overlay":
        verb = "remove" if remove else "add"
        return f'{verb} the text "{text}"', "text_edit"
    if spec.kind == "text_modify":
        if remove:
            return "restore the original text in the marked region", "text_edit"
        return f'change the text in the marked region to "{text}"', "text_edit"
    if remove:
        return "revert the lighting adjustment in the marked region", "lighting_adjust"
    return "adjust the lighting in the marked region", "lighting_adjust"


def template_apply(
    image_digest: str,
    spec: TemplateSpec,
    blobs: BlobStore,
    store: PairStore,
    asset_blobs: Optional[BlobStore] = None,
) -> EditPair:
    """Composite a template and emit an oriented pair plus its region mask.

    Pixels outside the region are untouched by construction; the mask is a
    1-bit PNG matching the source dimensions exactly.
    """
    img = Image.open(io.BytesIO(blobs.get(image_digest))).convert("RGB")
    x, y, w, h = spec.region
    if x + w > img.width or y + h > img.height:
        raise ConstructError("region_out_of_bounds", f"{spec.region} vs {img.size}")

    composited = _render_template(img, spec, asset_blobs or blobs)
    buf = io.BytesIO()
    composited.save(buf, format="PNG")
    composited_digest = blobs.put(buf.getvalue())

    # normalize the original through the same PNG encoder so the two sides
    # of the pair are byte-comparable outside the region
    buf0 = io.BytesIO()
    img.save(buf0, format="PNG")
    original_digest = blobs.put(buf0.getvalue())

    if composited_digest == original_digest:
        raise ConstructError("no_change")

    if spec.direction == "forward_is_add":
        source_id, edited_id = original_digest, composited_digest
    else:
        source_id, edited_id = composited_digest, original_digest

    instruction, task = _rule_instruction(spec)
    mask = Image.new("1", img.size, 0)
    ImageDraw.Draw(mask).rectangle([x, y, x + w - 1, y + h - 1], fill=1)
    mask_buf = io.BytesIO()
    mask.save(mask_buf, format="PNG")
    mask_digest = store.put(mask_buf.getvalue())

    pair = EditPair(
        pair_id=make_pair_id(source_id, edited_id, instruction, "template"),
        source_id=source_id,
        edited_id=edited_id,
        instruction=InstructionRecord(primary_en=instruction),
        task=task,
        method="template",
        region_mask=mask_digest,
    )
    (store.mask_dir / f"{pair.pair_id}.png").write_bytes(mask_buf.getvalue())
    store.put_pair(pair)
    return pair


# -- in-context generation splitting -----------------------------------------


def _tile_grid(width: int, height: int, layout: InContextLayout) -> list[tuple[int, int, int, int]]:
    def axis(total: int, n: int) -> int:
        usable = total - (n - 1) * layout.gutter
        size = round(usable / n)
        if abs(usable - size * n) > 1:
            raise ConstructError("layout_mismatch", f"{total}px over {n} tiles")
        return size

    tw = axis(width, layout.cols)
    th = axis(height, layout.rows)
    boxes = []
    for r in range(layout.rows):
        for c in range(layout.cols):
            x = c * (tw + layout.gutter)
            y = r * (th + layout.gutter)
            boxes.append((x, y, min(x + tw, width), min(y + th, height)))
    return boxes


def enumerate_pairings(n_tiles: int, pairing: str) -> list[tuple[int, int]]:
    if pairing == "adjacent":
        return [(i, i + 1) for i in range(n_tiles - 1)]
    return [(0, k) for k in range(1, n_tiles)]


def split_incontext(
    sheet_digest: str,
    layout: InContextLayout,
    client: AdapterClient,
    blobs: BlobStore,
    store: PairStore,
    vlm_id: str = "vlm",
) -> list[EditPair]:
    """Split an identity-preserving sheet into tiles and pair them."""
    sheet = Image.open(io.BytesIO(blobs.get(sheet_digest))).convert("RGB")
    boxes = _tile_grid(sheet.width, sheet.height, layout)
    tile_digests = []
    for box in boxes:
        buf = io.BytesIO()
        sheet.crop(box).save(buf, format="PNG")
        tile_digests.append(blobs.put(buf.getvalue()))

    pairs: list[EditPair] = []
    for i, j in enumerate_pairings(len(tile_digests), layout.pairing):
        src, dst = tile_digests[i], tile_digests[j]
        if src == dst:
            store.audit("pair_discarded", source_id=src, reason="no_change")
            continue
        resp = client.call(
            vlm_id,
            "vlm_instruct",
            {"op": "describe_pair", "source_digest": src, "edited_digest": dst},
        )
        if not resp.ok:
            raise ConstructionDeferred(f"vlm adapter unavailable: {resp.status}")
        instruction = (resp.body or {}).get("instruction", "")
        if not instruction:
            raise ConstructError("empty_instruction")
        task = (resp.body or {}).get("task", "other")
        pair = EditPair(
            pair_id=make_pair_id(src, dst, instruction, "in_context"),
            source_id=src,
            edited_id=dst,
            instruction=InstructionRecord(primary_en=instruction),
            task=task,
            method="in_context",
        )
        pair = refine_instruction(pair, client, vlm_id)
        store.put_pair(pair)
        pairs.append(pair)
    return pairs


# -- LoRA-based less-to-more flow ----------------------------------------------


def lora_flow(
    seeds: list[EditPair],
    raws: list[tuple[str, str]],
    client: AdapterClient,
    store: PairStore,
    trainer_id: str = "trainer",
    vlm_id: str = "vlm",
    min_seeds: int = 24,
    max_seeds: int = 512,
) -> list[EditPair]:
    """Train one task adapter on seed pairs, then fan out inference on raws.

    The train call is a hard barrier: its failure aborts the whole flow.
    Individual inference failures only skip that raw item (audited).
    """
    if len(seeds) < min_seeds:
        raise ConstructError("insufficient_seeds", f"{len(seeds)} < {min_seeds}")
    if len(seeds) > max_seeds:
        raise ConstructError("too_many_seeds", f"{len(seeds)} > {max_seeds}")

    train_resp = client.call(
        trainer_id,
        "expert_train",
        {"seed_pairs": sorted(p.pair_id for p in seeds)},
    )
    if not train_resp.ok:
        raise ConstructError("train_failed", train_resp.status)
    model_ref = (train_resp.body or {}).get("model_ref", "")

    pairs: list[EditPair] = []
    for source_digest, instruction in raws:
        resp = client.call(
            trainer_id,
            "expert_infer",
            {"image_digest": source_digest, "instruction": instruction, "model_ref": model_ref},
        )
        edited = (resp.body or {}).get("image_digest") if resp.ok else None
        if not edited or edited == source_digest:
            store.audit(
                "lora_flow_skipped",
                source_id=source_digest,
                reason="no_change" if edited == source_digest else f"infer_failed:{resp.status}",
            )
            continue
        pair = EditPair(
            pair_id=make_pair_id(source_digest, edited, instruction, "lora_flow"),
            source_id=source_digest,
            edited_id=edited,
            instruction=InstructionRecord(primary_en=instruction),
            task="other",
            method="lora_flow",
        )
        pair = refine_instruction(pair, client, vlm_id)
        store.put_pair(pair)
        pairs.append(pair)
    return pairs
