"""Source image collection: ingest heterogeneous origins, filter on quality.

The corpus store is a content-addressed blob directory plus a JSONL index
of image metadata. Collection filtering applies resolution and (optional)
aesthetic-score thresholds; the aesthetic scorer is always an external
adapter, never embedded here.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from PIL import Image

from .adapters import AdapterClient
from .store import IndexedStore
from .util import read_jsonl, sha256_hex

logger = logging.getLogger(__name__)

DOMAIN_TAGS = frozenset({"general_portrait", "general_object", "ecom_portrait", "ecom_product"})


@dataclass
class SourceImage:
    id: str
    uri: str
    width: int
    height: int
    domain_tag: str
    origin: str
    aesthetic: Optional[float] = None
    license_note: str = ""

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")
        if self.domain_tag not in DOMAIN_TAGS:
            raise ValueError(f"unknown domain_tag: {self.domain_tag}")
        if self.aesthetic is not None and not 0.0 <= self.aesthetic <= 10.0:
            raise ValueError("aesthetic score must lie in [0, 10]")

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "uri": self.uri,
            "width": self.width,
            "height": self.height,
            "domain_tag": self.domain_tag,
            "origin": self.origin,
            "aesthetic": self.aesthetic,
            "license_note": self.license_note,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SourceImage":
        return cls(
            id=rec["id"],
            uri=rec["uri"],
            width=rec["width"],
            height=rec["height"],
            domain_tag=rec["domain_tag"],
            origin=rec["origin"],
            aesthetic=rec.get("aesthetic"),
            license_note=rec.get("license_note", ""),
        )


@dataclass
class CollectionPolicy:
    min_width: int = 512
    min_height: int = 512
    min_aesthetic: float = 5.0
    require_aesthetic: bool = False

    def __post_init__(self):
        if self.min_width < 1 or self.min_height < 1:
            raise ValueError("minimum dimensions must be >= 1")
        if not 0.0 <= self.min_aesthetic <= 10.0:
            raise ValueError("min_aesthetic must lie in [0, 10]")


class CorpusStore(IndexedStore):
    def __init__(self, root: Path | str):
        super().__init__(root, index_name="index.jsonl", key_field="id")

    def images(self) -> list[SourceImage]:
        return [SourceImage.from_record(r) for r in self.records()]


def _resolve_uri(uri: str) -> Path:
    if uri.startswith("file://"):
        return Path(uri[len("file://") :])
    return Path(uri)


def ingest(manifest_path: Path | str, store: CorpusStore) -> dict:
    """Register every decodable manifest entry; duplicates merge origins.

    Returns a report {registered, duplicate, undecodable, skipped: [...]}.
    An unreadable manifest is fatal; a bad image is recorded and skipped.
    """
    report = {"registered": 0, "duplicate": 0, "undecodable": 0, "skipped": []}
    for entry in read_jsonl(manifest_path):
        uri = entry["uri"]
        path = _resolve_uri(uri)
        try:
            data = path.read_bytes()
            with Image.open(io.BytesIO(data)) as img:
                img.load()
                width, height = img.size
        except Exception as exc:
            logger.warning("undecodable image %s: %s", uri, exc)
            report["undecodable"] += 1
            report["skipped"].append({"uri": uri, "reason": str(exc)})
            continue
        digest = sha256_hex(data)
        existing = store.get_record(digest)
        if existing is not None:
            origins = existing["origin"].split(";")
            new_origin = entry.get("origin", "")
            if new_origin and new_origin not in origins:
                existing["origin"] = ";".join(origins + [new_origin])
                store.upsert(existing)
            report["duplicate"] += 1
            continue
        store.put(data)
        image = SourceImage(
            id=digest,
            uri=uri,
            width=width,
            height=height,
            domain_tag=entry.get("domain_tag", "general_object"),
            origin=entry.get("origin", ""),
            license_note=entry.get("license_note", ""),
        )
        store.upsert(image.to_record())
        report["registered"] += 1
    return report


def filter_collection(
    store: CorpusStore,
    policy: CollectionPolicy,
    client: Optional[AdapterClient] = None,
    scorer_id: str = "aesthetic",
) -> dict:
    """Partition the corpus into accepted ids and (id, reason) rejections.

    Thresholds are inclusive. The rejection reason names the first failed
    criterion, checked in order: min_width, min_height, min_aesthetic.
    Output ordering is canonical (sorted by id) regardless of scheduling.
    """
    if policy.require_aesthetic and client is None:
        raise ValueError("aesthetic scoring requested but no adapter client given")
    accepted: list[str] = []
    rejected: list[tuple[str, str]] = []
    for image in store.images():
        if image.width < policy.min_width:
            rejected.append((image.id, "min_width"))
            continue
        if image.height < policy.min_height:
            rejected.append((image.id, "min_height"))
            continue
        if policy.require_aesthetic:
            score = image.aesthetic
            if score is None:
                resp = client.call(scorer_id, "aesthetic", {"image_digest": image.id})
                if not resp.ok:
                    rejected.append((image.id, "scorer_unavailable"))
                    continue
                score = resp.body.get("score")
                if score is None:
                    rejected.append((image.id, "scorer_unavailable"))
                    continue
                rec = store.get_record(image.id)
                rec["aesthetic"] = score
                store.upsert(rec)
            if score < policy.min_aesthetic:
                rejected.append((image.id, "min_aesthetic"))
                continue
        accepted.append(image.id)
    return {"accepted": sorted(accepted), "rejected": sorted(rejected)}
