"""Small shared helpers: content digests, canonical JSON, JSONL I/O."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Iterable, Iterator


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def canonical_json(obj: Any) -> str:
    """Serialize with sorted keys and no insignificant whitespace.

    The result is byte-stable under dict field reordering, which makes it
    usable as a cache/digest key.
    """
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def digest_of(obj: Any) -> str:
    return sha256_hex(canonical_json(obj).encode("utf-8"))


def read_jsonl(path: Path | str) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def write_jsonl(path: Path | str, records: Iterable[dict]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(canonical_json(rec) + "\n")
            n += 1
    return n


def append_jsonl(path: Path | str, record: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(canonical_json(record) + "\n")
