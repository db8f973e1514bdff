"""Content-addressed blob store with a JSONL index.

Used as both the corpus store (source images) and the pair store (edit
pairs). Blobs are stored once per digest; index records carry the
metadata. Writes are serialized with a lock so parallel workers can share
one store.
"""

from __future__ import annotations

import threading
from pathlib import Path
from typing import Optional

from .util import append_jsonl, read_jsonl, sha256_hex, write_jsonl


class BlobStore:
    """Directory of blobs named by sha256 digest."""

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.blob_dir = self.root / "blobs"
        self.blob_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def put(self, data: bytes) -> str:
        digest = sha256_hex(data)
        path = self.blob_dir / digest
        with self._lock:
            if not path.exists():
                tmp = path.with_suffix(".tmp")
                tmp.write_bytes(data)
                tmp.rename(path)
        return digest

    def get(self, digest: str) -> bytes:
        return (self.blob_dir / digest).read_bytes()

    def has(self, digest: str) -> bool:
        return (self.blob_dir / digest).exists()


class IndexedStore(BlobStore):
    """BlobStore plus a keyed JSONL index of metadata records."""

    def __init__(self, root: Path | str, index_name: str, key_field: str):
        super().__init__(root)
        self.index_path = self.root / index_name
        self.key_field = key_field
        self._records: dict[str, dict] = {}
        if self.index_path.exists():
            for rec in read_jsonl(self.index_path):
                self._records[rec[self.key_field]] = rec

    def upsert(self, record: dict) -> None:
        key = record[self.key_field]
        with self._lock:
            known = key in self._records
            self._records[key] = record
            if known:
                # rewrite keeps the index compact; records are small
                write_jsonl(self.index_path, self._records.values())
            else:
                append_jsonl(self.index_path, record)

    def get_record(self, key: str) -> Optional[dict]:
        return self._records.get(key)

    def records(self) -> list[dict]:
        """All records in canonical (key-sorted) order."""
        return [self._records[k] for k in sorted(self._records)]

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, key: str) -> bool:
        return key in self._records
