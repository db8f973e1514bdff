import io
import json
from pathlib import Path

import pytest
from PIL import Image

from editforge.adapters import AdapterClient
from editforge.corpus import CorpusStore
from editforge.records import PairStore


def make_png(width=64, height=64, color=(120, 40, 200), stripes=0):
    img = Image.new("RGB", (width, height), color)
    if stripes:
        px = img.load()
        for x in range(0, width, stripes):
            for y in range(height):
                px[x, y] = (255 - color[0], color[1], color[2])
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def write_manifest(path: Path, entries):
    with open(path, "w") as fh:
        for entry in entries:
            fh.write(json.dumps(entry) + "\n")


@pytest.fixture
def corpus_store(tmp_path):
    return CorpusStore(tmp_path / "corpus")


@pytest.fixture
def pair_store(tmp_path):
    return PairStore(tmp_path / "pairs")


@pytest.fixture
def client(tmp_path, corpus_store):
    return AdapterClient(cache_dir=tmp_path / "cache", blobs=corpus_store, backoff_base=0.001)


@pytest.fixture
def image_in_store(corpus_store):
    data = make_png(64, 64, stripes=8)
    digest = corpus_store.put(data)
    return digest
