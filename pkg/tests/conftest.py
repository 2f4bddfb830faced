from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from hqcnn.data import ManifestEntry, write_manifest


@pytest.fixture(autouse=True)
def skip_git_lookup(monkeypatch):
    monkeypatch.setenv("HQCNN_SKIP_GIT_CHECK", "1")


def write_gray_png(path: Path, pixels: np.ndarray):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(path)


def blob_image(rng: np.random.Generator, bright: bool, size: int = 28) -> np.ndarray:
    """Noise confined to [0, 51] for dark images and [204, 255] for bright ones."""
    low, high = (204, 255) if bright else (0, 51)
    return rng.integers(low, high + 1, size=(size, size))


def make_corpus(root: Path, labels=("normal", "covid19"), n_train: int = 8, n_test: int = 4, seed: int = 0) -> Path:
    """Writes a two-class PNG corpus plus its manifest; the second label gets the bright images."""
    rng = np.random.default_rng(seed)
    entries = []
    for split, count in (("train", n_train), ("test", n_test)):
        for k, label in enumerate(labels):
            for i in range(count):
                rel = f"{split}/{label}/{i:04d}.png"
                write_gray_png(root / rel, blob_image(rng, bright=k == len(labels) - 1))
                entries.append(ManifestEntry(rel, label, split))
    manifest = root / "manifest.csv"
    write_manifest(manifest, entries)
    return manifest


@pytest.fixture
def corpus(tmp_path):
    return make_corpus(tmp_path / "corpus")
