"""Grayscale image ingestion and dataset manifests.

A manifest is a UTF-8 CSV with header ``path,label,split``. Relative paths are
resolved against the manifest's directory. Images are held as 2-D float64
arrays: raw 0-255 intensities after ``load_image``, [0, 1] after
``normalize``.
"""
import csv
import hashlib
import json
import tempfile
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from hqcnn import ConfigurationError, DatasetId, IngestionError
from hqcnn.cache import CacheRecord, read_cache, write_cache

LABELS = ("normal", "covid19", "pneumonia")
SPLITS = ("train", "test")
IMAGE_SIZE = 28
RESIZE_METHOD = "bilinear"

CLASS_NAMES = {
    DatasetId.D1: ("normal", "covid19"),
    DatasetId.D2: ("covid19", "pneumonia"),
    DatasetId.D3: ("normal", "covid19", "pneumonia"),
}

# Per-cell figures of the published dataset table. Its printed totals are
# 2736 / 5377 / 6952; the D2 and D3 cells add up to 49 more than that.
PUBLISHED_SPLIT_COUNTS = {
    DatasetId.D1: {("train", "covid19"): 1010, ("train", "normal"): 1341,
                   ("test", "covid19"): 151, ("test", "normal"): 234},
    DatasetId.D2: {("train", "covid19"): 1000, ("train", "pneumonia"): 3875,
                   ("test", "covid19"): 161, ("test", "pneumonia"): 390},
    DatasetId.D3: {("train", "normal"): 1341, ("train", "covid19"): 1000, ("train", "pneumonia"): 3875,
                   ("test", "covid19"): 161, ("test", "pneumonia"): 390, ("test", "normal"): 234},
}
PUBLISHED_TOTALS = {DatasetId.D1: 2736, DatasetId.D2: 5377, DatasetId.D3: 6952}


@dataclass(frozen=True)
class IngestConfig:
    divisor: float = 255.0
    size: int = IMAGE_SIZE

    def __post_init__(self):
        if self.divisor <= 0:
            raise ConfigurationError(f"divisor must be > 0, got {self.divisor}")

    def to_dict(self) -> dict:
        return {**asdict(self), "resize": RESIZE_METHOD}


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    split: str


@dataclass(frozen=True)
class DatasetManifest:
    dataset_id: DatasetId
    entries: Tuple[ManifestEntry, ...] = ()
    root: str = "."

    @property
    def class_names(self) -> Tuple[str, ...]:
        return CLASS_NAMES[self.dataset_id]

    def resolve(self, entry: ManifestEntry) -> Path:
        path = Path(entry.path)
        return path if path.is_absolute() else Path(self.root) / path

    def label_index(self, entry: ManifestEntry) -> int:
        return self.class_names.index(entry.label)

    def subset(self, split: str) -> "DatasetManifest":
        return DatasetManifest(self.dataset_id, tuple(e for e in self.entries if e.split == split), self.root)


@dataclass(frozen=True)
class DatasetSplits:
    train: DatasetManifest
    test: DatasetManifest
    counts: Dict[Tuple[str, str], int]

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def read_manifest(path, dataset_id: DatasetId) -> DatasetManifest:
    """Parses a ``path,label,split`` manifest.

    Raises
    ------
    IngestionError
        If the file is missing, has the wrong header, or holds an unknown
        label or split
    """
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != ["path", "label", "split"]:
                raise IngestionError(path, f"manifest header must be path,label,split, got {reader.fieldnames}")
            entries = []
            for line, row in enumerate(reader, start=2):
                if row["label"] not in LABELS:
                    raise IngestionError(path, f"line {line}: unknown label {row['label']!r}")
                if row["split"] not in SPLITS:
                    raise IngestionError(path, f"line {line}: unknown split {row['split']!r}")
                entries.append(ManifestEntry(row["path"], row["label"], row["split"]))
    except (OSError, UnicodeDecodeError) as e:
        raise IngestionError(path, f"cannot read manifest ({e})")
    return DatasetManifest(dataset_id, tuple(entries), str(path.parent))


def write_manifest(path, entries: Sequence[ManifestEntry]):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["path", "label", "split"])
        for e in entries:
            writer.writerow([e.path, e.label, e.split])


def load_image(path) -> np.ndarray:
    """Decodes a raster image into 0-255 grayscale intensities (RGB collapsed by luma)."""
    try:
        with Image.open(path) as img:
            img.load()
            gray = img.convert("L")
    except FileNotFoundError:
        raise IngestionError(path, "no such file")
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as e:
        raise IngestionError(path, f"cannot decode image ({e})")
    return np.asarray(gray, dtype=np.float64)


def resize_to(img: np.ndarray, height: int = IMAGE_SIZE, width: int = IMAGE_SIZE) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.shape == (height, width):
        return img.copy()
    resized = Image.fromarray(img.astype(np.float32)).resize((width, height), Image.Resampling.BILINEAR)
    return np.asarray(resized, dtype=np.float64)


def normalize(img: np.ndarray, divisor: float = 255.0) -> np.ndarray:
    if divisor <= 0:
        raise ConfigurationError(f"divisor must be > 0, got {divisor}")
    return np.clip(np.asarray(img, dtype=np.float64) / divisor, 0.0, 1.0)


def ingest_image(path, config: IngestConfig = IngestConfig()) -> np.ndarray:
    return normalize(resize_to(load_image(path), config.size, config.size), config.divisor)


def assemble_dataset(manifest: DatasetManifest, dataset_id: DatasetId = None) -> DatasetSplits:
    dataset_id = dataset_id or manifest.dataset_id
    allowed = CLASS_NAMES[dataset_id]
    seen = set()
    for entry in manifest.entries:
        if entry.label not in allowed:
            raise ConfigurationError(f"{entry.path}: label {entry.label!r} is not part of {dataset_id.value} {allowed}")
        key = str(manifest.resolve(entry))
        if key in seen:
            raise ConfigurationError(f"duplicate manifest path {entry.path}")
        seen.add(key)
    manifest = DatasetManifest(dataset_id, manifest.entries, manifest.root)
    counts = Counter((e.split, e.label) for e in manifest.entries)
    return DatasetSplits(manifest.subset("train"), manifest.subset("test"), dict(sorted(counts.items())))


def count_audit(splits: DatasetSplits, dataset_id: DatasetId) -> dict:
    """Count summary keyed ``dataset/split/label``, checked against the published table."""
    expected = PUBLISHED_SPLIT_COUNTS[dataset_id]
    counts = {}
    mismatches = []
    for split in SPLITS:
        for label in CLASS_NAMES[dataset_id]:
            got = splits.counts.get((split, label), 0)
            counts[f"{dataset_id.value}/{split}/{label}"] = got
            if got != expected.get((split, label), 0):
                mismatches.append(f"{dataset_id.value}/{split}/{label}")
    return {
        "counts": counts,
        "total": splits.total,
        "published_total": PUBLISHED_TOTALS[dataset_id],
        "mismatches": mismatches,
    }


def cache_roundtrip(records: Sequence[CacheRecord], shape=(14, 14, 4), digest: bytes = bytes(32)) -> List[CacheRecord]:
    """Writes ``records`` to a scratch QVC1 file and reads them back."""
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "roundtrip.qvc"
        write_cache(path, records, shape, digest)
        _, back = read_cache(path)
    return back


def config_digest(*parts: dict) -> bytes:
    return hashlib.sha256(json.dumps(parts, sort_keys=True).encode("utf-8")).digest()


def manifest_fingerprint(manifest: DatasetManifest) -> dict:
    """Dataset, class order and every (path, label, split) row, in manifest order."""
    return {
        "dataset": manifest.dataset_id.value,
        "class_names": list(manifest.class_names),
        "entries": hashlib.sha256("\n".join(f"{e.path},{e.label},{e.split}" for e in manifest.entries)
                                  .encode("utf-8")).hexdigest(),
    }
