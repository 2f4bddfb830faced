"""Quanvolutional preprocessing layer.

A 28x28 image is tiled row-major into non-overlapping 2x2 patches. Pixel
(r, c) of a patch is angle-encoded onto qubit 2r+c, one shared random circuit
runs on the 4-qubit register, and the Z statistic of qubit k becomes channel k
of output position (r/2, c/2).
"""
import concurrent.futures
from dataclasses import dataclass
from math import pi
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from hqcnn import ConfigurationError, DecodeMode, EncodingGate, IngestionError, ShapeError
from hqcnn.cache import CacheRecord, write_cache
from hqcnn.data import DatasetManifest, IngestConfig, config_digest, ingest_image, manifest_fingerprint
from hqcnn.plots import feature_map_png
from hqcnn.qsim import (Circuit, apply_matrix, draw_counts, estimate_z_from_shots, expectation_z, rotation_matrices,
                        run_batch, run_circuit, sample_shots, variance_from_expectation, z_signs, zero_state)
from hqcnn.rng import STAGE_CIRCUIT, STAGE_SHOTS, get_rng

N_QUBITS = 4
PATCH = 2
IMAGE_SHAPE = (28, 28)
FEATURE_SHAPE = (14, 14, 4)
CIRCUIT_GATES = ("RX", "RY", "RZ")


@dataclass(frozen=True)
class QuanvConfig:
    encoding_gate: EncodingGate = EncodingGate.RY
    shots: int = 0
    circuit_seed: int = 0
    circuit_depth: int = 1
    patch_size: int = PATCH
    stride: int = PATCH
    angle_scale: float = pi
    decode: DecodeMode = DecodeMode.Z_EXPECTATION
    shot_seed: int = 0

    def __post_init__(self):
        if self.patch_size != PATCH or self.stride != PATCH:
            raise ConfigurationError(f"patch size and stride are fixed at {PATCH}, got {self.patch_size}/{self.stride}")
        if self.angle_scale <= 0:
            raise ConfigurationError(f"angle_scale must be > 0, got {self.angle_scale}")
        if self.shots < 0:
            raise ConfigurationError(f"shots must be >= 0, got {self.shots}")
        if self.circuit_depth < 1:
            raise ConfigurationError(f"circuit depth must be >= 1, got {self.circuit_depth}")

    def to_dict(self) -> dict:
        return {
            "encoding_gate": self.encoding_gate.value,
            "shots": self.shots,
            "circuit_seed": self.circuit_seed,
            "circuit_depth": self.circuit_depth,
            "patch_size": self.patch_size,
            "stride": self.stride,
            "angle_scale": self.angle_scale,
            "decode": self.decode.value,
            "shot_seed": self.shot_seed,
        }

    def circuit(self) -> Circuit:
        return generate_random_circuit(self.circuit_seed, self.circuit_depth)


@dataclass(frozen=True)
class CacheSummary:
    records: int
    per_class: Dict[str, int]
    checksum: str
    digest: str
    shot_standard_error: float = 0.0

    def to_dict(self) -> dict:
        return {"records": self.records, "per_class": self.per_class, "checksum": self.checksum,
                "config_digest": self.digest, "shot_standard_error": self.shot_standard_error}


def generate_random_circuit(seed: int, depth: int) -> Circuit:
    """Per layer: a random RX/RY/RZ with angle in [0, 2pi) on each qubit, then a CNOT ring."""
    if depth < 1:
        raise ConfigurationError(f"circuit depth must be >= 1, got {depth}")
    rng = get_rng(seed, STAGE_CIRCUIT)
    ops = []
    for _ in range(depth):
        for q in range(N_QUBITS):
            gate = CIRCUIT_GATES[int(rng.integers(len(CIRCUIT_GATES)))]
            ops.append((gate, (float(rng.uniform(0.0, 2 * pi)),), (q,)))
        for q in range(N_QUBITS):
            ops.append(("CNOT", (), (q, (q + 1) % N_QUBITS)))
    return Circuit(N_QUBITS, tuple(ops))


def _check_pixels(values: np.ndarray, shape):
    if values.shape != shape:
        raise ShapeError(f"expected shape {shape}, got {values.shape}")
    if not np.all(np.isfinite(values)) or values.min() < 0.0 or values.max() > 1.0:
        raise ConfigurationError(f"pixel values must lie in [0, 1], got range [{values.min()}, {values.max()}]")


def encode_patch(patch, config: QuanvConfig) -> Circuit:
    patch = np.asarray(patch, dtype=np.float64)
    _check_pixels(patch, (PATCH, PATCH))
    gate = config.encoding_gate.value
    ops = [(gate, (config.angle_scale * patch[r, c],), (PATCH * r + c,)) for r in range(PATCH) for c in range(PATCH)]
    return Circuit(N_QUBITS, tuple(ops))


def _decode(z: np.ndarray, decode: DecodeMode) -> np.ndarray:
    return z if decode is DecodeMode.Z_EXPECTATION else (1.0 + z) / 2.0


def quanv_patch(patch, circuit: Circuit, config: QuanvConfig, rng_seed: Optional[int] = None,
                image_index: int = 0, patch_index: int = 0) -> np.ndarray:
    """Four features of one patch.

    With shots the draw uses ``(rng_seed, STAGE_SHOTS, image_index,
    patch_index)``, ``rng_seed`` defaulting to ``config.shot_seed``; this is
    the generator ``quanv_image`` uses for the same patch.
    """
    if circuit.n_qubits != N_QUBITS:
        raise ShapeError(f"quanvolution needs a {N_QUBITS}-qubit circuit, got {circuit.n_qubits}")
    state = run_circuit(encode_patch(patch, config) + circuit, zero_state(N_QUBITS))
    if config.shots == 0:
        z = [expectation_z(state, k) for k in range(N_QUBITS)]
    else:
        seed = config.shot_seed if rng_seed is None else rng_seed
        counts = sample_shots(state, config.shots, seed, STAGE_SHOTS, image_index, patch_index)
        z = [estimate_z_from_shots(counts, k) for k in range(N_QUBITS)]
    return _decode(np.array(z), config.decode)


def image_patches(image: np.ndarray) -> np.ndarray:
    """Row-major 2x2 tiles of ``image`` as rows of 4 pixels in qubit order."""
    h, w = image.shape
    return image.reshape(h // PATCH, PATCH, w // PATCH, PATCH).transpose(0, 2, 1, 3).reshape(-1, PATCH * PATCH)


def _patch_probabilities(image, config: QuanvConfig, circuit: Circuit) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    _check_pixels(image, IMAGE_SHAPE)
    patches = image_patches(image)
    amps = np.zeros((len(patches), 2 ** N_QUBITS), dtype=complex)
    amps[:, 0] = 1.0
    for k in range(N_QUBITS):
        gates = rotation_matrices(config.encoding_gate.value, config.angle_scale * patches[:, k])
        amps = apply_matrix(amps, gates, [k], N_QUBITS)
    return np.abs(run_batch(circuit, amps)) ** 2


def _z_signs() -> np.ndarray:
    return np.stack([z_signs(N_QUBITS, k) for k in range(N_QUBITS)], axis=1)


def _features(probs: np.ndarray, config: QuanvConfig, image_index: int) -> np.ndarray:
    signs = _z_signs()
    if config.shots == 0:
        z = probs @ signs
    else:
        counts = np.stack([
            draw_counts(p, config.shots, get_rng(config.shot_seed, STAGE_SHOTS, image_index, index))
            for index, p in enumerate(probs)
        ])
        z = (counts @ signs) / config.shots
    z = np.clip(z, -1.0, 1.0)
    return _decode(z, config.decode).reshape(FEATURE_SHAPE)


def _standard_error(probs: np.ndarray, config: QuanvConfig) -> float:
    if config.shots == 0:
        return 0.0
    z = np.clip(probs @ _z_signs(), -1.0, 1.0)
    se = np.sqrt(np.clip(variance_from_expectation(z), 0.0, None) / config.shots)
    if config.decode is DecodeMode.PROBABILITY_OF_ZERO:
        se = se / 2.0
    return float(se.mean())


def quanv_image(image, config: QuanvConfig, circuit: Optional[Circuit] = None, image_index: int = 0) -> np.ndarray:
    """Quanvolves a 28x28 image into a 14x14x4 feature map.

    All 196 patches are simulated as one batch of statevectors. With shots,
    the draw for patch p uses the generator ``(shot_seed, STAGE_SHOTS,
    image_index, p)``.
    """
    circuit = config.circuit() if circuit is None else circuit
    return _features(_patch_probabilities(image, config, circuit), config, image_index)


def shot_standard_error(image, config: QuanvConfig, circuit: Optional[Circuit] = None) -> float:
    """Mean standard error of the shot-estimated features of ``image``, sqrt((1 - <Z>^2) / shots).

    Zero in exact mode; halved for p0 decoding.
    """
    circuit = config.circuit() if circuit is None else circuit
    return _standard_error(_patch_probabilities(image, config, circuit), config)


def cache_digest(config: QuanvConfig, ingest: IngestConfig, manifest: DatasetManifest) -> bytes:
    """Digest stored in both split caches: quanvolution and ingest settings plus the full manifest."""
    return config_digest(config.to_dict(), ingest.to_dict(), manifest_fingerprint(manifest))


def preprocess_dataset(manifest: DatasetManifest, config: QuanvConfig, cache_path, ingest: IngestConfig = IngestConfig(),
                       jobs: int = 1, index_offset: int = 0, digest: Optional[bytes] = None) -> CacheSummary:
    """Quanvolves every manifest image and writes a QVC1 cache.

    Images that cannot be read are collected; if there are any, no cache is
    left behind and an ``IngestionError`` listing them is raised. ``digest``
    defaults to the digest of ``manifest`` itself; split caches of one
    manifest pass the digest of the whole manifest. ``index_offset`` is added
    to the manifest position to form the image index of the shot seeds.
    """
    circuit = config.circuit()
    features: List[Optional[np.ndarray]] = [None] * len(manifest.entries)
    errors: List[float] = [0.0] * len(manifest.entries)
    failures = []

    def work(index):
        entry = manifest.entries[index]
        probs = _patch_probabilities(ingest_image(manifest.resolve(entry), ingest), config, circuit)
        return _features(probs, config, index_offset + index), _standard_error(probs, config)

    with concurrent.futures.ThreadPoolExecutor(max(1, jobs)) as thp:
        pending = {thp.submit(work, index): index for index in range(len(manifest.entries))}
        for future in concurrent.futures.as_completed(pending):
            index = pending[future]
            try:
                features[index], errors[index] = future.result()
            except IngestionError as e:
                failures.append(str(e))

    digest = cache_digest(config, ingest, manifest) if digest is None else digest
    cache_path = Path(cache_path)
    if failures:
        if cache_path.exists():
            cache_path.unlink()
        raise IngestionError(cache_path, f"{len(failures)} image(s) failed: " + "; ".join(sorted(failures)))

    records = [CacheRecord(manifest.label_index(e), e.path, f) for e, f in zip(manifest.entries, features)]
    checksum = write_cache(cache_path, records, FEATURE_SHAPE, digest)
    per_class = {name: 0 for name in manifest.class_names}
    for entry in manifest.entries:
        per_class[entry.label] += 1
    mean_error = float(np.mean(errors)) if errors else 0.0
    return CacheSummary(len(records), per_class, checksum, digest.hex(), mean_error)


def render_feature_map(image, feature_map: np.ndarray, path, title: str = ""):
    """Saves the input image and its four quanvolved channels side by side as PNG."""
    feature_map_png(np.asarray(image), np.asarray(feature_map), path, title)
