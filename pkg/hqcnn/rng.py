"""Seeded random generators.

Every random draw in the pipeline comes from a ``numpy.random.Generator`` over
PCG64, seeded from a ``SeedSequence`` whose spawn key is the path of the draw,
e.g. ``(seed, STAGE_SHOTS, image_index, patch_index)``. Draws therefore do not
depend on execution order or worker count.
"""
import numpy as np

from hqcnn import ConfigurationError

BIT_GENERATOR = "PCG64"

STAGE_CIRCUIT = 0
STAGE_SHOTS = 1
STAGE_INIT = 2
STAGE_SHUFFLE = 3
STAGE_DROPOUT = 4


def get_rng(seed: int, *path: int) -> np.random.Generator:
    """Returns a generator for ``seed`` and the derivation ``path``."""
    if seed < 0 or any(p < 0 for p in path):
        raise ConfigurationError(f"seeds must be non-negative, got {(seed,) + path}")
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=tuple(path))
    return np.random.Generator(np.random.PCG64(sequence))
