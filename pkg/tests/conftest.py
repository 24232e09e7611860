import numpy as np
import pytest

from hepeval.volume import BinaryMask, Geometry, ProbVolume


@pytest.fixture
def unit_geometry():
    return Geometry(dims=(8, 8, 8), spacing=(1.0, 1.0, 1.0))


def random_prob_volume(geometry: Geometry, seed: int, low: float = 0.05, high: float = 0.95) -> ProbVolume:
    """Random prediction with distinct per-voxel values, away from clip bands."""
    rng = np.random.default_rng(seed)
    values = rng.uniform(low, high, size=geometry.shape)
    return ProbVolume(geometry, values)


def random_mask(geometry: Geometry, seed: int, density: float = 0.3) -> BinaryMask:
    rng = np.random.default_rng(seed)
    return BinaryMask(geometry, rng.random(geometry.shape) < density)


def separated_prob_volume(geometry: Geometry, seed: int) -> ProbVolume:
    """Random volume whose values have a guaranteed minimum gap.

    A permutation of an evenly spaced grid keeps every pair of values at
    least ~0.8/N apart, so finite-difference steps cannot cross pooling or
    top-k ties.
    """
    rng = np.random.default_rng(seed)
    n = int(np.prod(geometry.shape))
    values = np.linspace(0.1, 0.9, n)
    rng.shuffle(values)
    return ProbVolume(geometry, values.reshape(geometry.shape))
