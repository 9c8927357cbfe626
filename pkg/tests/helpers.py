"""Shared builders for the test-suite."""

import numpy as np

from vascreg.geometry import CameraModel, look_at
from vascreg.synth import DataConfig

K_DEFAULT = DataConfig().K


def random_camera(rng, distance=800.0, K=K_DEFAULT) -> CameraModel:
    """Camera on a sphere around the origin, looking at it, with a random roll."""
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    up = rng.normal(size=3)
    R, t = look_at(distance * d, np.zeros(3), up)
    return CameraModel(K, R, t)


def random_points(rng, n=40, extent=40.0) -> np.ndarray:
    return rng.uniform(-extent, extent, size=(n, 3))
