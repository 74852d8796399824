import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import scenarios  # noqa: E402


@pytest.fixture(scope="session")
def scene():
    return scenarios.default_scene()


@pytest.fixture(scope="session")
def frames():
    return scenarios.default_frames()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_unit(rng, n=None) -> np.ndarray:
    v = rng.normal(size=(3,) if n is None else (n, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def random_lighting(rng):
    from photorefine.shading import QuadraticLighting

    M = rng.normal(size=(3, 3, 3))
    A = 0.5 * (M + np.transpose(M, (0, 2, 1)))
    return QuadraticLighting(0.2 * A, 0.3 * rng.normal(size=(3, 3)), 1.0 + rng.uniform(size=3))
