import numpy as np
import pytest

from sketchsimp.data import SyntheticSketchSpec, generate_synthetic


@pytest.fixture(scope="session")
def desk_pools():
    """Small synthetic dataset sized for 64px patches."""
    spec = SyntheticSketchSpec(canvas_size=80)
    return generate_synthetic(spec, 8, 8, 8, seed=11)


@pytest.fixture(scope="session")
def tiny_pools():
    """Minimal dataset for fast structural tests."""
    spec = SyntheticSketchSpec(canvas_size=72)
    return generate_synthetic(spec, 3, 3, 3, seed=12)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
