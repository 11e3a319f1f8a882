"""Shared fixtures: one small noise-free scene reused across test modules."""

import numpy as np
import pytest

from cadalign import io_scenes


@pytest.fixture(scope="session")
def small_scene():
    """Deterministic noise-free 3-object scene (seed 0)."""
    return io_scenes.generate_scene(models=3, extent=2.5, noise_sigma=0.0,
                                    seed=0, size_range=(0.35, 0.6))


@pytest.fixture(scope="session")
def noisy_scene():
    """Deterministic 3-object scene with 5 mm depth noise (seed 3)."""
    return io_scenes.generate_scene(models=3, extent=2.5, noise_sigma=0.005,
                                    seed=3, size_range=(0.35, 0.6))


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
