"""Shared fixtures: small deterministic backends and images."""

import numpy as np
import pytest

from diffcompose.backends.analytic import (
    AnalyticGaussianBackend,
    AnalyticGaussianConfig,
)
from diffcompose.backends.toy_attention import (
    ToyAttentionBackend,
    ToyAttentionConfig,
)
from diffcompose.features import BoxPyramidExtractor


@pytest.fixture
def analytic_backend():
    """Analytic backend with all prior means at 0.5 (the shipped default)."""
    return AnalyticGaussianBackend(AnalyticGaussianConfig())


@pytest.fixture
def iid_backend():
    """Analytic backend with beta = 0, so Sigma = I."""
    return AnalyticGaussianBackend(AnalyticGaussianConfig(beta=0.0))


@pytest.fixture
def toy_backend():
    return ToyAttentionBackend(ToyAttentionConfig(seed=0))


@pytest.fixture
def extractor():
    return BoxPyramidExtractor(levels=3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def make_image(h: int, w: int, seed: int = 0) -> np.ndarray:
    """Smooth random (H, W, 3) test image in [0, 1]."""
    gen = np.random.default_rng(seed)
    base = gen.random((h, w, 3))
    smooth = (base + np.roll(base, 1, 0) + np.roll(base, 1, 1)) / 3.0
    return 0.25 + 0.5 * smooth


@pytest.fixture
def image16():
    return make_image(16, 16)
