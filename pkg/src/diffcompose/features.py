"""Feature extractors for the perceptual loss.

The built-in extractor is a box-blur pyramid: level 0 is the image itself,
each further level is a 3x3 zero-padded box blur followed by a stride-2
subsample.  It is linear, so its vector-Jacobian product is the exact
transpose (scatter-add of the same strided slices), which keeps perceptual
gradients exactly checkable.

Pretrained feature stacks (e.g. a VGG-16 truncated at relu1_2, relu2_2,
relu3_3) plug in through `load_extractor` with the same contract; none are
bundled here.
"""

from __future__ import annotations

import importlib
from abc import ABC, abstractmethod
from typing import Sequence

import numpy as np

from .errors import CapabilityError, ConfigurationError, ShapeError


class FeatureExtractor(ABC):
    """Maps an image to a list of feature arrays.

    Extractors declaring exact_vjp must implement extract_vjp so the
    perceptual gradient can be computed without finite differences.
    """

    name: str = "extractor"
    exact_vjp: bool = False

    @abstractmethod
    def extract(self, image: np.ndarray) -> list[np.ndarray]:
        """Feature arrays for an (H, W, C) image, finest first."""

    def extract_vjp(self, image: np.ndarray,
                    cotangents: Sequence[np.ndarray]) -> np.ndarray:
        """Pull per-level cotangents back to an image-shaped gradient."""
        raise CapabilityError(
            f"extractor {self.name!r} does not provide an exact VJP"
        )


def _blur_down(x: np.ndarray) -> np.ndarray:
    """3x3 box blur with zero padding, then stride-2 subsample."""
    h, w = x.shape[:2]
    oh, ow = (h + 1) // 2, (w + 1) // 2
    pad = ((1, 1), (1, 1)) + ((0, 0),) * (x.ndim - 2)
    xp = np.pad(x, pad)
    acc = np.zeros((oh, ow) + x.shape[2:], dtype=np.float64)
    for u in range(3):
        for v in range(3):
            acc += xp[u:u + 2 * oh - 1:2, v:v + 2 * ow - 1:2]
    return acc / 9.0


def _blur_down_transpose(g: np.ndarray, h: int, w: int) -> np.ndarray:
    """Exact transpose of _blur_down back to an (h, w, ...) array."""
    oh, ow = (h + 1) // 2, (w + 1) // 2
    if g.shape[:2] != (oh, ow):
        raise ShapeError(
            f"cotangent spatial shape {g.shape[:2]} != expected ({oh}, {ow})"
        )
    acc = np.zeros((h + 2, w + 2) + g.shape[2:], dtype=np.float64)
    for u in range(3):
        for v in range(3):
            acc[u:u + 2 * oh - 1:2, v:v + 2 * ow - 1:2] += g
    return acc[1:h + 1, 1:w + 1] / 9.0


class BoxPyramidExtractor(FeatureExtractor):
    """Identity plus `levels` box-blur downsamplings."""

    name = "box-pyramid"
    exact_vjp = True

    def __init__(self, levels: int = 3):
        if levels < 0:
            raise ShapeError(f"levels must be >= 0, got {levels}")
        self.levels = levels

    def extract(self, image: np.ndarray) -> list[np.ndarray]:
        x = np.asarray(image, dtype=np.float64)
        if x.ndim not in (2, 3):
            raise ShapeError(f"image must be (H, W) or (H, W, C), got {x.shape}")
        feats = [x.copy()]
        for _ in range(self.levels):
            x = _blur_down(x)
            feats.append(x)
        return feats

    def extract_vjp(self, image: np.ndarray,
                    cotangents: Sequence[np.ndarray]) -> np.ndarray:
        x = np.asarray(image, dtype=np.float64)
        if len(cotangents) != self.levels + 1:
            raise ShapeError(
                f"expected {self.levels + 1} cotangents, got {len(cotangents)}"
            )
        # Track the spatial shape at each level to invert the strides.
        shapes = [x.shape[:2]]
        for _ in range(self.levels):
            h, w = shapes[-1]
            shapes.append(((h + 1) // 2, (w + 1) // 2))
        grad = np.array(cotangents[-1], dtype=np.float64, copy=True)
        for level in range(self.levels - 1, -1, -1):
            h, w = shapes[level]
            grad = _blur_down_transpose(grad, h, w)
            grad = grad + np.asarray(cotangents[level], dtype=np.float64)
        return grad


def load_extractor(spec: str, **options) -> FeatureExtractor:
    """Load a feature extractor.

    "box-pyramid" returns the built-in pyramid (option: levels).  Any other
    spec must be a "module:factory" string whose factory accepts the given
    options and returns a FeatureExtractor (the hook used to attach
    pretrained backbones such as VGG-16 with layers relu1_2/relu2_2/relu3_3).
    """
    if spec == "box-pyramid":
        return BoxPyramidExtractor(**options)
    module_name, sep, factory_name = spec.partition(":")
    if not sep:
        raise ConfigurationError(
            f"extractor spec {spec!r} must be 'box-pyramid' or "
            "'package.module:factory'"
        )
    try:
        module = importlib.import_module(module_name)
    except ImportError as exc:
        raise ConfigurationError(
            f"cannot import extractor module {module_name!r}: {exc}"
        ) from exc
    factory = getattr(module, factory_name, None)
    if factory is None:
        raise ConfigurationError(
            f"extractor module {module_name!r} has no attribute "
            f"{factory_name!r}"
        )
    extractor = factory(**options)
    if not isinstance(extractor, FeatureExtractor):
        raise ConfigurationError(
            f"extractor factory {spec!r} returned "
            f"{type(extractor).__name__}, not a FeatureExtractor"
        )
    return extractor
