"""Closed-form Gaussian backend.

The prior over latents is N(mu_tag, Sigma) with Sigma diagonal in the 2-D
Fourier basis: eigenvalue 1 / (1 + beta * |k|^2) at integer frequency k,
applied independently per channel.  Under the forward noising map
z_t = sqrt(ab) z + sqrt(1-ab) eps the posterior mean of eps given z_t is a
linear filter, so predict_noise is exact, fast (two FFTs), and has an exact
vector-Jacobian product.  This is the reference oracle for every gradient
in the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Mapping, Optional, Union

import numpy as np

from ..errors import RangeError, ShapeError
from .base import (
    BackendInfo,
    ConditionFeatures,
    DiffusionBackend,
    PromptEmbedding,
    PROMPT_TAGS,
)
from .scheduler import Scheduler, TOY_T_MAX

MeanLike = Union[float, np.ndarray]


def _default_means() -> dict[str, float]:
    return {tag: 0.5 for tag in PROMPT_TAGS}


@dataclass(frozen=True)
class AnalyticGaussianConfig:
    """Parameters of the Gaussian prior.

    Args:
        beta: spectral smoothness; 0 gives an i.i.d. prior (Sigma = I),
            larger values damp high frequencies.
        means: per-tag prior mean; scalar, (h, w), or (c, h, w) array.
        t_max: schedule length for the linear toy schedule.
        prompt_tags: extra prompt-text -> tag registrations.
    """

    beta: float = 4.0
    means: Mapping[str, MeanLike] = dc_field(default_factory=_default_means)
    t_max: int = TOY_T_MAX
    prompt_tags: Optional[Mapping[str, str]] = None

    def __post_init__(self):
        if self.beta < 0:
            raise RangeError(f"beta must be >= 0, got {self.beta}")
        for tag in self.means:
            if tag not in PROMPT_TAGS:
                raise RangeError(
                    f"mean tag {tag!r} must be one of {PROMPT_TAGS}"
                )


class AnalyticGaussianBackend(DiffusionBackend):
    """Exact posterior-mean noise predictor for the spectral Gaussian prior."""

    def __init__(self, config: AnalyticGaussianConfig = AnalyticGaussianConfig()):
        super().__init__(prompt_tags=config.prompt_tags)
        self.config = config
        self.scheduler = Scheduler.toy_linear(config.t_max)
        self._means = {tag: _default_means()[tag] for tag in PROMPT_TAGS}
        for tag, value in config.means.items():
            if isinstance(value, (int, float)):
                self._means[tag] = float(value)
            else:
                self._means[tag] = np.asarray(value, dtype=np.float64)
        self._eig_cache: dict[tuple[int, int], np.ndarray] = {}

    def info(self) -> BackendInfo:
        return BackendInfo(
            name="analytic-gaussian",
            compression_factor=1,
            latent_channels=3,
            schedule_name="toy-linear",
            t_max=self.scheduler.t_max_absolute,
            feature_injection=False,
            attention_hooks=False,
            exact_vjp=True,
        )

    # -- prior geometry -----------------------------------------------------

    def covariance_eigenvalues(self, h: int, w: int) -> np.ndarray:
        """Sigma eigenvalues on the (h, w) Fourier grid (integer frequencies)."""
        key = (h, w)
        cached = self._eig_cache.get(key)
        if cached is None:
            fy = np.fft.fftfreq(h, d=1.0 / h)
            fx = np.fft.fftfreq(w, d=1.0 / w)
            ksq = fy[:, None] ** 2 + fx[None, :] ** 2
            cached = 1.0 / (1.0 + self.config.beta * ksq)
            self._eig_cache[key] = cached
        return cached

    def mean_field(self, tag: str, shape: tuple[int, ...]) -> np.ndarray:
        """Prior mean for a tag, broadcast to a (c, h, w) latent shape."""
        if tag not in self._means:
            raise RangeError(f"unknown prompt tag {tag!r}")
        value = self._means[tag]
        out = np.empty(shape, dtype=np.float64)
        if isinstance(value, float):
            out.fill(value)
            return out
        if value.shape == shape:
            return value.astype(np.float64, copy=True)
        if value.shape == shape[1:]:
            out[:] = value[None, :, :]
            return out
        raise ShapeError(
            f"mean for tag {tag!r} has shape {value.shape}, incompatible "
            f"with latent shape {shape}"
        )

    def _posterior_filter(self, x: np.ndarray, ab: float) -> np.ndarray:
        """Apply (ab * Sigma + (1 - ab) I)^{-1} per channel via FFT."""
        lam = self.covariance_eigenvalues(x.shape[-2], x.shape[-1])
        denom = ab * lam + (1.0 - ab)
        spec = np.fft.fft2(x, axes=(-2, -1)) / denom
        return np.fft.ifft2(spec, axes=(-2, -1)).real

    # -- backend contract ----------------------------------------------------

    def encode(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ShapeError(f"image must be (H, W, 3), got {img.shape}")
        return np.transpose(img, (2, 0, 1)).copy()

    def decode(self, latent: np.ndarray) -> np.ndarray:
        z = np.asarray(latent, dtype=np.float64)
        if z.ndim != 3 or z.shape[0] != 3:
            raise ShapeError(f"latent must be (3, h, w), got {z.shape}")
        return np.transpose(z, (1, 2, 0)).copy()

    def decode_vjp(self, latent: np.ndarray,
                   image_cotangent: np.ndarray) -> np.ndarray:
        u = np.asarray(image_cotangent, dtype=np.float64)
        if u.ndim != 3 or u.shape[2] != 3:
            raise ShapeError(
                f"image cotangent must be (H, W, 3), got {u.shape}"
            )
        return np.transpose(u, (2, 0, 1)).copy()

    def _validate_latent(self, z_t: np.ndarray) -> np.ndarray:
        z = np.asarray(z_t, dtype=np.float64)
        if z.ndim != 3:
            raise ShapeError(f"latent must be (c, h, w), got {z.shape}")
        return z

    def predict_noise(
        self,
        z_t: np.ndarray,
        t: int,
        embedding: PromptEmbedding,
        features: Optional[ConditionFeatures] = None,
        control=None,
    ) -> np.ndarray:
        z = self._validate_latent(z_t)
        if features is not None:
            self._warn_once(
                "features",
                "analytic-gaussian backend ignores condition features",
            )
        if control is not None:
            self._warn_once(
                "control",
                "analytic-gaussian backend has no attention sites; "
                "control state is ignored",
            )
        ab = self.scheduler.alpha_bar(t)
        mu = self.mean_field(embedding.tag, z.shape)
        resid = z - np.sqrt(ab) * mu
        return np.sqrt(1.0 - ab) * self._posterior_filter(resid, ab)

    def predict_noise_vjp(
        self,
        z_t: np.ndarray,
        t: int,
        embedding: PromptEmbedding,
        cotangent: np.ndarray,
        features: Optional[ConditionFeatures] = None,
        control=None,
    ) -> np.ndarray:
        z = self._validate_latent(z_t)
        u = np.asarray(cotangent, dtype=np.float64)
        if u.shape != z.shape:
            raise ShapeError(
                f"cotangent shape {u.shape} != latent shape {z.shape}"
            )
        # The predictor is an affine map with a symmetric linear part, so the
        # VJP is the same filter applied to the cotangent.
        ab = self.scheduler.alpha_bar(t)
        return np.sqrt(1.0 - ab) * self._posterior_filter(u, ab)

    # -- sampling ------------------------------------------------------------

    def sample_prior(self, tag: str, shape: tuple[int, int, int],
                     rng: np.random.Generator) -> np.ndarray:
        """Exact draw from N(mu_tag, Sigma) at a (c, h, w) latent shape."""
        c, h, w = shape
        lam = self.covariance_eigenvalues(h, w)
        white = rng.standard_normal((c, h, w))
        spec = np.fft.fft2(white, axes=(-2, -1)) * np.sqrt(lam)
        fluct = np.fft.ifft2(spec, axes=(-2, -1)).real
        return self.mean_field(tag, shape) + fluct
