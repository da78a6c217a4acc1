"""Deterministic attention backend.

A small transformer-style noise predictor whose weights are drawn once from
a seeded generator, so every prediction is a pure function of
(seed, latent, t, prompt tag, features, control).  It exists to exercise the
attention-control machinery (exclusion, record/replace) end to end without
pretrained weights.

The prediction is a base noise estimate sqrt(1 - alpha_bar_t) * z_t plus an
attention-modulated residual.  The base term anchors latent optimization:
the difference of two guided predictions pulls the optimized latent back
toward the reference, so editing gradients stay bounded.  Conditioning is
an additive per-tag token bias; the source and target tags share one
conditional bias vector, so prompt pairs that differ only in wording give
identical predictions and the editing signal comes from attention control
and injected features, not from prompt text.

Latent tokens are formed by average-pooling the latent onto a base grid
capped at `max_tokens` tokens; the second half of the layers runs one
halving coarser, giving a multi-resolution layout like real denoisers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from ..attention import controlled_attention
from ..errors import RangeError, ShapeError
from ..resize import resize_area
from .base import (
    BackendInfo,
    ConditionFeatures,
    DiffusionBackend,
    PromptEmbedding,
)
from .scheduler import Scheduler, TOY_T_MAX


@dataclass(frozen=True)
class ToyAttentionConfig:
    """Shape and scale knobs for the toy attention predictor."""

    seed: int = 0
    layer_count: int = 2
    d_model: int = 16
    head_dim: int = 8
    channels: int = 3
    max_tokens: int = 1024
    tag_bias_scale: float = 0.01
    time_scale: float = 0.5
    output_scale: float = 0.1
    feature_scale: float = 0.1
    t_max: int = TOY_T_MAX
    prompt_tags: Optional[Mapping[str, str]] = None

    def __post_init__(self):
        if self.layer_count < 1:
            raise RangeError(f"layer_count must be >= 1, got {self.layer_count}")
        if self.max_tokens < 4:
            raise RangeError(f"max_tokens must be >= 4, got {self.max_tokens}")
        if self.d_model < 2 or self.head_dim < 1 or self.channels < 1:
            raise RangeError(
                "d_model, head_dim, and channels must be positive "
                f"(got {self.d_model}, {self.head_dim}, {self.channels})"
            )


def _sinusoid_positions(n_tokens: int, d_model: int) -> np.ndarray:
    """Standard sinusoidal positional encoding over flat token index."""
    pos = np.arange(n_tokens, dtype=np.float64)[:, None]
    i = np.arange(d_model, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(i / 2) / d_model)
    return np.where(i.astype(int) % 2 == 0, np.sin(angle), np.cos(angle))


def _pool_grid(x: np.ndarray, fy: int, fx: int) -> np.ndarray:
    """Average-pool an (h, w, c) grid by integer factors."""
    h, w, c = x.shape
    return x.reshape(h // fy, fy, w // fx, fx, c).mean(axis=(1, 3))


def _up_grid(y: np.ndarray, fy: int, fx: int) -> np.ndarray:
    """Nearest upsample of an (h, w, c) grid by integer factors."""
    return np.repeat(np.repeat(y, fy, axis=0), fx, axis=1)


class ToyAttentionBackend(DiffusionBackend):
    """Seeded transformer-style predictor with controllable attention."""

    def __init__(self, config: ToyAttentionConfig = ToyAttentionConfig()):
        super().__init__(prompt_tags=config.prompt_tags)
        self.config = config
        self.scheduler = Scheduler.toy_linear(config.t_max)
        rng = np.random.default_rng(config.seed)
        c, dm, dh = config.channels, config.d_model, config.head_dim
        n = config.layer_count
        self._w_in = rng.standard_normal((c, dm)) / np.sqrt(c)
        self._w_q = [rng.standard_normal((dm, dh)) / np.sqrt(dm) for _ in range(n)]
        self._w_k = [rng.standard_normal((dm, dh)) / np.sqrt(dm) for _ in range(n)]
        self._w_v = [rng.standard_normal((dm, dh)) / np.sqrt(dm) for _ in range(n)]
        self._w_o = [rng.standard_normal((dh, dm)) / np.sqrt(dh) for _ in range(n)]
        self._w_out = rng.standard_normal((dm, c)) / np.sqrt(dm)
        bias_uncond = config.tag_bias_scale * rng.standard_normal(dm)
        bias_cond = config.tag_bias_scale * rng.standard_normal(dm)
        self._tag_bias = {
            "unconditional": bias_uncond,
            "source": bias_cond,
            "target": bias_cond,
        }
        self._time_freq = rng.uniform(1.0, 20.0, size=dm)
        self._time_phase = rng.uniform(0.0, 2.0 * np.pi, size=dm)
        # feature maps add to per-head K and V, so they live in head space
        self._w_feat = config.feature_scale * rng.standard_normal((c, dh)) / np.sqrt(c)

    def info(self) -> BackendInfo:
        return BackendInfo(
            name="toy-attention",
            compression_factor=1,
            latent_channels=self.config.channels,
            schedule_name="toy-linear",
            t_max=self.scheduler.t_max_absolute,
            feature_injection=True,
            attention_hooks=True,
            exact_vjp=False,
        )

    # -- codec (identity; latent is the channels-first image) ----------------

    def encode(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != self.config.channels:
            raise ShapeError(
                f"image must be (H, W, {self.config.channels}), got {img.shape}"
            )
        return np.transpose(img, (2, 0, 1)).copy()

    def decode(self, latent: np.ndarray) -> np.ndarray:
        z = np.asarray(latent, dtype=np.float64)
        if z.ndim != 3 or z.shape[0] != self.config.channels:
            raise ShapeError(
                f"latent must be ({self.config.channels}, h, w), got {z.shape}"
            )
        return np.transpose(z, (1, 2, 0)).copy()

    def decode_vjp(self, latent: np.ndarray,
                   image_cotangent: np.ndarray) -> np.ndarray:
        u = np.asarray(image_cotangent, dtype=np.float64)
        if u.ndim != 3 or u.shape[2] != self.config.channels:
            raise ShapeError(
                f"image cotangent must be (H, W, {self.config.channels}), "
                f"got {u.shape}"
            )
        return np.transpose(u, (2, 0, 1)).copy()

    # -- attention layout -----------------------------------------------------

    def attention_layout(self, latent_shape) -> tuple[tuple[int, tuple[int, int]], ...]:
        if len(latent_shape) != 3:
            raise ShapeError(f"latent shape must be (c, h, w), got {latent_shape}")
        _, h, w = latent_shape
        bh, bw = int(h), int(w)
        while bh * bw > self.config.max_tokens and bh % 2 == 0 and bw % 2 == 0:
            bh //= 2
            bw //= 2
        n = self.config.layer_count
        coarse_ok = bh % 2 == 0 and bw % 2 == 0 and (bh // 2) * (bw // 2) >= 4
        layout = []
        for layer in range(n):
            if n >= 2 and layer >= (n + 1) // 2 and coarse_ok:
                layout.append((layer, (bh // 2, bw // 2)))
            else:
                layout.append((layer, (bh, bw)))
        return tuple(layout)

    # -- conditioning ----------------------------------------------------------

    def condition_features(self, image: np.ndarray,
                           provenance: str) -> ConditionFeatures:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != self.config.channels:
            raise ShapeError(
                f"condition image must be (H, W, {self.config.channels}), "
                f"got {img.shape}"
            )
        layout = self.attention_layout((self.config.channels,) + img.shape[:2])
        maps = {}
        for _, (lh, lw) in layout:
            if (lh, lw) in maps:
                continue
            grid = resize_area(img, lh, lw)
            maps[(lh, lw)] = grid.reshape(lh * lw, self.config.channels) @ self._w_feat
        return ConditionFeatures(maps=maps, provenance=provenance)

    # -- prediction --------------------------------------------------------------

    def _time_embedding(self, t: int) -> np.ndarray:
        phase = (t / self.scheduler.t_max_absolute) * self._time_freq
        return self.config.time_scale * np.sin(phase + self._time_phase)

    def predict_noise(
        self,
        z_t: np.ndarray,
        t: int,
        embedding: PromptEmbedding,
        features: Optional[ConditionFeatures] = None,
        control=None,
    ) -> np.ndarray:
        z = np.asarray(z_t, dtype=np.float64)
        if z.ndim != 3 or z.shape[0] != self.config.channels:
            raise ShapeError(
                f"latent must be ({self.config.channels}, h, w), got {z.shape}"
            )
        alpha_bar = self.scheduler.alpha_bar(t)
        _, h, w = z.shape
        layout = self.attention_layout(z.shape)
        bh, bw = layout[0][1]
        img = np.transpose(z, (1, 2, 0))
        base = _pool_grid(img, h // bh, w // bw) if (bh, bw) != (h, w) else img
        tokens = base.reshape(bh * bw, self.config.channels) @ self._w_in
        bias = self._tag_bias[embedding.tag] + self._time_embedding(t)
        x = tokens + _sinusoid_positions(bh * bw, self.config.d_model) + bias
        for layer, (lh, lw) in layout:
            if (lh, lw) == (bh, bw):
                xl = x
            else:
                grid = x.reshape(bh, bw, self.config.d_model)
                xl = _pool_grid(grid, bh // lh, bw // lw).reshape(
                    lh * lw, self.config.d_model)
            q = (xl @ self._w_q[layer])[None]
            k = (xl @ self._w_k[layer])[None]
            v = (xl @ self._w_v[layer])[None]
            if features is not None:
                fmap = features.maps.get((lh, lw))
                if fmap is None:
                    raise ShapeError(
                        f"condition features missing resolution ({lh}, {lw})"
                    )
                k = k + fmap[None]
                v = v + fmap[None]
            out = controlled_attention(control, layer, (lh, lw), q, k, v)
            y = out[0] @ self._w_o[layer]
            if (lh, lw) != (bh, bw):
                y = _up_grid(y.reshape(lh, lw, self.config.d_model),
                             bh // lh, bw // lw).reshape(
                                 bh * bw, self.config.d_model)
            x = x + y
        out_grid = (x @ self._w_out).reshape(bh, bw, self.config.channels)
        if (bh, bw) != (h, w):
            out_grid = _up_grid(out_grid, h // bh, w // bw)
        residual = np.transpose(out_grid, (2, 0, 1))
        return np.sqrt(1.0 - alpha_bar) * z + self.config.output_scale * residual
