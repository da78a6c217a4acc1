"""Attention primitives and key/value control.

Self-attention sites inside a backend call `controlled_attention` with the
current control state, which can pass plain attention through, drop masked
context tokens (exclusion), record key/value tensors into a cache, or swap
in previously recorded tensors behind a step/layer gate.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .errors import (
    AbsentEntryError,
    DuplicateEntryError,
    EmptyContextError,
    RangeError,
    ShapeError,
)
from .resize import resize_area


def scaled_dot_attention(q: np.ndarray, k: np.ndarray,
                         v: np.ndarray) -> np.ndarray:
    """Softmax(q k^T / sqrt(d)) v with a numerically stable softmax.

    Args:
        q: (B, lq, d) queries.
        k: (B, lk, d) keys.
        v: (B, lk, dv) values.

    Returns:
        (B, lq, dv) attention output.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeError(
            f"q, k, v must be 3-D (B, l, d); got {q.shape}, {k.shape}, "
            f"{v.shape}"
        )
    if q.shape[0] != k.shape[0] or k.shape[0] != v.shape[0]:
        raise ShapeError(
            f"batch sizes differ: {q.shape[0]}, {k.shape[0]}, {v.shape[0]}"
        )
    if q.shape[2] != k.shape[2]:
        raise ShapeError(
            f"query dim {q.shape[2]} != key dim {k.shape[2]}"
        )
    if k.shape[1] != v.shape[1]:
        raise ShapeError(
            f"key count {k.shape[1]} != value count {v.shape[1]}"
        )
    if k.shape[1] < 1:
        raise EmptyContextError("attention requires at least one context token")
    scores = q @ np.transpose(k, (0, 2, 1)) / np.sqrt(q.shape[2])
    scores -= scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=-1, keepdims=True)
    return weights @ v


@dataclass(frozen=True)
class TokenMask:
    """Boolean per-token mask at one attention resolution.

    selected[i] is True where the pixel mask covers token i; selected tokens
    are the ones exclusion drops from the attention context.
    """

    selected: np.ndarray = field(repr=False)
    resolution: tuple[int, int]
    threshold: float


def build_token_mask(mask: np.ndarray, resolution: tuple[int, int],
                     threshold: float = 0.5) -> TokenMask:
    """Downsample a pixel mask to per-token booleans at one resolution.

    The mask is area-averaged onto the (h, w) token grid, flattened
    row-major, and thresholded strictly: a token is selected iff its
    averaged coverage exceeds `threshold`.
    """
    if not 0.0 <= threshold <= 1.0:
        raise RangeError(f"threshold must lie in [0, 1], got {threshold}")
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"mask must be (H, W), got shape {m.shape}")
    if m.min() < 0.0 or m.max() > 1.0:
        raise RangeError("mask values must lie in [0, 1]")
    h, w = resolution
    coverage = resize_area(m, h, w)
    selected = coverage.reshape(-1) > threshold
    return TokenMask(selected=selected, resolution=(h, w),
                     threshold=float(threshold))


def exclude_kv(k: np.ndarray, v: np.ndarray,
               token_mask: TokenMask) -> tuple[np.ndarray, np.ndarray]:
    """Drop selected tokens from the key/value context, preserving order.

    Raises EmptyContextError if every token is selected (no context left).
    """
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    n = token_mask.selected.shape[0]
    if k.ndim != 3 or v.ndim != 3 or k.shape[1] != n or v.shape[1] != n:
        raise ShapeError(
            f"k/v token counts {k.shape}/{v.shape} do not match mask "
            f"length {n}"
        )
    if token_mask.selected.all():
        h, w = token_mask.resolution
        raise EmptyContextError(
            f"mask covers entire image; no context tokens remain at "
            f"attention resolution ({h}, {w})"
        )
    keep = ~token_mask.selected
    return k[:, keep, :].copy(), v[:, keep, :].copy()


class KVCache:
    """Recorded key/value tensors keyed by (layer, tag).

    A slot may be written once per clear(); double writes raise, and reads
    of absent slots raise, so recording and replacement stay in lockstep.
    """

    def __init__(self):
        self._store: dict[tuple[int, str], tuple[np.ndarray, np.ndarray]] = {}

    def record(self, layer: int, tag: str, k: np.ndarray,
               v: np.ndarray) -> None:
        key = (int(layer), str(tag))
        if key in self._store:
            raise DuplicateEntryError(
                f"cache slot (layer={layer}, tag={tag!r}) written twice "
                "without clear()"
            )
        self._store[key] = (np.array(k, dtype=np.float64, copy=True),
                            np.array(v, dtype=np.float64, copy=True))

    def fetch(self, layer: int, tag: str) -> tuple[np.ndarray, np.ndarray]:
        key = (int(layer), str(tag))
        entry = self._store.get(key)
        if entry is None:
            raise AbsentEntryError(
                f"no recorded key/value entry for (layer={layer}, "
                f"tag={tag!r})"
            )
        return entry

    def has(self, layer: int, tag: str) -> bool:
        return (int(layer), str(tag)) in self._store

    def clear(self) -> None:
        self._store.clear()

    def __len__(self) -> int:
        return len(self._store)


@dataclass(frozen=True)
class ReplacementGate:
    """Replacement activates strictly after both thresholds.

    Steps are 1-based, layers 0-based; replacement fires at optimization
    step > step_threshold and attention layer index > layer_threshold.
    """

    step_threshold: int = 400
    layer_threshold: int = 10


def should_replace(gate: ReplacementGate, step: int, layer: int) -> bool:
    """Strict-inequality gate on (step, layer)."""
    return step > gate.step_threshold and layer > gate.layer_threshold


class AttentionControl(ABC):
    """Hook contract invoked at every self-attention site."""

    mode: str = "none"

    @abstractmethod
    def attend(self, layer: int, resolution: tuple[int, int], q: np.ndarray,
               k: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Produce the attention output for one site."""


class PlainAttention(AttentionControl):
    """No control: plain scaled dot-product attention."""

    mode = "none"

    def attend(self, layer, resolution, q, k, v):
        return scaled_dot_attention(q, k, v)


class ExcludeContext(AttentionControl):
    """Drop masked context tokens at every self-attention site."""

    mode = "exclude"

    def __init__(self, masks: Mapping[tuple[int, int], TokenMask]):
        self.masks = dict(masks)

    def attend(self, layer, resolution, q, k, v):
        mask = self.masks.get(tuple(resolution))
        if mask is None:
            raise ShapeError(
                f"no token mask was built for attention resolution "
                f"{tuple(resolution)}"
            )
        k2, v2 = exclude_kv(k, v, mask)
        return scaled_dot_attention(q, k2, v2)


class RecordContext(AttentionControl):
    """Record key/value tensors into a cache, then attend normally."""

    mode = "record"

    def __init__(self, cache: KVCache, tag: str):
        self.cache = cache
        self.tag = tag

    def attend(self, layer, resolution, q, k, v):
        self.cache.record(layer, self.tag, k, v)
        return scaled_dot_attention(q, k, v)


class ReplaceContext(AttentionControl):
    """Swap in recorded key/values when the gate allows it."""

    mode = "replace"

    def __init__(self, cache: KVCache, tag: str, gate: ReplacementGate,
                 step: int):
        self.cache = cache
        self.tag = tag
        self.gate = gate
        self.step = int(step)

    def attend(self, layer, resolution, q, k, v):
        if should_replace(self.gate, self.step, layer):
            k, v = self.cache.fetch(layer, self.tag)
        return scaled_dot_attention(q, k, v)


def controlled_attention(state: Optional[AttentionControl], layer: int,
                         resolution: tuple[int, int], q: np.ndarray,
                         k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Dispatch one attention site through the active control state."""
    if state is None:
        return scaled_dot_attention(q, k, v)
    return state.attend(layer, tuple(resolution), q, k, v)
