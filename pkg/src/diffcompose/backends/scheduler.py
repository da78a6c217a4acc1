"""Noise schedule and the forward noising map.

A schedule is a table of cumulative signal fractions alpha_bar indexed by an
integer timestep t in [0, t_max_absolute].  The toy schedule is linear,
alpha_bar(t) = 1 - t / t_max, so every downstream quantity has a closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import RangeError, ShapeError

TOY_T_MAX = 1000


@dataclass(frozen=True)
class Scheduler:
    """Discrete alpha_bar table.

    Args:
        t_max_absolute: largest legal timestep.
        alpha_bars: array of length t_max_absolute + 1 with alpha_bars[0] = 1,
            values non-increasing, and alpha_bars[-1] <= 0.01.
    """

    t_max_absolute: int
    alpha_bars: np.ndarray = field(repr=False)

    def __post_init__(self):
        table = np.asarray(self.alpha_bars, dtype=np.float64)
        if table.ndim != 1 or table.shape[0] != self.t_max_absolute + 1:
            raise ShapeError(
                f"alpha_bars must have length t_max_absolute + 1 = "
                f"{self.t_max_absolute + 1}, got shape {table.shape}"
            )
        if not np.isclose(table[0], 1.0):
            raise RangeError(f"alpha_bars[0] must be 1.0, got {table[0]}")
        if np.any(np.diff(table) > 0):
            raise RangeError("alpha_bars must be non-increasing in t")
        if table[-1] > 0.01 + 1e-12:
            raise RangeError(
                f"alpha_bars[t_max] must be <= 0.01, got {table[-1]}"
            )
        object.__setattr__(self, "alpha_bars", table)

    @classmethod
    def toy_linear(cls, t_max: int = TOY_T_MAX) -> "Scheduler":
        """Linear schedule alpha_bar(t) = 1 - t / t_max."""
        ts = np.arange(t_max + 1, dtype=np.float64)
        return cls(t_max_absolute=t_max, alpha_bars=1.0 - ts / t_max)

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal fraction at integer timestep t."""
        if not isinstance(t, (int, np.integer)):
            raise RangeError(f"timestep must be an integer, got {t!r}")
        if t < 0 or t > self.t_max_absolute:
            raise RangeError(
                f"timestep {t} outside [0, {self.t_max_absolute}]"
            )
        return float(self.alpha_bars[int(t)])


def add_noise(latent: np.ndarray, noise: np.ndarray, t: int,
              scheduler: Scheduler) -> np.ndarray:
    """Forward noising: sqrt(ab)*latent + sqrt(1-ab)*noise at timestep t."""
    z = np.asarray(latent, dtype=np.float64)
    eps = np.asarray(noise, dtype=np.float64)
    if z.shape != eps.shape:
        raise ShapeError(
            f"latent shape {z.shape} != noise shape {eps.shape}"
        )
    ab = scheduler.alpha_bar(t)
    return np.sqrt(ab) * z + np.sqrt(1.0 - ab) * eps
