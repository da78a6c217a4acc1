"""Deterministic image, mask, heatmap, and loss-log persistence.

All writes are atomic (temp file in the target directory, then rename), so
an interrupted run never leaves a partial artifact at the target path.
PNG is the only image format; masks are grayscale PNGs binarized strictly
above pixel value 127.
"""

from __future__ import annotations

import csv
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import AssetError, ShapeError
from .resize import resize_bilinear, resize_nearest

PathLike = Union[str, Path]

CSV_HEADER = "step,t,total,dds,per_bak,per_for,grad_norm"


def _atomic_write(path: Path, write_fn) -> None:
    """Run write_fn(tmp_path), then rename tmp_path onto path."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, suffix=path.suffix)
    os.close(fd)
    tmp = Path(tmp_name)
    try:
        write_fn(tmp)
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def read_image(path: PathLike, resolution: Optional[int] = None) -> np.ndarray:
    """Load a PNG as an (H, W, 3) float array in [0, 1].

    Alpha is discarded, grayscale is replicated to three channels, and the
    image is bilinearly resized to (resolution, resolution) when given.
    """
    p = Path(path)
    try:
        with Image.open(p) as img:
            rgb = img.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float64) / 255.0
    except FileNotFoundError as exc:
        raise AssetError(f"image file not found: {p}") from exc
    except UnidentifiedImageError as exc:
        raise AssetError(f"not a readable image file: {p}") from exc
    if resolution is not None and arr.shape[:2] != (resolution, resolution):
        arr = resize_bilinear(arr, resolution, resolution)
    return np.clip(arr, 0.0, 1.0)


def read_mask(path: PathLike,
              paired_resolution: tuple[int, int]) -> np.ndarray:
    """Load a grayscale PNG mask, resize nearest, binarize at > 127."""
    p = Path(path)
    try:
        with Image.open(p) as img:
            gray = img.convert("L")
            arr = np.asarray(gray, dtype=np.float64)
    except FileNotFoundError as exc:
        raise AssetError(f"mask file not found: {p}") from exc
    except UnidentifiedImageError as exc:
        raise AssetError(f"not a readable mask file: {p}") from exc
    h, w = paired_resolution
    if arr.shape != (h, w):
        arr = resize_nearest(arr, h, w)
    return (arr > 127.0).astype(np.float64)


def write_image(path: PathLike, image: np.ndarray) -> Path:
    """Save an (H, W, 3) float image in [0, 1] as an 8-bit PNG, atomically."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"image must be (H, W, 3), got {arr.shape}")
    data = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    p = Path(path)
    _atomic_write(p, lambda tmp: Image.fromarray(data, mode="RGB").save(
        tmp, format="PNG"))
    return p


def write_mask(path: PathLike, mask: np.ndarray) -> Path:
    """Save a binary (H, W) mask as an 8-bit grayscale PNG, atomically."""
    arr = np.asarray(mask, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"mask must be (H, W), got {arr.shape}")
    data = np.where(arr > 0.5, 255, 0).astype(np.uint8)
    p = Path(path)
    _atomic_write(p, lambda tmp: Image.fromarray(data, mode="L").save(
        tmp, format="PNG"))
    return p


def write_heatmap(path: PathLike, heatmap: np.ndarray) -> Path:
    """Save a nonnegative (H, W) map as a min-max normalized grayscale PNG.

    A constant map normalizes degenerately, so it is written as uniform
    mid-gray by rule.
    """
    arr = np.asarray(heatmap, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"heatmap must be (H, W), got {arr.shape}")
    span = arr.max() - arr.min()
    if span <= 1e-12:
        norm = np.full_like(arr, 0.5)
    else:
        norm = (arr - arr.min()) / span
    data = np.round(norm * 255.0).astype(np.uint8)
    p = Path(path)
    _atomic_write(p, lambda tmp: Image.fromarray(data, mode="L").save(
        tmp, format="PNG"))
    return p


@dataclass(frozen=True)
class LossRow:
    """One optimization step's scalar record."""

    step: int
    t: int
    total: float
    dds: float
    per_bak: float
    per_for: float
    grad_norm: float


class LossLog:
    """Append-only per-step loss records with a strictly increasing step."""

    def __init__(self):
        self.rows: list[LossRow] = []

    def append(self, row: LossRow) -> None:
        if self.rows and row.step <= self.rows[-1].step:
            raise AssetError(
                f"loss log steps must increase: got step {row.step} after "
                f"{self.rows[-1].step}"
            )
        self.rows.append(row)

    def final(self) -> Optional[LossRow]:
        return self.rows[-1] if self.rows else None

    def flush(self, path: PathLike) -> Path:
        """Write the log as CSV with 6-significant-digit reals, atomically."""
        p = Path(path)

        def _write(tmp: Path):
            with open(tmp, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(CSV_HEADER.split(","))
                for r in self.rows:
                    writer.writerow([
                        r.step, r.t,
                        f"{r.total:.6g}", f"{r.dds:.6g}",
                        f"{r.per_bak:.6g}", f"{r.per_for:.6g}",
                        f"{r.grad_norm:.6g}",
                    ])

        _atomic_write(p, _write)
        return p
