"""Phase orchestration: removal, paste, harmonization, composition.

Each phase optimizes a latent with the shared adaptive-moment loop; the
pipeline chains them (remove -> paste -> harmonize -> optional compose) and
the low-density map provides the diagnostic that motivates removal-first
compositing: hard-pasted content sits in a low-density region of the prior,
where noise predictions deviate most.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .attention import (
    ExcludeContext,
    KVCache,
    ReplacementGate,
    build_token_mask,
)
from .assets import LossLog, LossRow
from .backends.base import DiffusionBackend, PromptEmbedding
from .backends.scheduler import add_noise
from .errors import (
    ConfigurationError,
    EmptyContextError,
    EmptyMaskError,
    NonFiniteGradientError,
    RangeError,
    ShapeError,
)
from .features import FeatureExtractor
from .guidance import (
    GradMode,
    LossTerms,
    PhaseLossWeights,
    composition_gradient,
    harmonization_gradient,
    removal_gradient,
)
from .resize import resize_bilinear, resize_nearest

GradFn = Callable[[np.ndarray, int, np.ndarray, int],
                  tuple[np.ndarray, LossTerms]]


@dataclass(frozen=True)
class PhaseConfig:
    """Everything one optimization phase needs besides its inputs."""

    phase: str
    steps: int
    learning_rate: float
    t_min: int
    t_max: int
    cfg_weight: float
    seed: int
    weights: PhaseLossWeights = PhaseLossWeights()
    grad_mode: GradMode = GradMode.DIFFERENCE
    gate: Optional[ReplacementGate] = None
    mask_threshold: float = 0.5
    prompt_source: str = ""
    prompt_target: str = ""
    late_t_min: Optional[int] = None
    late_t_max: Optional[int] = None
    late_from_step: Optional[int] = None

    def __post_init__(self):
        if self.steps < 1:
            raise RangeError(f"steps must be >= 1, got {self.steps}")
        if self.learning_rate <= 0:
            raise RangeError(
                f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.t_min <= self.t_max:
            raise RangeError(
                f"need 0 <= t_min <= t_max, got [{self.t_min}, {self.t_max}]")
        if self.cfg_weight < 0:
            raise RangeError(
                f"cfg_weight must be >= 0, got {self.cfg_weight}")
        if not 0.0 <= self.mask_threshold <= 1.0:
            raise RangeError(
                f"mask_threshold must lie in [0, 1], got {self.mask_threshold}")
        late = (self.late_t_min, self.late_t_max, self.late_from_step)
        if any(v is not None for v in late) and None in late:
            raise ConfigurationError(
                "late_t_min, late_t_max, late_from_step must be set together")
        if self.late_t_min is not None:
            if not 0 <= self.late_t_min <= self.late_t_max:
                raise RangeError(
                    f"need 0 <= late_t_min <= late_t_max, got "
                    f"[{self.late_t_min}, {self.late_t_max}]")
            if self.late_from_step < 1:
                raise RangeError(
                    f"late_from_step must be >= 1, got {self.late_from_step}")


@dataclass(frozen=True)
class PlacementSpec:
    """How the object lands in the background.

    offset=None selects bbox-fit: the object is scaled (aspect preserved)
    to fit inside the region bbox and centered there.  An explicit offset
    is the top-left corner in background pixels with an optional scale.
    """

    offset: Optional[tuple[int, int]] = None
    scale: Optional[float] = None

    def __post_init__(self):
        if self.scale is not None and self.scale <= 0:
            raise RangeError(f"scale must be > 0, got {self.scale}")


@dataclass(frozen=True)
class Conditions:
    """Source/target condition pair for semantic composition."""

    kind: str
    source: Union[str, np.ndarray]
    target: Union[str, np.ndarray]

    def __post_init__(self):
        if self.kind not in ("text", "sketch", "canny"):
            raise ConfigurationError(
                f"condition kind {self.kind!r} must be 'text', 'sketch', "
                "or 'canny'")
        if self.kind == "text":
            if not isinstance(self.source, str) or not isinstance(
                    self.target, str):
                raise ConfigurationError(
                    "text conditions require prompt strings")
        else:
            for name, value in (("source", self.source),
                                ("target", self.target)):
                if isinstance(value, str):
                    raise ConfigurationError(
                        f"{self.kind} conditions require image arrays, got "
                        f"a string for {name}")


@dataclass(frozen=True)
class CompositionRequest:
    """Inputs of a full pipeline run."""

    image: np.ndarray
    region_mask: np.ndarray
    object_image: np.ndarray
    object_mask: np.ndarray
    conditions: Optional[Conditions] = None
    placement: PlacementSpec = PlacementSpec()


@dataclass
class RunArtifacts:
    """Everything a pipeline run produces."""

    background: np.ndarray
    paste_image: np.ndarray
    paste_mask: np.ndarray
    harmonized: np.ndarray
    result: np.ndarray
    logs: dict[str, LossLog] = field(default_factory=dict)


# -- optimization loop ---------------------------------------------------------


class AdamOptimizer:
    """Adaptive-moment update with bias correction."""

    def __init__(self, learning_rate: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def init_state(self, z: np.ndarray) -> "OptState":
        return OptState(z=z.copy(), m=np.zeros_like(z), v=np.zeros_like(z),
                        step=0)

    def update(self, state: "OptState", grad: np.ndarray) -> None:
        state.step += 1
        state.m = self.beta1 * state.m + (1 - self.beta1) * grad
        state.v = self.beta2 * state.v + (1 - self.beta2) * grad * grad
        m_hat = state.m / (1 - self.beta1 ** state.step)
        v_hat = state.v / (1 - self.beta2 ** state.step)
        state.z = state.z - self.learning_rate * m_hat / (
            np.sqrt(v_hat) + self.eps)


@dataclass
class OptState:
    """Mutable optimizer state: the latent and its moment accumulators."""

    z: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int
    kv_cache: Optional[KVCache] = None


def sample_timestep(t_min: int, t_max: int, rng: np.random.Generator) -> int:
    """Uniform integer timestep in [t_min, t_max], inclusive both ends."""
    if t_min > t_max:
        raise ConfigurationError(
            f"empty timestep range [{t_min}, {t_max}]")
    if t_min < 0:
        raise RangeError(f"t_min must be >= 0, got {t_min}")
    return int(rng.integers(t_min, t_max + 1))


def optimize_latent(z_init: np.ndarray, grad_fn: GradFn,
                    cfg: PhaseConfig) -> tuple[np.ndarray, LossLog]:
    """Run the seeded optimization loop.

    Per step: sample t from the active range (the late range once
    late_from_step is reached), sample eps, evaluate grad_fn(z, t, eps,
    step), apply the adaptive-moment update, and log the loss terms.
    """
    rng = np.random.default_rng(cfg.seed)
    adam = AdamOptimizer(cfg.learning_rate)
    state = adam.init_state(np.asarray(z_init, dtype=np.float64))
    log = LossLog()
    for step in range(1, cfg.steps + 1):
        if (cfg.late_from_step is not None
                and step >= cfg.late_from_step):
            lo, hi = cfg.late_t_min, cfg.late_t_max
        else:
            lo, hi = cfg.t_min, cfg.t_max
        t = sample_timestep(lo, hi, rng)
        eps = rng.standard_normal(state.z.shape)
        grad, terms = grad_fn(state.z, t, eps, step)
        if grad.shape != state.z.shape:
            raise ShapeError(
                f"gradient shape {grad.shape} != latent shape "
                f"{state.z.shape}")
        grad_norm = float(np.linalg.norm(grad))
        log_row = LossRow(step=step, t=t, total=terms.total, dds=terms.dds,
                          per_bak=terms.per_bak, per_for=terms.per_for,
                          grad_norm=grad_norm)
        if not np.all(np.isfinite(grad)):
            log.append(log_row)
            raise NonFiniteGradientError(
                f"non-finite gradient at step {step} (t={t}, "
                f"|finite|={int(np.isfinite(grad).sum())}/{grad.size})",
                log=log)
        adam.update(state, grad)
        log.append(log_row)
    return state.z, log


# -- paste ----------------------------------------------------------------------


def _mask_bbox(mask: np.ndarray, name: str) -> tuple[int, int, int, int]:
    """(top, left, height, width) of the tight bbox of positive pixels."""
    m = np.asarray(mask, dtype=np.float64)
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    if rows.size == 0 or cols.size == 0:
        raise EmptyMaskError(f"{name} mask selects no pixels")
    return (int(rows[0]), int(cols[0]),
            int(rows[-1] - rows[0] + 1), int(cols[-1] - cols[0] + 1))


def paste_object(
    background: np.ndarray,
    object_image: np.ndarray,
    object_mask: np.ndarray,
    region_mask: Optional[np.ndarray] = None,
    placement: PlacementSpec = PlacementSpec(),
) -> tuple[np.ndarray, np.ndarray]:
    """Copy-paste the masked object into the background.

    The object is cropped to bbox(object_mask), scaled (bilinear pixels,
    nearest mask so it stays binary), and written at either the bbox-fit
    position inside bbox(region_mask) or the explicit placement offset.
    Returns (paste_image, paste_mask).
    """
    bg = np.asarray(background, dtype=np.float64)
    obj = np.asarray(object_image, dtype=np.float64)
    om = np.asarray(object_mask, dtype=np.float64)
    if bg.ndim != 3 or bg.shape[2] != 3:
        raise ShapeError(f"background must be (H, W, 3), got {bg.shape}")
    if obj.ndim != 3 or obj.shape[2] != 3:
        raise ShapeError(f"object image must be (H, W, 3), got {obj.shape}")
    if om.shape != obj.shape[:2]:
        raise ShapeError(
            f"object mask shape {om.shape} != object image spatial shape "
            f"{obj.shape[:2]}")
    top_o, left_o, h_o, w_o = _mask_bbox(om, "object")
    crop_img = obj[top_o:top_o + h_o, left_o:left_o + w_o]
    crop_mask = om[top_o:top_o + h_o, left_o:left_o + w_o]

    H, W = bg.shape[:2]
    if placement.offset is None:
        if region_mask is None:
            raise EmptyMaskError(
                "bbox-fit placement requires a region mask")
        rm = np.asarray(region_mask, dtype=np.float64)
        if rm.shape != (H, W):
            raise ShapeError(
                f"region mask shape {rm.shape} != background spatial shape "
                f"{(H, W)}")
        top_r, left_r, h_r, w_r = _mask_bbox(rm, "region")
        scale = min(h_r / h_o, w_r / w_o)
        new_h = max(1, int(round(h_o * scale)))
        new_w = max(1, int(round(w_o * scale)))
        new_h, new_w = min(new_h, h_r), min(new_w, w_r)
        top = top_r + (h_r - new_h) // 2
        left = left_r + (w_r - new_w) // 2
    else:
        scale = placement.scale if placement.scale is not None else 1.0
        new_h = max(1, int(round(h_o * scale)))
        new_w = max(1, int(round(w_o * scale)))
        top, left = placement.offset
        if top < 0 or left < 0 or top + new_h > H or left + new_w > W:
            raise RangeError(
                f"explicit placement puts the object outside image bounds: "
                f"rows [{top}, {top + new_h}), cols [{left}, {left + new_w}) "
                f"in a {H}x{W} canvas")

    if (new_h, new_w) != (h_o, w_o):
        scaled_img = resize_bilinear(crop_img, new_h, new_w)
        scaled_mask = resize_nearest(crop_mask, new_h, new_w)
    else:
        scaled_img = crop_img.copy()
        scaled_mask = crop_mask.copy()

    paste_image = bg.copy()
    paste_mask = np.zeros((H, W), dtype=np.float64)
    window_img = paste_image[top:top + new_h, left:left + new_w]
    m3 = scaled_mask[:, :, None]
    window_img[...] = scaled_img * m3 + window_img * (1.0 - m3)
    paste_mask[top:top + new_h, left:left + new_w] = scaled_mask
    return paste_image, paste_mask


# -- phases ---------------------------------------------------------------------


def _check_image_mask(image: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    img = np.asarray(image, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"image must be (H, W, 3), got {img.shape}")
    if m.shape != img.shape[:2]:
        raise ShapeError(
            f"mask shape {m.shape} != image spatial shape {img.shape[:2]}")
    if not np.isin(m, (0.0, 1.0)).all():
        raise RangeError("mask must be binary (values 0 or 1)")
    return img, m


def _latent_scale_field(mask: np.ndarray, latent_shape: tuple[int, ...],
                        background_scale: float) -> np.ndarray:
    """Guidance scale per latent cell: 1 inside the mask, less outside."""
    c, h, w = latent_shape
    m_lat = resize_nearest(mask, h, w)
    field = background_scale + (1.0 - background_scale) * m_lat
    return np.broadcast_to(field[None, :, :], (c, h, w)).copy()


def _exclusion_state(backend: DiffusionBackend, mask: np.ndarray,
                     latent_shape: tuple[int, ...],
                     threshold: float) -> Optional[ExcludeContext]:
    layout = backend.attention_layout(latent_shape)
    if not layout:
        return None
    masks = {}
    for _, resolution in layout:
        if resolution in masks:
            continue
        tm = build_token_mask(mask, resolution, threshold)
        if tm.selected.all():
            raise EmptyContextError(
                f"mask covers entire image; no context tokens remain at "
                f"attention resolution {resolution}")
        masks[resolution] = tm
    return ExcludeContext(masks)


def remove_object(
    image: np.ndarray,
    mask: np.ndarray,
    backend: DiffusionBackend,
    cfg: PhaseConfig,
    extractor: FeatureExtractor,
) -> tuple[np.ndarray, LossLog]:
    """Erase the masked region, reconstructing it from its surroundings."""
    img, m = _check_image_mask(image, mask)
    if m.all():
        raise EmptyContextError(
            "mask covers entire image; nothing remains to reconstruct from")
    z_ref = backend.encode(img)
    emb_uncond = backend.embed("")
    emb_src = backend.embed(cfg.prompt_source)
    emb_tgt = backend.embed(cfg.prompt_target)
    control = _exclusion_state(backend, m, z_ref.shape, cfg.mask_threshold)
    scale_field = _latent_scale_field(m, z_ref.shape,
                                      cfg.weights.background_dds_scale)
    background_mask = 1.0 - m

    def grad_fn(z, t, eps, step):
        return removal_gradient(
            z, t, eps, step, backend=backend, z_ref=z_ref,
            emb_uncond=emb_uncond, emb_src=emb_src, emb_tgt=emb_tgt,
            control=control, weights=cfg.weights, cfg_weight=cfg.cfg_weight,
            grad_mode=cfg.grad_mode, extractor=extractor, ref_image=img,
            background_mask=background_mask, latent_scale_field=scale_field)

    z, log = optimize_latent(z_ref, grad_fn, cfg)
    return np.clip(backend.decode(z), 0.0, 1.0), log


def harmonize(
    paste_image: np.ndarray,
    paste_mask: np.ndarray,
    backend: DiffusionBackend,
    cfg: PhaseConfig,
    extractor: FeatureExtractor,
) -> tuple[np.ndarray, LossLog]:
    """Blend the pasted object's appearance into the scene."""
    img, m = _check_image_mask(paste_image, paste_mask)
    z_ref = backend.encode(img)
    emb_uncond = backend.embed("")
    emb_src = backend.embed(cfg.prompt_source)
    emb_tgt = backend.embed(cfg.prompt_target)

    def grad_fn(z, t, eps, step):
        return harmonization_gradient(
            z, t, eps, step, backend=backend, z_ref=z_ref,
            emb_uncond=emb_uncond, emb_src=emb_src, emb_tgt=emb_tgt,
            weights=cfg.weights, cfg_weight=cfg.cfg_weight,
            grad_mode=cfg.grad_mode, extractor=extractor, ref_image=img,
            foreground_mask=m)

    z, log = optimize_latent(z_ref, grad_fn, cfg)
    return np.clip(backend.decode(z), 0.0, 1.0), log


def semantic_compose(
    image: np.ndarray,
    conditions: Conditions,
    backend: DiffusionBackend,
    cfg: PhaseConfig,
) -> tuple[np.ndarray, LossLog]:
    """Steer structure by condition differences with KV record/replace."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"image must be (H, W, 3), got {img.shape}")
    emb_uncond = backend.embed("")
    if conditions.kind == "text":
        emb_src = backend.embed(conditions.source)
        emb_tgt = backend.embed(conditions.target)
        features_src = features_tgt = None
    else:
        emb_src = backend.embed(cfg.prompt_source)
        emb_tgt = backend.embed(cfg.prompt_target)
        for name, cond in (("source", conditions.source),
                           ("target", conditions.target)):
            arr = np.asarray(cond)
            if arr.shape != img.shape:
                raise ShapeError(
                    f"{name} condition image shape {arr.shape} != image "
                    f"shape {img.shape}")
        features_src = backend.condition_features(
            np.asarray(conditions.source, dtype=np.float64), conditions.kind)
        features_tgt = backend.condition_features(
            np.asarray(conditions.target, dtype=np.float64), conditions.kind)
    z_ref = backend.encode(img)
    cache = KVCache()
    gate = cfg.gate if cfg.gate is not None else ReplacementGate()

    def grad_fn(z, t, eps, step):
        return composition_gradient(
            z, t, eps, step, backend=backend, z_ref=z_ref,
            emb_uncond=emb_uncond, emb_src=emb_src, emb_tgt=emb_tgt,
            features_src=features_src, features_tgt=features_tgt,
            cache=cache, gate=gate, cfg_weight=cfg.cfg_weight,
            grad_mode=cfg.grad_mode)

    z, log = optimize_latent(z_ref, grad_fn, cfg)
    return np.clip(backend.decode(z), 0.0, 1.0), log


# -- pipeline -------------------------------------------------------------------


@dataclass(frozen=True)
class PipelinePhases:
    """Per-phase configurations for a full run."""

    removal: PhaseConfig
    harmonization: PhaseConfig
    composition: PhaseConfig


def run_pipeline(
    request: CompositionRequest,
    phases: PipelinePhases,
    backend: DiffusionBackend,
    extractor: FeatureExtractor,
) -> RunArtifacts:
    """Remove, paste, harmonize, and (when conditions exist) compose."""
    background, removal_log = remove_object(
        request.image, request.region_mask, backend, phases.removal,
        extractor)
    paste_image, paste_mask = paste_object(
        background, request.object_image, request.object_mask,
        request.region_mask, request.placement)
    harmonized, harmonization_log = harmonize(
        paste_image, paste_mask, backend, phases.harmonization, extractor)
    logs = {"removal": removal_log, "harmonization": harmonization_log}
    if request.conditions is not None:
        result, composition_log = semantic_compose(
            harmonized, request.conditions, backend, phases.composition)
        logs["composition"] = composition_log
    else:
        result = harmonized.copy()
    return RunArtifacts(
        background=background, paste_image=paste_image,
        paste_mask=paste_mask, harmonized=harmonized, result=result,
        logs=logs)


# -- diagnostics ------------------------------------------------------------------


def low_density_map(
    image: np.ndarray,
    backend: DiffusionBackend,
    embedding: PromptEmbedding,
    n_samples: int,
    t_set: Sequence[int],
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean absolute noise-prediction deviation per pixel.

    Averages |predict_noise(z_t, t, emb) - eps| over n_samples draws of
    (t in t_set, eps), channel-averaged.  Content the prior finds unlikely
    shows up as a hot region.  Returns (raw_map, minmax_normalized_map).
    """
    if n_samples < 1:
        raise ConfigurationError(
            f"n_samples must be >= 1, got {n_samples}")
    if len(t_set) == 0:
        raise ConfigurationError("t_set must not be empty")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"image must be (H, W, 3), got {img.shape}")
    z = backend.encode(img)
    acc = np.zeros(z.shape[1:], dtype=np.float64)
    ts = np.asarray(list(t_set), dtype=int)
    for _ in range(n_samples):
        t = int(ts[rng.integers(ts.size)])
        eps = rng.standard_normal(z.shape)
        z_t = add_noise(z, eps, t, backend.scheduler)
        eps_hat = backend.predict_noise(z_t, t, embedding)
        acc += np.abs(eps_hat - eps).mean(axis=0)
    raw = acc / n_samples
    span = raw.max() - raw.min()
    if span <= 1e-12:
        normalized = np.zeros_like(raw)
    else:
        normalized = (raw - raw.min()) / span
    return raw, normalized
