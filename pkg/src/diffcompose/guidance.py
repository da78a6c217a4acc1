"""Editing gradients on the latent.

The core signal is the difference of two guided noise predictions sharing
one (t, eps) draw: a source branch evaluated on the noised reference latent
(held fixed) and a target branch evaluated on the noised latent being
optimized.  Phase-specific losses wrap that signal with attention control
and masked perceptual anchors.

Two gradient routes are kept deliberately distinct:
  * difference: g = sqrt(alpha_bar) * (eps_tgt - eps_src), the usual
    score-distillation shortcut that treats the predictor Jacobian as
    identity;
  * mse_backprop: the exact gradient of sum(scale * (eps_tgt - eps_src)^2)
    through the target branch predictor, available only on backends with an
    exact noise-predictor VJP.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .attention import (
    AttentionControl,
    KVCache,
    RecordContext,
    ReplaceContext,
    ReplacementGate,
)
from .backends.base import ConditionFeatures, DiffusionBackend, PromptEmbedding
from .backends.scheduler import add_noise
from .errors import CapabilityError, RangeError, ShapeError
from .features import FeatureExtractor


class GradMode(str, Enum):
    DIFFERENCE = "difference"
    MSE_BACKPROP = "mse_backprop"


@dataclass(frozen=True)
class PhaseLossWeights:
    """Loss weights; defaults follow the shipped configuration."""

    lambda_per: float = 0.3
    lambda_bak: float = 0.3
    lambda_for: float = 0.1
    background_dds_scale: float = 0.2


@dataclass(frozen=True)
class LossTerms:
    """Scalar loss components logged per optimization step."""

    total: float
    dds: float
    per_bak: float = 0.0
    per_for: float = 0.0


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray,
                weight: float) -> np.ndarray:
    """Classifier-free guidance: eps_u + weight * (eps_c - eps_u)."""
    c = np.asarray(eps_cond, dtype=np.float64)
    u = np.asarray(eps_uncond, dtype=np.float64)
    if c.shape != u.shape:
        raise ShapeError(
            f"conditional shape {c.shape} != unconditional shape {u.shape}"
        )
    return u + weight * (c - u)


def guided_prediction(
    backend: DiffusionBackend,
    z_t: np.ndarray,
    t: int,
    emb_cond: PromptEmbedding,
    emb_uncond: PromptEmbedding,
    weight: float,
    features: Optional[ConditionFeatures] = None,
    control: Optional[AttentionControl] = None,
) -> np.ndarray:
    """CFG-combined prediction from one conditional/unconditional pair."""
    eps_u = backend.predict_noise(z_t, t, emb_uncond, features=features,
                                  control=control)
    eps_c = backend.predict_noise(z_t, t, emb_cond, features=features,
                                  control=control)
    return cfg_combine(eps_c, eps_u, weight)


def guided_vjp(
    backend: DiffusionBackend,
    z_t: np.ndarray,
    t: int,
    emb_cond: PromptEmbedding,
    emb_uncond: PromptEmbedding,
    weight: float,
    features: Optional[ConditionFeatures] = None,
    control: Optional[AttentionControl] = None,
) -> Callable[[np.ndarray], np.ndarray]:
    """VJP of the CFG-combined prediction w.r.t. z_t.

    The combination is (1 - weight) * eps_u + weight * eps_c, so the VJP is
    the same affine mix of the two branch VJPs.
    """

    def vjp(cotangent: np.ndarray) -> np.ndarray:
        gu = backend.predict_noise_vjp(z_t, t, emb_uncond, cotangent,
                                       features=features, control=control)
        gc = backend.predict_noise_vjp(z_t, t, emb_cond, cotangent,
                                       features=features, control=control)
        return (1.0 - weight) * gu + weight * gc

    return vjp


def dds_gradient(
    eps_src_w: np.ndarray,
    eps_tgt_w: np.ndarray,
    alpha_bar_t: float,
    mode: GradMode = GradMode.DIFFERENCE,
    vjp: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    scale_field: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, float]:
    """Latent gradient from a pair of guided predictions.

    Returns (gradient, dds_scalar) where dds_scalar is
    sum(scale * (eps_tgt - eps_src)^2), the quantity mse_backprop
    differentiates and the value logged in both modes.
    """
    src = np.asarray(eps_src_w, dtype=np.float64)
    tgt = np.asarray(eps_tgt_w, dtype=np.float64)
    if src.shape != tgt.shape:
        raise ShapeError(
            f"source shape {src.shape} != target shape {tgt.shape}"
        )
    if not 0.0 <= alpha_bar_t <= 1.0:
        raise RangeError(f"alpha_bar_t must lie in [0, 1], got {alpha_bar_t}")
    diff = tgt - src
    if scale_field is not None:
        scale = np.asarray(scale_field, dtype=np.float64)
        if scale.shape != diff.shape:
            raise ShapeError(
                f"scale field shape {scale.shape} != prediction shape "
                f"{diff.shape}"
            )
        scaled = scale * diff
    else:
        scaled = diff
    dds_value = float(np.sum(scaled * diff))
    root_ab = np.sqrt(alpha_bar_t)
    if mode == GradMode.DIFFERENCE:
        return root_ab * scaled, dds_value
    if mode == GradMode.MSE_BACKPROP:
        if vjp is None:
            raise CapabilityError(
                "mse_backprop mode requires a noise-predictor VJP"
            )
        return root_ab * vjp(2.0 * scaled), dds_value
    raise RangeError(f"unknown gradient mode {mode!r}")


# -- perceptual loss ----------------------------------------------------------


def _apply_mask(image: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    if mask is None:
        return image
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != image.shape[:2]:
        raise ShapeError(
            f"mask shape {m.shape} != image spatial shape {image.shape[:2]}"
        )
    if image.ndim == 3:
        return image * m[:, :, None]
    return image * m


def perceptual_loss(
    reference: np.ndarray,
    candidate: np.ndarray,
    extractor: FeatureExtractor,
    mask: Optional[np.ndarray] = None,
) -> float:
    """Sum over levels of mean squared feature difference.

    A mask multiplies both images before extraction, so the comparison is
    restricted to the masked region (plus blur bleed at coarser levels).
    """
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(candidate, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(
            f"reference shape {a.shape} != candidate shape {b.shape}"
        )
    fa = extractor.extract(_apply_mask(a, mask))
    fb = extractor.extract(_apply_mask(b, mask))
    return float(sum(np.mean((x - y) ** 2) for x, y in zip(fa, fb)))


def perceptual_loss_grad(
    reference: np.ndarray,
    candidate: np.ndarray,
    extractor: FeatureExtractor,
    mask: Optional[np.ndarray] = None,
) -> tuple[float, np.ndarray]:
    """Perceptual loss and its exact gradient w.r.t. the raw candidate."""
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(candidate, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(
            f"reference shape {a.shape} != candidate shape {b.shape}"
        )
    if not extractor.exact_vjp:
        raise CapabilityError(
            f"extractor {extractor.name!r} has no exact VJP; perceptual "
            "gradients need one"
        )
    am = _apply_mask(a, mask)
    bm = _apply_mask(b, mask)
    fa = extractor.extract(am)
    fb = extractor.extract(bm)
    loss = float(sum(np.mean((x - y) ** 2) for x, y in zip(fa, fb)))
    cotangents = [2.0 * (y - x) / x.size for x, y in zip(fa, fb)]
    grad_masked = extractor.extract_vjp(bm, cotangents)
    grad = _apply_mask(grad_masked, mask)
    return loss, grad


# -- phase gradients -----------------------------------------------------------


def removal_gradient(
    z: np.ndarray,
    t: int,
    eps: np.ndarray,
    step: int,
    *,
    backend: DiffusionBackend,
    z_ref: np.ndarray,
    emb_uncond: PromptEmbedding,
    emb_src: PromptEmbedding,
    emb_tgt: PromptEmbedding,
    control: Optional[AttentionControl],
    weights: PhaseLossWeights,
    cfg_weight: float,
    grad_mode: GradMode,
    extractor: FeatureExtractor,
    ref_image: np.ndarray,
    background_mask: np.ndarray,
    latent_scale_field: np.ndarray,
) -> tuple[np.ndarray, LossTerms]:
    """Removal loss gradient: masked guidance plus background anchoring.

    The source branch attends freely over the reference latent; the target
    branch excludes the masked region's context tokens, so its prediction
    reconstructs that region from its surroundings.  The guidance gradient
    runs at full strength inside the removal region and is scaled down
    outside; a masked perceptual term pins the background to the reference
    image.
    """
    ab = backend.scheduler.alpha_bar(t)
    zt_src = add_noise(z_ref, eps, t, backend.scheduler)
    zt_tgt = add_noise(z, eps, t, backend.scheduler)
    eps_src_w = guided_prediction(backend, zt_src, t, emb_src, emb_uncond,
                                  cfg_weight)
    eps_tgt_w = guided_prediction(backend, zt_tgt, t, emb_tgt, emb_uncond,
                                  cfg_weight, control=control)
    vjp = None
    if grad_mode == GradMode.MSE_BACKPROP:
        vjp = guided_vjp(backend, zt_tgt, t, emb_tgt, emb_uncond, cfg_weight,
                         control=control)
    g_dds, dds_value = dds_gradient(eps_src_w, eps_tgt_w, ab, grad_mode,
                                    vjp=vjp, scale_field=latent_scale_field)
    current = backend.decode(z)
    per_loss, per_grad_img = perceptual_loss_grad(
        ref_image, current, extractor, mask=background_mask)
    g_per = backend.decode_vjp(z, per_grad_img)
    grad = g_dds + weights.lambda_per * g_per
    terms = LossTerms(
        total=dds_value + weights.lambda_per * per_loss,
        dds=dds_value,
        per_bak=per_loss,
        per_for=0.0,
    )
    return grad, terms


def harmonization_gradient(
    z: np.ndarray,
    t: int,
    eps: np.ndarray,
    step: int,
    *,
    backend: DiffusionBackend,
    z_ref: np.ndarray,
    emb_uncond: PromptEmbedding,
    emb_src: PromptEmbedding,
    emb_tgt: PromptEmbedding,
    weights: PhaseLossWeights,
    cfg_weight: float,
    grad_mode: GradMode,
    extractor: FeatureExtractor,
    ref_image: np.ndarray,
    foreground_mask: np.ndarray,
) -> tuple[np.ndarray, LossTerms]:
    """Harmonization gradient: full-field guidance plus two-sided anchors.

    The pasted foreground is anchored weakly and the background strongly to
    the composite, so guidance adjusts appearance without erasing content.
    """
    ab = backend.scheduler.alpha_bar(t)
    zt_src = add_noise(z_ref, eps, t, backend.scheduler)
    zt_tgt = add_noise(z, eps, t, backend.scheduler)
    eps_src_w = guided_prediction(backend, zt_src, t, emb_src, emb_uncond,
                                  cfg_weight)
    eps_tgt_w = guided_prediction(backend, zt_tgt, t, emb_tgt, emb_uncond,
                                  cfg_weight)
    vjp = None
    if grad_mode == GradMode.MSE_BACKPROP:
        vjp = guided_vjp(backend, zt_tgt, t, emb_tgt, emb_uncond, cfg_weight)
    g_dds, dds_value = dds_gradient(eps_src_w, eps_tgt_w, ab, grad_mode,
                                    vjp=vjp)
    current = backend.decode(z)
    background_mask = 1.0 - foreground_mask
    bak_loss, bak_grad_img = perceptual_loss_grad(
        ref_image, current, extractor, mask=background_mask)
    for_loss, for_grad_img = perceptual_loss_grad(
        ref_image, current, extractor, mask=foreground_mask)
    g_per = backend.decode_vjp(
        z, weights.lambda_bak * bak_grad_img + weights.lambda_for * for_grad_img)
    grad = g_dds + g_per
    terms = LossTerms(
        total=(dds_value + weights.lambda_bak * bak_loss
               + weights.lambda_for * for_loss),
        dds=dds_value,
        per_bak=bak_loss,
        per_for=for_loss,
    )
    return grad, terms


def composition_gradient(
    z: np.ndarray,
    t: int,
    eps: np.ndarray,
    step: int,
    *,
    backend: DiffusionBackend,
    z_ref: np.ndarray,
    emb_uncond: PromptEmbedding,
    emb_src: PromptEmbedding,
    emb_tgt: PromptEmbedding,
    features_src: Optional[ConditionFeatures],
    features_tgt: Optional[ConditionFeatures],
    cache: KVCache,
    gate: ReplacementGate,
    cfg_weight: float,
    grad_mode: GradMode,
) -> tuple[np.ndarray, LossTerms]:
    """Composition gradient with key/value recording and gated replacement.

    The source branch records each attention site's key/value tensors (one
    cache tag per guidance call); the target branch swaps them in wherever
    the step/layer gate allows, which preserves the source appearance while
    the prompt or condition features steer semantics.
    """
    ab = backend.scheduler.alpha_bar(t)
    zt_src = add_noise(z_ref, eps, t, backend.scheduler)
    zt_tgt = add_noise(z, eps, t, backend.scheduler)
    cache.clear()
    eps_su = backend.predict_noise(
        zt_src, t, emb_uncond, features=features_src,
        control=RecordContext(cache, "uncond"))
    eps_sc = backend.predict_noise(
        zt_src, t, emb_src, features=features_src,
        control=RecordContext(cache, "cond"))
    eps_src_w = cfg_combine(eps_sc, eps_su, cfg_weight)
    eps_tu = backend.predict_noise(
        zt_tgt, t, emb_uncond, features=features_tgt,
        control=ReplaceContext(cache, "uncond", gate, step))
    eps_tc = backend.predict_noise(
        zt_tgt, t, emb_tgt, features=features_tgt,
        control=ReplaceContext(cache, "cond", gate, step))
    eps_tgt_w = cfg_combine(eps_tc, eps_tu, cfg_weight)
    if grad_mode == GradMode.MSE_BACKPROP:
        raise CapabilityError(
            "mse_backprop is not available for the composition loss; the "
            "attention backends expose no exact VJP"
        )
    g_dds, dds_value = dds_gradient(eps_src_w, eps_tgt_w, ab,
                                    GradMode.DIFFERENCE)
    return g_dds, LossTerms(total=dds_value, dds=dds_value)
