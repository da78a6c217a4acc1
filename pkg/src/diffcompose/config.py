"""Run configuration: TOML file -> validated model -> phase configs.

Defaults are the shipped hyperparameters; an empty document resolves to
them exactly.  Unknown keys anywhere are rejected, and command-line
overrides merge on top of file values, which merge on top of defaults.
"""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Any, Literal, Mapping, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .attention import ReplacementGate
from .backends.base import DiffusionBackend, make_backend
from .errors import ConfigurationError
from .features import FeatureExtractor, load_extractor
from .guidance import GradMode, PhaseLossWeights
from .pipeline import PhaseConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BackendMeans(_Section):
    unconditional: float = 0.5
    source: float = 0.5
    target: float = 0.5


class BackendSection(_Section):
    kind: Literal["analytic", "toy-attention", "adapter"] = "analytic"
    beta: float = Field(default=4.0, ge=0.0)
    t_max: int = Field(default=1000, ge=1)
    seed: int = 0
    layer_count: int = Field(default=2, ge=1)
    d_model: int = Field(default=16, ge=2)
    head_dim: int = Field(default=8, ge=1)
    max_tokens: int = Field(default=1024, ge=4)
    tag_bias_scale: float = Field(default=0.01, ge=0.0)
    time_scale: float = Field(default=0.5, ge=0.0)
    output_scale: float = Field(default=0.1, ge=0.0)
    feature_scale: float = Field(default=0.1, ge=0.0)
    adapter_spec: Optional[str] = None
    means: BackendMeans = BackendMeans()
    prompt_tags: dict[str, Literal["unconditional", "source", "target"]] = {}


class RemovalSection(_Section):
    steps: int = Field(default=150, ge=1)
    learning_rate: float = Field(default=5e-2, gt=0.0)
    t_min: int = Field(default=50, ge=0)
    t_max: int = Field(default=400, ge=0)
    cfg_weight: float = Field(default=7.5, ge=0.0)
    lambda_per: float = Field(default=0.3, ge=0.0)
    background_dds_scale: float = Field(default=0.2, ge=0.0)
    mask_threshold: float = Field(default=0.5, ge=0.0, le=1.0)
    grad_mode: Literal["difference", "mse_backprop"] = "difference"
    prompt_source: str = "Something in some place."
    prompt_target: str = "Some place."

    @model_validator(mode="after")
    def _check_range(self):
        if self.t_min > self.t_max:
            raise ValueError(
                f"removal timestep range is empty: [{self.t_min}, "
                f"{self.t_max}]")
        return self


class HarmonizationSection(_Section):
    steps: int = Field(default=200, ge=1)
    learning_rate: float = Field(default=5e-2, gt=0.0)
    t_min: int = Field(default=50, ge=0)
    t_max: int = Field(default=950, ge=0)
    cfg_weight: float = Field(default=7.5, ge=0.0)
    lambda_bak: float = Field(default=0.3, ge=0.0)
    lambda_for: float = Field(default=0.1, ge=0.0)
    grad_mode: Literal["difference", "mse_backprop"] = "difference"
    prompt_source: str = ""
    prompt_target: str = "A harmonious scene."

    @model_validator(mode="after")
    def _check_range(self):
        if self.t_min > self.t_max:
            raise ValueError(
                f"harmonization timestep range is empty: [{self.t_min}, "
                f"{self.t_max}]")
        return self


class CompositionSection(_Section):
    steps: Optional[int] = Field(default=None, ge=1)
    steps_text: int = Field(default=500, ge=1)
    steps_sketch: int = Field(default=200, ge=1)
    learning_rate: float = Field(default=5e-2, gt=0.0)
    t_min: int = Field(default=50, ge=0)
    t_max: int = Field(default=950, ge=0)
    cfg_weight: float = Field(default=7.5, ge=0.0)
    gate_step_threshold: int = Field(default=400, ge=0)
    gate_layer_threshold: int = Field(default=10, ge=0)
    late_t_min: int = Field(default=50, ge=0)
    late_t_max: int = Field(default=100, ge=0)
    late_last_steps: int = Field(default=50, ge=0)
    grad_mode: Literal["difference", "mse_backprop"] = "difference"
    prompt_source: str = ""
    prompt_target: str = ""

    @model_validator(mode="after")
    def _check_ranges(self):
        if self.t_min > self.t_max:
            raise ValueError(
                f"composition timestep range is empty: [{self.t_min}, "
                f"{self.t_max}]")
        if self.late_t_min > self.late_t_max:
            raise ValueError(
                f"composition late timestep range is empty: "
                f"[{self.late_t_min}, {self.late_t_max}]")
        return self


class IoSection(_Section):
    resolution: int = Field(default=512, ge=8)
    seed: int = 0
    save_heatmaps: bool = False
    heatmap_samples: int = Field(default=1000, ge=1)
    heatmap_t_set: list[int] = [100, 500, 900]
    extractor: str = "box-pyramid"
    extractor_levels: int = Field(default=3, ge=0)
    vgg_layers: list[str] = ["relu1_2", "relu2_2", "relu3_3"]


class RunConfig(_Section):
    backend: BackendSection = BackendSection()
    removal: RemovalSection = RemovalSection()
    harmonization: HarmonizationSection = HarmonizationSection()
    composition: CompositionSection = CompositionSection()
    io: IoSection = IoSection()


def deep_merge(base: Mapping[str, Any],
               override: Mapping[str, Any]) -> dict[str, Any]:
    """Recursive dict merge; override wins, nested tables merge key-wise."""
    merged = dict(base)
    for key, value in override.items():
        if (key in merged and isinstance(merged[key], Mapping)
                and isinstance(value, Mapping)):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def validate_config(data: Mapping[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(f"invalid configuration: {exc}") from exc


def read_config(path: Union[str, Path]) -> RunConfig:
    """Parse and validate a TOML run config; empty file -> all defaults."""
    p = Path(path)
    try:
        with open(p, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file not found: {p}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"config file {p} is not valid TOML: {exc}") from exc
    return validate_config(data)


def resolve_config(path: Optional[Union[str, Path]] = None,
                   *overrides: Mapping[str, Any]) -> RunConfig:
    """Defaults <- config file <- override layers, validated as a whole."""
    data: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        try:
            with open(p, "rb") as fh:
                data = tomllib.load(fh)
        except FileNotFoundError as exc:
            raise ConfigurationError(f"config file not found: {p}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(
                f"config file {p} is not valid TOML: {exc}") from exc
    for layer in overrides:
        data = deep_merge(data, layer)
    return validate_config(data)


# -- constructors ---------------------------------------------------------------


def backend_from_config(cfg: RunConfig) -> DiffusionBackend:
    b = cfg.backend
    if b.kind == "analytic":
        return make_backend(
            "analytic", beta=b.beta, t_max=b.t_max,
            means=b.means.model_dump(), prompt_tags=b.prompt_tags)
    if b.kind == "toy-attention":
        return make_backend(
            "toy-attention", seed=b.seed, layer_count=b.layer_count,
            d_model=b.d_model, head_dim=b.head_dim,
            max_tokens=b.max_tokens, tag_bias_scale=b.tag_bias_scale,
            time_scale=b.time_scale, output_scale=b.output_scale,
            feature_scale=b.feature_scale, t_max=b.t_max,
            prompt_tags=b.prompt_tags)
    return make_backend("adapter", adapter_spec=b.adapter_spec)


def extractor_from_config(cfg: RunConfig) -> FeatureExtractor:
    if cfg.io.extractor == "box-pyramid":
        return load_extractor("box-pyramid", levels=cfg.io.extractor_levels)
    return load_extractor(cfg.io.extractor, layers=cfg.io.vgg_layers)


def removal_phase_config(cfg: RunConfig) -> PhaseConfig:
    r = cfg.removal
    return PhaseConfig(
        phase="removal", steps=r.steps, learning_rate=r.learning_rate,
        t_min=r.t_min, t_max=r.t_max, cfg_weight=r.cfg_weight,
        seed=cfg.io.seed,
        weights=PhaseLossWeights(
            lambda_per=r.lambda_per,
            background_dds_scale=r.background_dds_scale),
        grad_mode=GradMode(r.grad_mode), mask_threshold=r.mask_threshold,
        prompt_source=r.prompt_source, prompt_target=r.prompt_target)


def harmonization_phase_config(cfg: RunConfig) -> PhaseConfig:
    h = cfg.harmonization
    return PhaseConfig(
        phase="harmonization", steps=h.steps,
        learning_rate=h.learning_rate, t_min=h.t_min, t_max=h.t_max,
        cfg_weight=h.cfg_weight, seed=cfg.io.seed + 1,
        weights=PhaseLossWeights(lambda_bak=h.lambda_bak,
                                 lambda_for=h.lambda_for),
        grad_mode=GradMode(h.grad_mode), prompt_source=h.prompt_source,
        prompt_target=h.prompt_target)


def composition_phase_config(cfg: RunConfig,
                             condition_kind: Optional[str] = None) -> PhaseConfig:
    c = cfg.composition
    if c.steps is not None:
        steps = c.steps
    elif condition_kind == "text":
        steps = c.steps_text
    else:
        steps = c.steps_sketch
    late_kwargs: dict[str, Any] = {}
    if 0 < c.late_last_steps:
        late_from = max(1, steps - c.late_last_steps + 1)
        late_kwargs = dict(late_t_min=c.late_t_min, late_t_max=c.late_t_max,
                           late_from_step=late_from)
    return PhaseConfig(
        phase="composition", steps=steps, learning_rate=c.learning_rate,
        t_min=c.t_min, t_max=c.t_max, cfg_weight=c.cfg_weight,
        seed=cfg.io.seed + 2,
        gate=ReplacementGate(step_threshold=c.gate_step_threshold,
                             layer_threshold=c.gate_layer_threshold),
        grad_mode=GradMode(c.grad_mode), prompt_source=c.prompt_source,
        prompt_target=c.prompt_target, **late_kwargs)
