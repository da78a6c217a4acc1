"""Command runners shared by the HTTP service and the CLI.

Each runner resolves its run config (defaults <- file <- overrides <-
request fields), builds the backend and extractor, executes one command,
persists its artifacts, and returns a typed response.  The pipeline runner
persists each phase as it completes and always leaves a manifest behind,
even when a later phase fails.
"""

from __future__ import annotations

import json
import time
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np

from . import assets
from .backends.base import DiffusionBackend
from .config import (
    RunConfig,
    backend_from_config,
    composition_phase_config,
    extractor_from_config,
    harmonization_phase_config,
    removal_phase_config,
    resolve_config,
)
from .errors import ComposeError, ConfigurationError
from .features import FeatureExtractor
from .pipeline import (
    Conditions,
    PhaseConfig,
    PlacementSpec,
    harmonize,
    low_density_map,
    paste_object,
    remove_object,
    semantic_compose,
)
from .service import schemas


def backend_flag_overrides(backend: Optional[str]) -> dict[str, Any]:
    """Translate a --backend flag value into config overrides."""
    if backend is None:
        return {}
    if backend.startswith("adapter:"):
        spec = backend[len("adapter:"):]
        if not spec:
            raise ConfigurationError(
                "backend 'adapter:<spec>' needs a module:factory spec")
        return {"backend": {"kind": "adapter", "adapter_spec": spec}}
    if backend in ("analytic", "toy-attention"):
        return {"backend": {"kind": backend}}
    raise ConfigurationError(
        f"unknown backend selector {backend!r}; expected 'analytic', "
        "'toy-attention', or 'adapter:<module:factory>'")


def build_flag_overrides(backend: Optional[str] = None,
                         seed: Optional[int] = None,
                         resolution: Optional[int] = None,
                         steps: Optional[int] = None,
                         steps_sections: tuple[str, ...] = ()) -> dict[str, Any]:
    """Config overrides equivalent to the common command-line flags."""
    extra: dict[str, Any] = dict(backend_flag_overrides(backend))
    if seed is not None:
        extra.setdefault("io", {})["seed"] = seed
    if resolution is not None:
        extra.setdefault("io", {})["resolution"] = resolution
    if steps is not None:
        for section in steps_sections:
            extra.setdefault(section, {})["steps"] = steps
    return extra


def _resolve(req_config: Optional[str], overrides: Mapping[str, Any],
             backend: Optional[str] = None, seed: Optional[int] = None,
             resolution: Optional[int] = None, steps: Optional[int] = None,
             steps_sections: tuple[str, ...] = ()) -> RunConfig:
    flags = build_flag_overrides(backend, seed, resolution, steps,
                                 steps_sections)
    return resolve_config(req_config, overrides, flags)


def _log_path(out: str) -> Path:
    return Path(out).with_suffix("").with_name(
        Path(out).with_suffix("").name + ".loss.csv")


def _summary(log: assets.LossLog) -> schemas.LossSummary:
    row = log.final()
    if row is None:
        return schemas.LossSummary(steps=0, total=0.0, dds=0.0, per_bak=0.0,
                                   per_for=0.0, grad_norm=0.0)
    return schemas.LossSummary(steps=row.step, total=row.total, dds=row.dds,
                               per_bak=row.per_bak, per_for=row.per_for,
                               grad_norm=row.grad_norm)


def build_runtime(cfg: RunConfig) -> tuple[DiffusionBackend, FeatureExtractor]:
    return backend_from_config(cfg), extractor_from_config(cfg)


def run_remove(req: schemas.RemoveRequest) -> schemas.RemoveResponse:
    start = time.perf_counter()
    cfg = _resolve(req.config, req.overrides, req.backend, req.seed,
                   req.resolution, req.steps, ("removal",))
    backend, extractor = build_runtime(cfg)
    image = assets.read_image(req.image, cfg.io.resolution)
    mask = assets.read_mask(req.mask, image.shape[:2])
    out_image, log = remove_object(image, mask, backend,
                                   removal_phase_config(cfg), extractor)
    assets.write_image(req.out, out_image)
    log_path = log.flush(_log_path(req.out))
    return schemas.RemoveResponse(
        out=str(req.out), log=str(log_path), final=_summary(log),
        wall_time_s=time.perf_counter() - start)


def run_paste(req: schemas.PasteRequest) -> schemas.PasteResponse:
    start = time.perf_counter()
    cfg = _resolve(req.config, req.overrides, resolution=req.resolution)
    background = assets.read_image(req.background, cfg.io.resolution)
    object_image = assets.read_image(req.object_image)
    object_mask = assets.read_mask(req.object_mask,
                                   object_image.shape[:2])
    region_mask = None
    if req.region_mask is not None:
        region_mask = assets.read_mask(req.region_mask,
                                       background.shape[:2])
    placement = PlacementSpec(offset=req.offset, scale=req.scale)
    paste_image, paste_mask = paste_object(
        background, object_image, object_mask, region_mask, placement)
    assets.write_image(req.out, paste_image)
    out_mask = req.out_mask
    if out_mask is None:
        base = Path(req.out).with_suffix("")
        out_mask = str(base.with_name(base.name + ".mask.png"))
    assets.write_mask(out_mask, paste_mask)
    return schemas.PasteResponse(
        out=str(req.out), out_mask=str(out_mask),
        wall_time_s=time.perf_counter() - start)


def run_harmonize(req: schemas.HarmonizeRequest) -> schemas.HarmonizeResponse:
    start = time.perf_counter()
    cfg = _resolve(req.config, req.overrides, req.backend, req.seed,
                   req.resolution, req.steps, ("harmonization",))
    backend, extractor = build_runtime(cfg)
    image = assets.read_image(req.image, cfg.io.resolution)
    mask = assets.read_mask(req.mask, image.shape[:2])
    out_image, log = harmonize(image, mask, backend,
                               harmonization_phase_config(cfg), extractor)
    assets.write_image(req.out, out_image)
    log_path = log.flush(_log_path(req.out))
    return schemas.HarmonizeResponse(
        out=str(req.out), log=str(log_path), final=_summary(log),
        wall_time_s=time.perf_counter() - start)


def _load_conditions(kind: str, source: str, target: str,
                     resolution: Optional[int]) -> Conditions:
    if kind == "text":
        return Conditions(kind="text", source=source, target=target)
    return Conditions(
        kind=kind,
        source=assets.read_image(source, resolution),
        target=assets.read_image(target, resolution))


def run_compose(req: schemas.ComposeRequest) -> schemas.ComposeResponse:
    start = time.perf_counter()
    cfg = _resolve(req.config, req.overrides, req.backend, req.seed,
                   req.resolution, req.steps, ("composition",))
    backend, _ = build_runtime(cfg)
    image = assets.read_image(req.image, cfg.io.resolution)
    conditions = _load_conditions(req.kind, req.source, req.target,
                                  cfg.io.resolution)
    out_image, log = semantic_compose(
        image, conditions, backend,
        composition_phase_config(cfg, condition_kind=req.kind))
    assets.write_image(req.out, out_image)
    log_path = log.flush(_log_path(req.out))
    return schemas.ComposeResponse(
        out=str(req.out), log=str(log_path), final=_summary(log),
        wall_time_s=time.perf_counter() - start)


def run_pipeline_cmd(req: schemas.PipelineRequest) -> schemas.PipelineResponse:
    """Full run with per-phase persistence and an error manifest.

    Artifacts land in out_dir as they are produced; a manifest.json is
    always written, recording status, artifacts, and the resolved config.
    """
    start = time.perf_counter()
    sections = ("removal", "harmonization", "composition")
    cfg = _resolve(req.config, req.overrides, req.backend, req.seed,
                   req.resolution, req.steps, sections)
    out_dir = Path(req.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts: dict[str, str] = {}
    manifest_path = out_dir / "manifest.json"

    def _write_manifest(status: str, error: Optional[dict] = None):
        payload = {
            "status": status,
            "error": error,
            "artifacts": artifacts,
            "config": cfg.model_dump(),
            "wall_time_s": time.perf_counter() - start,
        }
        with open(manifest_path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)

    backend, extractor = build_runtime(cfg)
    phase = "setup"
    try:
        image = assets.read_image(req.image, cfg.io.resolution)
        region_mask = assets.read_mask(req.region_mask, image.shape[:2])
        object_image = assets.read_image(req.object_image)
        object_mask = assets.read_mask(req.object_mask,
                                       object_image.shape[:2])
        conditions = None
        if req.kind is not None:
            if req.source is None or req.target is None:
                raise ConfigurationError(
                    "composition conditions need both source and target")
            conditions = _load_conditions(req.kind, req.source, req.target,
                                          cfg.io.resolution)

        phase = "removal"
        background, removal_log = remove_object(
            image, region_mask, backend, removal_phase_config(cfg),
            extractor)
        artifacts["background"] = str(assets.write_image(
            out_dir / "background.png", background))
        artifacts["removal_log"] = str(removal_log.flush(
            out_dir / "removal.loss.csv"))

        phase = "paste"
        placement = PlacementSpec(offset=req.offset, scale=req.scale)
        paste_image, paste_mask = paste_object(
            background, object_image, object_mask, region_mask, placement)
        artifacts["paste"] = str(assets.write_image(
            out_dir / "paste.png", paste_image))
        artifacts["paste_mask"] = str(assets.write_mask(
            out_dir / "paste_mask.png", paste_mask))
        if cfg.io.save_heatmaps:
            raw, _ = low_density_map(
                paste_image, backend, backend.embed(""),
                cfg.io.heatmap_samples, cfg.io.heatmap_t_set,
                np.random.default_rng(cfg.io.seed))
            artifacts["paste_heatmap"] = str(assets.write_heatmap(
                out_dir / "paste_heatmap.png", raw))

        phase = "harmonization"
        harmonized, harmonization_log = harmonize(
            paste_image, paste_mask, backend,
            harmonization_phase_config(cfg), extractor)
        artifacts["harmonized"] = str(assets.write_image(
            out_dir / "harmonized.png", harmonized))
        artifacts["harmonization_log"] = str(harmonization_log.flush(
            out_dir / "harmonization.loss.csv"))

        if conditions is not None:
            phase = "composition"
            result, composition_log = semantic_compose(
                harmonized, conditions, backend,
                composition_phase_config(cfg, condition_kind=req.kind))
            artifacts["composition_log"] = str(composition_log.flush(
                out_dir / "composition.loss.csv"))
        else:
            result = harmonized.copy()
        artifacts["result"] = str(assets.write_image(
            out_dir / "result.png", result))
    except ComposeError as exc:
        _write_manifest("error", {
            "type": type(exc).__name__,
            "message": str(exc),
            "phase": phase,
        })
        raise
    _write_manifest("ok")
    return schemas.PipelineResponse(
        out_dir=str(out_dir), artifacts=artifacts,
        manifest=str(manifest_path), status="ok",
        wall_time_s=time.perf_counter() - start)


def run_diagnose(req: schemas.DiagnoseRequest) -> schemas.DiagnoseResponse:
    start = time.perf_counter()
    cfg = _resolve(req.config, req.overrides, req.backend, req.seed,
                   req.resolution)
    backend, _ = build_runtime(cfg)
    image = assets.read_image(req.image, cfg.io.resolution)
    samples = req.samples if req.samples is not None else cfg.io.heatmap_samples
    t_set = req.t_set if req.t_set is not None else cfg.io.heatmap_t_set
    raw, _ = low_density_map(
        image, backend, backend.embed(req.prompt), samples, t_set,
        np.random.default_rng(cfg.io.seed))
    assets.write_heatmap(req.out, raw)
    stats = {
        "min": float(raw.min()),
        "max": float(raw.max()),
        "median": float(np.median(raw)),
    }
    return schemas.DiagnoseResponse(
        out=str(req.out), samples=samples, t_set=list(t_set), stats=stats,
        wall_time_s=time.perf_counter() - start)


def run_resolve(req: schemas.ResolveConfigRequest) -> schemas.ResolveConfigResponse:
    cfg = resolve_config(req.config, req.overrides)
    return schemas.ResolveConfigResponse(resolved=cfg.model_dump())
