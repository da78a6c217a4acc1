"""Request/response models shared by the HTTP service and the CLI client.

Requests reference files by path inside the host filesystem; the service is
a local tool server, not a public upload endpoint.  Free-form `overrides`
carry config-section overrides and are validated against the full config
schema (unknown keys rejected) when the run config is resolved.
"""

from __future__ import annotations

from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CommonRunFields(_Model):
    config: Optional[str] = None
    backend: Optional[str] = Field(
        default=None,
        description="analytic | toy-attention | adapter:<module:factory>")
    seed: Optional[int] = None
    steps: Optional[int] = Field(default=None, ge=1)
    resolution: Optional[int] = Field(default=None, ge=8)
    overrides: dict[str, Any] = {}


class RemoveRequest(CommonRunFields):
    image: str
    mask: str
    out: str


class PasteRequest(_Model):
    background: str
    object_image: str
    object_mask: str
    region_mask: Optional[str] = None
    out: str
    out_mask: Optional[str] = None
    offset: Optional[tuple[int, int]] = None
    scale: Optional[float] = Field(default=None, gt=0.0)
    config: Optional[str] = None
    resolution: Optional[int] = Field(default=None, ge=8)
    overrides: dict[str, Any] = {}


class HarmonizeRequest(CommonRunFields):
    image: str
    mask: str
    out: str


class ComposeRequest(CommonRunFields):
    image: str
    out: str
    kind: Literal["text", "sketch", "canny"] = "text"
    source: str
    target: str


class PipelineRequest(CommonRunFields):
    image: str
    region_mask: str
    object_image: str
    object_mask: str
    out_dir: str
    kind: Optional[Literal["text", "sketch", "canny"]] = None
    source: Optional[str] = None
    target: Optional[str] = None
    offset: Optional[tuple[int, int]] = None
    scale: Optional[float] = Field(default=None, gt=0.0)


class DiagnoseRequest(CommonRunFields):
    image: str
    out: str
    samples: Optional[int] = Field(default=None, ge=1)
    t_set: Optional[list[int]] = None
    prompt: str = ""


class ResolveConfigRequest(_Model):
    config: Optional[str] = None
    overrides: dict[str, Any] = {}


class LossSummary(_Model):
    steps: int
    total: float
    dds: float
    per_bak: float
    per_for: float
    grad_norm: float


class RemoveResponse(_Model):
    out: str
    log: str
    final: LossSummary
    wall_time_s: float


class PasteResponse(_Model):
    out: str
    out_mask: str
    wall_time_s: float


class HarmonizeResponse(_Model):
    out: str
    log: str
    final: LossSummary
    wall_time_s: float


class ComposeResponse(_Model):
    out: str
    log: str
    final: LossSummary
    wall_time_s: float


class PipelineResponse(_Model):
    out_dir: str
    artifacts: dict[str, str]
    manifest: str
    status: str
    wall_time_s: float


class DiagnoseResponse(_Model):
    out: str
    samples: int
    t_set: list[int]
    stats: dict[str, float]
    wall_time_s: float


class ResolveConfigResponse(_Model):
    resolved: dict[str, Any]


class HealthResponse(_Model):
    status: str
    version: str


class ErrorBody(_Model):
    error: str
    message: str
