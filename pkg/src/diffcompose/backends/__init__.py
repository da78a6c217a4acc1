"""Diffusion backends: schedule, noise predictors, and the adapter loader."""

from .scheduler import Scheduler, add_noise
from .base import (
    BackendInfo,
    ConditionFeatures,
    DiffusionBackend,
    PromptEmbedding,
    DEFAULT_PROMPT_TAGS,
    load_adapter,
    make_backend,
)
from .analytic import AnalyticGaussianBackend, AnalyticGaussianConfig
from .toy_attention import ToyAttentionBackend, ToyAttentionConfig

__all__ = [
    "Scheduler",
    "add_noise",
    "BackendInfo",
    "ConditionFeatures",
    "DiffusionBackend",
    "PromptEmbedding",
    "DEFAULT_PROMPT_TAGS",
    "load_adapter",
    "make_backend",
    "AnalyticGaussianBackend",
    "AnalyticGaussianConfig",
    "ToyAttentionBackend",
    "ToyAttentionConfig",
]
