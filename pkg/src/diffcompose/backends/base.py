"""Backend contract: the interface every noise predictor plugs into.

A backend owns a scheduler, a latent codec, a prompt embedder, and a noise
predictor.  The two toy backends shipped here are deterministic and run on
the CPU in milliseconds; heavyweight models enter through `load_adapter`,
which imports a user-supplied factory and validates the same contract.
"""

from __future__ import annotations

import hashlib
import importlib
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from ..errors import CapabilityError, ConfigurationError
from .scheduler import Scheduler

logger = logging.getLogger("diffcompose.backends")

EMBED_TOKENS = 4
EMBED_DIM = 8

PROMPT_TAGS = ("unconditional", "source", "target")

# Built-in prompt registry: maps exact prompt text to a semantic tag the toy
# backends can condition on.  Configs may register additional prompts.
DEFAULT_PROMPT_TAGS: dict[str, str] = {
    "": "unconditional",
    "Something in some place.": "source",
    "Some place.": "target",
    "A harmonious scene.": "target",
}


@dataclass(frozen=True)
class PromptEmbedding:
    """Embedded prompt: a pure function of the prompt text.

    Attributes:
        text: the original prompt string.
        tag: semantic tag ("unconditional", "source", or "target").
        tokens: (EMBED_TOKENS, EMBED_DIM) float array derived from a hash of
            the text, so equal texts embed bitwise identically.
    """

    text: str
    tag: str
    tokens: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class ConditionFeatures:
    """Spatial condition maps keyed by attention resolution.

    Attributes:
        maps: {(h, w): (h*w, feature_dim) array} per attention resolution.
        provenance: where the features came from ("sketch" or "canny").
    """

    maps: Mapping[tuple[int, int], np.ndarray]
    provenance: str


@dataclass(frozen=True)
class BackendInfo:
    """Capabilities a backend declares up front."""

    name: str
    compression_factor: int
    latent_channels: int
    schedule_name: str
    t_max: int
    feature_injection: bool
    attention_hooks: bool
    exact_vjp: bool


def embed_prompt_tokens(text: str) -> np.ndarray:
    """Deterministic token array for a prompt string.

    Seeded from a SHA-256 digest of the text, so the mapping text -> tokens
    is pure: equal texts give bitwise-equal arrays in any process.
    """
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "little")
    rng = np.random.default_rng(seed)
    return rng.standard_normal((EMBED_TOKENS, EMBED_DIM))


class DiffusionBackend(ABC):
    """Frozen diffusion model surface used by the optimization loops.

    Subclasses must be immutable after construction; the loops share one
    instance across phases and may call it from several requests.
    """

    scheduler: Scheduler

    def __init__(self, prompt_tags: Optional[Mapping[str, str]] = None):
        table = dict(DEFAULT_PROMPT_TAGS)
        if prompt_tags:
            for text, tag in prompt_tags.items():
                if tag not in PROMPT_TAGS:
                    raise ConfigurationError(
                        f"prompt tag {tag!r} for prompt {text!r} must be one "
                        f"of {PROMPT_TAGS}"
                    )
                table[text] = tag
        self._prompt_tags = table
        self._warned_once: set[str] = set()

    @abstractmethod
    def info(self) -> BackendInfo:
        """Declared capabilities."""

    def embed(self, text: str) -> PromptEmbedding:
        """Embed a registered prompt; unknown prompts are a config error."""
        if text not in self._prompt_tags:
            known = ", ".join(repr(k) for k in sorted(self._prompt_tags))
            raise ConfigurationError(
                f"prompt {text!r} is not registered with this backend; "
                f"register it under [backend.prompt_tags]. Known: {known}"
            )
        return PromptEmbedding(
            text=text,
            tag=self._prompt_tags[text],
            tokens=embed_prompt_tokens(text),
        )

    @abstractmethod
    def encode(self, image: np.ndarray) -> np.ndarray:
        """Image (H, W, 3) in [0, 1] -> latent (C, h, w)."""

    @abstractmethod
    def decode(self, latent: np.ndarray) -> np.ndarray:
        """Latent (C, h, w) -> image (H, W, 3)."""

    @abstractmethod
    def predict_noise(
        self,
        z_t: np.ndarray,
        t: int,
        embedding: PromptEmbedding,
        features: Optional[ConditionFeatures] = None,
        control=None,
    ) -> np.ndarray:
        """Predicted noise for a noised latent at timestep t."""

    def predict_noise_vjp(
        self,
        z_t: np.ndarray,
        t: int,
        embedding: PromptEmbedding,
        cotangent: np.ndarray,
        features: Optional[ConditionFeatures] = None,
        control=None,
    ) -> np.ndarray:
        """Vector-Jacobian product of predict_noise w.r.t. z_t.

        Only backends declaring exact_vjp implement this; it backs the
        mse_backprop gradient mode.
        """
        raise CapabilityError(
            f"backend {self.info().name!r} does not provide an exact "
            "noise-predictor VJP; use the difference gradient mode"
        )

    def decode_vjp(self, latent: np.ndarray,
                   image_cotangent: np.ndarray) -> np.ndarray:
        """Vector-Jacobian product of decode w.r.t. the latent."""
        raise CapabilityError(
            f"backend {self.info().name!r} does not provide a decoder VJP"
        )

    def attention_layout(
        self, latent_shape: Sequence[int]
    ) -> tuple[tuple[int, tuple[int, int]], ...]:
        """(layer_index, (h, w)) for each self-attention site, or empty."""
        return ()

    def condition_features(self, image: np.ndarray,
                           provenance: str) -> ConditionFeatures:
        """Project a spatial condition image into per-resolution features."""
        raise CapabilityError(
            f"backend {self.info().name!r} does not support feature "
            "injection for spatial conditions"
        )

    def _warn_once(self, key: str, message: str) -> None:
        if key not in self._warned_once:
            self._warned_once.add(key)
            logger.warning(message)


def load_adapter(spec: str) -> DiffusionBackend:
    """Load an external backend from a "module:factory" spec string.

    The named factory is called with no arguments and must return a
    DiffusionBackend whose declared info fields are well formed.  Any
    import/call/contract failure is reported as ConfigurationError.
    """
    module_name, sep, factory_name = spec.partition(":")
    if not sep or not module_name or not factory_name:
        raise ConfigurationError(
            f"adapter spec {spec!r} must look like 'package.module:factory'"
        )
    try:
        module = importlib.import_module(module_name)
    except ImportError as exc:
        raise ConfigurationError(
            f"cannot import adapter module {module_name!r}: {exc}"
        ) from exc
    factory = getattr(module, factory_name, None)
    if factory is None:
        raise ConfigurationError(
            f"adapter module {module_name!r} has no attribute "
            f"{factory_name!r}"
        )
    try:
        backend = factory()
    except Exception as exc:
        raise ConfigurationError(
            f"adapter factory {spec!r} raised: {exc}"
        ) from exc
    if not isinstance(backend, DiffusionBackend):
        raise ConfigurationError(
            f"adapter factory {spec!r} returned {type(backend).__name__}, "
            "not a DiffusionBackend"
        )
    info = backend.info()
    if info.compression_factor < 1 or info.latent_channels < 1:
        raise ConfigurationError(
            f"adapter {info.name!r} declares an invalid layout: "
            f"compression_factor={info.compression_factor}, "
            f"latent_channels={info.latent_channels}"
        )
    if not isinstance(backend.scheduler, Scheduler):
        raise ConfigurationError(
            f"adapter {info.name!r} must expose a Scheduler instance"
        )
    return backend


def make_backend(kind: str, **options) -> DiffusionBackend:
    """Construct a backend by kind name ("analytic", "toy-attention",
    or "adapter" with adapter_spec=...)."""
    from .analytic import AnalyticGaussianBackend, AnalyticGaussianConfig
    from .toy_attention import ToyAttentionBackend, ToyAttentionConfig

    if kind == "analytic":
        return AnalyticGaussianBackend(AnalyticGaussianConfig(**options))
    if kind == "toy-attention":
        return ToyAttentionBackend(ToyAttentionConfig(**options))
    if kind == "adapter":
        spec = options.get("adapter_spec")
        if not spec:
            raise ConfigurationError(
                "backend kind 'adapter' requires adapter_spec"
            )
        return load_adapter(spec)
    raise ConfigurationError(
        f"unknown backend kind {kind!r}; expected 'analytic', "
        "'toy-attention', or 'adapter'"
    )
