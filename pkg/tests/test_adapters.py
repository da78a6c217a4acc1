"""Adapter loading, backend dispatch, and prompt embedding."""

import sys

import numpy as np
import pytest

from diffcompose.backends.analytic import AnalyticGaussianBackend
from diffcompose.backends.base import (
    DEFAULT_PROMPT_TAGS,
    EMBED_DIM,
    EMBED_TOKENS,
    PROMPT_TAGS,
    DiffusionBackend,
    PromptEmbedding,
    embed_prompt_tokens,
    load_adapter,
    make_backend,
)
from diffcompose.backends.toy_attention import ToyAttentionBackend
from diffcompose.errors import ConfigurationError

PLUGIN = '''
import numpy as np

from diffcompose.backends.analytic import (
    AnalyticGaussianBackend,
    AnalyticGaussianConfig,
)


def good():
    return AnalyticGaussianBackend(AnalyticGaussianConfig(beta=2.0))


def explodes():
    raise RuntimeError("checkpoint missing")


def wrong_type():
    return object()


not_callable_but_present = "just a string"


import dataclasses


class _BadLayout(AnalyticGaussianBackend):
    def info(self):
        return dataclasses.replace(super().info(), latent_channels=0)


def bad_layout():
    return _BadLayout(AnalyticGaussianConfig())


class _BadScheduler(AnalyticGaussianBackend):
    # info() must not touch self.scheduler, so the loader reaches its
    # scheduler type check instead of crashing inside info()
    def info(self):
        return AnalyticGaussianBackend(AnalyticGaussianConfig()).info()


def bad_scheduler():
    backend = _BadScheduler(AnalyticGaussianConfig())
    backend.scheduler = "not a scheduler"
    return backend
'''


@pytest.fixture
def plugin_module(tmp_path, monkeypatch):
    """Materialise the adapter plugin on an importable path."""
    (tmp_path / "fake_adapter_mod.py").write_text(PLUGIN)
    monkeypatch.syspath_prepend(str(tmp_path))
    sys.modules.pop("fake_adapter_mod", None)
    yield "fake_adapter_mod"
    sys.modules.pop("fake_adapter_mod", None)


class TestLoadAdapter:
    def test_good_factory_returns_backend(self, plugin_module):
        backend = load_adapter(f"{plugin_module}:good")
        assert isinstance(backend, AnalyticGaussianBackend)
        assert backend.info().name == "analytic-gaussian"

    @pytest.mark.parametrize("spec", ["no_colon", ":factory", "module:", ":"])
    def test_malformed_spec(self, spec):
        with pytest.raises(ConfigurationError, match="must look like"):
            load_adapter(spec)

    def test_import_failure(self):
        with pytest.raises(ConfigurationError, match="cannot import"):
            load_adapter("definitely_not_a_module_xyz:factory")

    def test_missing_attribute(self, plugin_module):
        with pytest.raises(ConfigurationError, match="no attribute"):
            load_adapter(f"{plugin_module}:nonexistent")

    def test_factory_raises(self, plugin_module):
        with pytest.raises(ConfigurationError, match="raised"):
            load_adapter(f"{plugin_module}:explodes")

    def test_factory_returns_wrong_type(self, plugin_module):
        with pytest.raises(ConfigurationError, match="not a DiffusionBackend"):
            load_adapter(f"{plugin_module}:wrong_type")

    def test_non_callable_attribute(self, plugin_module):
        # calling a string raises TypeError, reported as the factory raising
        with pytest.raises(ConfigurationError, match="raised"):
            load_adapter(f"{plugin_module}:not_callable_but_present")

    def test_invalid_layout_rejected(self, plugin_module):
        with pytest.raises(ConfigurationError, match="invalid layout"):
            load_adapter(f"{plugin_module}:bad_layout")

    def test_non_scheduler_rejected(self, plugin_module):
        with pytest.raises(ConfigurationError, match="Scheduler"):
            load_adapter(f"{plugin_module}:bad_scheduler")


class TestMakeBackend:
    def test_analytic_kind(self):
        backend = make_backend("analytic", beta=3.0)
        assert isinstance(backend, AnalyticGaussianBackend)
        assert backend.config.beta == 3.0

    def test_toy_attention_kind(self):
        backend = make_backend("toy-attention", seed=5)
        assert isinstance(backend, ToyAttentionBackend)

    def test_adapter_kind(self, plugin_module):
        backend = make_backend("adapter", adapter_spec=f"{plugin_module}:good")
        assert isinstance(backend, AnalyticGaussianBackend)
        assert backend.config.beta == 2.0

    def test_adapter_kind_without_spec(self):
        with pytest.raises(ConfigurationError, match="adapter_spec"):
            make_backend("adapter")

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError, match="unknown backend kind"):
            make_backend("pixelcnn")


class TestPromptEmbedding:
    def test_tokens_shape_and_determinism(self):
        a = embed_prompt_tokens("A harmonious scene.")
        b = embed_prompt_tokens("A harmonious scene.")
        assert a.shape == (EMBED_TOKENS, EMBED_DIM)
        assert np.array_equal(a, b)

    def test_distinct_texts_distinct_tokens(self):
        a = embed_prompt_tokens("Some place.")
        b = embed_prompt_tokens("Some place. ")
        assert not np.array_equal(a, b)

    def test_empty_prompt_is_valid(self):
        tokens = embed_prompt_tokens("")
        assert tokens.shape == (EMBED_TOKENS, EMBED_DIM)
        assert np.all(np.isfinite(tokens))

    def test_default_registry(self):
        assert DEFAULT_PROMPT_TAGS[""] == "unconditional"
        assert DEFAULT_PROMPT_TAGS["Something in some place."] == "source"
        assert DEFAULT_PROMPT_TAGS["Some place."] == "target"
        assert DEFAULT_PROMPT_TAGS["A harmonious scene."] == "target"
        assert set(DEFAULT_PROMPT_TAGS.values()) <= set(PROMPT_TAGS)

    def test_embed_known_prompt(self):
        backend = make_backend("analytic")
        emb = backend.embed("Some place.")
        assert isinstance(emb, PromptEmbedding)
        assert emb.text == "Some place."
        assert emb.tag == "target"
        assert np.array_equal(emb.tokens, embed_prompt_tokens("Some place."))

    def test_embed_unknown_prompt(self):
        backend = make_backend("analytic")
        with pytest.raises(ConfigurationError, match="Known:"):
            backend.embed("A cat on a mat.")

    def test_custom_prompt_registration(self):
        backend = make_backend(
            "analytic", prompt_tags={"A cat on a mat.": "source"}
        )
        emb = backend.embed("A cat on a mat.")
        assert emb.tag == "source"
        # defaults survive alongside the extra entry
        assert backend.embed("").tag == "unconditional"

    def test_custom_prompt_bad_tag(self):
        with pytest.raises(ConfigurationError):
            make_backend("analytic", prompt_tags={"x": "style"})


class TestBackendContract:
    """Both built-in backends honour the shared abstract surface."""

    @pytest.mark.parametrize("kind", ["analytic", "toy-attention"])
    def test_info_fields(self, kind):
        info = make_backend(kind).info()
        assert info.compression_factor >= 1
        assert info.latent_channels >= 1
        assert isinstance(info.name, str) and info.name

    @pytest.mark.parametrize("kind", ["analytic", "toy-attention"])
    def test_is_diffusion_backend(self, kind):
        assert isinstance(make_backend(kind), DiffusionBackend)
