"""Tests for the box-pyramid feature extractor and the plug-in loader."""

import sys
import textwrap

import numpy as np
import pytest

from diffcompose.errors import CapabilityError, ConfigurationError, ShapeError
from diffcompose.features import (
    BoxPyramidExtractor,
    FeatureExtractor,
    load_extractor,
)


class TestExtract:
    def test_level_shapes_halve_with_ceiling(self, extractor):
        feats = extractor.extract(np.zeros((13, 9, 3)))
        assert [f.shape[:2] for f in feats] == [
            (13, 9),
            (7, 5),
            (4, 3),
            (2, 2),
        ]

    def test_finest_level_is_the_image(self, extractor, image16):
        feats = extractor.extract(image16)
        assert np.array_equal(feats[0], image16)
        feats[0][0, 0, 0] = 99.0  # extract copies, the input is untouched
        assert image16[0, 0, 0] != 99.0

    def test_levels_zero_is_identity_only(self, image16):
        feats = BoxPyramidExtractor(levels=0).extract(image16)
        assert len(feats) == 1

    def test_linearity(self, extractor, rng):
        a = rng.standard_normal((8, 8, 3))
        b = rng.standard_normal((8, 8, 3))
        fa = extractor.extract(a)
        fb = extractor.extract(b)
        fab = extractor.extract(2.0 * a - 0.5 * b)
        for la, lb, lab in zip(fa, fb, fab):
            assert np.allclose(lab, 2.0 * la - 0.5 * lb, atol=1e-12)

    def test_blur_averages_interior(self, extractor):
        # The centre of a constant image pools nine ones; borders pool
        # fewer because padding is zero, so only interior output pixels
        # keep the constant value.
        feats = BoxPyramidExtractor(levels=1).extract(np.ones((9, 9)))
        level = feats[1]
        assert level.shape == (5, 5)
        assert np.allclose(level[1:4, 1:4], 1.0, atol=1e-12)
        assert level[0, 0] == pytest.approx(4.0 / 9.0)

    def test_grayscale_supported(self, extractor):
        feats = extractor.extract(np.ones((8, 8)))
        assert feats[1].shape == (4, 4)

    def test_bad_rank_rejected(self, extractor):
        with pytest.raises(ShapeError):
            extractor.extract(np.zeros((2, 2, 2, 2)))

    def test_negative_levels_rejected(self):
        with pytest.raises(ShapeError):
            BoxPyramidExtractor(levels=-1)


class TestVjp:
    def test_adjoint_identity(self, extractor, rng):
        """<extract(u), cot> == <u, extract_vjp(cot)> for the linear map."""
        x = rng.standard_normal((11, 7, 3))
        u = rng.standard_normal((11, 7, 3))
        feats = extractor.extract(x)
        cots = [rng.standard_normal(f.shape) for f in feats]
        ju = extractor.extract(u)  # extract is linear, so J u = extract(u)
        lhs = sum(np.vdot(a, b) for a, b in zip(ju, cots))
        rhs = np.vdot(u, extractor.extract_vjp(x, cots))
        assert abs(lhs - rhs) < 1e-10

    def test_matches_finite_difference(self, extractor, rng):
        x = rng.standard_normal((6, 6, 3))
        cots = [rng.standard_normal(f.shape) for f in extractor.extract(x)]
        g = extractor.extract_vjp(x, cots)
        eps = 1e-6
        for _ in range(5):
            idx = tuple(rng.integers(0, s) for s in x.shape)
            xp = x.copy()
            xp[idx] += eps
            xm = x.copy()
            xm[idx] -= eps
            fp = sum(
                np.vdot(a, b) for a, b in zip(extractor.extract(xp), cots)
            )
            fm = sum(
                np.vdot(a, b) for a, b in zip(extractor.extract(xm), cots)
            )
            assert abs((fp - fm) / (2 * eps) - g[idx]) < 1e-6

    def test_wrong_cotangent_count_rejected(self, extractor, rng):
        x = rng.standard_normal((8, 8, 3))
        with pytest.raises(ShapeError):
            extractor.extract_vjp(x, [x])

    def test_base_class_declares_no_vjp(self, rng):
        class Featureless(FeatureExtractor):
            name = "featureless"

            def extract(self, image):
                return [np.asarray(image)]

        with pytest.raises(CapabilityError):
            Featureless().extract_vjp(rng.standard_normal((4, 4)), [np.ones(1)])


class TestLoadExtractor:
    def test_builtin_by_name(self):
        ext = load_extractor("box-pyramid", levels=2)
        assert isinstance(ext, BoxPyramidExtractor)
        assert ext.levels == 2

    def test_plugin_module_factory(self, tmp_path, monkeypatch):
        mod = tmp_path / "fake_extractor_mod.py"
        mod.write_text(
            textwrap.dedent(
                """
                from diffcompose.features import BoxPyramidExtractor

                def build(levels=1):
                    return BoxPyramidExtractor(levels=levels)

                def not_an_extractor():
                    return object()
                """
            )
        )
        monkeypatch.syspath_prepend(str(tmp_path))
        sys.modules.pop("fake_extractor_mod", None)
        ext = load_extractor("fake_extractor_mod:build", levels=4)
        assert ext.levels == 4
        with pytest.raises(ConfigurationError):
            load_extractor("fake_extractor_mod:not_an_extractor")
        with pytest.raises(ConfigurationError):
            load_extractor("fake_extractor_mod:missing_factory")

    def test_bad_specs_rejected(self):
        with pytest.raises(ConfigurationError):
            load_extractor("no-colon-and-not-builtin")
        with pytest.raises(ConfigurationError):
            load_extractor("package.that.is.not.there:build")
