"""Tests for the spectral Gaussian backend.

The conditional-mean filter is checked three independent ways: a binned
scalar Monte Carlo estimate in the white-noise limit, a joint-Gaussian
regression fitted from prior samples at 4x4, and a dense real-space
matrix inverse built from explicit DFT matrices at 8x8.
"""

import numpy as np
import pytest

from diffcompose.backends.analytic import (
    AnalyticGaussianBackend,
    AnalyticGaussianConfig,
)
from diffcompose.errors import ConfigurationError, RangeError, ShapeError

ZERO_MEANS = {"unconditional": 0.0, "source": 0.0, "target": 0.0}


def centred_backend(beta):
    return AnalyticGaussianBackend(
        AnalyticGaussianConfig(beta=beta, means=dict(ZERO_MEANS))
    )


# ---------------------------------------------------------------------------
# conditional-mean filter against independent oracles
# ---------------------------------------------------------------------------


class TestConditionalMean:
    def test_white_noise_closed_form(self):
        """With beta=0 and zero mean the filter collapses pointwise."""
        backend = centred_backend(0.0)
        emb = backend.embed("")
        t = 250  # alpha_bar = 0.75
        for v in (-1.2, 0.3, 0.9):
            latent = np.full((3, 2, 2), v)
            pred = backend.predict_noise(latent, t, emb)
            assert np.allclose(pred, 0.5 * v, atol=1e-14)

    def test_white_noise_binned_mc(self):
        """Binned scalar MC estimate of E[noise | noisy value].

        600k scalar draws, bins of half-width 0.05. Frozen run: the
        closed form sits within 1.2 standard errors of every bin mean.
        """
        backend = centred_backend(0.0)
        emb = backend.embed("")
        t = 250
        ab = 0.75
        gen = np.random.default_rng(42)
        n = 600_000
        z = gen.standard_normal(n)
        eps = gen.standard_normal(n)
        zt = np.sqrt(ab) * z + np.sqrt(1 - ab) * eps
        for v in (-1.2, 0.3, 0.9):
            sel = np.abs(zt - v) < 0.05
            assert sel.sum() > 5_000
            mc = eps[sel].mean()
            se = eps[sel].std() / np.sqrt(sel.sum())
            pred = backend.predict_noise(np.full((3, 2, 2), v), t, emb)
            assert abs(pred[0, 0, 0] - mc) <= 3.0 * se

    def test_joint_regression_mc(self, analytic_backend):
        """Linear regression of noise on noisy latent from prior samples.

        The exact conditional mean of a joint Gaussian is the fitted
        linear predictor, so a sample-covariance fit converges to the
        backend's spectral filter without sharing any of its code.
        Twelve chunks of 32k draws give a standard error per component;
        frozen run: worst z-score 3.27, rms z-score 0.93-1.06.
        """
        backend = analytic_backend
        emb = backend.embed("")
        h = w = 4
        dim = h * w
        lam = backend.covariance_eigenvalues(h, w)

        def draw_pairs(seed, m):
            g = np.random.default_rng(seed)
            white = g.standard_normal((m, h, w))
            zf = np.fft.ifft2(
                np.fft.fft2(white, axes=(1, 2)) * np.sqrt(lam), axes=(1, 2)
            ).real + 0.5
            eps = g.standard_normal((m, h, w))
            return zf.reshape(m, dim), eps.reshape(m, dim)

        for t in (100, 500, 900):
            ab = 1.0 - t / 1000
            zp, ep = draw_pairs(100, 4)
            probes = np.sqrt(ab) * zp + np.sqrt(1 - ab) * ep
            chunk_preds = []
            for c in range(12):
                zs, es = draw_pairs(1000 + c, 32_000)
                zts = np.sqrt(ab) * zs + np.sqrt(1 - ab) * es
                mz = zts.mean(axis=0)
                me = es.mean(axis=0)
                dz = zts - mz
                de = es - me
                c_zz = dz.T @ dz / (len(zs) - 1)
                c_ez = de.T @ dz / (len(zs) - 1)
                coef = c_ez @ np.linalg.inv(c_zz)
                chunk_preds.append(me + (probes - mz) @ coef.T)
            cp = np.stack(chunk_preds)
            mc_mean = cp.mean(axis=0)
            mc_se = cp.std(axis=0, ddof=1) / np.sqrt(12)
            scores = []
            for i in range(len(probes)):
                pred = backend.predict_noise(
                    probes[i].reshape(1, h, w), t, emb
                ).reshape(dim)
                scores.append(np.abs(pred - mc_mean[i]) / mc_se[i])
            scores = np.stack(scores)
            assert scores.max() <= 4.0
            assert np.sqrt((scores**2).mean()) <= 1.3

    def test_dense_dft_filter(self, analytic_backend):
        """Spectral filter equals a dense real-space matrix inverse."""
        backend = analytic_backend
        h = w = 8
        lam = backend.covariance_eigenvalues(h, w)
        f1 = np.fft.fft(np.eye(h)) / np.sqrt(h)
        f2d = np.kron(f1, f1)
        sigma = (f2d.conj().T @ np.diag(lam.reshape(-1)) @ f2d).real
        assert np.allclose(sigma, sigma.T, atol=1e-12)
        gen = np.random.default_rng(7)
        zt = gen.standard_normal((3, h, w))
        emb = backend.embed("")
        mu = 0.5
        for t in (100, 500, 900):
            ab = 1.0 - t / 1000
            dense = np.linalg.inv(ab * sigma + (1 - ab) * np.eye(h * w))
            expected = np.stack(
                [
                    (
                        np.sqrt(1 - ab)
                        * dense
                        @ (zt[c].reshape(-1) - np.sqrt(ab) * mu)
                    ).reshape(h, w)
                    for c in range(3)
                ]
            )
            pred = backend.predict_noise(zt, t, emb)
            assert np.abs(pred - expected).max() <= 1e-12

    def test_prediction_is_deterministic(self, analytic_backend):
        emb = analytic_backend.embed("")
        z = np.random.default_rng(3).standard_normal((3, 8, 8))
        a = analytic_backend.predict_noise(z, 300, emb)
        b = analytic_backend.predict_noise(z.copy(), 300, emb)
        assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# covariance spectrum and prior sampling
# ---------------------------------------------------------------------------


class TestSpectrum:
    def test_eigenvalue_formula(self, analytic_backend):
        lam = analytic_backend.covariance_eigenvalues(8, 8)
        fy = np.fft.fftfreq(8, d=1.0 / 8)
        fx = np.fft.fftfreq(8, d=1.0 / 8)
        k2 = fy[:, None] ** 2 + fx[None, :] ** 2
        assert np.allclose(lam, 1.0 / (1.0 + 4.0 * k2), atol=1e-14)

    def test_beta_zero_is_identity(self, iid_backend):
        lam = iid_backend.covariance_eigenvalues(6, 5)
        assert np.allclose(lam, 1.0, atol=1e-15)

    def test_eigenvalues_cached(self, analytic_backend):
        a = analytic_backend.covariance_eigenvalues(16, 16)
        b = analytic_backend.covariance_eigenvalues(16, 16)
        assert a is b

    def test_prior_sample_moments(self, analytic_backend):
        """Sample mean and marginal variance converge to the prior's.

        The marginal variance of every pixel is the mean eigenvalue.
        """
        h = w = 8
        gen = np.random.default_rng(11)
        draws = np.stack(
            [
                analytic_backend.sample_prior("target", (1, h, w), gen)[0]
                for _ in range(4000)
            ]
        )
        lam = analytic_backend.covariance_eigenvalues(h, w)
        assert abs(draws.mean() - 0.5) < 0.01
        marg = draws.var(axis=0).mean()
        assert abs(marg - lam.mean()) < 0.05 * lam.mean()

    def test_prior_sample_spatial_correlation(self, analytic_backend):
        """beta > 0 induces positive neighbour correlation; iid does not."""
        h = w = 16
        gen = np.random.default_rng(5)
        draws = np.stack(
            [
                analytic_backend.sample_prior("source", (1, h, w), gen)[0]
                for _ in range(2000)
            ]
        )
        centred = draws - draws.mean(axis=0)
        corr = (centred[:, :, :-1] * centred[:, :, 1:]).mean() / centred.var()
        assert corr > 0.3

    def test_prior_sample_is_rng_driven(self, analytic_backend):
        a = analytic_backend.sample_prior(
            "target", (3, 8, 8), np.random.default_rng(1)
        )
        b = analytic_backend.sample_prior(
            "target", (3, 8, 8), np.random.default_rng(1)
        )
        c = analytic_backend.sample_prior(
            "target", (3, 8, 8), np.random.default_rng(2)
        )
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)


# ---------------------------------------------------------------------------
# mean fields
# ---------------------------------------------------------------------------


class TestMeanField:
    def test_scalar_broadcast(self, analytic_backend):
        field = analytic_backend.mean_field("source", (3, 4, 4))
        assert field.shape == (3, 4, 4)
        assert np.all(field == 0.5)

    def test_spatial_map_broadcast(self):
        plane = np.linspace(0.0, 1.0, 16).reshape(4, 4)
        backend = AnalyticGaussianBackend(
            AnalyticGaussianConfig(
                means={"unconditional": 0.0, "source": plane, "target": 0.0}
            )
        )
        field = backend.mean_field("source", (3, 4, 4))
        for c in range(3):
            assert np.array_equal(field[c], plane)

    def test_full_channel_map(self):
        vol = np.random.default_rng(0).uniform(size=(3, 4, 4))
        backend = AnalyticGaussianBackend(
            AnalyticGaussianConfig(
                means={"unconditional": vol, "source": 0.0, "target": 0.0}
            )
        )
        assert np.array_equal(
            backend.mean_field("unconditional", (3, 4, 4)), vol
        )

    def test_shape_mismatch_rejected(self):
        backend = AnalyticGaussianBackend(
            AnalyticGaussianConfig(
                means={
                    "unconditional": np.zeros((5, 5)),
                    "source": 0.0,
                    "target": 0.0,
                }
            )
        )
        with pytest.raises(ShapeError):
            backend.mean_field("unconditional", (3, 4, 4))

    def test_unknown_tag_rejected(self, analytic_backend):
        with pytest.raises(RangeError):
            analytic_backend.mean_field("style", (3, 4, 4))


# ---------------------------------------------------------------------------
# linearity, adjoint, codec
# ---------------------------------------------------------------------------


class TestVjp:
    def test_adjoint_identity(self, analytic_backend):
        """<J u, w> == <u, J^T w> for the prediction's linear part."""
        emb = analytic_backend.embed("")
        gen = np.random.default_rng(9)
        z = gen.standard_normal((3, 8, 8))
        u = gen.standard_normal((3, 8, 8))
        w = gen.standard_normal((3, 8, 8))
        t = 400
        ju = analytic_backend.predict_noise(
            z + u, t, emb
        ) - analytic_backend.predict_noise(z, t, emb)
        jtw = analytic_backend.predict_noise_vjp(z, t, emb, w)
        assert abs(np.vdot(ju, w) - np.vdot(u, jtw)) < 1e-10

    def test_vjp_matches_finite_difference(self, analytic_backend):
        emb = analytic_backend.embed("")
        gen = np.random.default_rng(4)
        z = gen.standard_normal((3, 6, 6))
        w = gen.standard_normal((3, 6, 6))
        g = analytic_backend.predict_noise_vjp(z, 200, emb, w)
        eps = 1e-6
        for _ in range(5):
            idx = tuple(gen.integers(0, s) for s in z.shape)
            zp = z.copy()
            zp[idx] += eps
            zm = z.copy()
            zm[idx] -= eps
            fd = (
                np.vdot(analytic_backend.predict_noise(zp, 200, emb), w)
                - np.vdot(analytic_backend.predict_noise(zm, 200, emb), w)
            ) / (2 * eps)
            assert abs(fd - g[idx]) < 1e-5


class TestCodec:
    def test_roundtrip_is_transpose(self, analytic_backend, image16):
        z = analytic_backend.encode(image16)
        assert z.shape == (3, 16, 16)
        back = analytic_backend.decode(z)
        assert np.array_equal(back, image16)

    def test_decode_vjp_is_transpose(self, analytic_backend, rng):
        z = rng.standard_normal((3, 8, 8))
        cot = rng.standard_normal((8, 8, 3))
        g = analytic_backend.decode_vjp(z, cot)
        assert np.array_equal(g, np.transpose(cot, (2, 0, 1)))

    def test_compression_factor_is_identity(self, analytic_backend):
        assert analytic_backend.info().compression_factor == 1


# ---------------------------------------------------------------------------
# configuration and capability surface
# ---------------------------------------------------------------------------


class TestConfig:
    def test_negative_beta_rejected(self):
        with pytest.raises(RangeError):
            AnalyticGaussianConfig(beta=-0.1)

    def test_unknown_mean_tag_rejected(self):
        with pytest.raises(RangeError):
            AnalyticGaussianConfig(means={"style": 0.0})

    def test_partial_means_fill_defaults(self):
        backend = AnalyticGaussianBackend(
            AnalyticGaussianConfig(means={"target": 0.9})
        )
        assert np.all(backend.mean_field("target", (1, 2, 2)) == 0.9)
        assert np.all(backend.mean_field("source", (1, 2, 2)) == 0.5)

    def test_unknown_prompt_rejected(self, analytic_backend):
        with pytest.raises(ConfigurationError):
            analytic_backend.embed("a prompt nobody registered")

    def test_info_reports_exact_vjp(self, analytic_backend):
        info = analytic_backend.info()
        assert info.exact_vjp is True
        assert info.attention_hooks is False
