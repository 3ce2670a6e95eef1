"""Encodings: SH table vs scipy, IDE attenuation, positional and color maps."""

import colorsys

import numpy as np
import pytest
from scipy.special import sph_harm_y

from matxfer import ad
from matxfer.ad import ConfigError, ParamStore, backward, finite_diff_check
from matxfer.encodings import (
    EncodingConfig,
    hsv_to_rgb,
    ide_attenuation,
    integrated_dir_encode,
    positional_encode,
    rgb_to_hsv,
    sh_basis,
    sh_basis_grad,
)


def random_dirs(n, seed=0):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


class TestPositionalEncode:
    def test_scalar_example(self):
        """x=0.5 with one frequency gives [0.5, sin(pi/2), cos(pi/2)]."""
        out = positional_encode(np.array([0.5]), 1)
        np.testing.assert_allclose(out, [0.5, 1.0, 0.0], atol=1e-12)

    def test_width(self):
        out = positional_encode(np.zeros((7, 3)), 4)
        assert out.shape == (7, 3 * (1 + 2 * 4))

    def test_zero_freq_identity(self):
        x = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(positional_encode(x, 0), x)


class TestSphericalHarmonics:
    def test_against_scipy_all_components(self):
        """Every l<=4 component equals sqrt(2)Re/Im of scipy's Y_l^m."""
        d = random_dirs(32, seed=42)
        Y = sh_basis(d)
        th = np.arccos(np.clip(d[:, 2], -1, 1))
        ph = np.arctan2(d[:, 1], d[:, 0])
        for l in range(5):
            for m in range(-l, l + 1):
                Yc = sph_harm_y(l, abs(m), th, ph)
                if m == 0:
                    want = Yc.real
                elif m > 0:
                    want = np.sqrt(2) * Yc.real
                else:
                    want = np.sqrt(2) * Yc.imag
                np.testing.assert_allclose(
                    Y[:, l * l + l + m], want, atol=1e-12,
                    err_msg=f"component l={l} m={m}",
                )

    def test_gradient_table_matches_fd(self):
        """Analytic polynomial gradients vs central differences in R^3."""
        d = random_dirs(8, seed=1)
        G = sh_basis_grad(d)
        eps = 1e-6
        for j in range(3):
            dp, dm = d.copy(), d.copy()
            dp[:, j] += eps
            dm[:, j] -= eps
            fd = (sh_basis(dp) - sh_basis(dm)) / (2 * eps)
            np.testing.assert_allclose(G[:, :, j], fd, atol=1e-8)

    def test_orthonormality(self):
        """Monte-Carlo <Y_i, Y_j> over the sphere approximates identity."""
        d = random_dirs(200_000, seed=7)
        Y = sh_basis(d)
        gram = (Y.T @ Y) * (4 * np.pi / d.shape[0])
        np.testing.assert_allclose(gram, np.eye(25), atol=0.05)


class TestIntegratedDirEncode:
    def test_z_axis_keeps_only_zonal_terms(self):
        """At d=+z only m=0 components survive (x/y factors vanish)."""
        out = integrated_dir_encode(np.array([[0.0, 0.0, 1.0]]), np.array([0.0]))
        nonzero = np.nonzero(np.abs(out[0]) > 1e-12)[0]
        np.testing.assert_array_equal(nonzero, [0, 2, 6, 12, 20])

    def test_band_one_attenuation_at_r_one(self):
        """A_1(1) = exp(-1(1+1)*1/2) = e^-1."""
        A = ide_attenuation(np.array([1.0]))
        np.testing.assert_allclose(A[0, 1:4], np.exp(-1.0), rtol=1e-12)
        np.testing.assert_allclose(A[0, 0], 1.0)

    def test_roughness_floor(self):
        """Below r^2 = 1e-4 the attenuation saturates (kappa floored)."""
        np.testing.assert_array_equal(
            ide_attenuation(np.array([0.0])), ide_attenuation(np.array([0.005]))
        )

    def test_monotone_suppression_with_roughness(self):
        A = ide_attenuation(np.linspace(0, 1, 5))
        assert np.all(np.diff(A[:, 24]) <= 0)
        assert A[-1, 24] < 1e-4  # l=4 band essentially removed at r=1

    def test_non_unit_directions_normalized(self):
        d = np.array([[0.0, 0.0, 2.5]])
        out = integrated_dir_encode(d, np.array([0.3]))
        ref = integrated_dir_encode(np.array([[0.0, 0.0, 1.0]]), np.array([0.3]))
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_gradients_wrt_direction_and_roughness(self):
        rng = np.random.default_rng(5)
        store = ParamStore(np.float64)
        store.add("d", rng.normal(size=(6, 3)))
        store.add("r", rng.uniform(0.05, 0.9, size=(6,)))
        w = rng.normal(size=(6, 25))

        def f(s):
            e = integrated_dir_encode(s.node("d"), s.node("r"))
            return ad.npsum(ad.mul(e, w))

        err, report = finite_diff_check(f, store, eps=1e-6)
        assert err < 1e-6, report

    def test_l_max_beyond_table_rejected(self):
        with pytest.raises(ConfigError):
            integrated_dir_encode(np.array([[0.0, 0.0, 1.0]]), np.array([0.1]), l_max=5)
        with pytest.raises(ConfigError):
            EncodingConfig(n_freq=2, l_max=6)


class TestColorConversion:
    def test_roundtrip_thousand_colors(self):
        rng = np.random.default_rng(42)
        c = rng.random((1000, 3))
        back = hsv_to_rgb(rgb_to_hsv(c))
        assert np.abs(back - c).max() < 1e-6

    def test_matches_colorsys(self):
        rng = np.random.default_rng(0)
        for row in rng.random((64, 3)):
            np.testing.assert_allclose(
                rgb_to_hsv(row), colorsys.rgb_to_hsv(*row), atol=1e-12
            )

    def test_achromatic_hue_zero(self):
        out = rgb_to_hsv(np.array([[0.4, 0.4, 0.4], [0.0, 0.0, 0.0]]))
        np.testing.assert_array_equal(out[:, 0], [0.0, 0.0])
        np.testing.assert_array_equal(out[1], [0.0, 0.0, 0.0])

    def test_primary_and_secondary_hues(self):
        rgb = np.eye(3)
        h = rgb_to_hsv(rgb)[:, 0]
        np.testing.assert_allclose(h, [0.0, 1 / 3, 2 / 3], atol=1e-12)
