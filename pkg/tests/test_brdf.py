"""Micro-facet terms, split-sum LUT, prefiltering, and named transforms."""

import numpy as np
import pytest

from matxfer import ad, brdf
from matxfer.ad import ConfigError, ParamStore, finite_diff_check
from matxfer.brdf import (
    F0_DIELECTRIC,
    MaterialSample,
    MspecLut,
    apply_named_transform,
    blend_intensity,
    build_mspec_lut,
    fresnel_schlick,
    load_mspec,
    microfacet_brdf,
    mspec_lookup,
    ndf_ggx,
    prefilter_diffuse,
    prefilter_specular,
    sample_cosine_lobe,
    sample_ggx_lobe,
    save_mspec,
    shade_splitsum,
    smith_g,
    transform_material,
)


def fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    phi = np.pi * (1 + 5**0.5) * i
    z = 1 - 2 * i / n
    s = np.sqrt(1 - z * z)
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=-1)


def vmf_env(amp, mu, kappa, base=0.3):
    mu = np.asarray(mu, dtype=np.float64)
    mu = mu / np.linalg.norm(mu)

    def L(w):
        lobe = np.exp(kappa * (w @ mu - 1.0))
        return base + np.asarray(amp)[None, :] * lobe[:, None]

    return L


class TestMicrofacetTerms:
    def test_ndf_normalization(self):
        """int D(mu) mu dw over the hemisphere equals 1 for any alpha."""
        mu = np.linspace(0, 1, 200_001)
        for alpha in (0.05, 0.3, 0.7, 1.0):
            d = ndf_ggx(mu, alpha)
            total = np.trapezoid(d * mu, mu) * 2 * np.pi
            assert abs(total - 1.0) < 1e-3, alpha

    def test_fresnel_endpoints(self):
        assert fresnel_schlick(np.array(1.0)) == pytest.approx(F0_DIELECTRIC)
        assert fresnel_schlick(np.array(0.0)) == pytest.approx(1.0)

    def test_smith_bounds_and_monotonicity(self):
        mu = np.linspace(0.05, 1.0, 50)
        for rough in (0.0, 0.5, 1.0):
            g = smith_g(mu, mu[::-1], rough)
            assert np.all((g > 0) & (g <= 1.0)), rough
        assert smith_g(np.array(1.0), np.array(1.0), 0.0) == pytest.approx(1.0)
        # more roughness means more shadowing at every angle pair
        g_smooth = smith_g(mu, mu[::-1], 0.1)
        g_rough = smith_g(mu, mu[::-1], 0.9)
        assert np.all(g_rough <= g_smooth)

    def test_reciprocity(self):
        """Swapping incident and outgoing directions leaves f_r unchanged."""
        rng = np.random.default_rng(0)
        n = np.array([[0.0, 0.0, 1.0]] * 16)
        w_i = fibonacci_sphere(64)[:16] * np.array([1, 1, 0]) + [0, 0, 0.5]
        w_i /= np.linalg.norm(w_i, axis=-1, keepdims=True)
        w_o = rng.normal(size=(16, 3))
        w_o[:, 2] = np.abs(w_o[:, 2]) + 0.1
        w_o /= np.linalg.norm(w_o, axis=-1, keepdims=True)
        rho = rng.random((16, 3))
        rough = rng.uniform(0.1, 1.0, 16)
        f1 = microfacet_brdf(w_i, w_o, n, rho, rough)
        f2 = microfacet_brdf(w_o, w_i, n, rho, rough)
        np.testing.assert_allclose(f1, f2, rtol=1e-10)

    def test_below_horizon_zero(self):
        n = np.array([[0.0, 0.0, 1.0]])
        w_down = np.array([[0.0, 0.0, -1.0]])
        w_up = np.array([[0.0, 0.0, 1.0]])
        out = microfacet_brdf(w_down, w_up, n, np.ones((1, 3)), np.array([0.5]))
        np.testing.assert_array_equal(out, 0.0)

    def test_white_furnace_energy_bound(self):
        """At normal incidence, int f_r cos dw <= 1.05 per channel for rho = 1."""
        dirs = fibonacci_sphere(100_000)
        up = dirs[dirs[:, 2] > 0]
        weight = 4 * np.pi / len(dirs)  # each point covers 4pi/N sr
        n = np.array([0.0, 0.0, 1.0])
        for rough in np.linspace(0.1, 1.0, 10):
            fr = microfacet_brdf(
                up, np.broadcast_to(n, up.shape), np.broadcast_to(n, up.shape),
                np.ones((up.shape[0], 3)), np.full(up.shape[0], rough),
            )
            integral = (fr * up[:, 2:3]).sum(axis=0) * weight
            assert np.all(integral > 0.0), rough
            assert np.all(integral <= 1.05), (rough, integral)

    def test_gradients_wrt_material(self):
        rng = np.random.default_rng(1)
        store = ParamStore(np.float64)
        store.add("rho", rng.random((5, 3)))
        store.add("rough", rng.uniform(0.2, 0.9, 5))
        n = np.repeat([[0.0, 0.0, 1.0]], 5, axis=0)
        w_i = fibonacci_sphere(11)[:5]
        w_i[:, 2] = np.abs(w_i[:, 2]) + 0.2
        w_i /= np.linalg.norm(w_i, axis=-1, keepdims=True)
        w_o = np.roll(w_i, 1, axis=0)

        def f(s):
            fr = microfacet_brdf(w_i, w_o, n, s.node("rho"), s.node("rough"))
            return ad.npsum(fr)

        err, report = finite_diff_check(f, store, eps=1e-6)
        assert err < 1e-5, report


class TestSamplingLobes:
    def test_cosine_lobe_moments(self):
        """E[cos theta] under the cosine lobe is 2/3."""
        rng = np.random.default_rng(2)
        axis = np.array([[0.3, -0.5, 0.8]])
        axis = axis / np.linalg.norm(axis)
        u1, u2 = rng.random(200_00), rng.random(200_00)
        w = sample_cosine_lobe(axis, u1[:, None], u2[:, None]).reshape(-1, 3)
        c = w @ axis[0]
        assert np.all(c > -1e-12)
        assert abs(c.mean() - 2 / 3) < 5e-3

    def test_ggx_lobe_at_unit_roughness_is_cosine(self):
        """alpha=1 makes D constant, so D cos reduces to the cosine lobe."""
        rng = np.random.default_rng(3)
        axis = np.array([[0.0, 0.0, 1.0]])
        u1, u2 = rng.random(100_00), rng.random(100_00)
        w = sample_ggx_lobe(axis, 1.0, u1[:, None], u2[:, None]).reshape(-1, 3)
        c = w[:, 2]
        assert abs(c.mean() - 2 / 3) < 1e-2

    def test_ggx_lobe_concentration(self):
        rng = np.random.default_rng(4)
        axis = np.array([[0.0, 0.0, 1.0]])
        u1, u2 = rng.random(5000), rng.random(5000)
        w = sample_ggx_lobe(axis, 0.05**2, u1[:, None], u2[:, None]).reshape(-1, 3)
        assert w[:, 2].min() > 0.98  # near-mirror lobe stays tight


class TestMspecLut:
    lut = build_mspec_lut(n_cos=64, n_r=64, spp=2048, seed=5)

    def test_smooth_normal_incidence_is_pure_f0(self):
        """r -> 0, cos -> 1: A -> 1, B -> 0 so M -> F0."""
        assert self.lut.a[-1, 0] == pytest.approx(1.0, abs=1e-3)
        assert self.lut.b[-1, 0] == pytest.approx(0.0, abs=1e-3)

    def test_bounds(self):
        assert self.lut.a.min() >= 0.0 and self.lut.a.max() <= 1.2
        assert self.lut.b.min() >= 0.0 and self.lut.b.max() <= 0.2

    def test_continuity(self):
        """Adjacent cells differ by less than 0.05 in both tables."""
        for t in (self.lut.a, self.lut.b):
            assert np.abs(np.diff(t, axis=0)).max() < 0.05
            assert np.abs(np.diff(t, axis=1)).max() < 0.05

    def test_deterministic(self):
        again = build_mspec_lut(n_cos=64, n_r=64, spp=2048, seed=5)
        np.testing.assert_array_equal(self.lut.a, again.a)
        np.testing.assert_array_equal(self.lut.b, again.b)

    def test_serialization_roundtrip(self, tmp_path):
        path = tmp_path / "mspec.bin"
        save_mspec(self.lut, path)
        back = load_mspec(path)
        np.testing.assert_array_equal(back.a, self.lut.a)
        np.testing.assert_array_equal(back.b, self.lut.b)
        assert back.f0 == pytest.approx(self.lut.f0)
        assert back.seed == self.lut.seed

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTLUT" + b"\x00" * 64)
        with pytest.raises(ConfigError):
            load_mspec(path)

    def test_lookup_gradients(self):
        store = ParamStore(np.float64)
        store.add("cos", np.array([0.3, 0.71, 0.9]))
        store.add("rough", np.array([0.2, 0.55, 0.8]))

        def f(s):
            return ad.npsum(mspec_lookup(self.lut, s.node("cos"), s.node("rough")))

        err, report = finite_diff_check(f, store, eps=1e-6)
        assert err < 1e-5, report

    def test_shade_splitsum_combines_terms(self):
        rho = np.array([[0.5, 0.25, 1.0]])
        out = shade_splitsum(
            rho, np.array([0.0]), np.array([1.0]), self.lut,
            np.array([[1.0, 1.0, 1.0]]), np.array([[2.0, 2.0, 2.0]]),
        )
        want = rho[0] + F0_DIELECTRIC * 1.0 * 2.0
        np.testing.assert_allclose(out[0], want, atol=5e-3)


class TestPrefiltering:
    def test_diffuse_constant_env_exact(self):
        """Constant radiance: l_diff = L0 for any normal."""
        env = lambda w: np.full((w.shape[0], 3), 0.7)
        n = fibonacci_sphere(8)
        out = prefilter_diffuse(env, n, spp=256, seed=0)
        np.testing.assert_allclose(out, 0.7, rtol=1e-12)

    def test_diffuse_vmf_env_matches_quadrature(self):
        env = vmf_env([1.0, 0.5, 0.2], [0.2, 0.3, 0.9], kappa=8.0)
        n = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
        got = prefilter_diffuse(env, n, spp=8192, seed=1)
        dirs = fibonacci_sphere(200_000)
        L = env(dirs)
        for k in range(2):
            cos = np.maximum(dirs @ n[k], 0.0)
            ref = (L * cos[:, None]).sum(axis=0) * (4 * np.pi / len(dirs)) / np.pi
            np.testing.assert_allclose(got[k], ref, rtol=2e-2)

    def test_specular_at_unit_roughness_equals_diffuse(self):
        """alpha = 1 GGX lobe is the cosine lobe, so both prefilters agree."""
        env = vmf_env([2.0, 1.0, 0.5], [0.5, -0.5, 0.7], kappa=5.0)
        t = np.array([[0.0, 0.0, 1.0]])
        spec = prefilter_specular(env, t, 1.0, spp=16384, seed=2)
        diff = prefilter_diffuse(env, t, spp=16384, seed=3)
        np.testing.assert_allclose(spec, diff, rtol=3e-2)

    def test_specular_mirror_limit(self):
        """r -> 0 concentrates the lobe so l_spec -> L(t)."""
        env = vmf_env([1.0, 1.0, 1.0], [0.0, 0.0, 1.0], kappa=3.0)
        t = np.array([[0.0, 0.0, 1.0]])
        out = prefilter_specular(env, t, 0.02, spp=1024, seed=4)
        np.testing.assert_allclose(out, env(t), rtol=1e-2)


class TestNamedTransforms:
    def test_t2_printed_example(self):
        """T2 on (0.2, 0.4, 0.6) with the configured red."""
        rho, rough = apply_named_transform("T2", [0.2, 0.4, 0.6], 0.77)
        np.testing.assert_allclose(rho, [0.5, 0.225, 0.325], atol=1e-12)
        assert rough == 0.0

    def test_t1_darkens_value_keeps_hue(self):
        from matxfer.encodings import rgb_to_hsv

        base = np.array([[0.4, 0.2, 0.6]])
        rho, rough = apply_named_transform("T1", base, np.array([0.8]))
        h0, h1 = rgb_to_hsv(base)[0], rgb_to_hsv(rho)[0]
        assert h1[2] == pytest.approx(0.3 * h0[2])
        assert h1[0] == pytest.approx(h0[0])
        assert h1[1] == pytest.approx(h0[1])
        assert rough[0] == 0.0

    def test_t3_blend(self):
        rho, rough = apply_named_transform("T3", [1.0, 0.0, 0.5], 0.1)
        np.testing.assert_allclose(rho, 0.2 * np.array([1.0, 0.0, 0.5]) + 0.8 * brdf.RHO_SAND)
        assert rough == 1.0

    def test_t4_hue_flip_is_involution(self):
        rng = np.random.default_rng(6)
        rho = rng.random((50, 3))
        r1, k1 = apply_named_transform("T4", rho, np.full(50, 0.4))
        r2, k2 = apply_named_transform("T4", r1, k1)
        np.testing.assert_allclose(r2, rho, atol=1e-10)
        np.testing.assert_array_equal(k2, 0.4)

    def test_material_sample_wrapper_and_validation(self):
        m = MaterialSample(np.array([0.2, 0.4, 0.6]), 0.5)
        out = transform_material("T2", m)
        np.testing.assert_allclose(out.rho, [0.5, 0.225, 0.325])
        with pytest.raises(ConfigError):
            MaterialSample(np.array([1.5, 0.0, 0.0]), 0.5)
        with pytest.raises(ConfigError):
            MaterialSample(np.array([0.5, 0.0, 0.0]), 1.5)
        with pytest.raises(ConfigError):
            apply_named_transform("T9", [0.1, 0.1, 0.1], 0.1)

    def test_blend_intensity_endpoints_and_midpoint(self):
        b0 = MaterialSample(np.array([0.2, 0.4, 0.6]), 0.8)
        b1 = transform_material("T2", b0)
        np.testing.assert_array_equal(blend_intensity(b0, b1, 0.0).as_vec4(), b0.as_vec4())
        np.testing.assert_array_equal(blend_intensity(b0, b1, 1.0).as_vec4(), b1.as_vec4())
        mid = blend_intensity(b0, b1, 0.37)
        np.testing.assert_allclose(
            mid.as_vec4(), 0.63 * b0.as_vec4() + 0.37 * b1.as_vec4()
        )
        with pytest.raises(ConfigError):
            blend_intensity(b0, b1, 1.2)
