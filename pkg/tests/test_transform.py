"""Tests for the learned material transform F and its gating."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from matxfer import ad
from matxfer.brdf import apply_named_transform
from matxfer.transform import (
    TRANSFORM_PREFIX,
    build_transform,
    fit_transform_net,
    interpolate_material,
    sample_material_grid,
    select_material,
    transform_eval,
    transform_grid_error,
)


def make_store(seed=0):
    store = ad.ParamStore(np.float64)
    build_transform(store, seed)
    return store


class TestTransformEval:
    def test_outputs_bounded(self):
        store = make_store()
        rng = np.random.default_rng(3)
        beta = rng.random((10_000, 4))
        out = transform_eval(store, beta, train=False)
        assert out.shape == (10_000, 4)
        assert np.all(out > 0.0) and np.all(out < 1.0)
        assert np.all(np.isfinite(out))

    def test_deterministic_init(self):
        a = transform_eval(make_store(5), np.full((3, 4), 0.25), train=False)
        b = transform_eval(make_store(5), np.full((3, 4), 0.25), train=False)
        assert_array_equal(a, b)
        c = transform_eval(make_store(6), np.full((3, 4), 0.25), train=False)
        assert np.abs(a - c).max() > 0

    def test_nd_batch_reshape(self):
        store = make_store()
        beta = np.random.default_rng(0).random((2, 3, 4))
        out = transform_eval(store, beta, train=False)
        assert out.shape == (2, 3, 4)
        flat = transform_eval(store, beta.reshape(-1, 4), train=False)
        assert_array_equal(out.reshape(-1, 4), flat)

    def test_jacobian_vs_finite_differences(self):
        store = make_store(1)
        store.add("beta", np.random.default_rng(2).random((6, 4)))

        def loss_fn(s):
            f = transform_eval(s, s.leaf("beta", True))
            return ad.mean(ad.square(f))

        max_err, _ = ad.finite_diff_check(loss_fn, store, seed=0)
        assert max_err < 1e-4


class TestSelectMaterial:
    def test_alpha0_returns_input_object(self):
        store = make_store()
        beta = np.random.default_rng(0).random((5, 4))
        assert select_material(store, beta, 0) is beta

    def test_alpha0_leaves_f_gradients_exactly_zero(self):
        store = make_store()
        store.add("beta", np.random.default_rng(1).random((5, 4)))
        sel = select_material(store, store.leaf("beta", True), 0)
        loss = ad.mean(ad.square(sel))
        grads = ad.backward(loss, store)
        for name, g in grads.items():
            if name.startswith(TRANSFORM_PREFIX):
                assert np.all(g == 0.0), name
        assert np.abs(grads["beta"]).max() > 0

    def test_alpha1_routes_through_f(self):
        store = make_store()
        beta = np.random.default_rng(2).random((5, 4))
        sel = select_material(store, beta, 1, train=False)
        assert_array_equal(sel, transform_eval(store, beta, train=False))
        loss = ad.mean(ad.square(select_material(store, beta, 1)))
        grads = ad.backward(loss, store)
        assert np.abs(grads[f"{TRANSFORM_PREFIX}/W0"]).max() > 0

    def test_fractional_alpha_rejected(self):
        store = make_store()
        with pytest.raises(ad.ConfigError):
            select_material(store, np.zeros((1, 4)), 0.5)


class TestInterpolateMaterial:
    def test_endpoints_exact(self):
        store = make_store()
        beta = np.random.default_rng(4).random((7, 4))
        assert interpolate_material(store, beta, 0.0) is beta
        assert_array_equal(
            interpolate_material(store, beta, 1.0),
            transform_eval(store, beta, train=False),
        )

    def test_linear_blend(self):
        store = make_store()
        beta = np.random.default_rng(5).random((7, 4))
        fb = transform_eval(store, beta, train=False)
        for alpha in (0.25, 0.5, 0.75):
            got = interpolate_material(store, beta, alpha)
            assert_allclose(got, (1 - alpha) * beta + alpha * fb, rtol=0, atol=1e-15)
            lo = np.minimum(beta, fb) - 1e-12
            hi = np.maximum(beta, fb) + 1e-12
            assert np.all(got >= lo) and np.all(got <= hi)

    def test_out_of_range_alpha_rejected(self):
        store = make_store()
        for bad in (-0.1, 1.1):
            with pytest.raises(ad.ConfigError):
                interpolate_material(store, np.zeros((1, 4)), bad)


class TestSupervisedFit:
    def test_shape_validation(self):
        with pytest.raises(ad.ShapeError):
            fit_transform_net(np.zeros((4, 4)), np.zeros((5, 4)))
        with pytest.raises(ad.ShapeError):
            fit_transform_net(np.zeros((4, 3)), np.zeros((4, 3)))

    @pytest.mark.slow
    def test_t2_fit_reaches_tolerance_quickly(self):
        # the full four-transform sweep is exercised by the acceptance
        # suite; T2 alone is enough to cover the trainability contract
        rng = np.random.default_rng(0)
        lattice = sample_material_grid(n_rho=17, n_r=5)
        pairs_in = np.concatenate([rng.random((20000, 4)), lattice], axis=0)
        rho_t, rough_t = apply_named_transform("T2", pairs_in[:, :3], pairs_in[:, 3])
        pairs_out = np.concatenate([rho_t, rough_t[:, None]], axis=1)
        store = fit_transform_net(
            pairs_in,
            pairs_out,
            iters=6000,
            eval_in=lattice,
            eval_out=pairs_out[-lattice.shape[0]:],
            target_err=0.04,
        )
        assert transform_grid_error(store, "T2") < 0.05
