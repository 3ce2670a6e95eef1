"""Tape autodiff: op gradients against central differences, optimizer math."""

import numpy as np
import pytest

from matxfer import ad
from matxfer.ad import (
    AdamParams,
    AdamState,
    ConfigError,
    ContractError,
    NanGradientError,
    Node,
    ParamStore,
    ShapeError,
    adam_step,
    backward,
    finite_diff_check,
    mlp_forward,
    mlp_init,
)


def make_store(**arrays):
    store = ParamStore(dtype=np.float64)
    for k, v in arrays.items():
        store.add(k, np.asarray(v, dtype=np.float64))
    return store


class TestDispatch:
    def test_plain_inputs_return_plain_arrays(self):
        """Ops on raw ndarrays never allocate graph nodes."""
        a = np.arange(6.0).reshape(2, 3)
        out = ad.mul(ad.add(a, 1.0), a)
        assert isinstance(out, np.ndarray)
        out2 = ad.softplus(ad.matmul(a, a.T))
        assert isinstance(out2, np.ndarray)

    def test_node_inputs_build_graph(self):
        store = make_store(w=[1.0, 2.0])
        y = ad.mul(store.node("w"), 3.0)
        assert isinstance(y, Node)
        np.testing.assert_allclose(y.value, [3.0, 6.0])


class TestBackward:
    def test_scalar_loss_required(self):
        store = make_store(w=[1.0, 2.0])
        with pytest.raises(ContractError):
            backward(ad.mul(store.node("w"), 2.0))

    def test_visits_each_node_once(self):
        """Topological order contains no duplicates even with fan-out."""
        store = make_store(w=[[1.0, 2.0]])
        x = store.node("w")
        y = ad.add(ad.mul(x, x), ad.mul(x, 3.0))
        loss = ad.npsum(y)
        order = ad.topo_order(loss)
        assert len(order) == len({id(n) for n in order})

    def test_reused_node_accumulates(self):
        """d(sum(x*x))/dx = 2x when the same node feeds both operands."""
        store = make_store(x=[1.0, -2.0, 3.0])
        x = store.node("x")
        g = backward(ad.npsum(ad.mul(x, x)))
        np.testing.assert_allclose(g["x"], 2.0 * store.get("x"))

    def test_unreachable_block_gets_zero(self):
        store = make_store(a=[1.0], b=[5.0])
        g = backward(ad.npsum(ad.mul(store.node("a"), 2.0)), store)
        np.testing.assert_allclose(g["b"], [0.0])
        np.testing.assert_allclose(g["a"], [2.0])


class TestOpGradients:
    """Every differentiable op against central differences (64-bit)."""

    def check(self, f, store, tol=3e-7):
        err, report = finite_diff_check(f, store, eps=1e-5)
        assert err < tol, report

    def test_elementwise_chain(self):
        rng = np.random.default_rng(42)
        store = make_store(x=rng.normal(size=(4, 3)))

        def f(s):
            x = s.node("x")
            y = ad.exp(ad.mul(x, 0.3))
            y = ad.add(y, ad.sigmoid(x))
            y = ad.mul(y, ad.softplus(ad.sub(x, 0.5)))
            y = ad.div(y, ad.add(ad.square(x), 2.0))
            return ad.npsum(ad.sqrt(ad.add(ad.square(y), 1.0)))

        self.check(f, store, tol=1e-6)  # deep chain: FD truncation dominates

    def test_broadcast_binary(self):
        rng = np.random.default_rng(1)
        store = make_store(a=rng.normal(size=(4, 3)), b=rng.normal(size=(3,)))

        def f(s):
            return ad.npsum(ad.mul(s.node("a"), ad.add(s.node("b"), 1.5)))

        self.check(f, store)

    def test_reductions_and_cumsum(self):
        rng = np.random.default_rng(2)
        store = make_store(x=rng.normal(size=(3, 5)))

        def f(s):
            x = s.node("x")
            c = ad.cumsum(x, axis=1)
            m = ad.mean(ad.square(c), axis=0)
            return ad.npsum(ad.mul(m, np.arange(5.0)))

        self.check(f, store)

    def test_matmul(self):
        rng = np.random.default_rng(3)
        store = make_store(W=rng.normal(size=(4, 3)), x=rng.normal(size=(2, 4)))

        def f(s):
            return ad.npsum(ad.square(ad.matmul(s.node("x"), s.node("W"))))

        self.check(f, store)

    def test_matmul_shape_error(self):
        store = make_store(W=np.ones((3, 3)), x=np.ones((2, 4)))
        with pytest.raises(ShapeError):
            ad.matmul(store.node("x"), store.node("W"))

    def test_indexing_ops(self):
        rng = np.random.default_rng(4)
        store = make_store(x=rng.normal(size=(3, 6)), y=rng.normal(size=(3, 6, 2)))
        idx = np.array([[0, 3], [1, 2], [5, 4]])

        def f(s):
            a = ad.take_along_rows(s.node("x"), idx)
            b = ad.take_along_rows(s.node("y"), idx)
            c = ad.concat([a, ad.take_last(b, 0)], axis=1)
            d = ad.rows_slice(c, 1, 3)
            e = ad.cols_slice(c, 0, 2)
            return ad.add(ad.npsum(ad.square(d)), ad.npsum(ad.square(e)))

        self.check(f, store)

    def test_repeat_row_and_where(self):
        rng = np.random.default_rng(5)
        store = make_store(e=rng.normal(size=(1, 4)), x=rng.normal(size=(5, 4)))
        cond = rng.random((5, 4)) > 0.5

        def f(s):
            tiled = ad.repeat_row(s.node("e"), 5)
            y = ad.where(cond, ad.mul(tiled, 2.0), s.node("x"))
            return ad.npsum(ad.square(y))

        self.check(f, store)

    def test_clip_passes_gradient_inside_bounds(self):
        store = make_store(x=[[-2.0, 0.5, 3.0]])

        def f(s):
            return ad.npsum(ad.mul(ad.clip(s.node("x"), 0.0, 1.0), [[1.0, 2.0, 3.0]]))

        g = backward(f(store), store)["x"]
        np.testing.assert_allclose(g, [[0.0, 2.0, 0.0]])

    def test_sparse_matmul_matches_dense(self):
        import scipy.sparse as sp

        rng = np.random.default_rng(6)
        dense = (rng.random((5, 8)) > 0.6) * rng.normal(size=(5, 8))
        S = sp.csr_matrix(dense)
        store = make_store(x=rng.normal(size=(8, 3)))

        def f(s):
            return ad.npsum(ad.square(ad.sparse_matmul(S, s.node("x"))))

        self.check(f, store)
        out = ad.sparse_matmul(S, store.get("x"))
        np.testing.assert_allclose(out, dense @ store.get("x"))

    def test_lut_lookup_values_and_grads(self):
        """Bilinear interpolation of a linear table is exact; grads match FD."""
        nu, nv = 9, 7
        uu, vv = np.meshgrid(np.linspace(0, 1, nu), np.linspace(0, 1, nv), indexing="ij")
        lut = np.stack([2.0 * uu + 3.0 * vv, uu - vv], axis=-1)
        store = make_store(u=[0.31, 0.77], v=[0.5, 0.12])
        out = ad.lut_lookup(lut, store.get("u"), store.get("v"))
        np.testing.assert_allclose(
            out[:, 0], 2.0 * store.get("u") + 3.0 * store.get("v"), atol=1e-12
        )

        def f(s):
            got = ad.lut_lookup(lut, s.node("u"), s.node("v"))
            return ad.npsum(ad.square(got))

        self.check(f, store)

    def test_grad_scale_identity_forward_scaled_backward(self):
        store = make_store(x=[1.0, 2.0])
        x = store.node("x")
        y = ad.grad_scale(x, 0.01)
        assert y.value is x.value  # bitwise identity, no copy
        g = backward(ad.npsum(ad.mul(y, 3.0)), store)["x"]
        np.testing.assert_allclose(g, [0.03, 0.03])


class TestMLP:
    def test_init_deterministic_and_bounded(self):
        s1, s2 = ParamStore(np.float32), ParamStore(np.float32)
        mlp_init(s1, "net", [4, 16, 2], seed=7)
        mlp_init(s2, "net", [4, 16, 2], seed=7)
        for k in s1.blocks:
            np.testing.assert_array_equal(s1.get(k), s2.get(k))
        assert np.abs(s1.get("net/W0")).max() <= 1.0 / 2.0

    def test_single_layer_list_rejected(self):
        with pytest.raises(ConfigError):
            mlp_init(ParamStore(), "net", [4], seed=0)

    def test_input_width_mismatch(self):
        store = ParamStore(np.float64)
        mlp_init(store, "net", [4, 8, 2], seed=0)
        with pytest.raises(ShapeError):
            mlp_forward(store, "net", np.ones((3, 5)))

    def test_gradients_match_fd(self):
        store = ParamStore(np.float64)
        mlp_init(store, "net", [3, 8, 2], seed=1)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(5, 3))

        def f(s):
            return ad.npsum(ad.square(mlp_forward(s, "net", x, out="sigmoid")))

        err, report = finite_diff_check(f, store, eps=1e-6)
        assert err < 1e-7, report


class TestAdam:
    def reference_adam(self, p, g, m, v, t, lr, b1=0.9, b2=0.999, eps=1e-8):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        return p - lr * mh / (np.sqrt(vh) + eps), m, v

    def test_matches_reference_two_steps(self):
        rng = np.random.default_rng(0)
        p0 = rng.normal(size=(6,)).astype(np.float64)
        store = make_store(w=p0.copy())
        state = AdamState()
        hyper = AdamParams(lr=0.1)
        ref_p, ref_m, ref_v = p0.copy(), np.zeros(6), np.zeros(6)
        for t in (1, 2):
            g = rng.normal(size=(6,))
            adam_step(store, {"w": g}, state, hyper)
            ref_p, ref_m, ref_v = self.reference_adam(ref_p, g, ref_m, ref_v, t, 0.1)
            np.testing.assert_allclose(store.get("w"), ref_p, rtol=1e-12)

    def test_fused_path_matches_reference(self):
        """The large-block numba kernel agrees with the numpy formula."""
        rng = np.random.default_rng(1)
        n = 5000  # above the fused-path threshold
        p0 = rng.normal(size=(n,)).astype(np.float32)
        store = ParamStore(np.float32)
        store.add("w", p0.copy())
        state = AdamState()
        g = rng.normal(size=(n,)).astype(np.float32)
        adam_step(store, {"w": g}, state, AdamParams(lr=0.01))
        ref_p, _, _ = self.reference_adam(
            p0.astype(np.float64), g.astype(np.float64), np.zeros(n), np.zeros(n), 1, 0.01
        )
        np.testing.assert_allclose(store.get("w"), ref_p.astype(np.float32), atol=1e-6)

    def test_per_block_learning_rates(self):
        store = make_store(**{"grid/x": [0.0], "net/W0": [0.0]})
        state = AdamState()
        hyper = AdamParams(lr={"grid": 0.1, "default": 0.001})
        adam_step(store, {"grid/x": np.ones(1), "net/W0": np.ones(1)}, state, hyper)
        assert abs(store.get("grid/x")[0]) > 50 * abs(store.get("net/W0")[0])

    def test_nan_gradient_names_block(self):
        store = make_store(w=[1.0])
        with pytest.raises(NanGradientError, match="w"):
            adam_step(store, {"w": np.array([np.nan])}, AdamState(), AdamParams())

    def test_determinism(self):
        def run():
            store = ParamStore(np.float32)
            mlp_init(store, "net", [2, 8, 1], seed=3)
            state = AdamState()
            rng = np.random.default_rng(9)
            for _ in range(5):
                x = rng.normal(size=(4, 2)).astype(np.float32)

                def f(s):
                    return ad.npsum(ad.square(mlp_forward(s, "net", x)))

                grads = backward(f(store), store)
                adam_step(store, grads, state, AdamParams(lr=0.01))
            return store.get("net/W0").copy()

        np.testing.assert_array_equal(run(), run())


class TestFiniteDiffCheck:
    def test_linear_function_exact(self):
        """For a linear map the central difference is exact to roundoff."""
        store = make_store(w=np.arange(5.0))

        def f(s):
            return ad.npsum(ad.mul(s.node("w"), np.array([1.0, -2.0, 3.0, 0.5, 4.0])))

        err, _ = finite_diff_check(f, store, eps=1e-4)
        assert err < 1e-9

    def test_dtype_follows_store(self):
        store = ParamStore(np.float32)
        store.add("w", np.ones(3, dtype=np.float32))
        g = backward(ad.npsum(ad.square(store.node("w"))), store)
        assert g["w"].dtype == np.float32
