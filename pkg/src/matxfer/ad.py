"""Reverse-mode automatic differentiation on numpy arrays.

A tiny tape: ops build `Node` objects holding a value, parent nodes and
a vector-Jacobian callback.  `backward` walks the graph once in reverse
topological order and accumulates gradients per named parameter block.

Every op accepts either `Node` or plain ndarray arguments.  When no
argument is a `Node` the op returns a plain ndarray, so inference code
paths run graph-free at numpy speed through the exact same functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class ConfigError(ValueError):
    """Invalid static configuration (layer lists, sizes, enum tags)."""


class ShapeError(ValueError):
    """Runtime array shapes incompatible with an op contract."""


class ContractError(RuntimeError):
    """An op precondition violated at call time (e.g. non-scalar loss)."""


class NanGradientError(FloatingPointError):
    """A gradient or update became NaN; message names the block."""


# =====================================================================
# Graph node
# =====================================================================


class Node:
    """One tape entry: a value plus how to push gradients to parents."""

    __slots__ = ("value", "parents", "vjps", "tag")

    def __init__(self, value, parents=(), vjps=(), tag=""):
        self.value = value
        self.parents = parents  # tuple[Node, ...], only Node parents
        self.vjps = vjps  # tuple[callable(g)->ndarray, ...] aligned with parents
        self.tag = tag  # op name, or block name for leaves

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Node({self.tag or 'op'}, shape={np.shape(self.value)})"

    # Arithmetic sugar so expressions read naturally.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def is_node(x) -> bool:
    return isinstance(x, Node)


def value_of(x):
    """Underlying ndarray of a Node, or the argument itself."""
    return x.value if isinstance(x, Node) else x


def detach(x):
    """Value with the graph cut (identity for plain arrays)."""
    return x.value if isinstance(x, Node) else x


def _make(value, pairs, tag):
    """Build a Node from (parent, vjp) pairs, keeping only Node parents."""
    parents = []
    vjps = []
    for p, vjp in pairs:
        if isinstance(p, Node):
            parents.append(p)
            vjps.append(vjp)
    return Node(value, tuple(parents), tuple(vjps), tag)


def _unbroadcast(g, shape):
    """Sum gradient `g` down to `shape` (reverse numpy broadcasting)."""
    if np.shape(g) == tuple(shape):
        return g
    g = np.asarray(g)
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# =====================================================================
# Elementwise and reduction ops
# =====================================================================


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    if not (is_node(a) or is_node(b)):
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _make(
        out,
        [(a, lambda g: _unbroadcast(g, sa)), (b, lambda g: _unbroadcast(g, sb))],
        "add",
    )


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    if not (is_node(a) or is_node(b)):
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _make(
        out,
        [(a, lambda g: _unbroadcast(g, sa)), (b, lambda g: _unbroadcast(-g, sb))],
        "sub",
    )


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    if not (is_node(a) or is_node(b)):
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _make(
        out,
        [
            (a, lambda g: _unbroadcast(g * bv, sa)),
            (b, lambda g: _unbroadcast(g * av, sb)),
        ],
        "mul",
    )


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    if not (is_node(a) or is_node(b)):
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _make(
        out,
        [
            (a, lambda g: _unbroadcast(g / bv, sa)),
            (b, lambda g: _unbroadcast(-g * av / (bv * bv), sb)),
        ],
        "div",
    )


def exp(x):
    out = np.exp(value_of(x))
    if not is_node(x):
        return out
    return _make(out, [(x, lambda g: g * out)], "exp")


def log(x):
    xv = value_of(x)
    out = np.log(xv)
    if not is_node(x):
        return out
    return _make(out, [(x, lambda g: g / xv)], "log")


def sqrt(x):
    out = np.sqrt(value_of(x))
    if not is_node(x):
        return out
    return _make(out, [(x, lambda g: g * (0.5 / out))], "sqrt")


def square(x):
    xv = value_of(x)
    out = xv * xv
    if not is_node(x):
        return out
    return _make(out, [(x, lambda g: g * (2.0 * xv))], "square")


def relu(x):
    xv = value_of(x)
    out = np.maximum(xv, 0.0)
    if not is_node(x):
        return out
    mask = xv > 0.0
    return _make(out, [(x, lambda g: g * mask)], "relu")


def sigmoid(x):
    out = expit(value_of(x))
    if not is_node(x):
        return out
    return _make(out, [(x, lambda g: g * (out * (1.0 - out)))], "sigmoid")


def softplus(x):
    xv = value_of(x)
    out = np.logaddexp(0.0, xv)
    if not is_node(x):
        return out
    return _make(out, [(x, lambda g: g * expit(xv))], "softplus")


def clip(x, lo, hi):
    """Clamp with zero gradient outside [lo, hi]."""
    xv = value_of(x)
    out = np.clip(xv, lo, hi)
    if not is_node(x):
        return out
    if lo is None:
        mask = xv <= hi
    elif hi is None:
        mask = xv >= lo
    else:
        mask = (xv >= lo) & (xv <= hi)
    return _make(out, [(x, lambda g: g * mask)], "clip")


def clamp_min(x, lo):
    return clip(x, lo, None)


def npsum(x, axis=None, keepdims=False):
    xv = value_of(x)
    out = np.sum(xv, axis=axis, keepdims=keepdims)
    if not is_node(x):
        return out
    shape = np.shape(xv)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, shape)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return np.broadcast_to(gg, shape)

    return _make(out, [(x, vjp)], "sum")


def mean(x, axis=None, keepdims=False):
    xv = value_of(x)
    n = xv.size if axis is None else np.shape(xv)[axis]
    return mul(npsum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def cumsum(x, axis):
    xv = value_of(x)
    out = np.cumsum(xv, axis=axis)
    if not is_node(x):
        return out

    def vjp(g):
        return np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)

    return _make(out, [(x, vjp)], "cumsum")


def where(cond, a, b):
    """Select by a boolean array; gradient routes through the taken branch."""
    cv = value_of(cond)
    av, bv = value_of(a), value_of(b)
    out = np.where(cv, av, bv)
    if not (is_node(a) or is_node(b)):
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _make(
        out,
        [
            (a, lambda g: _unbroadcast(np.where(cv, g, 0.0), sa)),
            (b, lambda g: _unbroadcast(np.where(cv, 0.0, g), sb)),
        ],
        "where",
    )


def grad_scale(x, factor):
    """Identity in the forward pass; multiplies the gradient by `factor`."""
    if not is_node(x):
        return x
    f = float(factor)
    return _make(x.value, [(x, lambda g: g * f)], "grad_scale")


# =====================================================================
# Shape and indexing ops
# =====================================================================


def reshape(x, shape):
    xv = value_of(x)
    out = np.reshape(xv, shape)
    if not is_node(x):
        return out
    orig = np.shape(xv)
    return _make(out, [(x, lambda g: np.reshape(g, orig))], "reshape")


def concat(parts, axis=-1):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    if not any(is_node(p) for p in parts):
        return out
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    pairs = []
    for i, p in enumerate(parts):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g, lo=lo, hi=hi):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]

        pairs.append((p, vjp))
    return _make(out, pairs, "concat")


def rows_slice(x, start, stop):
    """Contiguous row range along axis 0."""
    xv = value_of(x)
    out = xv[start:stop]
    if not is_node(x):
        return out
    shape = np.shape(xv)

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[start:stop] = g
        return full

    return _make(out, [(x, vjp)], "rows_slice")


def cols_slice(x, start, stop):
    """Contiguous column range along the last axis."""
    xv = value_of(x)
    out = xv[..., start:stop]
    if not is_node(x):
        return out
    shape = np.shape(xv)

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., start:stop] = g
        return full

    return _make(out, [(x, vjp)], "cols_slice")


def take_last(x, index):
    """Select one slice along the last axis (e.g. a feature column)."""
    xv = value_of(x)
    out = xv[..., index]
    if not is_node(x):
        return out
    shape = np.shape(xv)

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., index] = g
        return full

    return _make(out, [(x, vjp)], "take_last")


def repeat_row(x, count):
    """Tile a (1, C) or (C,) row into (count, C); gradient sums rows."""
    xv = np.atleast_2d(value_of(x))
    out = np.broadcast_to(xv, (count, xv.shape[1]))
    if not is_node(x):
        return np.ascontiguousarray(out)
    orig = np.shape(value_of(x))
    return _make(
        np.ascontiguousarray(out),
        [(x, lambda g: np.sum(g, axis=0).reshape(orig))],
        "repeat_row",
    )


def take_along_rows(x, idx):
    """Gather `idx[i, k]` entries per row; indices must be unique per row.

    Works for `x` of shape (R, S) or (R, S, C) with idx of shape (R, K).
    """
    xv = value_of(x)
    if xv.ndim == 3:
        ix = idx[:, :, None]
        out = np.take_along_axis(xv, np.broadcast_to(ix, idx.shape + (xv.shape[2],)), axis=1)
    else:
        out = np.take_along_axis(xv, idx, axis=1)
    if not is_node(x):
        return out
    shape = np.shape(xv)

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        if len(shape) == 3:
            np.put_along_axis(
                full, np.broadcast_to(idx[:, :, None], g.shape), g, axis=1
            )
        else:
            np.put_along_axis(full, idx, g, axis=1)
        return full

    return _make(out, [(x, vjp)], "take_along_rows")


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {av.shape} @ {bv.shape}")
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {av.shape} @ {bv.shape}")
    out = av @ bv
    if not (is_node(a) or is_node(b)):
        return out
    return _make(
        out,
        [(a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)],
        "matmul",
    )


class RowGrad:
    """Gradient of a grid block touched only at a few rows.

    The trilinear scatter reaches at most 8 cells per sample, so
    materializing a dense gradient for a D^3(xC) grid wastes most of the
    optimizer step on zeros.  `idx` may contain duplicates; consumers
    accumulate (order-independent sums via np.add.at).
    """

    __array_priority__ = 1000  # keep numpy from elementwise-broadcasting us

    def __init__(self, idx: np.ndarray, val: np.ndarray, shape: tuple):
        self.idx = idx
        self.val = val
        self.shape = shape

    def __add__(self, other):
        if isinstance(other, RowGrad):
            if other.shape != self.shape:
                raise ShapeError(f"RowGrad shapes differ: {self.shape} vs {other.shape}")
            return RowGrad(np.concatenate([self.idx, other.idx]),
                           np.concatenate([self.val, other.val]), self.shape)
        return self.toarray() + other

    __radd__ = __add__

    def compact(self) -> tuple[np.ndarray, np.ndarray]:
        """(unique_rows, summed_values) with deterministic ordering."""
        uidx, inverse = np.unique(self.idx, return_inverse=True)
        acc = np.zeros((uidx.size,) + self.val.shape[1:], dtype=self.val.dtype)
        np.add.at(acc, inverse, self.val)
        return uidx, acc

    def toarray(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=self.val.dtype)
        uidx, acc = self.compact()
        out[uidx] = acc
        return out


def sparse_matmul(S, x):
    """`S @ x` with a constant scipy sparse matrix; gradient is `S.T @ g`.

    The VJP is emitted as a RowGrad over the touched rows of `x`;
    backward() densifies it unless asked to keep grid gradients sparse.
    """
    xv = value_of(x)
    out = S @ xv
    if not is_node(x):
        return out
    nnz_rows = np.repeat(np.arange(S.shape[0]), np.diff(S.indptr))
    cols, data = S.indices, S.data

    def vjp(g):
        val = data[:, None] * g[nnz_rows] if g.ndim == 2 else data * g[nnz_rows]
        return RowGrad(cols, val, np.shape(xv))

    return _make(out, [(x, vjp)], "sparse_matmul")


def lut_lookup(lut, u, v):
    """Bilinear lookup into `lut` (nu, nv, C) at normalized coords u, v in [0, 1].

    The table itself is constant; gradients flow to the query coordinates.
    """
    uv_, vv_ = value_of(u), value_of(v)
    nu, nv = lut.shape[0], lut.shape[1]
    fu = np.clip(uv_, 0.0, 1.0) * (nu - 1)
    fv = np.clip(vv_, 0.0, 1.0) * (nv - 1)
    i0 = np.minimum(fu.astype(np.int64), nu - 2)
    j0 = np.minimum(fv.astype(np.int64), nv - 2)
    du = (fu - i0)[..., None]
    dv = (fv - j0)[..., None]
    c00 = lut[i0, j0]
    c10 = lut[i0 + 1, j0]
    c01 = lut[i0, j0 + 1]
    c11 = lut[i0 + 1, j0 + 1]
    out = (
        c00 * (1 - du) * (1 - dv)
        + c10 * du * (1 - dv)
        + c01 * (1 - du) * dv
        + c11 * du * dv
    )
    if not (is_node(u) or is_node(v)):
        return out
    in_u = ((uv_ > 0.0) & (uv_ < 1.0))[..., None]
    in_v = ((vv_ > 0.0) & (vv_ < 1.0))[..., None]
    dout_du = ((c10 - c00) * (1 - dv) + (c11 - c01) * dv) * (nu - 1) * in_u
    dout_dv = ((c01 - c00) * (1 - du) + (c11 - c10) * du) * (nv - 1) * in_v
    return _make(
        out,
        [
            (u, lambda g: np.sum(g * dout_du, axis=-1)),
            (v, lambda g: np.sum(g * dout_dv, axis=-1)),
        ],
        "lut_lookup",
    )


# =====================================================================
# Backward pass
# =====================================================================


def topo_order(root: Node) -> list[Node]:
    """Reverse-usable topological order (parents after children)."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order  # children appear after all their parents


def backward(loss: Node, store: "ParamStore | None" = None,
             sparse_grids: bool = False) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(block) for every named leaf under `loss`.

    Returns a dict keyed by block name.  If `store` is given, blocks not
    reached by the graph are filled with zeros so the optimizer sees a
    complete gradient set.  With `sparse_grids`, gradients that arrived
    purely through sparse_matmul stay RowGrad (adam_step understands
    them); otherwise they are densified.
    """
    if not isinstance(loss, Node):
        raise ContractError("backward expects a Node loss")
    lv = np.asarray(loss.value)
    if lv.size != 1:
        raise ContractError(f"loss must be scalar, got shape {lv.shape}")

    order = topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(lv)}
    out: dict[str, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            if node.tag:
                if node.tag in out:
                    out[node.tag] = out[node.tag] + g
                else:
                    out[node.tag] = g
            continue
        if isinstance(g, RowGrad):
            raise ContractError("RowGrad reached an interior node; sparse_matmul "
                                "inputs must be leaves")
        for parent, vjp in zip(node.parents, node.vjps):
            pg = vjp(g)
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    if not sparse_grids:
        for name, g in out.items():
            if isinstance(g, RowGrad):
                out[name] = g.toarray()
    if store is not None:
        for name, arr in store.blocks.items():
            if name not in out:
                out[name] = np.zeros_like(arr)
            elif out[name].shape != arr.shape:
                raise ShapeError(
                    f"gradient shape {out[name].shape} != block {name} {arr.shape}"
                )
    return out


# =====================================================================
# Parameter store
# =====================================================================


@dataclass
class ParamStore:
    """Named float blocks: the single owner of all trainable arrays."""

    dtype: np.dtype = np.float32
    blocks: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, name: str, array: np.ndarray) -> np.ndarray:
        if name in self.blocks:
            raise ConfigError(f"duplicate parameter block {name!r}")
        self.blocks[name] = np.ascontiguousarray(array, dtype=self.dtype)
        return self.blocks[name]

    def node(self, name: str) -> Node:
        """A leaf Node viewing the current block value."""
        return Node(self.blocks[name], (), (), name)

    def get(self, name: str) -> np.ndarray:
        return self.blocks[name]

    def leaf(self, name: str, train: bool):
        """Block as a graph leaf when training, raw array otherwise."""
        return self.node(name) if train else self.blocks[name]

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype=np.dtype(dtype))
        for k, v in self.blocks.items():
            out.blocks[k] = v.astype(dtype)
        return out

    def n_params(self) -> int:
        return sum(v.size for v in self.blocks.values())


# =====================================================================
# MLP
# =====================================================================


def mlp_init(store: ParamStore, prefix: str, dims: Sequence[int], seed: int) -> None:
    """Register weight/bias blocks `{prefix}/W{i}`, `{prefix}/b{i}`.

    Uniform fan-in init U(-1/sqrt(n_in), 1/sqrt(n_in)), deterministic in
    `seed`; draws happen in float64 before casting to the store dtype.
    """
    dims = list(dims)
    if len(dims) < 2:
        raise ConfigError(f"mlp needs >=2 layer sizes, got {dims}")
    if any(d <= 0 for d in dims):
        raise ConfigError(f"mlp layer sizes must be positive, got {dims}")
    rng = np.random.default_rng(seed)
    for i, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = 1.0 / np.sqrt(n_in)
        store.add(f"{prefix}/W{i}", rng.uniform(-bound, bound, size=(n_in, n_out)))
        store.add(f"{prefix}/b{i}", rng.uniform(-bound, bound, size=(n_out,)))


_ACTS = {
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "identity": lambda x: x,
}


def mlp_forward(store: ParamStore, prefix: str, x, hidden="relu", out="identity",
                train: bool = True):
    """Run the MLP registered under `prefix` on rows of `x`."""
    if hidden not in _ACTS or out not in _ACTS:
        raise ConfigError(f"unknown activation {hidden!r}/{out!r}")
    n_layers = 0
    while f"{prefix}/W{n_layers}" in store.blocks:
        n_layers += 1
    if n_layers == 0:
        raise ConfigError(f"no MLP registered under prefix {prefix!r}")
    h = x
    for i in range(n_layers):
        W = store.leaf(f"{prefix}/W{i}", train)
        b = store.leaf(f"{prefix}/b{i}", train)
        hv = value_of(h)
        wv = value_of(W)
        if hv.shape[-1] != wv.shape[0]:
            raise ShapeError(
                f"{prefix} layer {i}: input width {hv.shape[-1]} != {wv.shape[0]}"
            )
        h = add(matmul(h, W), b)
        act = _ACTS[hidden] if i < n_layers - 1 else _ACTS[out]
        h = act(h)
    return h


# =====================================================================
# Adam
# =====================================================================


@dataclass
class AdamParams:
    lr: float | dict = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def lr_for(self, name: str) -> float:
        if isinstance(self.lr, dict):
            for key, val in self.lr.items():
                if key != "default" and name.startswith(key):
                    return float(val)
            return float(self.lr.get("default", 1e-3))
        return float(self.lr)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


try:  # fused update avoids five full-size temporaries per block
    import numba

    @numba.njit(cache=True)
    def _adam_kernel(p, g, m, v, lr, b1, b2, eps, c1, c2):  # pragma: no cover
        for i in range(p.size):
            gi = g[i]
            mi = b1 * m[i] + (1.0 - b1) * gi
            vi = b2 * v[i] + (1.0 - b2) * gi * gi
            m[i] = mi
            v[i] = vi
            p[i] -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)

    _HAVE_NUMBA = True
except Exception:  # pragma: no cover - numba always present in CI
    _HAVE_NUMBA = False


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], state: AdamState,
              hyper: AdamParams) -> None:
    """One in-place Adam update with bias correction over all blocks.

    RowGrad gradients get the standard lazy treatment: moments and
    parameters advance only on the touched rows (global-step bias
    correction), so a mostly-untouched voxel grid costs O(touched).
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - hyper.beta1**t
    c2 = 1.0 - hyper.beta2**t
    for name, p in store.blocks.items():
        g = grads.get(name)
        if g is None:
            continue
        if isinstance(g, RowGrad):
            if not np.all(np.isfinite(g.val)):
                raise NanGradientError(
                    f"non-finite gradient in block {name!r} at step {t}")
            if name not in state.m:
                state.m[name] = np.zeros_like(p)
                state.v[name] = np.zeros_like(p)
            rows, gr = g.compact()
            gr = gr.astype(p.dtype, copy=False)
            lr = hyper.lr_for(name)
            m_r = hyper.beta1 * state.m[name][rows] + (1.0 - hyper.beta1) * gr
            v_r = hyper.beta2 * state.v[name][rows] + (1.0 - hyper.beta2) * gr * gr
            state.m[name][rows] = m_r
            state.v[name][rows] = v_r
            p[rows] -= lr * (m_r / c1) / (np.sqrt(v_r / c2) + hyper.eps)
            continue
        if not np.all(np.isfinite(g)):
            raise NanGradientError(f"non-finite gradient in block {name!r} at step {t}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        lr = hyper.lr_for(name)
        if _HAVE_NUMBA and p.size >= 4096 and p.dtype == np.float32:
            _adam_kernel(
                p.reshape(-1), np.ascontiguousarray(g, dtype=p.dtype).reshape(-1),
                m.reshape(-1), v.reshape(-1),
                lr, hyper.beta1, hyper.beta2, hyper.eps, c1, c2,
            )
        else:
            g = g.astype(p.dtype, copy=False)
            m *= hyper.beta1
            m += (1.0 - hyper.beta1) * g
            v *= hyper.beta2
            v += (1.0 - hyper.beta2) * (g * g)
            p -= lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)


# =====================================================================
# Finite-difference checking
# =====================================================================


def finite_diff_check(
    f: Callable[[ParamStore], Node],
    store: ParamStore,
    eps: float = 1e-5,
    max_coords: int = 24,
    seed: int = 0,
    blocks: Sequence[str] | None = None,
    n_dirs: int = 2,
    rtol: float = 1e-4,
):
    """Compare analytic gradients of `f(store)` to central differences.

    Blocks with <= `max_coords` entries are probed coordinate by
    coordinate; larger blocks get their `max_coords // 2` largest-|grad|
    coordinates plus `n_dirs` random-direction probes, whose directional
    derivative aggregates the whole block (and so still flags gradients
    that are wrongly zero somewhere).  Each probe's denominator is
    floored at 1% of the block's dominant gradient magnitude and at the
    gradient scale a central difference can actually resolve: the two
    loss evaluations carry roundoff ~|f|*ulp, so derivatives below
    |f|*eps_mach/eps are pure noise, and a probe there can only be
    certified to `rtol` if the denominator absorbs that noise.  Without
    the floors such coordinates dominate the report with noise.
    Returns `(max_rel_err, report)` with the worst relative error per
    block.
    """
    loss = f(store)
    analytic = backward(loss, store)
    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}
    names = blocks if blocks is not None else list(store.blocks)
    f0 = float(np.asarray(value_of(loss)))
    noise = 4.0 * abs(f0) * np.finfo(np.float64).eps / eps / rtol

    for name in names:
        p = store.blocks[name]
        base = p.copy()
        flat = p.reshape(-1)
        a = analytic[name].reshape(-1)
        floor = max(1e-7, noise,
                    1e-2 * float(np.max(np.abs(a), initial=0.0)))
        if flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = np.argsort(np.abs(a))[-(max_coords // 2):]
        probes = []
        for i in coords:
            u = np.zeros(flat.size, dtype=p.dtype)
            u[i] = 1.0
            probes.append((u, a[i]))
        if flat.size > max_coords:
            for _ in range(n_dirs):
                u = rng.standard_normal(flat.size).astype(p.dtype)
                u /= np.linalg.norm(u)
                probes.append((u, float(a @ u)))

        def eval_at(delta: np.ndarray) -> float:
            p[...] = base + delta.reshape(p.shape)
            try:
                return float(np.asarray(value_of(f(store))))
            finally:
                p[...] = base

        worst = 0.0
        for u, a_dir in probes:
            fd = (eval_at(eps * u) - eval_at(-eps * u)) / (2.0 * eps)
            denom = max(abs(a_dir), abs(fd), floor)
            worst = max(worst, abs(a_dir - fd) / denom)
        report[name] = worst
    return (max(report.values()) if report else 0.0), report
