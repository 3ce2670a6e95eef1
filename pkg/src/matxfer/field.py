"""Voxel radiance field: density/appearance grids, decoders, ray marching.

Geometry and appearance live on dense trilinear grids over the unit
scene box [-1,1]^3; small MLP heads decode normals, materials, and
view-dependent radiance from interpolated features.  Appearance
features are conditioned on a per-condition embedding, while the
material head reads only the condition-averaged features, which is what
makes the recovered BRDF condition-independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import ad
from .ad import ConfigError, ParamStore, value_of
from .encodings import positional_encode

SIGMA_OFFSET = -10.0
BOX_MIN = -1.0
BOX_MAX = 1.0


@dataclass
class FieldConfig:
    """Shape/runtime knobs for the voxel field."""

    grid: int = 96              # D: grid resolution per axis
    feat: int = 24              # C: appearance feature width
    n_samples: int = 64         # primary ray samples
    topk: int = 12              # samples shaded per ray (by weight)
    embed: int = 72             # light-condition embedding length
    fusion_width: int = 64
    decoder_width: int = 64
    view_freqs: int = 4         # positional encoding octaves for view dir
    vis_steps: int = 32         # secondary visibility march steps

    def __post_init__(self):
        if self.grid < 2 or self.feat < 1 or self.n_samples < 2:
            raise ConfigError(f"degenerate field config {self}")


# =====================================================================
# Trilinear interpolation (shared by all grid reads)
# =====================================================================


def trilinear_matrix(pts: np.ndarray, grid: int):
    """CSR matrix S with S @ vec(grid) = trilinear interpolation at pts.

    Returns (S, inside) where `inside` flags points within the scene
    box; rows for outside points are all-zero so their interpolated
    value is exactly 0.
    """
    pts = np.atleast_2d(pts)
    m = pts.shape[0]
    inside = np.all((pts >= BOX_MIN) & (pts <= BOX_MAX), axis=1)
    g = (pts - BOX_MIN) / (BOX_MAX - BOX_MIN) * (grid - 1)
    g = np.clip(g, 0.0, grid - 1)
    # clamp the base cell (not g) so the box-max face interpolates the
    # last node exactly in every dtype -- an epsilon clip below the top
    # is invisible to float32 and would index past the grid
    i0 = np.minimum(g.astype(np.int64), grid - 2)
    f = g - i0
    # corner offsets in z-fastest order; weights kept in the query dtype
    # so scipy does not upcast (and copy) the whole grid per product
    data = np.empty((m, 8), dtype=pts.dtype)
    cols = np.empty((m, 8), dtype=np.int64)
    for corner in range(8):
        dx, dy, dz = (corner >> 2) & 1, (corner >> 1) & 1, corner & 1
        wx = f[:, 0] if dx else 1.0 - f[:, 0]
        wy = f[:, 1] if dy else 1.0 - f[:, 1]
        wz = f[:, 2] if dz else 1.0 - f[:, 2]
        data[:, corner] = wx * wy * wz * inside
        cols[:, corner] = ((i0[:, 0] + dx) * grid + (i0[:, 1] + dy)) * grid + (i0[:, 2] + dz)
    indptr = np.arange(0, 8 * m + 1, 8)
    S = sp.csr_matrix((data.ravel(), cols.ravel(), indptr), shape=(m, grid**3))
    return S, inside


def trilinear_gradient(grid_vals: np.ndarray, pts: np.ndarray, grid: int) -> np.ndarray:
    """Spatial gradient of the interpolated field at pts, (M,3), plain numpy."""
    pts = np.atleast_2d(pts)
    scale = (grid - 1) / (BOX_MAX - BOX_MIN)
    eps = 0.5 / scale
    out = np.zeros((pts.shape[0], 3))
    for axis in range(3):
        dp = np.zeros(3)
        dp[axis] = eps
        sp_, _ = trilinear_matrix(pts + dp, grid)
        sm_, _ = trilinear_matrix(pts - dp, grid)
        out[:, axis] = (sp_ @ grid_vals - sm_ @ grid_vals) / (2 * eps)
    return out


# =====================================================================
# Model construction
# =====================================================================


def build_field(store: ParamStore, cfg: FieldConfig, seed: int,
                with_embeddings: bool = True) -> None:
    """Register grids, fusion net, decoder heads (and e0/e1 if paired)."""
    d3 = cfg.grid**3
    store.add("field/sigma", np.zeros(d3))
    store.add("field/app", np.zeros((d3, cfg.feat)))
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xF1E1D)))
    emb = cfg.embed if with_embeddings else 0
    ad.mlp_init(store, "field/fusion", [cfg.feat + emb, cfg.fusion_width, cfg.feat],
                seed + 11)
    ad.mlp_init(store, "field/dn", [cfg.feat, cfg.decoder_width, 3], seed + 12)
    ad.mlp_init(store, "field/dbeta", [cfg.feat, cfg.decoder_width, 4], seed + 13)
    view_dim = 3 + 6 * cfg.view_freqs
    ad.mlp_init(store, "field/dc", [cfg.feat + view_dim, cfg.decoder_width, 3], seed + 14)
    if with_embeddings:
        store.add("field/e0", 0.01 * rng.standard_normal(cfg.embed))
        store.add("field/e1", 0.01 * rng.standard_normal(cfg.embed))


def field_has_embeddings(store: ParamStore) -> bool:
    return "field/e0" in store.blocks


# =====================================================================
# Density and appearance reads
# =====================================================================


def sample_sigma(store: ParamStore, pts: np.ndarray, train: bool = True):
    """Decoded density at world points (M,); exactly 0 outside the box.

    sigma = softplus(raw - 10): the zero-initialized grid decodes to
    ~4.5e-5, i.e. the field starts empty.
    """
    cfg_grid = _grid_res(store)
    S, inside = trilinear_matrix(pts, cfg_grid)
    raw = ad.sparse_matmul(S, store.leaf("field/sigma", train))
    sigma = ad.softplus(ad.add(raw, SIGMA_OFFSET))
    return ad.mul(sigma, inside.astype(value_of(sigma).dtype))


def _grid_res(store: ParamStore) -> int:
    n = store.blocks["field/sigma"].shape[0]
    d = round(n ** (1.0 / 3.0))
    for cand in (d - 1, d, d + 1):
        if cand**3 == n:
            return cand
    raise ConfigError(f"sigma grid size {n} is not a cube")


def appearance_features(store: ParamStore, pts: np.ndarray, alpha: int,
                        train: bool = True):
    """(a_alpha, a_bar) at points: fused per-condition and averaged features."""
    feats = _grid_features(store, pts, train)
    if not field_has_embeddings(store):
        a = _fuse(store, feats, None, train)
        return a, a
    a0 = _fuse(store, feats, store.leaf("field/e0", train), train)
    a1 = _fuse(store, feats, store.leaf("field/e1", train), train)
    a_alpha = a0 if alpha == 0 else a1
    a_bar = ad.mul(ad.add(a0, a1), 0.5)
    return a_alpha, a_bar


def _grid_features(store: ParamStore, pts: np.ndarray, train: bool):
    S, _ = trilinear_matrix(pts, _grid_res(store))
    return ad.sparse_matmul(S, store.leaf("field/app", train))


def _fuse(store: ParamStore, feats, embed, train: bool):
    if embed is not None:
        m = value_of(feats).shape[0]
        e = ad.repeat_row(ad.reshape(embed, (1, -1)), m)
        feats = ad.concat([feats, e], axis=1)
    return ad.mlp_forward(store, "field/fusion", feats, hidden="relu", out="identity",
                          train=train)


def decode_heads(store: ParamStore, a_bar, a_alpha, view_dir: np.ndarray,
                 train: bool = True, fallback_n: np.ndarray | None = None):
    """(n, beta, c): unit normals, sigmoid materials, view-dependent color.

    The material head reads only the condition-averaged features, so
    beta is alpha-independent by construction.  Raw normals with
    near-zero length are replaced by the (detached) density-gradient
    fallback when provided; the count is reported in the info dict.
    """
    raw_n = ad.mlp_forward(store, "field/dn", a_bar, hidden="relu", out="identity",
                           train=train)
    norms = ad.sqrt(ad.clamp_min(ad.npsum(ad.square(raw_n), axis=1, keepdims=True),
                                 1e-16))
    degenerate = value_of(norms)[:, 0] < 1e-6
    n = ad.div(raw_n, norms)
    if fallback_n is not None and degenerate.any():
        keep = (~degenerate)[:, None].astype(value_of(raw_n).dtype)
        n = ad.add(ad.mul(n, keep), fallback_n * degenerate[:, None])
    beta = ad.sigmoid(ad.mlp_forward(store, "field/dbeta", a_bar, hidden="relu",
                                     out="identity", train=train))
    enc_d = positional_encode(view_dir, _view_freqs(store))
    c_in = ad.concat([a_alpha, enc_d], axis=1)
    c = ad.sigmoid(ad.mlp_forward(store, "field/dc", c_in, hidden="relu",
                                  out="identity", train=train))
    info = {"degenerate_normals": int(degenerate.sum())}
    return n, beta, c, info


def _view_freqs(store: ParamStore) -> int:
    view_dim = store.blocks["field/dc/W0"].shape[0] - store.blocks["field/dn/W0"].shape[0]
    return (view_dim - 3) // 6


# =====================================================================
# Ray marching
# =====================================================================


@dataclass
class RaySampleBatch:
    """Stratified samples along rays with transmittance weights.

    weights/t_end are graph nodes during training; positions and
    spacings are plain arrays (sample placement is not differentiated).
    """

    origins: np.ndarray       # (R,3)
    dirs: np.ndarray          # (R,3) unit
    positions: np.ndarray     # (R,N,3)
    deltas: np.ndarray        # (R,N)
    t_mid: np.ndarray         # (R,N)
    sigma: object             # (R,N) node
    weights: object           # (R,N) node
    t_end: object             # (R,) node
    hit_box: np.ndarray       # (R,) bool


def intersect_box(o: np.ndarray, d: np.ndarray):
    """Slab test against the scene box; (near, far, hit)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (BOX_MIN - o) * inv
        tb = (BOX_MAX - o) * inv
    tmin = np.nanmax(np.minimum(ta, tb), axis=1)
    tmax = np.nanmin(np.maximum(ta, tb), axis=1)
    near = np.maximum(tmin, 1e-4)
    hit = (tmax > near)
    return near, tmax, hit


def march_ray(store: ParamStore, o: np.ndarray, d: np.ndarray, n_samples: int,
              jitter_seed: int | None = 0, train: bool = True) -> RaySampleBatch:
    """Stratified transmittance quadrature along rays.

    Weights are built as T_i - T_{i+1} from the cumulative optical
    depth, so sum(w) + T_end telescopes to 1 exactly (up to float
    roundoff), which the renderer invariants rely on.
    """
    o = np.atleast_2d(o)
    d = np.atleast_2d(d)
    r = o.shape[0]
    near, far, hit = intersect_box(o, d)
    far = np.where(hit, far, near + 1.0)
    if jitter_seed is None:
        u = np.full((r, n_samples), 0.5)
    else:
        u = np.random.default_rng(np.random.SeedSequence((jitter_seed, r))).random(
            (r, n_samples))
    dt = store.dtype
    edges = np.linspace(0.0, 1.0, n_samples + 1)
    span = (far - near)[:, None]
    t0 = near[:, None] + edges[None, :-1] * span
    delta = span / n_samples
    t = (t0 + u * delta).astype(dt, copy=False)
    deltas = np.broadcast_to(delta, (r, n_samples)).astype(dt)
    pts = (o[:, None, :] + t[..., None] * d[:, None, :]).astype(dt, copy=False)

    sigma = sample_sigma(store, pts.reshape(-1, 3), train)
    sigma = ad.reshape(sigma, (r, n_samples))
    sigma = ad.mul(sigma, hit[:, None].astype(value_of(sigma).dtype))
    tau = ad.mul(sigma, deltas)
    inc = ad.cumsum(tau, axis=1)
    t_trans = ad.exp(ad.mul(inc, -1.0))                    # T_{i+1}
    t_prev = ad.exp(ad.mul(ad.sub(inc, tau), -1.0))        # T_i
    weights = ad.sub(t_prev, t_trans)
    t_end = ad.take_last(t_trans, n_samples - 1)
    return RaySampleBatch(o, d, pts, deltas, t, sigma, weights, t_end, hit)


def trace_visibility(store: ParamStore, x: np.ndarray, t_dir: np.ndarray,
                     steps: int = 32) -> np.ndarray:
    """Detached transmittance along secondary rays from x (plain numpy)."""
    x = np.atleast_2d(x)
    t_dir = np.atleast_2d(t_dir)
    off = x + 3e-2 * t_dir
    near, far, hit = intersect_box(off, t_dir)
    far = np.where(hit, far, near)
    mids = near[:, None] + (np.arange(steps)[None, :] + 0.5) / steps * (far - near)[:, None]
    pts = (off[:, None, :] + mids[..., None] * t_dir[:, None, :]).astype(store.dtype)
    grid = _grid_res(store)
    S, inside = trilinear_matrix(pts.reshape(-1, 3), grid)
    raw = S @ store.blocks["field/sigma"]
    sigma = np.logaddexp(0.0, raw + SIGMA_OFFSET) * inside
    tau = sigma.reshape(x.shape[0], steps) * ((far - near) / steps)[:, None]
    return np.exp(-tau.sum(axis=1))


# =====================================================================
# Top-K shading selection
# =====================================================================


def topk_samples(batch: RaySampleBatch, k: int):
    """Indices (R,k) of the highest-weight samples per ray, depth-ordered."""
    w = value_of(batch.weights)
    k = min(k, w.shape[1])
    idx = np.argpartition(-w, k - 1, axis=1)[:, :k]
    idx.sort(axis=1)
    return idx
