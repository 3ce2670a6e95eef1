"""Neural pre-integrated illumination: direct/indirect MLPs + embeddings.

g_dir answers "prefiltered radiance arriving from direction t at
roughness r"; g_indir covers the occluded remainder as a function of
position.  Directional inputs are gradient-damped (1e-2) so the light
networks cannot bully the geometry during joint optimization.
"""

from __future__ import annotations

import numpy as np

from . import ad
from .ad import ParamStore, value_of
from .encodings import integrated_dir_encode, positional_encode

REDUCE_GRAD = 1e-2
EMBED_LEN = 72
IDE_DIM = 25


def build_light(store: ParamStore, seed: int, width: int = 128, depth: int = 3,
                pos_freqs: int = 4, with_embeddings: bool = True) -> None:
    """Register g_dir, g_indir, and per-condition embeddings."""
    emb = EMBED_LEN if with_embeddings else 0
    pos_dim = 3 + 6 * pos_freqs
    dims_dir = [IDE_DIM + emb] + [width] * depth + [3]
    dims_ind = [IDE_DIM + pos_dim + emb] + [width] * depth + [3]
    ad.mlp_init(store, "light/gdir", dims_dir, seed + 21)
    ad.mlp_init(store, "light/gindir", dims_ind, seed + 22)
    if with_embeddings:
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x11647)))
        for alpha in (0, 1):
            store.add(f"light/edir{alpha}", 0.01 * rng.standard_normal(EMBED_LEN))
            store.add(f"light/eindir{alpha}", 0.01 * rng.standard_normal(EMBED_LEN))


def light_has_embeddings(store: ParamStore) -> bool:
    return "light/edir0" in store.blocks


def _with_embedding(store: ParamStore, feats, name: str, train: bool):
    if not light_has_embeddings(store):
        return feats
    e = ad.reshape(store.leaf(name, train), (1, -1))
    e = ad.repeat_row(e, value_of(feats).shape[0])
    return ad.concat([feats, e], axis=1)


def eval_gdir(store: ParamStore, d, rough, alpha: int, train: bool = True,
              reduce_grad: bool = True):
    """Direct prefiltered radiance g_dir(IDE(d, r), e_alpha), (N,3) >= 0."""
    ide = integrated_dir_encode(d, rough)
    if reduce_grad:
        ide = ad.grad_scale(ide, REDUCE_GRAD)
    x = _with_embedding(store, ide, f"light/edir{alpha}", train)
    return ad.softplus(ad.mlp_forward(store, "light/gdir", x, hidden="relu",
                                      out="identity", train=train))


def eval_gindir(store: ParamStore, d, rough, pos: np.ndarray, alpha: int,
                train: bool = True, reduce_grad: bool = True):
    """Occluded-branch radiance g_indir(IDE(t, r), x, e_alpha)."""
    ide = integrated_dir_encode(d, rough)
    if reduce_grad:
        ide = ad.grad_scale(ide, REDUCE_GRAD)
    pos_freqs = _pos_freqs(store)
    px = positional_encode(pos, pos_freqs)
    x = ad.concat([ide, px], axis=1)
    x = _with_embedding(store, x, f"light/eindir{alpha}", train)
    return ad.softplus(ad.mlp_forward(store, "light/gindir", x, hidden="relu",
                                      out="identity", train=train))


def _pos_freqs(store: ParamStore) -> int:
    emb = EMBED_LEN if light_has_embeddings(store) else 0
    pos_dim = store.blocks["light/gindir/W0"].shape[0] - IDE_DIM - emb
    return (pos_dim - 3) // 6


def light_diffuse(store: ParamStore, n, alpha: int, train: bool = True,
                  reduce_grad: bool = True):
    """l_diff = g_dir(IDE(n, 1), e_alpha): cosine-lobe prefiltered light."""
    nv = value_of(n)
    ones = np.ones(nv.shape[:-1], dtype=nv.dtype)
    return eval_gdir(store, n, ones, alpha, train, reduce_grad)


def light_specular(store: ParamStore, pos: np.ndarray, t, rough, v_t, alpha: int,
                   train: bool = True, reduce_grad: bool = True):
    """l_spec = v_t g_dir(...) + (1 - v_t) g_indir(...), convex in v_t."""
    direct = eval_gdir(store, t, rough, alpha, train, reduce_grad)
    indirect = eval_gindir(store, t, rough, pos, alpha, train, reduce_grad)
    v = np.asarray(v_t)[..., None]
    return ad.add(ad.mul(direct, v), ad.mul(indirect, 1.0 - v))


def export_envmap(store: ParamStore, alpha: int = 0, height: int = 64,
                  rough: float = 0.02) -> np.ndarray:
    """Evaluate g_dir over a lat-long grid (H, 2H, 3) for diagnostics."""
    h = height
    w = 2 * h
    theta = (np.arange(h) + 0.5) / h * np.pi
    phi = (np.arange(w) + 0.5) / w * 2.0 * np.pi
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    dirs = np.stack([np.sin(tt) * np.cos(pp), np.sin(tt) * np.sin(pp), np.cos(tt)],
                    axis=-1).reshape(-1, 3)
    vals = eval_gdir(store, dirs, np.full(dirs.shape[0], rough), alpha, train=False)
    return np.asarray(vals).reshape(h, w, 3).astype(np.float32)


# =====================================================================
# Fixed-lobe parametric light (the "w/o g_dir,g_indir" ablation)
# =====================================================================


def fibonacci_dirs(count: int) -> np.ndarray:
    """Unit directions roughly equidistributed over the full sphere."""
    k = np.arange(count) + 0.5
    z = 1.0 - 2.0 * k / count
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    phi = np.pi * (3.0 - np.sqrt(5.0)) * k
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


SG_LOBES = 16
SG_KAPPA = 8.0
SG_QUAD_DIRS = 64


def build_sg_light(store: ParamStore, seed: int) -> None:
    """Constant + 16 fixed-direction lobes with trainable intensities."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x56169)))
    store.add("sglight/ambient", np.full(3, -2.0) + 0.01 * rng.standard_normal(3))
    store.add("sglight/lobes", np.full((SG_LOBES, 3), -2.0)
              + 0.01 * rng.standard_normal((SG_LOBES, 3)))


def sg_radiance(store: ParamStore, dirs: np.ndarray, train: bool = True):
    """Environment radiance of the parametric light at unit dirs (N,3)."""
    axes = fibonacci_dirs(SG_LOBES)
    gains = np.exp(SG_KAPPA * (dirs @ axes.T - 1.0))  # (N,L), fixed geometry
    amb = ad.softplus(store.leaf("sglight/ambient", train))
    lobes = ad.softplus(store.leaf("sglight/lobes", train))
    contrib = ad.matmul(gains, lobes)
    n = dirs.shape[0]
    amb_rows = ad.repeat_row(ad.reshape(amb, (1, 3)), n)
    return ad.add(amb_rows, contrib)


def sg_shade(store: ParamStore, n, rho, rough, view: np.ndarray, train: bool = True):
    """Stratified-quadrature shading of the reflection integral.

    Evaluates the parametric environment over a fixed 64-direction set
    and integrates against the microfacet BRDF; the substitute path for
    the neural-light ablation.
    """
    from .brdf import microfacet_brdf

    quad = fibonacci_dirs(SG_QUAD_DIRS)           # (Q,3) full sphere
    nv = value_of(n)
    m = nv.shape[0]
    L = sg_radiance(store, quad, train)           # (Q,3)
    w_i = np.broadcast_to(quad, (m, SG_QUAD_DIRS, 3))
    n_e = ad.reshape(n, (m, 1, 3))
    v_e = -view[:, None, :]
    rho_e = ad.reshape(rho, (m, 1, 3))
    rough_e = ad.reshape(rough, (m, 1))
    fr = microfacet_brdf(w_i, v_e, n_e, rho_e, rough_e)   # (m,Q,3)
    cos_i = ad.clamp_min(ad.npsum(ad.mul(n_e, w_i), axis=2), 0.0)
    weight = 4.0 * np.pi / SG_QUAD_DIRS
    integrand = ad.mul(fr, ad.reshape(ad.mul(cos_i, weight), (m, SG_QUAD_DIRS, 1)))
    per_dir = ad.mul(integrand, ad.reshape(L, (1, SG_QUAD_DIRS, 3)))
    return ad.npsum(per_dir, axis=1)
