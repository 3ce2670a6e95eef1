"""Ray and image rendering composing field, light, and material transform.

The radiance-field branch (C_RF) accumulates the decoded view-dependent
color over ray samples; the physically-based branch (C_PBR) shades the
highest-weight samples with the split-sum model and accumulates with
the same transmittance weights.  Both branches run through one code
path whether they produce graph nodes (training) or plain arrays
(evaluation), so endpoint bit-identity guarantees carry over to the
optimizer losses unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ad
from .ad import ParamStore, value_of
from .brdf import MspecLut, reflect_dir, shade_splitsum
from .field import (RaySampleBatch, _grid_res, appearance_features, decode_heads,
                    march_ray, topk_samples, trace_visibility, trilinear_gradient)
from .light import light_diffuse, light_specular, sg_shade
from .scenes import Camera
from .transform import interpolate_material


@dataclass
class RenderSettings:
    """Quadrature and batching knobs shared by training and evaluation."""

    n_samples: int = 64        # primary samples per ray
    topk: int = 8              # samples shaded per ray (by weight)
    vis_steps: int = 32        # secondary visibility march steps
    chunk: int = 2048          # rays per forward chunk in image renders
    jitter_seed: int | None = None  # None: deterministic midpoint samples
    rf_full: bool = True       # evaluate C_RF over all samples (not top-k)


@dataclass
class ShadeOut:
    """Per-sample shading results for the top-k samples of a ray batch.

    Entries are graph nodes when train=True, plain arrays otherwise.
    `beta_raw` is the decoded material before any transform; `beta` is
    what was actually shaded (post interpolate_material when a
    material_alpha is given).
    """

    idx: np.ndarray       # (R,K) selected sample indices
    w: object             # (R*K,1) transmittance weights
    n: object             # (R*K,3) decoded unit normals
    beta_raw: object      # (R*K,4)
    beta: object          # (R*K,4)
    c: object             # (R*K,3) radiance head
    pbr: object           # (R*K,3) split-sum shading
    l_diff: object        # (R*K,3)
    l_spec: object        # (R*K,3)
    n_grad: np.ndarray    # (R*K,3) detached density-gradient normals
    vis: np.ndarray       # (R*K,) detached secondary visibility


def shade_batch(store: ParamStore, lut: MspecLut, batch: RaySampleBatch,
                cond_alpha: int, settings: RenderSettings,
                material_alpha: float | None = None, train: bool = False,
                reduce_grad: bool = True, sg: bool = False,
                idx: np.ndarray | None = None,
                n_grad: np.ndarray | None = None,
                vis: np.ndarray | None = None) -> ShadeOut:
    """Shade the top-k samples of a marched batch under one condition.

    `cond_alpha` picks the light/appearance embeddings; `material_alpha`
    routes the decoded material through the transform (None leaves it
    untouched; 0.0 is identical to None by construction, which is what
    keeps renders with and without an attached transform bit-equal at
    the un-transformed endpoint).  Visibility and the density-gradient
    normal target are computed detached: secondary-ray transmittance
    and the supervision target carry no gradients by design.  The
    `idx`/`n_grad`/`vis` overrides let a finite-difference harness hold
    exactly those detached quantities fixed across probe evaluations.
    """
    r, n_samples = value_of(batch.weights).shape
    k = min(settings.topk, n_samples)
    if idx is None:
        idx = topk_samples(batch, k)
    rows = np.repeat(np.arange(r), idx.shape[1])
    k = idx.shape[1]
    pts = batch.positions[rows, idx.ravel()]
    w = ad.reshape(ad.take_along_rows(batch.weights, idx), (-1, 1))
    view = np.repeat(batch.dirs, k, axis=0).astype(pts.dtype)

    grid = _grid_res(store)
    if n_grad is None:
        n_g = trilinear_gradient(store.blocks["field/sigma"], pts, grid)
        n_g = -n_g / np.maximum(np.linalg.norm(n_g, axis=1, keepdims=True),
                                1e-12)
        n_g = n_g.astype(pts.dtype)
    else:
        n_g = n_grad

    a_alpha, a_bar = appearance_features(store, pts, cond_alpha, train)
    n, beta_raw, c, _ = decode_heads(store, a_bar, a_alpha, view, train,
                                     fallback_n=n_g)
    beta = beta_raw
    if material_alpha is not None:
        beta = interpolate_material(store, beta_raw, float(material_alpha),
                                    train=train)
    rho = ad.cols_slice(beta, 0, 3)
    rough = ad.take_last(beta, 3)

    # secondary visibility along the detached mirror direction
    if vis is None:
        t_det = reflect_dir(n_g, -view)
        t_det = t_det / np.maximum(
            np.linalg.norm(t_det, axis=1, keepdims=True), 1e-12)
        vis = trace_visibility(store, pts, t_det, steps=settings.vis_steps)

    if sg:
        pbr = sg_shade(store, n, rho, rough, view, train)
        zeros = np.zeros((r * k, 3), dtype=pts.dtype)
        l_diff, l_spec = zeros, zeros
    else:
        l_diff = light_diffuse(store, n, cond_alpha, train, reduce_grad)
        t_ref = reflect_dir(n, -view)
        l_spec = light_specular(store, pts, t_ref, rough, vis, cond_alpha, train,
                                reduce_grad)
        cos_v = ad.clamp_min(ad.npsum(ad.mul(n, -view), axis=1), 1e-4)
        pbr = shade_splitsum(rho, rough, cos_v, lut, l_diff, l_spec)

    return ShadeOut(idx, w, n, beta_raw, beta, c, pbr, l_diff, l_spec, n_g, vis)


def accumulate(w, x, r: int, k: int):
    """Per-ray weighted sum over the k selected samples: (R*K,C) -> (R,C)."""
    cols = value_of(x).shape[-1]
    return ad.npsum(ad.reshape(ad.mul(w, x), (r, k, cols)), axis=1)


def radiance_full(store: ParamStore, batch: RaySampleBatch, cond_alpha: int,
                  train: bool = False):
    """C_RF over *all* samples of the batch: (R,3).

    Full quadrature costs one decoder pass per sample, so training
    restricts itself to the top-k path; evaluation renders use this for
    quadrature-complete colors.
    """
    r, n_samples = value_of(batch.weights).shape
    pts = batch.positions.reshape(-1, 3)
    view = np.repeat(batch.dirs, n_samples, axis=0).astype(pts.dtype)
    a_alpha, a_bar = appearance_features(store, pts, cond_alpha, train)
    _, _, c, _ = decode_heads(store, a_bar, a_alpha, view, train,
                              fallback_n=np.zeros_like(pts))
    w = ad.reshape(batch.weights, (-1, 1))
    return accumulate(w, c, r, n_samples)


GBUFFER_CHANNELS = {
    "rgb_rf": 3, "rgb_pbr": 3, "normal": 3, "beta": 4,
    "l_diff": 3, "l_spec": 3, "depth": 1, "mask": 1,
}


def render_rays(store: ParamStore, lut: MspecLut | None, o: np.ndarray,
                d: np.ndarray, settings: RenderSettings, cond_alpha: int = 0,
                material_alpha: float | None = None, sg: bool = False,
                buffers: tuple = tuple(GBUFFER_CHANNELS)) -> dict:
    """Render a bundle of rays; returns plain float arrays per buffer.

    Empty rays (no box hit or no density) fall out naturally: weights
    are zero, so every accumulated buffer is the black background and
    the mask is 0.  `buffers` restricts the work done -- asking only for
    "beta"/"mask" skips the light stack entirely, which is the path the
    albedo evaluation loop uses; the beta values are identical to a full
    render because the material head never feeds from the light.
    """
    o = np.atleast_2d(o)
    d = np.atleast_2d(d)
    r = o.shape[0]
    batch = march_ray(store, o, d, settings.n_samples,
                      jitter_seed=settings.jitter_seed, train=False)
    w_all = value_of(batch.weights)
    out: dict[str, np.ndarray] = {}
    if "mask" in buffers:
        out["mask"] = w_all.sum(axis=1, keepdims=True)
    if "depth" in buffers:
        out["depth"] = (w_all * batch.t_mid).sum(axis=1, keepdims=True)
    if "rgb_rf" in buffers:
        if settings.rf_full:
            out["rgb_rf"] = value_of(radiance_full(store, batch, cond_alpha))
        else:
            k = min(settings.topk, settings.n_samples)
            sh = shade_batch(store, lut, batch, cond_alpha, settings,
                             material_alpha, sg=sg)
            out["rgb_rf"] = value_of(accumulate(sh.w, sh.c, r, k))

    need_shade = {"rgb_pbr", "l_diff", "l_spec"} & set(buffers)
    need_material = {"normal", "beta"} & set(buffers)
    if need_shade:
        sh = shade_batch(store, lut, batch, cond_alpha, settings, material_alpha,
                         sg=sg)
        k = sh.idx.shape[1]
        if "rgb_pbr" in buffers:
            out["rgb_pbr"] = value_of(accumulate(sh.w, sh.pbr, r, k))
        if "l_diff" in buffers:
            out["l_diff"] = value_of(accumulate(sh.w, sh.l_diff, r, k))
        if "l_spec" in buffers:
            out["l_spec"] = value_of(accumulate(sh.w, sh.l_spec, r, k))
        if "normal" in buffers:
            out["normal"] = value_of(accumulate(sh.w, sh.n, r, k))
        if "beta" in buffers:
            out["beta"] = value_of(accumulate(sh.w, sh.beta, r, k))
    elif need_material:
        k = min(settings.topk, settings.n_samples)
        idx = topk_samples(batch, k)
        rows = np.repeat(np.arange(r), k)
        pts = batch.positions[rows, idx.ravel()]
        w = ad.reshape(ad.take_along_rows(batch.weights, idx), (-1, 1))
        view = np.repeat(batch.dirs, k, axis=0).astype(pts.dtype)
        grid = _grid_res(store)
        n_g = trilinear_gradient(store.blocks["field/sigma"], pts, grid)
        n_g = (-n_g / np.maximum(np.linalg.norm(n_g, axis=1, keepdims=True),
                                 1e-12)).astype(pts.dtype)
        a_alpha, a_bar = appearance_features(store, pts, cond_alpha, False)
        n, beta, _, _ = decode_heads(store, a_bar, a_alpha, view, False,
                                     fallback_n=n_g)
        if material_alpha is not None:
            beta = interpolate_material(store, beta, float(material_alpha))
        if "normal" in buffers:
            out["normal"] = value_of(accumulate(w, n, r, k))
        if "beta" in buffers:
            out["beta"] = value_of(accumulate(w, beta, r, k))
    return out


def render_view(store: ParamStore, lut: MspecLut | None, cam: Camera,
                settings: RenderSettings, cond_alpha: int = 0,
                material_alpha: float | None = None, sg: bool = False,
                buffers: tuple = tuple(GBUFFER_CHANNELS)) -> dict:
    """Render one camera view chunk by chunk into (H,W,C) float32 buffers."""
    o, d = cam.rays()
    o = o.astype(store.dtype)
    d = d.astype(store.dtype)
    total = o.shape[0]
    parts: dict[str, list] = {}
    for start in range(0, total, settings.chunk):
        sl = slice(start, min(start + settings.chunk, total))
        got = render_rays(store, lut, o[sl], d[sl], settings, cond_alpha,
                          material_alpha, sg, buffers)
        for key, val in got.items():
            parts.setdefault(key, []).append(val)
    out = {}
    for key, chunks in parts.items():
        img = np.concatenate(chunks, axis=0).astype(np.float32)
        out[key] = img.reshape(cam.height, cam.width, img.shape[-1])
    return out


def render_albedo(store: ParamStore, cam: Camera, settings: RenderSettings,
                  material_alpha: float | None = None) -> dict:
    """Material-buffer fast path: beta + mask only, no light stack."""
    return render_view(store, None, cam, settings, cond_alpha=0,
                       material_alpha=material_alpha,
                       buffers=("beta", "mask"))
