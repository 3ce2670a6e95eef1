"""Joint two-scene optimization, target fitting, transfer, and ablations.

train_joint fits one radiance field plus per-condition lights and the
material transform F to a paired dataset (mixed 50/50 ray batches, the
transformed condition routed through F).  train_target fits a fresh
single-condition model without embeddings; apply_transfer then plugs
the source run's F into the target model.  fit_posthoc_transform is
the separate-optimization baseline, and run_ablation dispatches the
named pipeline variants.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import ad
from .ad import ConfigError, ParamStore, value_of
from .brdf import MspecLut, build_mspec_lut, reflect_dir
from .datagen import SceneDataset
from .field import (FieldConfig, _grid_res, build_field, march_ray,
                    topk_samples, trace_visibility, trilinear_gradient)
from .light import build_light, build_sg_light
from .render import RenderSettings, accumulate, render_view, shade_batch
from .transform import build_transform, fit_transform_net


class TrainError(RuntimeError):
    """Raised when an optimization pre-condition fails."""


@dataclass
class TrainConfig:
    """Optimization hyper-parameters; defaults are the desk-scale recipe."""

    iterations: int = 20000
    batch: int = 128                 # rays per step, split across conditions
    lr_grids: float = 2e-2
    lr_grids_init: float = 0.15      # decays exponentially to lr_grids
    lr_mlps: float = 1e-3
    lr_embed: float = 1e-3
    lr_transform: float = 1e-3
    w_rf: float = 1.0
    w_pbr: float = 0.2
    w_normal: float = 5e-3
    w_mask: float = 0.1
    grid: int = 96
    feat: int = 24
    n_samples: int = 64
    topk: int = 8
    vis_steps: int = 32
    light_width: int = 128
    seed: int = 0
    val_every: int = 2000
    log_every: int = 100
    # ablation switches (recorded in the checkpoint config hash)
    no_reduce_grad: bool = False
    sg_light: bool = False
    separate_optim: bool = False

    def __post_init__(self):
        numeric = {k: v for k, v in asdict(self).items()
                   if isinstance(v, (int, float)) and not isinstance(v, bool)}
        bad = [k for k, v in numeric.items() if v <= 0]
        if bad:
            raise ConfigError(f"TrainConfig fields must be positive: {bad}")
        if self.batch < 2 or self.topk > self.n_samples:
            raise ConfigError(
                f"batch {self.batch} and topk {self.topk} <= n_samples "
                f"{self.n_samples} required"
            )

    def settings(self) -> RenderSettings:
        return RenderSettings(n_samples=self.n_samples, topk=self.topk,
                              vis_steps=self.vis_steps)


# =====================================================================
# Checkpoints
# =====================================================================

CKPT_MAGIC = b"MTX1"
CKPT_VERSION = 1


def config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


@dataclass
class Checkpoint:
    """A trained model: parameter blocks + enough context to rerun it."""

    store: ParamStore
    config: dict
    seed: int
    lut: MspecLut | None = None
    log_tail: list = dc_field(default_factory=list)
    version: int = CKPT_VERSION

    @property
    def hash(self) -> str:
        return config_hash(self.config)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Serialize magic/version + JSON header + raw block bytes.

    Block bytes round-trip exactly (native dtype, C order), so a reload
    renders bit-identically; the LUT tables ride along as two extra
    arrays for the same reason -- rebaking them would be deterministic
    but slow.
    """
    path = Path(path)
    blocks = [(name, list(arr.shape), str(arr.dtype))
              for name, arr in ckpt.store.blocks.items()]
    header = {
        "version": ckpt.version,
        "seed": ckpt.seed,
        "dtype": str(np.dtype(ckpt.store.dtype)),
        "config": ckpt.config,
        "config_hash": ckpt.hash,
        "blocks": blocks,
        "lut": None if ckpt.lut is None else {
            "f0": ckpt.lut.f0, "seed": ckpt.lut.seed, "spp": ckpt.lut.spp,
            "a_shape": list(ckpt.lut.a.shape), "dtype": str(ckpt.lut.a.dtype),
        },
        "log_tail": ckpt.log_tail[-50:],
    }
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", ckpt.version, len(head)))
        fh.write(head)
        for _, arr in ckpt.store.blocks.items():
            fh.write(np.ascontiguousarray(arr).tobytes())
        if ckpt.lut is not None:
            fh.write(np.ascontiguousarray(ckpt.lut.a).tobytes())
            fh.write(np.ascontiguousarray(ckpt.lut.b).tobytes())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CKPT_MAGIC:
            raise ConfigError(f"{path} is not a checkpoint (magic {magic!r})")
        version, head_len = struct.unpack("<IQ", fh.read(12))
        if version != CKPT_VERSION:
            raise ConfigError(
                f"checkpoint version {version} != supported {CKPT_VERSION}"
            )
        header = json.loads(fh.read(head_len).decode())
        if config_hash(header["config"]) != header["config_hash"]:
            raise ConfigError(f"config hash mismatch in {path}")
        store = ParamStore(np.dtype(header["dtype"]))
        for name, shape, dtype in header["blocks"]:
            n = int(np.prod(shape)) * np.dtype(dtype).itemsize
            arr = np.frombuffer(fh.read(n), dtype=dtype).reshape(shape)
            store.blocks[name] = arr.copy()
        lut = None
        if header["lut"] is not None:
            meta = header["lut"]
            shape = tuple(meta["a_shape"])
            n = int(np.prod(shape)) * np.dtype(meta["dtype"]).itemsize
            a = np.frombuffer(fh.read(n), dtype=meta["dtype"]).reshape(shape).copy()
            b = np.frombuffer(fh.read(n), dtype=meta["dtype"]).reshape(shape).copy()
            lut = MspecLut(a=a, b=b, f0=meta["f0"], seed=meta["seed"],
                           spp=meta["spp"])
    return Checkpoint(store, header["config"], header["seed"], lut,
                      header["log_tail"], version)


# =====================================================================
# Ray pools
# =====================================================================


@dataclass
class RayPool:
    """Flattened training rays of one dataset condition."""

    origins: np.ndarray   # (N,3) float32
    dirs: np.ndarray      # (N,3) float32
    rgb: np.ndarray       # (N,3) float32 linear
    mask: np.ndarray      # (N,) bool
    in_mask: np.ndarray   # indices of mask==True rays


def build_ray_pool(ds: SceneDataset, split: str = "train") -> RayPool:
    idx = ds.train_idx if split == "train" else ds.test_idx
    origins, dirs, rgb, mask = [], [], [], []
    for i in idx:
        o, d = ds.camera(int(i)).rays()
        origins.append(o.astype(np.float32))
        dirs.append(d.astype(np.float32))
        rgb.append(ds.images[i].reshape(-1, 3))
        mask.append(ds.masks[i].reshape(-1))
    origins = np.concatenate(origins)
    pool = RayPool(origins, np.concatenate(dirs), np.concatenate(rgb),
                   np.concatenate(mask), np.array([]))
    pool.in_mask = np.nonzero(pool.mask)[0]
    return pool


def sample_rays(pool: RayPool, count: int, rng: np.random.Generator):
    """Half the rays from in-mask pixels, half uniform over all pixels.

    Uniform rays keep empty space supervised (the opacity term carves
    it out); the in-mask half keeps the object itself from being
    under-sampled on small silhouettes.
    """
    n_obj = count // 2
    idx = np.concatenate([
        pool.in_mask[rng.integers(0, pool.in_mask.size, n_obj)],
        rng.integers(0, pool.mask.size, count - n_obj),
    ])
    return (pool.origins[idx], pool.dirs[idx], pool.rgb[idx], pool.mask[idx])


# =====================================================================
# Loss assembly
# =====================================================================


def condition_loss(store: ParamStore, lut: MspecLut, o, d, rgb, mask,
                   cond_alpha: int, material_alpha: float | None,
                   cfg: TrainConfig, jitter_seed: int):
    """Per-condition training loss over one ray batch; returns (node, terms).

    Color terms are masked MSE over object pixels; the opacity term
    supervises every ray toward its coverage mask, which is what keeps
    density from growing in empty space that no object pixel sees.  The
    normal-consistency penalty is weighted by the (detached) sample
    weights so empty samples do not constrain the normal head.
    """
    settings = cfg.settings()
    batch = march_ray(store, o, d, cfg.n_samples, jitter_seed=jitter_seed,
                      train=True)
    sh = shade_batch(store, lut, batch, cond_alpha, settings, material_alpha,
                     train=True, reduce_grad=not cfg.no_reduce_grad,
                     sg=cfg.sg_light)
    r = o.shape[0]
    k = sh.idx.shape[1]
    c_rf = accumulate(sh.w, sh.c, r, k)
    c_pbr = accumulate(sh.w, sh.pbr, r, k)

    m = mask.astype(np.float32)
    n_obj = max(int(mask.sum()), 1)

    def masked_mse(img):
        per_ray = ad.npsum(ad.square(ad.sub(img, rgb)), axis=1)
        return ad.mul(ad.npsum(ad.mul(per_ray, m)), 1.0 / (3.0 * n_obj))

    rf_term = masked_mse(c_rf)
    pbr_term = masked_mse(c_pbr)

    acc = ad.sub(1.0, batch.t_end)
    mask_term = ad.mean(ad.square(ad.sub(acc, m)))

    wv = value_of(sh.w)
    cos = ad.npsum(ad.mul(sh.n, sh.n_grad), axis=1, keepdims=True)
    normal_term = ad.mul(ad.npsum(ad.mul(ad.sub(1.0, cos), wv)),
                         1.0 / (float(wv.sum()) + 1e-8))

    loss = ad.add(
        ad.add(ad.mul(rf_term, cfg.w_rf), ad.mul(pbr_term, cfg.w_pbr)),
        ad.add(ad.mul(normal_term, cfg.w_normal), ad.mul(mask_term, cfg.w_mask)),
    )
    terms = {
        f"rf{cond_alpha}": float(value_of(rf_term)),
        f"pbr{cond_alpha}": float(value_of(pbr_term)),
        f"mask{cond_alpha}": float(value_of(mask_term)),
        f"normal{cond_alpha}": float(value_of(normal_term)),
    }
    return loss, terms


def _adam_params(cfg: TrainConfig, frac: float = 1.0) -> ad.AdamParams:
    """Per-block Adam rates at training progress `frac` in [0,1].

    Grid rates decay exponentially from lr_grids_init to lr_grids: the
    empty-field start needs large normalized steps to carve geometry at
    all (Adam progress on the shifted-softplus grid is pace-limited by
    the step size, not the gradient magnitude), while the endgame wants
    small steps so surfaces stop breathing under sampling noise.
    """
    lr_g = cfg.lr_grids_init * (cfg.lr_grids / cfg.lr_grids_init) ** frac
    return ad.AdamParams(lr={
        "field/sigma": lr_g,
        "field/app": lr_g,
        "field/e": cfg.lr_embed,
        "light/edir": cfg.lr_embed,
        "light/eindir": cfg.lr_embed,
        "transform": cfg.lr_transform,
        "default": cfg.lr_mlps,
    })


def _val_psnr(store: ParamStore, lut, ds: SceneDataset, cfg: TrainConfig,
              cond_alpha: int, material_alpha) -> float:
    """RF-render PSNR on the first test view (masked pixels)."""
    i = int(ds.test_idx[0])
    settings = cfg.settings()
    out = render_view(store, lut, ds.camera(i), settings, cond_alpha,
                      material_alpha, sg=cfg.sg_light,
                      buffers=("rgb_rf", "mask"))
    m = ds.masks[i]
    if not m.any():
        return float("nan")
    mse = float(np.mean((out["rgb_rf"][m] - ds.images[i][m]) ** 2))
    return 99.0 if mse <= 1e-10 else float(10.0 * np.log10(1.0 / mse))


# =====================================================================
# Optimization loops
# =====================================================================


def _optimize(store: ParamStore, lut, conditions, cfg: TrainConfig,
              log_path=None, kind: str = "joint") -> Checkpoint:
    """Shared training loop over [(dataset, cond_alpha, material_alpha)].

    Every iteration draws a fresh seeded RNG from (seed, iter), so the
    ray schedule is independent of history and identical across reruns;
    NaN losses abort by restoring the last validation snapshot.
    """
    pools = [build_ray_pool(ds) for ds, _, _ in conditions]
    per = cfg.batch // len(conditions)
    adam = ad.AdamState()
    log: list[dict] = []
    fh = open(log_path, "w") if log_path else None
    last_good = {k: v.copy() for k, v in store.blocks.items()}
    config = {"kind": kind, **asdict(cfg)}
    aborted = None
    t_start = time.time()
    try:
        for it in range(cfg.iterations):
            rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, it)))
            loss = None
            terms: dict = {}
            for ci, ((ds, cond_alpha, material_alpha), pool) in enumerate(
                    zip(conditions, pools)):
                o, d, rgb, mask = sample_rays(pool, per, rng)
                jit = (cfg.seed * 1000003 + it * 7 + ci) & 0x7FFFFFFF
                part, t = condition_loss(store, lut, o, d, rgb, mask,
                                         cond_alpha, material_alpha, cfg, jit)
                loss = part if loss is None else ad.add(loss, part)
                terms.update(t)
            loss_val = float(value_of(loss))
            if not np.isfinite(loss_val):
                for k, v in last_good.items():
                    store.blocks[k][...] = v
                aborted = it
                break
            grads = ad.backward(loss, store, sparse_grids=True)
            ad.adam_step(store, grads, adam,
                         _adam_params(cfg, it / max(cfg.iterations - 1, 1)))

            if it % cfg.log_every == 0 or it == cfg.iterations - 1:
                entry = {"iter": it, "loss": round(loss_val, 6),
                         **{k: round(v, 6) for k, v in terms.items()}}
                if it % cfg.val_every == 0 or it == cfg.iterations - 1:
                    ds0, ca0, ma0 = conditions[0]
                    entry["psnr_val"] = round(
                        _val_psnr(store, lut, ds0, cfg, ca0, ma0), 3)
                    entry["elapsed_s"] = round(time.time() - t_start, 1)
                    last_good = {k: v.copy() for k, v in store.blocks.items()}
                log.append(entry)
                if fh:
                    fh.write(json.dumps(entry) + "\n")
                    fh.flush()
    finally:
        if fh:
            fh.close()
    if aborted is not None:
        config["aborted_at"] = aborted
    return Checkpoint(store, config, cfg.seed, lut, [json.dumps(e) for e in log])


def _build_model(cfg: TrainConfig, with_embeddings: bool,
                 with_transform: bool) -> tuple[ParamStore, MspecLut]:
    store = ParamStore(np.float32)
    fc = FieldConfig(grid=cfg.grid, feat=cfg.feat, n_samples=cfg.n_samples,
                     topk=cfg.topk, vis_steps=cfg.vis_steps)
    build_field(store, fc, cfg.seed, with_embeddings=with_embeddings)
    if cfg.sg_light:
        build_sg_light(store, cfg.seed)
    else:
        build_light(store, cfg.seed, width=cfg.light_width,
                    with_embeddings=with_embeddings)
    if with_transform:
        build_transform(store, cfg.seed)
    return store, build_mspec_lut()


def train_joint(ds0: SceneDataset, ds1: SceneDataset, cfg: TrainConfig,
                log_path=None) -> Checkpoint:
    """Fit field + per-condition lights + F on a paired dataset."""
    k0, k1 = ds0.intrinsics, ds1.intrinsics
    if k0 != k1:
        raise TrainError(f"paired datasets disagree on intrinsics: {k0} vs {k1}")
    store, lut = _build_model(cfg, with_embeddings=True, with_transform=True)
    conditions = [(ds0, 0, 0.0), (ds1, 1, 1.0)]
    return _optimize(store, lut, conditions, cfg, log_path, kind="joint")


def train_target(ds: SceneDataset, cfg: TrainConfig, log_path=None) -> Checkpoint:
    """Fit a single-condition model: no embeddings, no transform blocks."""
    store, lut = _build_model(cfg, with_embeddings=False, with_transform=False)
    return _optimize(store, lut, [(ds, 0, None)], cfg, log_path, kind="target")


# =====================================================================
# Transfer and baselines
# =====================================================================


def apply_transfer(target_ckpt: Checkpoint, source_ckpt: Checkpoint,
                   alpha: float) -> Checkpoint:
    """Compose target field+light with the source run's transform F.

    The composed model renders through interpolate_material(beta, alpha):
    alpha=0 never evaluates F, so those renders are bit-identical to the
    target checkpoint alone.
    """
    if target_ckpt.version != source_ckpt.version:
        raise ConfigError(
            f"checkpoint versions differ: target {target_ckpt.version} vs "
            f"source {source_ckpt.version}"
        )
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0,1], got {alpha}")
    f_blocks = {k: v for k, v in source_ckpt.store.blocks.items()
                if k.startswith("transform/")}
    if not f_blocks:
        raise ConfigError("source checkpoint carries no transform blocks")
    store = ParamStore(target_ckpt.store.dtype)
    for k, v in target_ckpt.store.blocks.items():
        if not k.startswith("transform/"):
            store.blocks[k] = v.copy()
    for k, v in f_blocks.items():
        store.blocks[k] = v.astype(store.dtype)
    # inherit the target's render-relevant settings at top level so the
    # composed checkpoint stays self-describing
    config = {
        **target_ckpt.config,
        "kind": "transfer",
        "alpha": alpha,
        "target": target_ckpt.hash,
        "source": source_ckpt.hash,
    }
    return Checkpoint(store, config, target_ckpt.seed,
                      target_ckpt.lut or source_ckpt.lut)


def surface_materials(ckpt: Checkpoint, cams: list, n_samples: int = 64,
                      threshold: float = 0.5):
    """Surface points + decoded materials along the given cameras' rays.

    A ray hits the surface where its accumulated weight exceeds the
    threshold; the point is placed at the transmittance-weighted
    expected depth.  Returns (points, beta) arrays.
    """
    store = ckpt.store
    pts_all, beta_all = [], []
    for cam in cams:
        o, d = cam.rays()
        o = o.astype(store.dtype)
        d = d.astype(store.dtype)
        for start in range(0, o.shape[0], 8192):
            sl = slice(start, start + 8192)
            batch = march_ray(store, o[sl], d[sl], n_samples, jitter_seed=None,
                              train=False)
            w = value_of(batch.weights)
            wsum = w.sum(axis=1)
            hit = wsum >= threshold
            if not hit.any():
                continue
            t_bar = (w[hit] * batch.t_mid[hit]).sum(axis=1) / wsum[hit]
            x = o[sl][hit] + t_bar[:, None] * d[sl][hit]
            pts_all.append(x)
            beta_all.append(_beta_at(store, x))
    if not pts_all:
        return (np.zeros((0, 3), dtype=store.dtype),
                np.zeros((0, 4), dtype=store.dtype))
    return np.concatenate(pts_all), np.concatenate(beta_all)


def _beta_at(store: ParamStore, pts: np.ndarray) -> np.ndarray:
    from .field import appearance_features

    _, a_bar = appearance_features(store, pts, 0, train=False)
    raw = ad.mlp_forward(store, "field/dbeta", a_bar, hidden="relu",
                         out="identity", train=False)
    return np.asarray(value_of(ad.sigmoid(raw)))


def fit_posthoc_transform(ckpt0: Checkpoint, ckpt1: Checkpoint, cams: list,
                          seed: int = 0, iters: int = 8000,
                          min_samples: int = 10000) -> ParamStore:
    """Separate-optimization baseline: regress F from matched materials.

    Surface points come from ckpt0's geometry; both checkpoints decode
    their material at the same 3D locations, and F is fit to the pairs
    by least squares.
    """
    pts, b0 = surface_materials(ckpt0, cams)
    if pts.shape[0] < min_samples:
        raise TrainError(
            f"only {pts.shape[0]} surface samples (< {min_samples}); "
            "add cameras or train the checkpoints further"
        )
    b1 = _beta_at(ckpt1.store, pts)
    return fit_transform_net(b0.astype(np.float64), b1.astype(np.float64),
                             seed=seed, iters=iters)


ABLATION_TAGS = ("no_reduce_grad", "sg_light", "wo_joint", "wo_transfer")


def run_ablation(variant: str, ds0: SceneDataset, ds1: SceneDataset,
                 cfg: TrainConfig, log_path=None) -> Checkpoint:
    """Dispatch one named pipeline variant; the tag lands in the config.

    "wo_transfer" trains nothing: it is the evaluation convention of
    scoring un-transformed materials against transformed references,
    so the returned checkpoint only records the tag.
    """
    if variant not in ABLATION_TAGS:
        raise ConfigError(f"unknown ablation {variant!r}; expected {ABLATION_TAGS}")
    if variant == "no_reduce_grad":
        cfg = TrainConfig(**{**asdict(cfg), "no_reduce_grad": True})
        return train_joint(ds0, ds1, cfg, log_path)
    if variant == "sg_light":
        cfg = TrainConfig(**{**asdict(cfg), "sg_light": True})
        return train_joint(ds0, ds1, cfg, log_path)
    if variant == "wo_joint":
        cfg = TrainConfig(**{**asdict(cfg), "separate_optim": True})
        ck0 = train_target(ds0, cfg, log_path)
        ck1 = train_target(ds1, cfg)
        # surface pairs come from the train views: the posthoc fit is a
        # training stage, and the test split stays held out
        cams = [ds0.camera(int(i)) for i in ds0.train_idx]
        f_store = fit_posthoc_transform(ck0, ck1, cams, seed=cfg.seed)
        store = ParamStore(np.float32)
        for k, v in f_store.blocks.items():
            store.blocks[k] = v.astype(np.float32)
        config = {"kind": "wo_joint", **asdict(cfg)}
        return Checkpoint(store, config, cfg.seed, ck0.lut)
    config = {"kind": "wo_transfer", **asdict(cfg)}
    return Checkpoint(ParamStore(np.float32), config, cfg.seed)


# =====================================================================
# Gradient validation
# =====================================================================


def gradcheck_joint(n_rays: int = 8, seed: int = 13, eps: float = 1e-6,
                    max_coords: int = 24):
    """Finite-difference check of the full joint loss in float64.

    Covers every trainable group at once: density and appearance grids,
    decoder heads, both light MLPs, condition embeddings, and F.  Three
    things make the comparison meaningful rather than noise-dominated:

    * the density grid is seeded with a moderate blob -- at the empty
      init every shading gradient sits at roundoff scale, where a
      central difference measures nothing;
    * quantities that are detached by design (secondary visibility,
      top-k sample selection, the density-gradient normal target, and
      the normal-term weights) are frozen outside the probe closure, so
      the difference quotient sees the same constants the analytic pass
      treats as constants;
    * light-input gradient damping is disabled, since it intentionally
      rescales the analytic values away from the true derivative.

    The default seed places the base point away from ReLU kinks: a bias
    probe shifts one unit's pre-activation uniformly across every
    shading row, so a row with |pre-activation| below `eps` would make
    the central difference straddle a slope jump.  That contaminates
    the quotient, not the gradient -- pick a different seed, not a
    different formula, if the state ever lands on one.

    Returns `(max_rel_err, report)` from `ad.finite_diff_check`.
    """
    store = ParamStore(np.float64)
    fc = FieldConfig(grid=8, feat=6, n_samples=16, topk=4, embed=8,
                     fusion_width=8, decoder_width=8, view_freqs=2,
                     vis_steps=8)
    build_field(store, fc, seed, with_embeddings=True)
    build_light(store, seed, width=16, with_embeddings=True)
    build_transform(store, seed, hidden=16)
    lut = build_mspec_lut(n_cos=16, n_r=16, spp=256, seed=11)

    rng = np.random.default_rng(seed)
    store.blocks["field/sigma"][:] += rng.uniform(
        8.0, 14.0, store.blocks["field/sigma"].shape)
    store.blocks["field/app"][:] += 0.1 * rng.standard_normal(
        store.blocks["field/app"].shape)

    phi = 2.0 * np.pi * np.arange(n_rays) / n_rays
    o = np.stack([2.0 * np.cos(phi), 0.4 * np.sin(2 * phi),
                  2.0 * np.sin(phi)], axis=1)
    d = -o + 0.05 * rng.standard_normal(o.shape)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    rgb = rng.random((n_rays, 3))
    mask = np.ones(n_rays)
    mask[-1] = 0.0

    settings = RenderSettings(n_samples=fc.n_samples, topk=fc.topk,
                              vis_steps=fc.vis_steps)

    # freeze the detached-by-design quantities at the base state
    base = march_ray(store, o, d, fc.n_samples, jitter_seed=3, train=True)
    idx = topk_samples(base, fc.topk)
    rows = np.repeat(np.arange(n_rays), fc.topk)
    pts = base.positions[rows, idx.ravel()]
    view = np.repeat(d, fc.topk, axis=0)
    n_g = trilinear_gradient(store.blocks["field/sigma"], pts,
                             _grid_res(store))
    n_g = -n_g / np.maximum(np.linalg.norm(n_g, axis=1, keepdims=True), 1e-12)
    t_det = reflect_dir(n_g, -view)
    t_det = t_det / np.maximum(np.linalg.norm(t_det, axis=1, keepdims=True),
                               1e-12)
    vis = trace_visibility(store, pts, t_det, steps=fc.vis_steps)
    w0 = value_of(ad.take_along_rows(base.weights, idx)).reshape(-1, 1).copy()

    n_obj = max(int(mask.sum()), 1)

    def joint_loss(s: ParamStore):
        total = None
        batch = march_ray(s, o, d, fc.n_samples, jitter_seed=3, train=True)
        for ci in (0, 1):
            sh = shade_batch(s, lut, batch, ci, settings,
                             material_alpha=float(ci), train=True,
                             reduce_grad=False, idx=idx, n_grad=n_g, vis=vis)
            c_rf = accumulate(sh.w, sh.c, n_rays, fc.topk)
            c_pbr = accumulate(sh.w, sh.pbr, n_rays, fc.topk)

            def masked_mse(img):
                per_ray = ad.npsum(ad.square(ad.sub(img, rgb)), axis=1)
                return ad.mul(ad.npsum(ad.mul(per_ray, mask)),
                              1.0 / (3.0 * n_obj))

            acc = ad.sub(1.0, batch.t_end)
            mask_term = ad.mean(ad.square(ad.sub(acc, mask)))
            cos = ad.npsum(ad.mul(sh.n, n_g), axis=1, keepdims=True)
            normal_term = ad.mul(ad.npsum(ad.mul(ad.sub(1.0, cos), w0)),
                                 1.0 / (float(w0.sum()) + 1e-8))
            loss = ad.add(
                ad.add(masked_mse(c_rf), ad.mul(masked_mse(c_pbr), 0.2)),
                ad.add(ad.mul(normal_term, 5e-3), ad.mul(mask_term, 0.1)),
            )
            total = loss if total is None else ad.add(total, loss)
        return total

    return ad.finite_diff_check(joint_loss, store, eps=eps,
                                max_coords=max_coords, seed=seed)
