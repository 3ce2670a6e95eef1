"""Ground-truth Monte-Carlo rendering and dataset serialization.

The oracle estimates the reflection integral directly — multiple
importance sampling between a cosine lobe and the GGX lobe, analytic
occlusion against scene primitives — and is kept deliberately
independent from the differentiable split-sum path: the BRDF model is
re-stated here in scalar numpy instead of reusing the graph ops, so the
two routes only share conventions, not code.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imgio
from .ad import ConfigError
from .brdf import F0_DIELECTRIC, apply_named_transform, blend_intensity
from .scenes import AnalyticScene, Camera, build_analytic_scene, fibonacci_poses


class DatasetError(Exception):
    """Raised for malformed, truncated, or corrupted datasets."""


# =====================================================================
# Monte-Carlo oracle
# =====================================================================


def _brdf_rows(w_i, v, n, rho, rough):
    """Cook-Torrance f_r, plain numpy, (N,S,3) for sample grids.

    Same model as the differentiable path (GGX with alpha = r^2,
    Schlick Fresnel, Schlick-GGX G with k = (r+1)^2/8) written
    independently for the oracle.
    """
    cos_i = np.sum(w_i * n, axis=-1)
    cos_o = np.sum(v * n, axis=-1)
    h = w_i + v
    h = h / np.maximum(np.linalg.norm(h, axis=-1, keepdims=True), 1e-12)
    cos_h = np.sum(n * h, axis=-1)
    cos_d = np.sum(v * h, axis=-1)

    alpha = np.maximum(rough**2, 1e-4)
    denom_d = cos_h**2 * (alpha**2 - 1.0) + 1.0
    D = alpha**2 / (np.pi * denom_d**2)
    F = F0_DIELECTRIC + (1.0 - F0_DIELECTRIC) * (1.0 - np.clip(cos_d, 0.0, 1.0)) ** 5
    k = (rough + 1.0) ** 2 / 8.0
    mu_i = np.maximum(cos_i, 1e-4)
    mu_o = np.maximum(cos_o, 1e-4)
    G = (mu_i / (mu_i * (1.0 - k) + k)) * (mu_o / (mu_o * (1.0 - k) + k))
    spec = D * F * G / np.maximum(4.0 * np.maximum(cos_i, 0.0) * np.maximum(cos_o, 0.0), 1e-4)

    above = (cos_i > 0.0) & (cos_o > 0.0)
    return (rho / np.pi + spec[..., None]) * above[..., None]


def _sample_frame(n):
    """Tangent/bitangent for normals (N,3) (oracle-local copy)."""
    a = np.where(np.abs(n[..., 2:3]) < 0.9, [0.0, 0.0, 1.0], [1.0, 0.0, 0.0])
    t = np.cross(a, n)
    t /= np.maximum(np.linalg.norm(t, axis=-1, keepdims=True), 1e-12)
    b = np.cross(n, t)
    return t, b


def _sample_uniforms(rng, count, spp, stratified):
    """(count, spp, 2) uniforms, jittered-stratified on request.

    Stratification needs a square sample count; non-square counts fall
    back to independent draws.  Plain MC keeps the textbook 1/N variance
    law (which the statistics tests rely on); stratified mode converges
    faster and is used for dataset rendering.
    """
    u = rng.random((count, spp, 2))
    s = int(np.floor(np.sqrt(spp)))
    if stratified and s * s == spp:
        cells = np.arange(spp)
        cx = (cells % s)[None, :, None]
        cy = (cells // s)[None, :, None]
        grid = np.concatenate([cx, cy], axis=2)
        u = (grid + u) / s
    return u


def oracle_shade(scene: AnalyticScene, x, n, d, beta, spp: int = 256,
                 seed: int = 0, stratified: bool = False) -> np.ndarray:
    """Direct MC estimate of the reflection integral at hit points.

    x, n: (N,3) points and unit normals; d: (N,3) unit view rays
    (camera toward surface); beta: (N,4) materials.  Occlusion is
    resolved analytically against the scene; radiance comes from the
    environment only (single bounce, matching the split-sum model's
    direct term plus learned residual).

    Half of the samples come from a cosine lobe, half from the GGX
    half-vector lobe; contributions use the balance heuristic over the
    mixture pdf, so the estimator stays unbiased for any split.
    """
    if spp < 1:
        raise ConfigError(f"spp must be >= 1, got {spp}")
    x = np.atleast_2d(x)
    n = np.atleast_2d(n)
    d = np.atleast_2d(d)
    beta = np.atleast_2d(beta)
    count = x.shape[0]
    v = -d
    rho = beta[:, None, :3]
    rough = beta[:, None, 3]
    alpha = np.maximum(rough**2, 1e-4)

    rng = np.random.default_rng(np.random.SeedSequence((0x0A5EED, seed)))
    n_cos = spp // 2
    n_ggx = spp - n_cos
    t, b = _sample_frame(n)
    t = t[:, None, :]
    bb = b[:, None, :]
    nn = n[:, None, :]
    vv = v[:, None, :]

    # cosine-lobe branch
    u = _sample_uniforms(rng, count, n_cos, stratified)
    r_ = np.sqrt(u[..., 0])
    phi = 2.0 * np.pi * u[..., 1]
    local = np.stack([r_ * np.cos(phi), r_ * np.sin(phi),
                      np.sqrt(np.maximum(1.0 - u[..., 0], 0.0))], axis=-1)
    w_cos = local[..., 0:1] * t + local[..., 1:2] * bb + local[..., 2:3] * nn

    # GGX half-vector branch: h ~ D(h) (n.h), w = reflect(v, h)
    u = _sample_uniforms(rng, count, n_ggx, stratified)
    cos_h = np.sqrt((1.0 - u[..., 0]) / (1.0 + (alpha**2 - 1.0) * u[..., 0]))
    sin_h = np.sqrt(np.maximum(1.0 - cos_h**2, 0.0))
    phi = 2.0 * np.pi * u[..., 1]
    h_loc = np.stack([sin_h * np.cos(phi), sin_h * np.sin(phi), cos_h], axis=-1)
    h = h_loc[..., 0:1] * t + h_loc[..., 1:2] * bb + h_loc[..., 2:3] * nn
    vh = np.sum(vv * h, axis=-1, keepdims=True)
    w_ggx = 2.0 * vh * h - vv

    w_all = np.concatenate([w_cos, w_ggx], axis=1)

    # mixture pdf evaluated for every sample
    cos_i = np.sum(w_all * nn, axis=-1)
    p_cos = np.maximum(cos_i, 0.0) / np.pi
    h_all = w_all + vv
    h_all = h_all / np.maximum(np.linalg.norm(h_all, axis=-1, keepdims=True), 1e-12)
    nh = np.clip(np.sum(h_all * nn, axis=-1), 0.0, 1.0)
    vh_all = np.sum(h_all * vv, axis=-1)
    d_ndf = alpha**2 / (np.pi * (nh**2 * (alpha**2 - 1.0) + 1.0) ** 2)
    p_ggx = np.where(vh_all > 1e-6, d_ndf * nh / np.maximum(4.0 * vh_all, 1e-9), 0.0)
    frac = n_cos / spp
    p_mix = frac * p_cos + (1.0 - frac) * p_ggx

    fr = _brdf_rows(w_all, vv, nn, rho, rough)
    radiance = scene.env.radiance(w_all.reshape(-1, 3)).reshape(count, spp, 3)

    # analytic occlusion; skip for single-primitive convex scenes
    if _needs_shadow_rays(scene):
        flat_w = w_all.reshape(-1, 3)
        origins = np.repeat(x, spp, axis=0) + 1e-4 * flat_w
        blocked = scene.occluded(origins, flat_w).reshape(count, spp)
        radiance = radiance * (~blocked)[..., None]

    good = p_mix > 1e-9
    contrib = fr * radiance * np.maximum(cos_i, 0.0)[..., None]
    contrib = np.where(good[..., None], contrib / np.maximum(p_mix, 1e-12)[..., None], 0.0)
    return contrib.mean(axis=1)


def _needs_shadow_rays(scene: AnalyticScene) -> bool:
    """A single convex body never shadows its own outward hemisphere."""
    if len(scene.primitives) != 1:
        return True
    return scene.primitives[0].kind not in ("sphere", "box")


# =====================================================================
# View rendering
# =====================================================================


def render_oracle_view(scene: AnalyticScene, cam: Camera, spp: int, seed: int,
                       beta_map=None, rows_per_chunk: int = 8,
                       stratified: bool = True):
    """Render one view; returns dict of linear image + G-buffers.

    beta_map: optional callable mapping material rows (N,4) -> (N,4),
    applied before shading (used for the transformed condition).
    Chunked over fixed row groups with one counter-based stream per
    chunk, so results are deterministic per (pixel, seed) regardless of
    scheduling.
    """
    o, d = cam.rays()
    t, nrm, beta0, idx = scene.intersect(o, d)
    hit = idx >= 0
    h, w = cam.height, cam.width
    beta = beta0.copy()
    if beta_map is not None:
        beta[hit] = beta_map(beta0[hit])

    img = np.zeros((h * w, 3))
    hitpts = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    for chunk, r0 in enumerate(range(0, h, rows_per_chunk)):
        lo = r0 * w
        hi = min(h, r0 + rows_per_chunk) * w
        sel = np.arange(lo, hi)[hit[lo:hi]]
        if sel.size == 0:
            continue
        img[sel] = oracle_shade(scene, hitpts[sel], nrm[sel], d[sel], beta[sel],
                                spp=spp, seed=(seed * 1_000_003 + chunk),
                                stratified=stratified)

    depth = np.where(hit, t, 0.0)
    return {
        "rgb": img.reshape(h, w, 3),
        "mask": hit.reshape(h, w),
        "albedo": beta[:, :3].reshape(h, w, 3) * hit.reshape(h, w)[..., None],
        "rough": (beta[:, 3] * hit).reshape(h, w),
        "normal": (nrm * hit[:, None]).reshape(h, w, 3),
        "depth": depth.reshape(h, w),
    }


# =====================================================================
# Dataset writer / loader
# =====================================================================

GBUFFER_KEYS = ("albedo", "rough", "normal", "depth")


def _write_view(dirpath: Path, i: int, buffers: dict, files: list) -> None:
    img_path = dirpath / f"img_{i:03d}.png"
    imgio.write_png(img_path, imgio.srgb_encode(np.clip(buffers["rgb"], 0.0, 1.0)))
    imgio.write_mask(dirpath / f"mask_{i:03d}.png", buffers["mask"])
    imgio.write_pfm(dirpath / f"gt_albedo_{i:03d}.pfm", buffers["albedo"])
    imgio.write_pfm(dirpath / f"gt_rough_{i:03d}.pfm", buffers["rough"])
    imgio.write_pfm(dirpath / f"gt_normal_{i:03d}.pfm", buffers["normal"])
    imgio.write_pfm(dirpath / f"gt_depth_{i:03d}.pfm", buffers["depth"])
    files += [f"{dirpath.name}/img_{i:03d}.png", f"{dirpath.name}/mask_{i:03d}.png",
              f"{dirpath.name}/gt_albedo_{i:03d}.pfm", f"{dirpath.name}/gt_rough_{i:03d}.pfm",
              f"{dirpath.name}/gt_normal_{i:03d}.pfm", f"{dirpath.name}/gt_depth_{i:03d}.pfm"]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_condition(root: Path, scene, cams_train, cams_test, spp, seed,
                     beta_map, manifest_extra: dict) -> None:
    root.mkdir(parents=True, exist_ok=True)
    files: list[str] = []
    frames = []
    for split, cams, off in (("train", cams_train, 0), ("test", cams_test, 10_000)):
        sub = root / split
        sub.mkdir(exist_ok=True)
        for i, cam in enumerate(cams):
            buffers = render_oracle_view(scene, cam, spp, seed + off + i, beta_map)
            _write_view(sub, i, buffers, files)
            frames.append({
                "file": f"{split}/img_{i:03d}.png",
                "split": split,
                "c2w": cam.c2w.tolist(),
            })
    cam0 = cams_train[0]
    poses = {
        "fx": cam0.fx, "fy": cam0.fy, "cx": cam0.cx, "cy": cam0.cy,
        "width": cam0.width, "height": cam0.height,
        "frames": frames,
    }
    (root / "poses.json").write_text(json.dumps(poses, indent=1))
    files.append("poses.json")
    manifest = {
        "scene_hash": scene.scene_hash(),
        "scene": scene.manifest(),
        "n_train": len(cams_train),
        "n_test": len(cams_test),
        "spp": spp,
        "seed": seed,
        **manifest_extra,
        "checksums": {f: _sha256(root / f) for f in sorted(files)},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))


def generate_dataset(scene, transform_tag: str | None, alpha: float, out_dir,
                     seed: int = 0, n_train: int = 100, n_test: int = 20,
                     res: int = 128, spp: int = 64, env1=None):
    """Render and serialize a dataset (pair of conditions if a tag is given).

    With a transform: `out_dir/cond0` holds the original materials and
    `out_dir/cond1` the blend toward the transformed ones at `alpha`;
    geometry G-buffers are rendered once per view, so depth/normals are
    bit-identical across conditions.  Without a transform the layout is
    single-condition at `out_dir` itself.  `env1` optionally swaps the
    environment for condition 1.
    """
    if isinstance(scene, str):
        scene = build_analytic_scene(scene)
    out_dir = Path(out_dir)
    cams_train = fibonacci_poses(n_train, res=res)
    cams_test = fibonacci_poses(n_test, res=res, phase=1.234)
    try:
        if transform_tag is None:
            _write_condition(out_dir, scene, cams_train, cams_test, spp, seed,
                             None, {"transform": None, "alpha": 0.0, "condition": 0})
            return out_dir

        def beta_map(beta):
            rho_t, rough_t = apply_named_transform(transform_tag, beta[:, :3], beta[:, 3])
            target = np.concatenate([rho_t, rough_t[:, None]], axis=1)
            return blend_intensity(beta, target, alpha)

        scene1 = scene
        if env1 is not None:
            scene1 = AnalyticScene(scene.primitives, env1, scene.name + "_cond1env")
        _write_condition(out_dir / "cond0", scene, cams_train, cams_test, spp, seed,
                         None, {"transform": transform_tag, "alpha": alpha, "condition": 0})
        _write_condition(out_dir / "cond1", scene1, cams_train, cams_test, spp, seed,
                         beta_map, {"transform": transform_tag, "alpha": alpha, "condition": 1})
        pair = {
            "transform": transform_tag,
            "alpha": alpha,
            "seed": seed,
            "conditions": ["cond0", "cond1"],
            "envs_differ": env1 is not None,
        }
        (out_dir / "manifest.json").write_text(json.dumps(pair, indent=1))
        return out_dir
    except Exception:
        shutil.rmtree(out_dir, ignore_errors=True)
        raise


@dataclass
class SceneDataset:
    """In-memory dataset: linear images, masks, poses, optional G-buffers."""

    root: Path
    intrinsics: dict
    images: np.ndarray      # (N,H,W,3) linear float32
    masks: np.ndarray       # (N,H,W) bool
    c2w: np.ndarray         # (N,4,4)
    train_idx: np.ndarray
    test_idx: np.ndarray
    gbuffers: dict | None
    manifest: dict

    @property
    def has_gbuffers(self) -> bool:
        return self.gbuffers is not None

    def camera(self, i: int) -> Camera:
        k = self.intrinsics
        return Camera(k["fx"], k["fy"], k["cx"], k["cy"], self.c2w[i],
                      k["width"], k["height"])


def load_dataset(path) -> SceneDataset:
    """Load and verify one condition directory written by generate_dataset."""
    root = Path(path)
    man_path = root / "manifest.json"
    if not man_path.exists():
        raise DatasetError(f"no manifest.json under {root}")
    manifest = json.loads(man_path.read_text())
    if "conditions" in manifest:
        raise DatasetError(
            f"{root} is a paired dataset; load a condition subdirectory: "
            f"{manifest['conditions']}"
        )
    for rel, want in manifest["checksums"].items():
        p = root / rel
        if not p.exists():
            raise DatasetError(f"missing dataset file {p}")
        if _sha256(p) != want:
            raise DatasetError(f"checksum mismatch for {p}")
    poses = json.loads((root / "poses.json").read_text())
    intr = {k: poses[k] for k in ("fx", "fy", "cx", "cy", "width", "height")}

    images, masks, c2w = [], [], []
    train_idx, test_idx = [], []
    gbuf = {k: [] for k in GBUFFER_KEYS}
    have_gbuffers = True
    for frame in poses["frames"]:
        rel = frame["file"]
        i = len(images)
        (train_idx if frame["split"] == "train" else test_idx).append(i)
        images.append(imgio.srgb_decode(imgio.read_png(root / rel)))
        masks.append(imgio.read_mask(root / rel.replace("img_", "mask_")))
        c2w.append(np.asarray(frame["c2w"], dtype=np.float64))
        for key in GBUFFER_KEYS:
            p = root / rel.replace("img_", f"gt_{key}_").replace(".png", ".pfm")
            if p.exists():
                gbuf[key].append(imgio.read_pfm(p))
            else:
                have_gbuffers = False
    gbuffers = None
    if have_gbuffers:
        gbuffers = {k: np.stack(v).astype(np.float32) for k, v in gbuf.items()}
    return SceneDataset(
        root=root,
        intrinsics=intr,
        images=np.stack(images).astype(np.float32),
        masks=np.stack(masks),
        c2w=np.stack(c2w),
        train_idx=np.asarray(train_idx),
        test_idx=np.asarray(test_idx),
        gbuffers=gbuffers,
        manifest=manifest,
    )


def load_pair(path):
    """Load both conditions of a paired dataset."""
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    if "conditions" not in manifest:
        raise DatasetError(f"{root} is not a paired dataset")
    c0, c1 = manifest["conditions"]
    return load_dataset(root / c0), load_dataset(root / c1)
