"""Analytic test scenes: primitives, SVBRDF rules, environments, cameras.

Scenes are built from spheres, axis-aligned boxes, and planes with
closed-form intersections and exact normals, so ground-truth G-buffers
come for free and the Monte-Carlo oracle needs no acceleration
structure.  Everything is deterministic given the scene manifest.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .ad import ConfigError

SCENE_BOX_MIN = -1.0
SCENE_BOX_MAX = 1.0

_INF = np.inf


# =====================================================================
# SVBRDF rules
# =====================================================================

VALID_RULES = ("constant", "checker", "radial")


@dataclass
class BrdfRule:
    """Spatially-varying material rule over a primitive's surface.

    kind: "constant" (beta_a everywhere), "checker" (beta_a/beta_b by
    surface parity at `scale`), or "radial" (blend beta_a -> beta_b by
    normalized distance from the primitive center).
    """

    kind: str
    beta_a: np.ndarray
    beta_b: np.ndarray | None = None
    scale: float = 4.0

    def __post_init__(self):
        if self.kind not in VALID_RULES:
            raise ConfigError(f"unknown SVBRDF rule {self.kind!r}")
        self.beta_a = np.asarray(self.beta_a, dtype=np.float64)
        if self.beta_a.shape != (4,) or self.beta_a.min() < 0 or self.beta_a.max() > 1:
            raise ConfigError(f"beta_a must be 4 values in [0,1], got {self.beta_a}")
        if self.kind != "constant":
            if self.beta_b is None:
                raise ConfigError(f"rule {self.kind!r} needs beta_b")
            self.beta_b = np.asarray(self.beta_b, dtype=np.float64)
            if self.beta_b.shape != (4,) or self.beta_b.min() < 0 or self.beta_b.max() > 1:
                raise ConfigError(f"beta_b must be 4 values in [0,1], got {self.beta_b}")

    def evaluate(self, x: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
        """Material rows (N,4) at surface points x (N,3)."""
        x = np.atleast_2d(x)
        n = x.shape[0]
        if self.kind == "constant":
            return np.broadcast_to(self.beta_a, (n, 4)).copy()
        if self.kind == "checker":
            cells = np.floor((x - center) * self.scale).astype(np.int64)
            parity = cells.sum(axis=1) % 2
            out = np.where(parity[:, None] == 0, self.beta_a, self.beta_b)
            return out.astype(np.float64)
        # radial: blend by distance from center, normalized by radius
        t = np.clip(np.linalg.norm(x - center, axis=1) / max(radius, 1e-9), 0.0, 1.0)
        return (1.0 - t[:, None]) * self.beta_a + t[:, None] * self.beta_b


# =====================================================================
# Primitives
# =====================================================================


@dataclass
class Primitive:
    """One analytic shape with its material rule.

    kind: "sphere" (center, radius), "box" (center, half extents in
    `size`), or "plane" (point `center`, unit normal `axis`, finite
    disk of `radius` so the scene stays inside the unit box).
    """

    kind: str
    center: np.ndarray
    radius: float = 0.5
    size: np.ndarray | None = None
    axis: np.ndarray | None = None
    rule: BrdfRule = field(default_factory=lambda: BrdfRule("constant", np.array([0.5, 0.5, 0.5, 0.5])))

    def __post_init__(self):
        if self.kind not in ("sphere", "box", "plane"):
            raise ConfigError(f"unknown primitive {self.kind!r}")
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.kind == "box":
            if self.size is None:
                raise ConfigError("box needs half extents in size")
            self.size = np.asarray(self.size, dtype=np.float64)
        if self.kind == "plane":
            if self.axis is None:
                raise ConfigError("plane needs a normal axis")
            self.axis = np.asarray(self.axis, dtype=np.float64)
            self.axis = self.axis / np.linalg.norm(self.axis)

    # ---- intersection -------------------------------------------------

    def intersect(self, o: np.ndarray, d: np.ndarray):
        """First-hit distances for rays (o, d); +inf where missed.

        Returns (t, normals) with t shape (N,) and normals (N,3);
        normals are valid only where t is finite.
        """
        o = np.atleast_2d(o)
        d = np.atleast_2d(d)
        n_rays = o.shape[0]
        if self.kind == "sphere":
            oc = o - self.center
            b = np.sum(oc * d, axis=1)
            c = np.sum(oc * oc, axis=1) - self.radius**2
            disc = b * b - c
            hit = disc >= 0
            sq = np.sqrt(np.where(hit, disc, 0.0))
            t0 = -b - sq
            t1 = -b + sq
            t = np.where(t0 > 1e-6, t0, np.where(t1 > 1e-6, t1, _INF))
            t = np.where(hit, t, _INF)
            x = o + t[:, None] * d
            nrm = (x - self.center) / self.radius
            return t, nrm
        if self.kind == "box":
            lo = self.center - self.size
            hi = self.center + self.size
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / d
                ta = (lo - o) * inv
                tb = (hi - o) * inv
            tmin = np.nanmax(np.minimum(ta, tb), axis=1)
            tmax = np.nanmin(np.maximum(ta, tb), axis=1)
            t = np.where((tmax >= tmin) & (tmax > 1e-6),
                         np.where(tmin > 1e-6, tmin, _INF), _INF)
            x = o + t[:, None] * d
            # face normal: axis of largest |offset| relative to extents
            rel = (x - self.center) / self.size
            axis_idx = np.argmax(np.abs(rel), axis=1)
            nrm = np.zeros((n_rays, 3))
            rows = np.arange(n_rays)
            nrm[rows, axis_idx] = np.sign(rel[rows, axis_idx])
            return t, nrm
        # plane (finite disk)
        dn = d @ self.axis
        offs = (self.center - o) @ self.axis
        with np.errstate(divide="ignore", invalid="ignore"):
            t = offs / dn
        t = np.where((np.abs(dn) > 1e-12) & (t > 1e-6), t, _INF)
        x = o + t[:, None] * d
        inside = np.linalg.norm(x - self.center, axis=1) <= self.radius
        t = np.where(inside, t, _INF)
        nrm = np.broadcast_to(self.axis, (n_rays, 3)).copy()
        # orient against the ray so the shading normal faces the viewer
        flip = dn > 0
        nrm[flip] = -nrm[flip]
        return t, nrm

    def materials(self, x: np.ndarray) -> np.ndarray:
        ref_radius = self.radius
        if self.kind == "box":
            ref_radius = float(np.linalg.norm(self.size))
        return self.rule.evaluate(x, self.center, ref_radius)

    def manifest(self) -> dict:
        out = {
            "kind": self.kind,
            "center": self.center.tolist(),
            "radius": self.radius,
            "rule": {
                "kind": self.rule.kind,
                "beta_a": self.rule.beta_a.tolist(),
                "beta_b": None if self.rule.beta_b is None else self.rule.beta_b.tolist(),
                "scale": self.rule.scale,
            },
        }
        if self.size is not None:
            out["size"] = self.size.tolist()
        if self.axis is not None:
            out["axis"] = self.axis.tolist()
        return out


# =====================================================================
# Environment light
# =====================================================================


@dataclass
class Environment:
    """Constant ambient term plus up to 4 directional vMF lobes.

    radiance(d) = ambient + sum_i weight_i * exp(kappa_i (d.mu_i - 1)),
    all per-channel RGB.
    """

    ambient: np.ndarray
    lobe_dirs: np.ndarray       # (L,3) unit
    lobe_weights: np.ndarray    # (L,3)
    lobe_kappas: np.ndarray     # (L,)

    def __post_init__(self):
        self.ambient = np.asarray(self.ambient, dtype=np.float64)
        self.lobe_dirs = np.asarray(self.lobe_dirs, dtype=np.float64).reshape(-1, 3)
        self.lobe_weights = np.asarray(self.lobe_weights, dtype=np.float64).reshape(-1, 3)
        self.lobe_kappas = np.asarray(self.lobe_kappas, dtype=np.float64).reshape(-1)
        if self.lobe_dirs.shape[0] > 4:
            raise ConfigError("at most 4 vMF lobes supported")
        if self.lobe_dirs.shape[0] != self.lobe_weights.shape[0] or \
                self.lobe_dirs.shape[0] != self.lobe_kappas.shape[0]:
            raise ConfigError("lobe arrays must agree in count")
        norms = np.linalg.norm(self.lobe_dirs, axis=1)
        if self.lobe_dirs.shape[0] and np.abs(norms - 1.0).max() > 1e-6:
            self.lobe_dirs = self.lobe_dirs / norms[:, None]

    def radiance(self, d: np.ndarray) -> np.ndarray:
        """Incoming radiance (N,3) for unit directions d (N,3)."""
        d = np.atleast_2d(d)
        out = np.broadcast_to(self.ambient, (d.shape[0], 3)).copy()
        for mu, w, k in zip(self.lobe_dirs, self.lobe_weights, self.lobe_kappas):
            out = out + w * np.exp(k * (d @ mu - 1.0))[:, None]
        return out

    def manifest(self) -> dict:
        return {
            "ambient": self.ambient.tolist(),
            "lobe_dirs": self.lobe_dirs.tolist(),
            "lobe_weights": self.lobe_weights.tolist(),
            "lobe_kappas": self.lobe_kappas.tolist(),
        }


def constant_environment(rgb) -> Environment:
    return Environment(np.asarray(rgb, dtype=np.float64), np.zeros((0, 3)),
                       np.zeros((0, 3)), np.zeros(0))


# =====================================================================
# Scene
# =====================================================================


@dataclass
class AnalyticScene:
    """Primitives + environment, everything inside the unit scene box."""

    primitives: list
    env: Environment
    name: str = "scene"

    def intersect(self, o: np.ndarray, d: np.ndarray):
        """Nearest hit over all primitives.

        Returns (t, normal, beta, prim_idx); misses have t = +inf and
        prim_idx = -1.
        """
        o = np.atleast_2d(o)
        d = np.atleast_2d(d)
        n = o.shape[0]
        best_t = np.full(n, _INF)
        best_n = np.zeros((n, 3))
        best_idx = np.full(n, -1, dtype=np.int64)
        for i, prim in enumerate(self.primitives):
            t, nrm = prim.intersect(o, d)
            closer = t < best_t
            best_t = np.where(closer, t, best_t)
            best_n[closer] = nrm[closer]
            best_idx[closer] = i
        beta = np.full((n, 4), 0.5)
        hit = best_idx >= 0
        if hit.any():
            x = o[hit] + best_t[hit, None] * d[hit]
            idx_hit = best_idx[hit]
            beta_hit = np.empty((hit.sum(), 4))
            for i, prim in enumerate(self.primitives):
                sel = idx_hit == i
                if sel.any():
                    beta_hit[sel] = prim.materials(x[sel])
            beta[hit] = beta_hit
        return best_t, best_n, beta, best_idx

    def occluded(self, x: np.ndarray, d: np.ndarray, t_max: float = _INF) -> np.ndarray:
        """Boolean (N,): does a ray from x along d hit any primitive before t_max."""
        t, _, _, idx = self.intersect(x, d)
        return (idx >= 0) & (t < t_max)

    def manifest(self) -> dict:
        return {
            "name": self.name,
            "primitives": [p.manifest() for p in self.primitives],
            "env": self.env.manifest(),
        }

    def scene_hash(self) -> str:
        blob = json.dumps(self.manifest(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


# =====================================================================
# Built-in scene library
# =====================================================================


def build_analytic_scene(spec) -> AnalyticScene:
    """Build a scene from a name or a manifest dict."""
    if isinstance(spec, str):
        return _named_scene(spec)
    prims = []
    for p in spec["primitives"]:
        rule_cfg = p.get("rule", {"kind": "constant", "beta_a": [0.5, 0.5, 0.5, 0.5]})
        rule = BrdfRule(rule_cfg["kind"], np.asarray(rule_cfg["beta_a"]),
                        None if rule_cfg.get("beta_b") is None else np.asarray(rule_cfg["beta_b"]),
                        rule_cfg.get("scale", 4.0))
        prims.append(Primitive(p["kind"], np.asarray(p["center"]),
                               p.get("radius", 0.5),
                               None if p.get("size") is None else np.asarray(p["size"]),
                               None if p.get("axis") is None else np.asarray(p["axis"]),
                               rule))
    e = spec["env"]
    env = Environment(np.asarray(e["ambient"]), np.asarray(e["lobe_dirs"]),
                      np.asarray(e["lobe_weights"]), np.asarray(e["lobe_kappas"]))
    return AnalyticScene(prims, env, spec.get("name", "scene"))


def _named_scene(name: str) -> AnalyticScene:
    key_dir = np.array([0.35, 0.45, 0.82])
    key_dir = key_dir / np.linalg.norm(key_dir)
    default_env = Environment(
        ambient=np.array([0.22, 0.24, 0.28]),
        lobe_dirs=key_dir[None],
        lobe_weights=np.array([[2.4, 2.2, 1.9]]),
        lobe_kappas=np.array([18.0]),
    )
    if name == "sphere":
        prims = [Primitive("sphere", np.zeros(3), 0.55,
                           rule=BrdfRule("constant", np.array([0.62, 0.30, 0.18, 0.35])))]
    elif name == "sphere_pair":
        prims = [
            Primitive("sphere", np.array([-0.38, 0.0, 0.0]), 0.36,
                      rule=BrdfRule("radial", np.array([0.68, 0.26, 0.16, 0.25]),
                                    np.array([0.18, 0.42, 0.66, 0.55]))),
            Primitive("sphere", np.array([0.42, 0.05, -0.05]), 0.30,
                      rule=BrdfRule("constant", np.array([0.24, 0.58, 0.30, 0.60]))),
        ]
    elif name == "box_checker":
        prims = [
            Primitive("box", np.array([0.0, 0.0, -0.08]),
                      size=np.array([0.42, 0.42, 0.34]),
                      rule=BrdfRule("checker", np.array([0.70, 0.62, 0.22, 0.30]),
                                    np.array([0.16, 0.22, 0.55, 0.70]), scale=3.0)),
            Primitive("sphere", np.array([0.0, 0.0, 0.55]), 0.22,
                      rule=BrdfRule("constant", np.array([0.55, 0.20, 0.48, 0.45]))),
        ]
    else:
        raise ConfigError(f"unknown scene {name!r}")
    return AnalyticScene(prims, default_env, name)


# =====================================================================
# Cameras
# =====================================================================


@dataclass
class Camera:
    """Pinhole camera: intrinsics (fx, fy, cx, cy) and 4x4 cam-to-world."""

    fx: float
    fy: float
    cx: float
    cy: float
    c2w: np.ndarray
    width: int
    height: int

    def rays(self):
        """Per-pixel (origins, directions); directions unit, row-major."""
        j, i = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        x = (i + 0.5 - self.cx) / self.fx
        y = (j + 0.5 - self.cy) / self.fy
        # camera looks down -z with y up (OpenGL-style convention)
        dirs = np.stack([x, -y, -np.ones_like(x)], axis=-1).reshape(-1, 3)
        R = self.c2w[:3, :3]
        t = self.c2w[:3, 3]
        world = dirs @ R.T
        world /= np.linalg.norm(world, axis=1, keepdims=True)
        origins = np.broadcast_to(t, world.shape).copy()
        return origins, world


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world matrix looking from eye toward target."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward = forward / np.linalg.norm(forward)
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, upv)
    if np.linalg.norm(right) < 1e-8:
        upv = np.array([0.0, 1.0, 0.0])
        right = np.cross(forward, upv)
    right = right / np.linalg.norm(right)
    true_up = np.cross(right, forward)
    c2w = np.eye(4)
    c2w[:3, 0] = right
    c2w[:3, 1] = true_up
    c2w[:3, 2] = -forward
    c2w[:3, 3] = eye
    return c2w


def fibonacci_poses(count: int, radius: float = 2.5, fov_deg: float = 45.0,
                    res: int = 128, phase: float = 0.0) -> list:
    """Cameras Fibonacci-distributed on the upper hemisphere, looking at origin.

    `phase` offsets the golden-angle sequence so train/test pose sets
    interleave without coinciding.
    """
    golden = np.pi * (3.0 - np.sqrt(5.0))
    cams = []
    f = 0.5 * res / np.tan(0.5 * np.deg2rad(fov_deg))
    for k in range(count):
        # z in (0.15, 0.95): stay off the horizon and the pole
        z = 0.15 + 0.8 * (k + 0.5) / count
        r_xy = np.sqrt(max(0.0, 1.0 - z * z))
        phi = golden * k + phase
        eye = radius * np.array([r_xy * np.cos(phi), r_xy * np.sin(phi), z])
        c2w = look_at(eye, np.zeros(3))
        cams.append(Camera(f, f, res / 2.0, res / 2.0, c2w, res, res))
    return cams
