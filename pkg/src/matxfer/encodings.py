"""Input encodings: positional features, spherical harmonics, color spaces.

The directional encoding attenuates real spherical-harmonic bands by a
roughness-dependent factor so that rough (wide-lobe) queries see only
low-frequency structure.  The SH table is hard-coded up to degree 4 in
Cartesian form (graphics sign convention: `sqrt(2)*Re/Im` of the complex
harmonics with the Condon-Shortley phase kept inside P_l^m).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import ad
from .ad import ConfigError, Node, is_node, value_of

_SP = math.sqrt(math.pi)
SH_MAX_DEGREE = 4
_N_COMP = (SH_MAX_DEGREE + 1) ** 2
# band index l for each flat component index l*l + l + m
_L_OF = np.repeat(np.arange(SH_MAX_DEGREE + 1), 2 * np.arange(SH_MAX_DEGREE + 1) + 1)
_LL1 = (_L_OF * (_L_OF + 1)).astype(np.float64)

KAPPA_FLOOR = 1e-4  # floor on r^2 when mapping roughness to 1/kappa


@dataclass
class EncodingConfig:
    """Static encoding sizes shared by field and light networks."""

    n_freq: int = 4
    l_max: int = 4
    rough_to_kappa: str = "inv-sq-floor"

    def __post_init__(self):
        if self.n_freq < 0:
            raise ConfigError(f"n_freq must be >= 0, got {self.n_freq}")
        if not 0 <= self.l_max <= 8:
            raise ConfigError(f"l_max must be in [0, 8], got {self.l_max}")
        if self.l_max > SH_MAX_DEGREE:
            raise ConfigError(
                f"l_max {self.l_max} exceeds the hard-coded SH table (degree 4)"
            )


def positional_encode(x, n_freq: int) -> np.ndarray:
    """[x, sin(2^k pi x), cos(2^k pi x)] for k in 0..n_freq-1, last axis.

    Inputs are treated as constants (no gradient path); output width is
    d * (1 + 2 n_freq) for d input channels.
    """
    if is_node(x):
        raise ad.ContractError("positional_encode expects constant inputs")
    x = np.asarray(x)
    if n_freq == 0:
        return x
    parts = [x]
    for k in range(n_freq):
        ang = (math.pi * (2.0**k)) * x
        parts.append(np.sin(ang))
        parts.append(np.cos(ang))
    return np.concatenate(parts, axis=-1) if x.ndim else np.stack(parts)


# =====================================================================
# Real spherical harmonics, degree <= 4 (generated, scipy-verified)
# =====================================================================


def sh_basis(d: np.ndarray) -> np.ndarray:
    """Evaluate all 25 real SH components at unit directions d (..., 3)."""
    d = np.asarray(d)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    o = np.empty(d.shape[:-1] + (_N_COMP,), dtype=d.dtype)
    o[..., 0] = (1 / 2) / _SP
    o[..., 1] = -1 / 2 * math.sqrt(3) * y / _SP
    o[..., 2] = (1 / 2) * math.sqrt(3) * z / _SP
    o[..., 3] = -1 / 2 * math.sqrt(3) * x / _SP
    o[..., 4] = (1 / 2) * math.sqrt(15) * x * y / _SP
    o[..., 5] = -1 / 2 * math.sqrt(15) * y * z / _SP
    o[..., 6] = (1 / 4) * math.sqrt(5) * (3 * z**2 - 1) / _SP
    o[..., 7] = -1 / 2 * math.sqrt(15) * x * z / _SP
    o[..., 8] = (1 / 4) * math.sqrt(15) * (x**2 - y**2) / _SP
    o[..., 9] = (1 / 8) * math.sqrt(70) * y * (-3 * x**2 + y**2) / _SP
    o[..., 10] = (1 / 2) * math.sqrt(105) * x * y * z / _SP
    o[..., 11] = (1 / 8) * math.sqrt(42) * y * (1 - 5 * z**2) / _SP
    o[..., 12] = (1 / 4) * math.sqrt(7) * z * (5 * z**2 - 3) / _SP
    o[..., 13] = (1 / 8) * math.sqrt(42) * x * (1 - 5 * z**2) / _SP
    o[..., 14] = (1 / 4) * math.sqrt(105) * z * (x**2 - y**2) / _SP
    o[..., 15] = (1 / 8) * math.sqrt(70) * x * (-(x**2) + 3 * y**2) / _SP
    o[..., 16] = (3 / 4) * math.sqrt(35) * x * y * (x**2 - y**2) / _SP
    o[..., 17] = (3 / 8) * math.sqrt(70) * y * z * (-3 * x**2 + y**2) / _SP
    o[..., 18] = (3 / 4) * math.sqrt(5) * x * y * (7 * z**2 - 1) / _SP
    o[..., 19] = (3 / 8) * math.sqrt(10) * y * z * (3 - 7 * z**2) / _SP
    o[..., 20] = (3 / 16) * (35 * z**4 - 30 * z**2 + 3) / _SP
    o[..., 21] = (3 / 8) * math.sqrt(10) * x * z * (3 - 7 * z**2) / _SP
    o[..., 22] = (3 / 8) * math.sqrt(5) * (7 * x**2 * z**2 - x**2 - 7 * y**2 * z**2 + y**2) / _SP
    o[..., 23] = (3 / 8) * math.sqrt(70) * x * z * (-(x**2) + 3 * y**2) / _SP
    o[..., 24] = (3 / 16) * math.sqrt(35) * (x**4 - 6 * x**2 * y**2 + y**4) / _SP
    return o


def sh_basis_grad(d: np.ndarray) -> np.ndarray:
    """d(sh_basis)/d(direction) at unit directions d: (..., 25, 3)."""
    d = np.asarray(d)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    g = np.zeros(d.shape[:-1] + (_N_COMP, 3), dtype=d.dtype)
    g[..., 1, 1] = -1 / 2 * math.sqrt(3) / _SP
    g[..., 2, 2] = (1 / 2) * math.sqrt(3) / _SP
    g[..., 3, 0] = -1 / 2 * math.sqrt(3) / _SP
    g[..., 4, 0] = (1 / 2) * math.sqrt(15) * y / _SP
    g[..., 4, 1] = (1 / 2) * math.sqrt(15) * x / _SP
    g[..., 5, 1] = -1 / 2 * math.sqrt(15) * z / _SP
    g[..., 5, 2] = -1 / 2 * math.sqrt(15) * y / _SP
    g[..., 6, 2] = (3 / 2) * math.sqrt(5) * z / _SP
    g[..., 7, 0] = -1 / 2 * math.sqrt(15) * z / _SP
    g[..., 7, 2] = -1 / 2 * math.sqrt(15) * x / _SP
    g[..., 8, 0] = (1 / 2) * math.sqrt(15) * x / _SP
    g[..., 8, 1] = -1 / 2 * math.sqrt(15) * y / _SP
    g[..., 9, 0] = -3 / 4 * math.sqrt(70) * x * y / _SP
    g[..., 9, 1] = (3 / 8) * math.sqrt(70) * (-(x**2) + y**2) / _SP
    g[..., 10, 0] = (1 / 2) * math.sqrt(105) * y * z / _SP
    g[..., 10, 1] = (1 / 2) * math.sqrt(105) * x * z / _SP
    g[..., 10, 2] = (1 / 2) * math.sqrt(105) * x * y / _SP
    g[..., 11, 1] = (1 / 8) * math.sqrt(42) * (1 - 5 * z**2) / _SP
    g[..., 11, 2] = -5 / 4 * math.sqrt(42) * y * z / _SP
    g[..., 12, 2] = (3 / 4) * math.sqrt(7) * (5 * z**2 - 1) / _SP
    g[..., 13, 0] = (1 / 8) * math.sqrt(42) * (1 - 5 * z**2) / _SP
    g[..., 13, 2] = -5 / 4 * math.sqrt(42) * x * z / _SP
    g[..., 14, 0] = (1 / 2) * math.sqrt(105) * x * z / _SP
    g[..., 14, 1] = -1 / 2 * math.sqrt(105) * y * z / _SP
    g[..., 14, 2] = (1 / 4) * math.sqrt(105) * (x**2 - y**2) / _SP
    g[..., 15, 0] = (3 / 8) * math.sqrt(70) * (-(x**2) + y**2) / _SP
    g[..., 15, 1] = (3 / 4) * math.sqrt(70) * x * y / _SP
    g[..., 16, 0] = (3 / 4) * math.sqrt(35) * y * (3 * x**2 - y**2) / _SP
    g[..., 16, 1] = (3 / 4) * math.sqrt(35) * x * (x**2 - 3 * y**2) / _SP
    g[..., 17, 0] = -9 / 4 * math.sqrt(70) * x * y * z / _SP
    g[..., 17, 1] = (9 / 8) * math.sqrt(70) * z * (-(x**2) + y**2) / _SP
    g[..., 17, 2] = (3 / 8) * math.sqrt(70) * y * (-3 * x**2 + y**2) / _SP
    g[..., 18, 0] = (3 / 4) * math.sqrt(5) * y * (7 * z**2 - 1) / _SP
    g[..., 18, 1] = (3 / 4) * math.sqrt(5) * x * (7 * z**2 - 1) / _SP
    g[..., 18, 2] = (21 / 2) * math.sqrt(5) * x * y * z / _SP
    g[..., 19, 1] = (3 / 8) * math.sqrt(10) * z * (3 - 7 * z**2) / _SP
    g[..., 19, 2] = (9 / 8) * math.sqrt(10) * y * (1 - 7 * z**2) / _SP
    g[..., 20, 2] = (1 / 4) * (105 * z**3 - 45 * z) / _SP
    g[..., 21, 0] = (3 / 8) * math.sqrt(10) * z * (3 - 7 * z**2) / _SP
    g[..., 21, 2] = (9 / 8) * math.sqrt(10) * x * (1 - 7 * z**2) / _SP
    g[..., 22, 0] = (3 / 4) * math.sqrt(5) * x * (7 * z**2 - 1) / _SP
    g[..., 22, 1] = (3 / 4) * math.sqrt(5) * y * (1 - 7 * z**2) / _SP
    g[..., 22, 2] = (21 / 4) * math.sqrt(5) * z * (x**2 - y**2) / _SP
    g[..., 23, 0] = (9 / 8) * math.sqrt(70) * z * (-(x**2) + y**2) / _SP
    g[..., 23, 1] = (9 / 4) * math.sqrt(70) * x * y * z / _SP
    g[..., 23, 2] = (3 / 8) * math.sqrt(70) * x * (-(x**2) + 3 * y**2) / _SP
    g[..., 24, 0] = (3 / 4) * math.sqrt(35) * x * (x**2 - 3 * y**2) / _SP
    g[..., 24, 1] = (3 / 4) * math.sqrt(35) * y * (-3 * x**2 + y**2) / _SP
    return g


# =====================================================================
# Integrated directional encoding
# =====================================================================


def ide_attenuation(r, l_max: int = 4) -> np.ndarray:
    """Per-component band attenuation A_l(r) = exp(-l(l+1)/(2 kappa)).

    kappa = 1 / max(r^2, 1e-4): sharp lobes keep high bands, rough lobes
    suppress them.  Shape: r (...,) -> (..., (l_max+1)^2).
    """
    n = (l_max + 1) ** 2
    kinv = np.maximum(np.square(np.asarray(r)), KAPPA_FLOOR)
    return np.exp(-0.5 * _LL1[:n] * kinv[..., None])


def integrated_dir_encode(d, r, l_max: int = 4, debug: bool = False):
    """SH features of direction `d` attenuated by roughness `r`.

    `d` (..., 3) and `r` (...) may be graph Nodes; the result is then a
    Node with analytic gradients to both.  Non-unit directions are
    normalized internally (warned about when `debug`).
    """
    if l_max > SH_MAX_DEGREE:
        raise ConfigError(f"l_max {l_max} exceeds hard-coded SH degree 4")
    n = (l_max + 1) ** 2
    dv = np.asarray(value_of(d))
    rv = np.asarray(value_of(r))
    norm = np.sqrt(np.sum(dv * dv, axis=-1, keepdims=True))
    if debug and not np.allclose(norm, 1.0, atol=1e-5):
        warnings.warn("integrated_dir_encode received non-unit directions")
    norm = np.maximum(norm, 1e-12)
    dh = dv / norm
    Y = sh_basis(dh)[..., :n]
    A = ide_attenuation(rv, l_max).astype(dv.dtype)
    out = Y * A
    if not (is_node(d) or is_node(r)):
        return out

    G = sh_basis_grad(dh)[..., :n, :]

    def vjp_d(g):
        gh = np.einsum("...c,...cj->...j", g * A, G)
        # through normalization: (I - dh dh^T) / |d|
        return (gh - dh * np.sum(gh * dh, axis=-1, keepdims=True)) / norm

    def vjp_r(g):
        active = (rv * rv) > KAPPA_FLOOR
        dA = A * (-_LL1[:n]) * rv[..., None]
        return np.sum(g * Y * dA, axis=-1) * active

    return ad._make(out, [(d, vjp_d), (r, vjp_r)], "ide")


# =====================================================================
# RGB <-> HSV (hexcone model)
# =====================================================================


def rgb_to_hsv(rgb) -> np.ndarray:
    """Vectorized hexcone RGB->HSV on the last axis; h, s, v in [0, 1].

    Achromatic colors map to hue 0 by convention.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = np.max(rgb, axis=-1)
    c = v - np.min(rgb, axis=-1)
    s = np.where(v > 0, c / np.where(v > 0, v, 1.0), 0.0)
    safe_c = np.where(c > 0, c, 1.0)
    h = np.where(
        c == 0,
        0.0,
        np.where(
            v == r,
            ((g - b) / safe_c) % 6.0,
            np.where(v == g, (b - r) / safe_c + 2.0, (r - g) / safe_c + 4.0),
        ),
    )
    return np.stack([h / 6.0, s, v], axis=-1)


def hsv_to_rgb(hsv) -> np.ndarray:
    """Vectorized hexcone HSV->RGB on the last axis."""
    hsv = np.asarray(hsv, dtype=np.float64)
    h, s, v = hsv[..., 0] % 1.0, hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)
