"""Micro-facet BRDF, split-sum pre-integration, and named material edits.

Shading follows the Cook-Torrance model with a GGX distribution,
Schlick Fresnel at fixed F0 = 0.04 (dielectric, metalness zero) and
Schlick-GGX masking-shadowing (k = (r+1)^2/8).  The split-sum path
factors the specular integral into a prefiltered light term and an
(A, B) lookup table so shading stays differentiable in albedo and
roughness.  The same terms feed both the differentiable renderer and
the Monte-Carlo oracle, so the two routes share one BRDF convention.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import ad
from .ad import ConfigError, ShapeError, value_of
from .encodings import hsv_to_rgb, rgb_to_hsv

F0_DIELECTRIC = 0.04
GRAZE_EPS = 1e-4  # clamp for grazing denominators
RHO_RED = np.array([0.80, 0.05, 0.05])
RHO_SAND = np.array([0.76, 0.70, 0.50])
TRANSFORM_TAGS = ("T1", "T2", "T3", "T4")


@dataclass
class MaterialSample:
    """One point's BRDF parameters: RGB albedo and scalar roughness."""

    rho: np.ndarray
    rough: float

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=np.float64)
        if self.rho.shape != (3,):
            raise ShapeError(f"albedo must be RGB, got shape {self.rho.shape}")
        if np.any(self.rho < 0) or np.any(self.rho > 1):
            raise ConfigError(f"albedo out of [0,1]: {self.rho}")
        if not 0.0 <= self.rough <= 1.0:
            raise ConfigError(f"roughness out of [0,1]: {self.rough}")

    def as_vec4(self) -> np.ndarray:
        return np.concatenate([self.rho, [self.rough]])

    @staticmethod
    def from_vec4(v) -> "MaterialSample":
        v = np.asarray(v, dtype=np.float64)
        return MaterialSample(v[:3], float(v[3]))


# =====================================================================
# Micro-facet terms (ad-compatible: accept Nodes or arrays)
# =====================================================================


def ndf_ggx(cos_h, alpha):
    """GGX / Trowbridge-Reitz normal distribution, alpha = roughness^2."""
    a2 = ad.square(alpha)
    c2 = ad.square(ad.clip(cos_h, 0.0, 1.0))
    denom = ad.clamp_min(ad.add(ad.mul(c2, ad.sub(a2, 1.0)), 1.0), GRAZE_EPS)
    return ad.div(a2, ad.mul(np.pi, ad.square(denom)))


def fresnel_schlick(cos_d, f0=F0_DIELECTRIC):
    """Schlick approximation F = F0 + (1 - F0)(1 - cos)^5."""
    c = ad.clip(cos_d, 0.0, 1.0)
    m = ad.sub(1.0, c)
    m2 = ad.square(m)
    return ad.add(f0, ad.mul(1.0 - f0, ad.mul(ad.square(m2), m)))


def smith_g(cos_i, cos_o, rough):
    """Schlick-GGX masking-shadowing G1(i) G1(o) with k = (r + 1)^2 / 8."""
    k = ad.mul(ad.square(ad.add(rough, 1.0)), 1.0 / 8.0)

    def g1(mu):
        mu = ad.clamp_min(mu, GRAZE_EPS)
        return ad.div(mu, ad.add(ad.mul(mu, ad.sub(1.0, k)), k))

    return ad.mul(g1(cos_i), g1(cos_o))


def microfacet_brdf(w_i, w_o, n, rho, rough, f0=F0_DIELECTRIC):
    """Full Cook-Torrance BRDF value, (..., 3).

    f_r = rho/pi + D F G / (4 (w_i.n)(w_o.n)); zero below the horizon.
    Accepts graph Nodes for `rho`/`rough` (and geometry) so quadrature
    shading stays differentiable.
    """
    cos_i = ad.npsum(ad.mul(w_i, n), axis=-1)
    cos_o = ad.npsum(ad.mul(w_o, n), axis=-1)
    h_raw = ad.add(w_i, w_o)
    h_len = ad.clamp_min(ad.sqrt(ad.npsum(ad.square(h_raw), axis=-1, keepdims=True)), 1e-12)
    h = ad.div(h_raw, h_len)
    cos_h = ad.npsum(ad.mul(n, h), axis=-1)
    cos_d = ad.npsum(ad.mul(w_o, h), axis=-1)

    alpha = ad.clamp_min(ad.square(rough), GRAZE_EPS)
    D = ndf_ggx(cos_h, alpha)
    F = fresnel_schlick(cos_d, f0)
    G = smith_g(cos_i, cos_o, rough)
    denom = ad.clamp_min(ad.mul(4.0, ad.mul(ad.clamp_min(cos_i, 0.0), ad.clamp_min(cos_o, 0.0))), GRAZE_EPS)
    spec = ad.div(ad.mul(D, ad.mul(F, G)), denom)

    above = (value_of(cos_i) > 0.0) & (value_of(cos_o) > 0.0)
    diff = ad.mul(rho, 1.0 / np.pi)
    fr = ad.add(diff, ad.reshape(spec, value_of(spec).shape + (1,)))
    return ad.mul(fr, above[..., None])


def reflect_dir(n, v):
    """Mirror direction 2 (n.v) n - v; graph-capable in both arguments."""
    cos = ad.npsum(ad.mul(n, v), axis=-1, keepdims=True)
    return ad.sub(ad.mul(n, ad.mul(cos, 2.0)), v)


# =====================================================================
# Sampling helpers (plain numpy; used by oracle and prefiltering)
# =====================================================================


def orthonormal_frame(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two tangents completing `axis` (..., 3) to a right-handed frame."""
    a = np.where(np.abs(axis[..., 2:3]) < 0.9, [0.0, 0.0, 1.0], [1.0, 0.0, 0.0])
    t = np.cross(a, axis)
    t /= np.maximum(np.linalg.norm(t, axis=-1, keepdims=True), 1e-12)
    b = np.cross(axis, t)
    return t, b


def _from_local(axis, t, b, local):
    return (
        local[..., 0:1] * t + local[..., 1:2] * b + local[..., 2:3] * axis
    )


def sample_cosine_lobe(axis, u1, u2):
    """Directions ~ cos(theta)/pi about `axis`; u1, u2 uniform in [0,1)."""
    st = np.sqrt(u1)
    ct = np.sqrt(np.maximum(1.0 - u1, 0.0))
    phi = 2.0 * np.pi * u2
    local = np.stack([st * np.cos(phi), st * np.sin(phi), ct], axis=-1)
    t, b = orthonormal_frame(axis)
    return _from_local(axis, t, b, local)


def sample_ggx_lobe(axis, alpha, u1, u2):
    """Directions ~ D_ggx(cos)cos about `axis` (the normalized NDF lobe)."""
    ct2 = (1.0 - u1) / (1.0 + (alpha * alpha - 1.0) * u1)
    ct = np.sqrt(np.maximum(ct2, 0.0))
    st = np.sqrt(np.maximum(1.0 - ct2, 0.0))
    phi = 2.0 * np.pi * u2
    local = np.stack([st * np.cos(phi), st * np.sin(phi), ct], axis=-1)
    t, b = orthonormal_frame(axis)
    return _from_local(axis, t, b, local)


def ggx_lobe_pdf(w, axis, alpha):
    """Solid-angle pdf of `sample_ggx_lobe`: D(cos)cos (0 below horizon)."""
    c = np.sum(w * axis, axis=-1)
    d = ndf_ggx(np.maximum(c, 0.0), alpha)
    return np.where(c > 0.0, d * c, 0.0)


def stratified_uniforms(rng, n):
    """One decorrelated stratified sequence pair in [0,1)^2."""
    u1 = (np.arange(n) + rng.random(n)) / n
    u2 = rng.random(n)
    return u1, u2


# =====================================================================
# Split-sum: prefiltered lights and the (A, B) lookup table
# =====================================================================


def prefilter_diffuse(env_fn, n, spp=512, seed=0):
    """l_diff(n) = (1/pi) int L(w) (w.n) dw = mean of L over the cosine lobe."""
    rng = np.random.default_rng(seed)
    n = np.atleast_2d(n)
    u1, u2 = stratified_uniforms(rng, spp)
    w = sample_cosine_lobe(n[:, None, :], u1[None, :], u2[None, :])
    return env_fn(w.reshape(-1, 3)).reshape(n.shape[0], spp, 3).mean(axis=1)


def prefilter_specular(env_fn, t, rough, spp=512, seed=0):
    """l_spec(t, r) = expectation of L over the normalized GGX lobe about t."""
    rng = np.random.default_rng(seed)
    t = np.atleast_2d(t)
    rough = np.broadcast_to(np.asarray(rough, dtype=np.float64), (t.shape[0],))
    alpha = np.maximum(rough * rough, 1e-3)
    u1, u2 = stratified_uniforms(rng, spp)
    w = sample_ggx_lobe(t[:, None, :], alpha[:, None], u1[None, :], u2[None, :])
    return env_fn(w.reshape(-1, 3)).reshape(t.shape[0], spp, 3).mean(axis=1)


@dataclass
class MspecLut:
    """Pre-integrated specular (A, B) over (cos_view, roughness)."""

    a: np.ndarray
    b: np.ndarray
    f0: float = F0_DIELECTRIC
    seed: int = 0
    spp: int = 0
    _table: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def table(self) -> np.ndarray:
        if self._table is None:
            self._table = np.stack([self.a, self.b], axis=-1).astype(np.float64)
        return self._table


def build_mspec_lut(n_cos=64, n_r=64, spp=4096, seed=11, f0=F0_DIELECTRIC) -> MspecLut:
    """Monte-Carlo pre-integration of int f_spec (w.n) dw = F0 A + B.

    Grid axes are cos_view and roughness, both uniform on [0, 1]; the
    cos = 0 column is evaluated just above grazing.  GGX importance
    sampling of half-vectors; deterministic in `seed`.
    """
    if n_cos < 2 or n_r < 2:
        raise ConfigError("LUT needs at least 2 cells per axis")
    cos_v = np.linspace(0.0, 1.0, n_cos)
    cos_v = np.maximum(cos_v, 1e-3)
    rough = np.linspace(0.0, 1.0, n_r)
    alpha = np.maximum(rough * rough, 1e-4)

    V = np.stack(
        [np.sqrt(np.maximum(1 - cos_v**2, 0)), np.zeros_like(cos_v), cos_v], axis=-1
    )  # (n_cos, 3) view vectors in the normal's frame

    rng = np.random.default_rng(seed)
    A = np.zeros((n_cos, n_r))
    B = np.zeros((n_cos, n_r))
    chunk = 512
    done = 0
    while done < spp:
        m_count = min(chunk, spp - done)
        u1 = (done + np.arange(m_count) + rng.random(m_count)) / spp
        u2 = rng.random(m_count)
        ct2 = (1.0 - u1) / (1.0 + (alpha[:, None] ** 2 - 1.0) * u1)  # (n_r, m)
        ct = np.sqrt(np.maximum(ct2, 0.0))
        st = np.sqrt(np.maximum(1.0 - ct2, 0.0))
        phi = 2.0 * np.pi * u2
        m = np.stack(
            [
                st * np.cos(phi)[None, :],
                st * np.sin(phi)[None, :],
                np.broadcast_to(ct, st.shape),
            ],
            axis=-1,
        )  # (n_r, m, 3) half-vectors about +z

        vm = np.einsum("cj,rmj->crm", V, m)  # (n_cos, n_r, m)
        L = 2.0 * vm[..., None] * m[None, :, :, :] - V[:, None, None, :]
        nol = L[..., 2]
        nov = cos_v[:, None, None]
        noh = m[None, :, :, 2]
        valid = (nol > 0) & (vm > 0)

        k = ((rough + 1.0) ** 2 / 8.0)[None, :, None]

        def g1(mu):
            mu = np.maximum(mu, GRAZE_EPS)
            return mu / (mu * (1.0 - k) + k)

        G = g1(nol) * g1(nov)
        g_vis = G * vm / np.maximum(noh * nov, GRAZE_EPS)
        fc = (1.0 - np.clip(vm, 0.0, 1.0)) ** 5
        A += np.sum((1.0 - fc) * g_vis * valid, axis=-1)
        B += np.sum(fc * g_vis * valid, axis=-1)
        done += m_count
    return MspecLut(
        (A / spp).astype(np.float32), (B / spp).astype(np.float32),
        f0=float(f0), seed=seed, spp=spp,
    )


def mspec_lookup(lut: MspecLut, cos_v, rough):
    """Bilinear M_spec = F0 A + B at (cos_view, roughness); graph-capable."""
    ab = ad.lut_lookup(lut.table, cos_v, rough)
    return ad.add(ad.mul(ad.take_last(ab, 0), lut.f0), ad.take_last(ab, 1))


def shade_splitsum(rho, rough, cos_v, lut: MspecLut, l_diff, l_spec):
    """Split-sum radiance C = rho * l_diff + M_spec(cos_v, rough) * l_spec."""
    m = mspec_lookup(lut, cos_v, rough)
    mv = ad.reshape(m, value_of(m).shape + (1,))
    return ad.add(ad.mul(rho, l_diff), ad.mul(mv, l_spec))


MSPEC_MAGIC = b"MSPEC1"


def save_mspec(lut: MspecLut, path) -> None:
    """Serialize: magic, u32 n_cos, u32 n_r, f32 F0, u64 seed, A then B (f32 LE)."""
    with open(path, "wb") as fh:
        fh.write(MSPEC_MAGIC)
        fh.write(struct.pack("<IIfQ", lut.a.shape[0], lut.a.shape[1], lut.f0, lut.seed))
        fh.write(lut.a.astype("<f4").tobytes())
        fh.write(lut.b.astype("<f4").tobytes())


def load_mspec(path) -> MspecLut:
    with open(path, "rb") as fh:
        magic = fh.read(len(MSPEC_MAGIC))
        if magic != MSPEC_MAGIC:
            raise ConfigError(f"bad LUT magic {magic!r}")
        n_cos, n_r, f0, seed = struct.unpack("<IIfQ", fh.read(20))
        a = np.frombuffer(fh.read(4 * n_cos * n_r), dtype="<f4").reshape(n_cos, n_r)
        b = np.frombuffer(fh.read(4 * n_cos * n_r), dtype="<f4").reshape(n_cos, n_r)
    return MspecLut(a.copy(), b.copy(), f0=f0, seed=seed)


# =====================================================================
# Named analytic transforms
# =====================================================================


def apply_named_transform(tag: str, rho, rough, *, rho_red=RHO_RED, rho_sand=RHO_SAND):
    """Apply T1-T4 to albedo (..., 3) and roughness (...); returns (rho', r')."""
    rho = np.asarray(rho, dtype=np.float64)
    rough = np.asarray(rough, dtype=np.float64)
    if tag == "T1":  # wet look: dark albedo, mirror-smooth
        hsv = rgb_to_hsv(rho)
        hsv[..., 2] *= 0.3
        return hsv_to_rgb(hsv), np.zeros_like(rough)
    if tag == "T2":  # fresh paint: blend toward red, smooth
        return 0.5 * rho + 0.5 * rho_red, np.zeros_like(rough)
    if tag == "T3":  # dust: blend toward sand, fully rough
        return 0.2 * rho + 0.8 * rho_sand, np.ones_like(rough)
    if tag == "T4":  # repaint: opposite hue, roughness kept
        hsv = rgb_to_hsv(rho)
        hsv[..., 0] = (hsv[..., 0] + 0.5) % 1.0
        return hsv_to_rgb(hsv), rough.copy()
    raise ConfigError(f"unknown transform tag {tag!r}; expected one of {TRANSFORM_TAGS}")


def transform_material(tag: str, beta: MaterialSample, **kw) -> MaterialSample:
    rho, rough = apply_named_transform(tag, beta.rho, beta.rough, **kw)
    return MaterialSample(np.clip(rho, 0.0, 1.0), float(np.clip(rough, 0.0, 1.0)))


def blend_intensity(beta, beta_prime, alpha_blend: float):
    """Partial-strength edit: (1 - a) beta + a beta' on the 4-vector."""
    if not 0.0 <= alpha_blend <= 1.0:
        raise ConfigError(f"blend weight out of [0,1]: {alpha_blend}")
    if isinstance(beta, MaterialSample):
        v = (1 - alpha_blend) * beta.as_vec4() + alpha_blend * beta_prime.as_vec4()
        return MaterialSample.from_vec4(v)
    return (1 - alpha_blend) * np.asarray(beta) + alpha_blend * np.asarray(beta_prime)
