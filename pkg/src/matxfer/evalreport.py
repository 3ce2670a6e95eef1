"""Evaluation metrics and report emission: PSNR, SSIM, normal MAE, CSVs.

Albedo comparisons follow the inverse-rendering convention of aligning
a global per-channel scale before scoring (light/albedo intensity is
only recoverable up to that scale); the alignment is computed on train
views and applied to test views, and can be disabled.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0
CSV_HEADER = ("source", "target", "transform", "alpha", "metric", "value",
              "ablation")
LUMA = np.array([0.2126, 0.7152, 0.0722])


class ReportError(ValueError):
    """Inconsistent or unusable evaluation inputs."""


def _masked(img: np.ndarray, ref: np.ndarray, mask):
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ReportError(f"shape mismatch {img.shape} vs {ref.shape}")
    if mask is None:
        mask = np.ones(img.shape[:2], dtype=bool)
    return img, ref, np.asarray(mask, dtype=bool)


def psnr(img: np.ndarray, ref: np.ndarray, mask=None) -> float:
    """10*log10(1/MSE) over masked pixels, capped at 99 dB; NaN if empty."""
    img, ref, mask = _masked(img, ref, mask)
    if not mask.any():
        return float("nan")
    mse = float(np.mean((img[mask] - ref[mask]) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def _gauss_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def luminance(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return np.asarray(img, dtype=np.float64)
    return np.asarray(img, dtype=np.float64) @ LUMA


SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def ssim(img: np.ndarray, ref: np.ndarray, mask=None, size: int = 11,
         sigma: float = 1.5) -> float:
    """Mean local SSIM on luminance over masked pixels.

    Local statistics use a separable 11x11 Gaussian (sigma 1.5) with
    symmetric boundary handling; images smaller than the window fall
    back to a single global window over the masked pixels.
    """
    img, ref, mask = _masked(img, ref, mask)
    if not mask.any():
        return float("nan")
    x = luminance(img)
    y = luminance(ref)
    if min(x.shape) < size:
        mx, my = x[mask].mean(), y[mask].mean()
        vx, vy = x[mask].var(), y[mask].var()
        cov = ((x[mask] - mx) * (y[mask] - my)).mean()
        return float(((2 * mx * my + SSIM_C1) * (2 * cov + SSIM_C2))
                     / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)))
    k = _gauss_kernel(size, sigma)

    def blur(a):
        return correlate1d(correlate1d(a, k, axis=0, mode="reflect"),
                           k, axis=1, mode="reflect")

    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cov = blur(x * y) - mx * my
    smap = (((2 * mx * my + SSIM_C1) * (2 * cov + SSIM_C2))
            / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)))
    return float(smap[mask].mean())


def mae_normals(nmap: np.ndarray, ref_nmap: np.ndarray, mask=None,
                return_excluded: bool = False):
    """Mean angular error in degrees over masked, non-degenerate pixels.

    Both maps are renormalized (predicted normals arrive transmittance-
    weighted, i.e. shorter than unit); pixels where either map has a
    near-zero vector are excluded from the mean and counted.
    """
    nmap, ref_nmap, mask = _masked(nmap, ref_nmap, mask)
    ln = np.linalg.norm(nmap, axis=-1)
    lr = np.linalg.norm(ref_nmap, axis=-1)
    ok = mask & (ln > 1e-8) & (lr > 1e-8)
    excluded = int(mask.sum() - ok.sum())
    if not ok.any():
        out = float("nan")
        return (out, excluded) if return_excluded else out
    cos = np.sum(nmap[ok] * ref_nmap[ok], axis=-1) / (ln[ok] * lr[ok])
    deg = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    out = float(deg.mean())
    return (out, excluded) if return_excluded else out


def albedo_scale(preds: list, refs: list, masks: list) -> np.ndarray:
    """Per-channel least-squares scale s minimizing sum |s*pred - ref|^2."""
    num = np.zeros(3)
    den = np.zeros(3)
    for pred, ref, m in zip(preds, refs, masks):
        num += (pred[m] * ref[m]).sum(axis=0)
        den += (pred[m] ** 2).sum(axis=0)
    return num / np.maximum(den, 1e-12)


# =====================================================================
# Report emission
# =====================================================================

RUN_KEYS = ("source", "target", "transform", "alpha", "ablation")


def _check_runs(runs):
    if not runs:
        raise ReportError("no runs to report")
    metric_sets = [tuple(sorted(r["metrics"])) for r in runs]
    if len(set(metric_sets)) > 1:
        raise ReportError(f"inconsistent metric sets across runs: "
                          f"{sorted(set(metric_sets))}")
    for r in runs:
        missing = [k for k in RUN_KEYS if k not in r]
        if missing:
            raise ReportError(f"run missing keys {missing}: {r}")


def make_report(runs: list, out_dir) -> dict:
    """Emit metrics.csv, per-transform heatmap CSVs, and a text summary.

    Each run is a dict with source/target/transform/alpha/ablation plus
    a `metrics` {name: value} mapping (and optionally `per_view` lists,
    whose means must match the aggregate).  The row schema keeps an
    `lpips` row with an empty value per run for layout parity with
    evaluations that include it.
    """
    _check_runs(runs)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = sorted(runs[0]["metrics"])

    rows = []
    for r in runs:
        for name in metrics:
            rows.append((r["source"], r["target"], r["transform"],
                         f"{r['alpha']:g}", name, f"{r['metrics'][name]:.6g}",
                         r["ablation"]))
        rows.append((r["source"], r["target"], r["transform"],
                     f"{r['alpha']:g}", "lpips", "", r["ablation"]))

    paths = {"metrics": out_dir / "metrics.csv"}
    with open(paths["metrics"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        w.writerows(rows)

    # heatmaps: one file per (transform, metric); source columns, target rows
    for tf in sorted({r["transform"] for r in runs}):
        group = [r for r in runs if r["transform"] == tf]
        sources = sorted({r["source"] for r in group})
        targets = sorted({r["target"] for r in group})
        for name in metrics:
            cells = {(r["target"], r["source"]): r["metrics"][name]
                     for r in group}
            p = out_dir / f"heatmap_{tf}_{name}.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["target\\source"] + sources)
                for tgt in targets:
                    w.writerow([tgt] + [
                        f"{cells[(tgt, src)]:.6g}" if (tgt, src) in cells else ""
                        for src in sources])
            paths[f"heatmap_{tf}_{name}"] = p

    buf = io.StringIO()
    buf.write(f"runs: {len(runs)}\n")
    for tag in sorted({r["ablation"] for r in runs}):
        group = [r for r in runs if r["ablation"] == tag]
        buf.write(f"[{tag}] ({len(group)} runs)\n")
        for name in metrics:
            vals = [r["metrics"][name] for r in group]
            buf.write(f"  {name}: mean {np.mean(vals):.4f} over {len(vals)}\n")
    order_metric = "psnr_albedo"
    tags = ("full", "wo_joint", "wo_transfer")
    means = {}
    for tag in tags:
        vals = [r["metrics"][order_metric] for r in runs
                if r["ablation"] == tag and order_metric in r["metrics"]]
        if vals:
            means[tag] = float(np.mean(vals))
    if len(means) >= 2:
        present = [t for t in tags if t in means]
        ok = all(means[a] >= means[b]
                 for a, b in zip(present, present[1:]))
        chain = " >= ".join(f"{t} ({means[t]:.2f})" for t in present)
        buf.write(f"ordering {order_metric}: {chain}: "
                  f"{'OK' if ok else 'VIOLATED'}\n")
    paths["summary"] = out_dir / "summary.txt"
    paths["summary"].write_text(buf.getvalue())
    return paths
