"""Command-line surface: data generation, training, transfer, rendering,
evaluation, ablations, and the gradient self-check.

Exit codes follow the pipeline convention: 0 on success, 1 on usage or
configuration errors (including unknown config-file keys), 2 on runtime
failures.  Every command that writes artifacts echoes the resolved
configuration and tool version into its output directory, so a run can
be attributed and -- in single-thread mode -- reproduced bit for bit.
"""

from __future__ import annotations

import argparse
import ast
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .ad import ConfigError
from .brdf import TRANSFORM_TAGS, apply_named_transform, build_mspec_lut, save_mspec
from .datagen import generate_dataset, load_dataset, load_pair
from .evalreport import albedo_scale, mae_normals, make_report, psnr, ssim
from .imgio import srgb_encode, write_pfm, write_png
from .render import GBUFFER_CHANNELS, RenderSettings, render_albedo, render_view
from .trainer import (ABLATION_TAGS, Checkpoint, TrainConfig, apply_transfer,
                      gradcheck_joint, load_checkpoint, run_ablation,
                      save_checkpoint, train_joint, train_target)

GRADCHECK_TOL = 1e-4
DEFAULT_ALPHAS = "0,0.25,0.5,0.75,1"


# =====================================================================
# Config files and resolution
# =====================================================================


def _strip_comment(line: str) -> str:
    quote = None
    for i, ch in enumerate(line):
        if quote:
            if ch == quote:
                quote = None
        elif ch in "'\"":
            quote = ch
        elif ch == "#":
            return line[:i]
    return line


def parse_config_text(text: str) -> dict:
    """Parse a flat ``key = value`` config (scalar values, # comments)."""
    out: dict = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(
                f"config line {ln}: expected `key = value`, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        val = {"true": "True", "false": "False", "none": "None"}.get(val, val)
        try:
            out[key] = ast.literal_eval(val)
        except (ValueError, SyntaxError):
            raise ConfigError(
                f"config line {ln}: cannot parse value {val!r}") from None
    return out


_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}
_PATH_KEYS = ("data", "out")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        helptext = f"training option (default {f.default})"
        if isinstance(f.default, bool):
            p.add_argument(flag, action="store_true", default=None,
                           help=helptext)
        else:
            p.add_argument(flag, type=type(f.default), default=None,
                           help=helptext)


def resolve_train_config(args) -> TrainConfig:
    """defaults < config file < explicit flags; unknown file keys rejected."""
    vals: dict = {}
    if getattr(args, "config", None):
        file_vals = parse_config_text(Path(args.config).read_text())
        for key, v in file_vals.items():
            if key in _PATH_KEYS:
                if getattr(args, key, None) is None:
                    setattr(args, key, v)
            elif key in _TRAIN_FIELDS:
                vals[key] = v
            else:
                raise ConfigError(f"unknown config key {key!r} in {args.config}")
    for name in _TRAIN_FIELDS:
        flag = getattr(args, name, None)
        if flag is not None:
            vals[name] = flag
    return TrainConfig(**vals)


def _need(args, *names: str) -> None:
    for n in names:
        if getattr(args, n, None) is None:
            raise ConfigError(f"missing required flag --{n.replace('_', '-')}")


def _echo_config(out_dir: Path, command: str, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"version": __version__, "command": command, **payload}
    (out_dir / "config.json").write_text(
        json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _ckpt_settings(ck: Checkpoint, chunk: int = 2048) -> RenderSettings:
    c = ck.config
    return RenderSettings(n_samples=int(c.get("n_samples", 64)),
                          topk=int(c.get("topk", 8)),
                          vis_steps=int(c.get("vis_steps", 32)),
                          chunk=chunk)


# =====================================================================
# Frame output
# =====================================================================

_PNG_BUFFERS = ("rgb_rf", "rgb_pbr")


def _write_frame(out_dir: Path, stem: str, maps: dict) -> None:
    """PNG for tone-mapped color buffers, PFM for everything float."""
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, img in maps.items():
        if name in _PNG_BUFFERS:
            write_png(out_dir / f"{stem}_{name}.png", srgb_encode(img))
        elif name == "beta":
            write_pfm(out_dir / f"{stem}_albedo.pfm", img[..., :3])
            write_pfm(out_dir / f"{stem}_rough.pfm", img[..., 3])
        elif img.ndim == 3 and img.shape[2] == 1:
            write_pfm(out_dir / f"{stem}_{name}.pfm", img[..., 0])
        else:
            write_pfm(out_dir / f"{stem}_{name}.pfm", img)


def _view_indices(ds, split: str, views: str | None, max_views: int | None):
    idx = list(ds.test_idx if split == "test" else ds.train_idx)
    if views:
        chosen = [int(s) for s in views.split(",") if s.strip()]
        bad = [i for i in chosen if i not in set(int(j) for j in
                                                 np.concatenate([ds.train_idx,
                                                                 ds.test_idx]))]
        if bad:
            raise ConfigError(f"view indices {bad} not in the dataset")
        idx = chosen
    if max_views is not None:
        idx = idx[:max_views]
    return [int(i) for i in idx]


# =====================================================================
# Subcommands
# =====================================================================


def cmd_gen(args) -> int:
    _need(args, "scene", "out")
    tag = None if args.transform in (None, "none") else args.transform
    if tag is not None and tag not in TRANSFORM_TAGS:
        raise ConfigError(f"unknown transform {tag!r}; expected {TRANSFORM_TAGS}")
    out = Path(args.out)
    generate_dataset(args.scene, tag, args.alpha, out, seed=args.seed,
                     n_train=args.views, n_test=args.test_views,
                     res=args.res, spp=args.spp)
    _echo_config(out, "gen", {
        "scene": args.scene, "transform": tag, "alpha": args.alpha,
        "seed": args.seed, "views": args.views, "test_views": args.test_views,
        "res": args.res, "spp": args.spp,
    })
    print(f"dataset written to {out}")
    return 0


def _run_training(args, command: str, ckpt_name: str) -> int:
    _need(args, "data", "out")
    cfg = resolve_train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if command == "train-joint":
        ds0, ds1 = load_pair(args.data)
        ckpt = train_joint(ds0, ds1, cfg, log_path=out / "train_log.jsonl")
    else:
        ds = load_dataset(args.data)
        ckpt = train_target(ds, cfg, log_path=out / "train_log.jsonl")
    path = out / ckpt_name
    save_checkpoint(ckpt, path)
    _echo_config(out, command, {"data": str(args.data), "train": asdict(cfg)})
    print(f"saved {path} (config hash {ckpt.hash[:12]})")
    return 0


def cmd_train_joint(args) -> int:
    return _run_training(args, "train-joint", "joint.ckpt")


def cmd_train_target(args) -> int:
    return _run_training(args, "train-target", "target.ckpt")


def _parse_alphas(text: str) -> list[float]:
    try:
        alphas = [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse alpha list {text!r}") from None
    if not alphas:
        raise ConfigError("empty alpha list")
    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise ConfigError(f"alpha {a} outside [0, 1]")
    return alphas


def cmd_transfer(args) -> int:
    _need(args, "target", "source", "out")
    alphas = _parse_alphas(args.alpha)
    tck = load_checkpoint(args.target)
    sck = load_checkpoint(args.source)
    merged = apply_transfer(tck, sck, alphas[-1])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(merged, out / "transferred.ckpt")

    if args.render_poses != "none":
        _need(args, "data")
        ds = load_dataset(args.data)
        idx = _view_indices(ds, args.render_poses, args.views, args.max_views)
        st = _ckpt_settings(merged)
        sg = bool(merged.config.get("sg_light", False))
        for a in alphas:
            sub = out / f"alpha_{a:.2f}"
            for i in idx:
                maps = render_view(merged.store, merged.lut, ds.camera(i), st,
                                   cond_alpha=0, material_alpha=a, sg=sg,
                                   buffers=("rgb_pbr", "beta", "mask"))
                _write_frame(sub, f"view_{i:03d}", maps)
        print(f"rendered {len(idx)} views at alphas {alphas}")

    _echo_config(out, "transfer", {
        "target": str(args.target), "source": str(args.source),
        "alphas": alphas, "data": args.data and str(args.data),
        "render_poses": args.render_poses, "views": args.views,
        "max_views": args.max_views,
    })
    return 0


def cmd_render(args) -> int:
    _need(args, "ckpt", "data", "out")
    names = tuple(s.strip() for s in args.buffers.split(",") if s.strip())
    unknown = [n for n in names if n not in GBUFFER_CHANNELS]
    if unknown:
        raise ConfigError(f"unknown buffers {unknown}; "
                          f"expected {sorted(GBUFFER_CHANNELS)}")
    ck = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    idx = _view_indices(ds, args.split, args.views, args.max_views)
    st = _ckpt_settings(ck)
    sg = bool(ck.config.get("sg_light", False))
    out = Path(args.out)
    for i in idx:
        maps = render_view(ck.store, ck.lut, ds.camera(i), st,
                           cond_alpha=args.cond, material_alpha=args.material_alpha,
                           sg=sg, buffers=names)
        _write_frame(out, f"view_{i:03d}", maps)
    _echo_config(out, "render", {
        "ckpt": str(args.ckpt), "data": str(args.data), "split": args.split,
        "views": args.views, "max_views": args.max_views, "cond": args.cond,
        "material_alpha": args.material_alpha, "buffers": list(names),
    })
    print(f"rendered {len(idx)} views to {out}")
    return 0


def cmd_eval(args) -> int:
    _need(args, "ckpt", "data", "out")
    if args.transform is not None and args.transform not in TRANSFORM_TAGS:
        raise ConfigError(f"unknown transform {args.transform!r}")
    ck = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    if not ds.has_gbuffers:
        raise ConfigError(f"dataset {args.data} has no G-buffers to score against")
    st = _ckpt_settings(ck)
    sg = bool(ck.config.get("sg_light", False))
    ma = args.material_alpha

    def ref_albedo(i: int) -> np.ndarray:
        a = ds.gbuffers["albedo"][i]
        if args.transform is None:
            return a
        rho_t, _ = apply_named_transform(args.transform, a.reshape(-1, 3),
                                         ds.gbuffers["rough"][i].reshape(-1))
        return rho_t.reshape(a.shape)

    # per-channel albedo scale fitted on a few train views, applied to test
    scale = np.ones(3)
    if args.albedo_scale == "on":
        preds, refs, masks = [], [], []
        for i in [int(j) for j in ds.train_idx[:args.scale_views]]:
            r = render_albedo(ck.store, ds.camera(i), st, ma)
            preds.append(r["beta"][..., :3])
            refs.append(ref_albedo(i))
            masks.append(ds.masks[i])
        scale = albedo_scale(preds, refs, masks)

    psnr_rgb, ssim_rgb, psnr_alb, mae_n = [], [], [], []
    for i in [int(j) for j in ds.test_idx]:
        maps = render_view(ck.store, ck.lut, ds.camera(i), st, cond_alpha=0,
                           material_alpha=ma, sg=sg,
                           buffers=("rgb_pbr", "beta", "normal", "mask"))
        m = ds.masks[i]
        psnr_rgb.append(psnr(maps["rgb_pbr"], ds.images[i], m))
        ssim_rgb.append(ssim(maps["rgb_pbr"], ds.images[i], m))
        pred_alb = np.clip(maps["beta"][..., :3] * scale, 0.0, 1.0)
        psnr_alb.append(psnr(pred_alb, ref_albedo(i), m))
        mae_n.append(mae_normals(maps["normal"], ds.gbuffers["normal"][i], m))

    run = {
        "source": args.source_label or str(ck.config.get("kind", "model")),
        "target": args.target_label or str(
            ds.manifest.get("scene", {}).get("name", "scene")),
        "transform": args.transform or "none",
        "alpha": float(ma if ma is not None else 0.0),
        "ablation": args.ablation,
        "metrics": {
            "psnr_rgb": float(np.mean(psnr_rgb)),
            "ssim_rgb": float(np.mean(ssim_rgb)),
            "psnr_albedo": float(np.mean(psnr_alb)),
            "mae_normal": float(np.mean(mae_n)),
        },
    }
    out = Path(args.out)
    paths = make_report([run], out)
    _echo_config(out, "eval", {
        "ckpt": str(args.ckpt), "data": str(args.data),
        "transform": args.transform, "material_alpha": ma,
        "albedo_scale": args.albedo_scale, "scale_views": args.scale_views,
        "ablation": args.ablation,
    })
    for name, val in sorted(run["metrics"].items()):
        print(f"{name}: {val:.4f}")
    print(f"report written to {paths['metrics']}")
    return 0


def cmd_ablate(args) -> int:
    _need(args, "variant", "data", "out")
    cfg = resolve_train_config(args)
    ds0, ds1 = load_pair(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = run_ablation(args.variant, ds0, ds1, cfg,
                        log_path=out / f"{args.variant}_log.jsonl")
    path = out / f"{args.variant}.ckpt"
    save_checkpoint(ckpt, path)
    _echo_config(out, "ablate", {"variant": args.variant,
                                 "data": str(args.data),
                                 "train": asdict(cfg)})
    print(f"saved {path}")
    return 0


def cmd_gradcheck(args) -> int:
    err, report = gradcheck_joint(n_rays=args.rays, seed=args.seed,
                                  eps=args.eps)
    for name in sorted(report):
        print(f"  {name:24s} {report[name]:.3e}")
    print(f"max rel err: {err:.6e} (tolerance {GRADCHECK_TOL:g})")
    return 0 if err < GRADCHECK_TOL else 1


def cmd_lut(args) -> int:
    _need(args, "out")
    lut = build_mspec_lut(n_cos=args.cos, n_r=args.rough, spp=args.spp,
                          seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_mspec(lut, out / "mspec.npz")
    _echo_config(out, "lut", {"cos": args.cos, "rough": args.rough,
                              "spp": args.spp, "seed": args.seed})
    print(f"A in [{lut.a.min():.4f}, {lut.a.max():.4f}], "
          f"B in [{lut.b.min():.4f}, {lut.b.max():.4f}] -> {out / 'mspec.npz'}")
    return 0


# =====================================================================
# Parser and entry point
# =====================================================================


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as ConfigError (exit 1)."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="matxfer", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen", help="render a synthetic dataset")
    p.add_argument("--scene", help="sphere | sphere_pair | box_checker")
    p.add_argument("--transform", default=None,
                   help="material transform tag for the second condition")
    p.add_argument("--alpha", type=float, default=1.0,
                   help="blend toward the transformed materials")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--views", type=int, default=100)
    p.add_argument("--test-views", type=int, default=20)
    p.add_argument("--res", type=int, default=128)
    p.add_argument("--spp", type=int, default=64)
    p.set_defaults(func=cmd_gen)

    for name, func, datahelp in (
            ("train-joint", cmd_train_joint, "paired dataset directory"),
            ("train-target", cmd_train_target, "dataset directory")):
        p = sub.add_parser(name, help=f"run {name.replace('-', ' ')}")
        p.add_argument("--data", help=datahelp)
        p.add_argument("--out")
        p.add_argument("--config", help="key = value file mirroring the "
                                        "training options")
        _add_train_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("transfer",
                       help="attach a learned transform and render the "
                            "interpolation sweep")
    p.add_argument("--target", help="target checkpoint")
    p.add_argument("--source", help="checkpoint providing the transform")
    p.add_argument("--alpha", default=DEFAULT_ALPHAS,
                   help="comma list of interpolation factors")
    p.add_argument("--data", help="dataset directory for the render poses")
    p.add_argument("--render-poses", choices=("test", "train", "none"),
                   default="test")
    p.add_argument("--views", help="comma list of view indices")
    p.add_argument("--max-views", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("render", help="render checkpoint views to PNG + PFM")
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--views", help="comma list of view indices")
    p.add_argument("--max-views", type=int, default=None)
    p.add_argument("--cond", type=int, choices=(0, 1), default=0)
    p.add_argument("--material-alpha", type=float, default=None)
    p.add_argument("--buffers", default="rgb_rf,rgb_pbr,normal,beta,depth,mask")
    p.add_argument("--out")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="score a checkpoint against dataset GT")
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--transform", default=None,
                   help="apply this transform to the reference albedo")
    p.add_argument("--material-alpha", type=float, default=None)
    p.add_argument("--albedo-scale", choices=("on", "off"), default="on",
                   help="per-channel scale alignment fitted on train views")
    p.add_argument("--scale-views", type=int, default=5)
    p.add_argument("--ablation", default="full")
    p.add_argument("--source-label", default=None)
    p.add_argument("--target-label", default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run a named pipeline variant")
    p.add_argument("--variant", choices=ABLATION_TAGS)
    p.add_argument("--data", help="paired dataset directory")
    p.add_argument("--out")
    p.add_argument("--config")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--rays", type=int, default=8)
    p.add_argument("--seed", type=int, default=13)
    p.add_argument("--eps", type=float, default=1e-6)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("lut", help="bake and save the specular LUT")
    p.add_argument("--out")
    p.add_argument("--cos", type=int, default=64)
    p.add_argument("--rough", type=int, default=64)
    p.add_argument("--spp", type=int, default=4096)
    p.add_argument("--seed", type=int, default=11)
    p.set_defaults(func=cmd_lut)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not hasattr(args, "func"):
            parser.print_usage(sys.stderr)
            return 1
        return int(args.func(args) or 0)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 -- exit-code boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
