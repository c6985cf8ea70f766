"""Command-line surface.

Subcommands: phantom-gen, render, register, train, benchmark, landscape,
compare-optim. Global flags: --config, --seed, --out, --metric, --geodesic.
Exit codes: 0 success, 2 configuration error, 3 numerical failure. Angles
on the command line are degrees; everything internal is radians and mm.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .augment import randomize
from .errors import ConfigError, DiffregError, Diverged, SolveFailed
from .io import (
    read_rimg,
    save_encoder_params,
    save_landmarks,
    write_json,
    write_loss_csv,
    write_pgm,
    write_rimg,
    write_rvol,
)
from .phantom import generate_phantom
from .pipeline import (
    PipelineConfig,
    benchmark,
    landscape,
    load_scene,
    optimizer_comparison,
    register,
)
from .render import invert_intensity, render_drr
from .similarity import TrainConfig, train_similarity


def _add_global_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, default=None, help="pipeline config JSON")
    p.add_argument("--seed", type=int, default=None, help="master RNG seed")
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--metric", choices=("learned", "mncc"), default=None)
    p.add_argument("--geodesic", choices=("se3", "so4"), default=None)


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_json(args.config) if args.config else PipelineConfig()
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.metric is not None:
        updates["metric"] = args.metric
    if args.geodesic is not None:
        updates["geodesic"] = args.geodesic
    return dataclasses.replace(cfg, **updates) if updates else cfg


def _out_dir(args, default: str) -> Path:
    out = args.out if args.out is not None else Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_phantom_gen(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, "phantom_out")
    ph = generate_phantom(cfg.phantom_spec, seed=cfg.seed)
    write_rvol(out / "volume.rvol", ph.volume)
    save_landmarks(out / "landmarks.json", ph.landmarks)
    write_json(out / "phantom.json", {"name": ph.name, "seed": ph.seed, "landmarks": len(ph.landmarks)})
    print(f"phantom '{ph.name}' -> {out}")
    return 0


def cmd_render(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, "render_out")
    vol, _ = load_scene(cfg)
    theta = np.zeros(6)
    theta[:3] = np.deg2rad(args.rot)
    theta[3:] = args.trans
    img = render_drr(vol, cfg.camera, theta)
    if args.invert_i0 is not None:
        img = invert_intensity(img, args.invert_i0)
    if args.augment_seed is not None:
        img = randomize(img, cfg.augmentation, args.augment_seed)
    write_rimg(out / "drr.rimg", img)
    write_pgm(out / "drr.pgm", img)
    write_json(out / "render.json", {"theta": [float(v) for v in theta], "seed": cfg.seed})
    print(f"rendered {img.shape[1]}x{img.shape[0]} DRR -> {out}")
    return 0


def cmd_register(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, "register_out")
    if args.target:
        target = read_rimg(args.target)
        theta_gt = None
    else:
        vol, _ = load_scene(cfg)
        rng = np.random.default_rng(cfg.seed)
        from .lie import sample_pose

        theta_gt = sample_pose(np.zeros(6), cfg.gt_rot_deg, cfg.gt_trans_mm, rng)
        target = render_drr(vol, cfg.camera, theta_gt)
    _, payload = register(cfg, target, theta_gt=theta_gt, out_dir=out)
    print(
        "registered: eps {:.6g} -> {:.6g} in {} iterations".format(
            payload["eps_init"], payload["eps_final"], payload["iterations"]
        )
    )
    if "mtre_mm" in payload:
        print(f"mTRE = {payload['mtre_mm']:.4f} mm")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, "train_out")
    vol, _ = load_scene(cfg)
    tc = TrainConfig(
        iterations=args.iterations,
        learning_rate=args.lr,
        rng_seed=cfg.seed,
        geodesic_flavor=cfg.geodesic,
        f=cfg.camera.f,
        augmentation=args.augment,
        aug_config=cfg.augmentation,
    )
    params, losses = train_similarity(vol, cfg.camera, tc)
    save_encoder_params(out / "encoder.params", params)
    write_loss_csv(out / "loss.csv", losses)
    write_json(
        out / "train.json",
        {
            "iterations": tc.iterations,
            "seed": tc.rng_seed,
            "geodesic": tc.geodesic_flavor,
            "loss_first": float(losses[0]),
            "loss_last": float(losses[-1]),
        },
    )
    print(f"trained {tc.iterations} iterations; final loss {losses[-1]:.6g} -> {out}")
    return 0


def cmd_benchmark(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, "benchmark_out")
    report = benchmark(
        cfg,
        n_cases=args.cases,
        perturb_rot_deg=args.perturb_rot,
        perturb_trans_mm=args.perturb_trans,
        out_dir=out,
    )
    print(
        "SMSR {:.3f}  median {:.3f} mm  p75 {:.3f} mm  p95 {:.3f} mm -> {}".format(
            report.smsr, report.median, report.p75, report.p95, out
        )
    )
    return 0


def cmd_landscape(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, "landscape_out")
    grid = landscape(
        cfg,
        axes=tuple(args.axes),
        resolution=args.resolution,
        out_csv=out / "landscape.csv",
    )
    write_json(
        out / "landscape.json",
        {"axes": list(args.axes), "resolution": args.resolution, "metric": cfg.metric},
    )
    print(f"landscape {grid['eps'].shape} -> {out}")
    return 0


def cmd_compare_optim(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, "compare_out")
    curves = optimizer_comparison(
        cfg,
        methods=tuple(args.methods),
        seeds=tuple(args.seeds),
        iterations=args.iterations,
        out_csv=out / "curves.csv",
    )
    finals = {f"{m}:{s}": float(c[-1]) for (m, s), c in curves.items()}
    write_json(out / "summary.json", {"final_loss": finals})
    print(f"compared {sorted(set(m for m, _ in curves))} -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="diffreg", description=__doc__)
    ap.add_argument("--version", action="version", version=f"diffreg {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="generate a phantom volume + landmarks")
    _add_global_flags(p)
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("render", help="render a DRR at a pose")
    _add_global_flags(p)
    p.add_argument("--rot", type=float, nargs=3, default=(0.0, 0.0, 0.0), help="degrees")
    p.add_argument("--trans", type=float, nargs=3, default=(0.0, 0.0, 0.0), help="mm")
    p.add_argument("--invert-i0", type=float, default=None, help="apply log inversion")
    p.add_argument("--augment-seed", type=int, default=None, help="domain randomization seed")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("register", help="register a target image (or a synthesized one)")
    _add_global_flags(p)
    p.add_argument("--target", type=Path, default=None, help="RIMG target (raw DRR domain)")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("train", help="train the learned similarity encoder")
    _add_global_flags(p)
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--augment", action="store_true", help="enable domain randomization")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("benchmark", help="seeded Monte-Carlo registration benchmark")
    _add_global_flags(p)
    p.add_argument("--cases", type=int, default=100)
    p.add_argument("--perturb-rot", type=float, default=5.0, help="degrees per axis")
    p.add_argument("--perturb-trans", type=float, default=10.0, help="mm per axis")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("landscape", help="similarity landscape grid around the truth")
    _add_global_flags(p)
    p.add_argument("--axes", type=int, nargs=2, default=(3, 4), help="twist indices")
    p.add_argument("--resolution", type=int, default=11)
    p.set_defaults(func=cmd_landscape)

    p = sub.add_parser("compare-optim", help="LM vs gradient-descent convergence curves")
    _add_global_flags(p)
    p.add_argument("--methods", nargs="+", default=("lm", "gd", "adam"))
    p.add_argument("--seeds", type=int, nargs="+", default=(0,))
    p.add_argument("--iterations", type=int, default=20)
    p.set_defaults(func=cmd_compare_optim)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (Diverged, SolveFailed) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DiffregError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
