"""Command-line entry point: train-static, train-mobile, evaluate, render.

A run manifest (config snapshot, seeds, thread count, checkpoint paths, tool
version) is written to the output directory before any work starts, so every
output tree can be re-derived from its manifest. Exit codes: 0 success,
1 usage/config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


def _set_thread_env(threads: int) -> None:
    # Must happen before numpy loads its BLAS; recorded in the manifest.
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")
    os.environ["MGLAB_WORKERS"] = str(threads)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mglab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="YAML config file")
        p.add_argument("--seed", type=int, default=None, help="run seed override")
        p.add_argument("--threads", type=int, default=1, help="worker process count")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.FIELD=VALUE", help="dotted config override")

    p = sub.add_parser("train-static", help="stage-1 training on stationary grasps")
    common(p)
    p.add_argument("--steps", type=int, default=None, help="override stage-1 step budget")

    p = sub.add_parser("train-mobile", help="stage-2 training on mobile grasps")
    common(p)
    p.add_argument("--steps", type=int, default=None, help="override stage-2 step budget")
    p.add_argument("--static-ckpt", type=Path, default=None,
                   help="stage-1 checkpoint (required unless --variant WO_SG)")
    p.add_argument("--variant", default="PP", help="PP, WO_SG, WO_M, or WO_DG")
    p.add_argument("--resume", type=Path, default=None, help="training-state file to resume from")

    p = sub.add_parser("evaluate", help="run the ablation evaluation")
    common(p)
    p.add_argument("--trials", type=int, default=None, help="trials per velocity cell")
    p.add_argument("--velocities", default=None,
                   help="comma list, e.g. 0.10,0.15,0.20,rv")
    p.add_argument("--variants", default="PP,BL", help="comma list of variant names")
    p.add_argument("--ckpt", action="append", default=[], metavar="VARIANT=PATH",
                   help="checkpoint per variant (BL accepts a stage-1 checkpoint)")

    p = sub.add_parser("render", help="render affordance/residual maps for one scene")
    common(p)
    p.add_argument("--scene-seed", type=int, required=True)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--velocity", type=float, default=0.15)
    return parser


def _load_config(args, extra: dict[str, str] | None = None):
    from .config import load_config

    if args.config is not None and not args.config.exists():
        raise UsageError(f"config file not found: {args.config}")
    overrides: dict[str, str] = {}
    for item in args.overrides:
        if "=" not in item:
            raise UsageError(f"--set expects SECTION.FIELD=VALUE, got '{item}'")
        key, value = item.split("=", 1)
        overrides[key] = value
    if extra:
        overrides.update(extra)
    if args.seed is not None:
        overrides["train.seed"] = str(args.seed)
    return load_config(args.config, overrides)


class UsageError(Exception):
    pass


def write_manifest(out_dir: Path, cfg, command: str, extra: dict | None = None) -> Path:
    from . import __version__
    from .config import config_to_dict

    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "tool": "mglab",
        "version": __version__,
        "command": command,
        "config": config_to_dict(cfg),
        "seed": cfg.train.seed,
        "workers": int(os.environ.get("MGLAB_WORKERS", "1")),
        "blas_threads": int(os.environ.get("OPENBLAS_NUM_THREADS", "1")),
    }
    manifest.update(extra or {})
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def cmd_train_static(args) -> int:
    from .policy import save_generator
    from .training import metrics_csv_text, save_state, train_static

    cfg = _load_config(args)
    out = args.out
    write_manifest(out, cfg, "train-static",
                   {"steps": args.steps, "checkpoints": ["static.ckpt"]})
    result = train_static(cfg, cfg.train.seed, steps=args.steps)
    save_generator(out / "static.ckpt", result.generator, stage="static",
                   extra_meta={"seed": cfg.train.seed})
    (out / "metrics.csv").write_text(metrics_csv_text(result.history))
    save_state(out / "train_state.npz", result.state)
    final = result.history[-1]["rolling_success"] if result.history else float("nan")
    print(f"stage-1 done: {len(result.history)} steps, rolling success {final}")
    return EXIT_OK


def cmd_train_mobile(args) -> int:
    from .nn import load_params
    from .policy import MethodVariant, save_generator
    from .training import load_state, metrics_csv_text, save_state, train_mobile

    cfg = _load_config(args)
    try:
        variant = MethodVariant(args.variant)
    except ValueError:
        raise UsageError(f"unknown variant '{args.variant}'")
    if variant.value in ("BL",):
        raise UsageError("BL has no stage-2 training; use train-static")
    static_params = None
    if variant.wiring.use_static:
        if args.static_ckpt is None:
            raise UsageError(f"variant {variant.value} requires --static-ckpt")
        static_params, meta = load_params(args.static_ckpt)
        if meta.get("stage") != "static":
            raise UsageError(f"{args.static_ckpt} is not a stage-1 checkpoint")
    out = args.out
    write_manifest(out, cfg, "train-mobile",
                   {"variant": variant.value, "steps": args.steps,
                    "static_ckpt": str(args.static_ckpt) if args.static_ckpt else None,
                    "checkpoints": ["mobile.ckpt"]})
    resume_state = load_state(args.resume) if args.resume else None
    result = train_mobile(cfg, variant, static_params, cfg.train.seed,
                          steps=args.steps, resume_state=resume_state)
    save_generator(out / "mobile.ckpt", result.generator, stage="mobile",
                   extra_meta={"seed": cfg.train.seed, "variant": variant.value})
    (out / "metrics.csv").write_text(metrics_csv_text(result.history))
    save_state(out / "train_state.npz", result.state)
    final = result.history[-1]["rolling_success"] if result.history else float("nan")
    print(f"stage-2 ({variant.value}) done: {len(result.history)} steps, rolling success {final}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluation import render_report, run_ablation
    from .policy import MethodVariant, load_generator

    cfg = _load_config(args)
    try:
        variants = [MethodVariant(v.strip()) for v in args.variants.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"unknown variant in --variants: {exc}")
    velocities = None
    if args.velocities:
        velocities = tuple(v.strip() for v in args.velocities.split(",") if v.strip())
        for v in velocities:
            if v != "rv":
                try:
                    float(v)
                except ValueError:
                    raise UsageError(f"bad velocity '{v}'")
    ckpt_paths: dict[str, Path] = {}
    for item in args.ckpt:
        if "=" not in item:
            raise UsageError(f"--ckpt expects VARIANT=PATH, got '{item}'")
        name, path = item.split("=", 1)
        ckpt_paths[name.strip()] = Path(path)
    policies = {}
    for variant in variants:
        if variant.value not in ckpt_paths:
            raise UsageError(f"missing --ckpt for variant {variant.value}")
        gen, meta = load_generator(ckpt_paths[variant.value], frame=cfg.frame)
        if variant is MethodVariant.BL and gen.wiring.use_moving:
            raise UsageError("BL expects a stage-1 (static) checkpoint")
        policies[variant] = {int(meta.get("seed", 0)): gen}
    out = args.out
    write_manifest(out, cfg, "evaluate",
                   {"variants": [v.value for v in variants], "trials": args.trials,
                    "velocities": list(velocities) if velocities else None,
                    "ckpts": {k: str(v) for k, v in ckpt_paths.items()}})
    report = run_ablation(cfg, policies, n_trials=args.trials, velocities=velocities,
                          workers=int(os.environ.get("MGLAB_WORKERS", "1")))
    files = render_report(report, out)
    print(f"evaluation done: {len(report.rows)} trials, wrote {len(files)} files to {out}")
    for variant in report.variants:
        print(f"  {variant}: mean success {report.variant_means[variant]:.1f}%")
    return EXIT_OK


def cmd_render(args) -> int:
    from .heightmap import build_rotation_stack, render_heightmap, save_color_png, save_height_png
    from .policy import MethodVariant, load_generator, plan_action, to_affordance, to_residual
    from .scene import scene_from_seed

    cfg = _load_config(args)
    gen, meta = load_generator(args.ckpt, frame=cfg.frame)
    out = args.out
    write_manifest(out, cfg, "render",
                   {"scene_seed": args.scene_seed, "ckpt": str(args.ckpt),
                    "velocity": args.velocity})
    scene = scene_from_seed(args.scene_seed, cfg.scene, cfg.eval.n_objects)
    hm = render_heightmap(scene, cfg.frame)
    save_color_png(hm, out / "input_color.png")
    save_height_png(hm, out / "input_height.png")
    stack = build_rotation_stack(hm, cfg.generator.rotations)
    from .policy import export_map_images

    if gen.wiring.use_moving or gen.wiring.use_dynamic:
        q_m, q_gd, inter = gen.forward_dynamic(stack, args.velocity, return_intermediates=True)
        if inter["q_gs"] is not None:
            export_map_images(to_affordance(inter["q_gs"]).values, out, "static")
        if q_gd is not None:
            export_map_images(to_affordance(q_gd).values, out, "dynamic")
        if q_m is not None:
            export_map_images(to_residual(q_m, gen.cfg.residual_clamp).values, out,
                              "residual", signed=True)
    else:
        _, q_gs = gen.forward_static(stack)
        export_map_images(to_affordance(q_gs).values, out, "static")
    print(f"rendered maps for scene {args.scene_seed} to {out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    _set_thread_env(args.threads)
    handlers = {
        "train-static": cmd_train_static,
        "train-mobile": cmd_train_mobile,
        "evaluate": cmd_evaluate,
        "render": cmd_render,
    }
    try:
        return handlers[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        from .config import ConfigError
        from .nn import CheckpointError

        if isinstance(exc, (ConfigError, CheckpointError, FileNotFoundError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
