#!/usr/bin/env python3
"""Train every wiring variant on several seeds and render the full report.

Produces the success-rate table over velocities, the timing/picks-per-hour
comparison, residual statistics, learning curves, and affordance-map images
for one inspection scene.
"""

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import numpy as np


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", type=Path, default=Path(__file__).parent / "desk_config.yaml")
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--workers", type=int, default=2)
    parser.add_argument("--trials", type=int, default=None, help="eval trials per velocity cell")
    parser.add_argument("--out", type=Path, default=Path("runs/desk_experiment"))
    args = parser.parse_args()

    import os

    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")

    from mglab.config import config_to_dict, load_config
    from mglab.evaluation import render_report, run_full_experiment
    from mglab.heightmap import build_rotation_stack, render_heightmap
    from mglab.nn import save_params
    from mglab.policy import MethodVariant, to_affordance, to_residual
    from mglab.scene import scene_from_seed
    from mglab.training import metrics_csv_text

    seeds = [int(s) for s in args.seeds.split(",")]
    cfg = load_config(args.config)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps({
        "config": config_to_dict(cfg), "seeds": seeds, "workers": args.workers,
        "trials": args.trials,
    }, indent=2, sort_keys=True) + "\n")

    result = run_full_experiment(cfg, seeds, workers=args.workers, n_trials=args.trials,
                                 progress=lambda msg: print(f"[experiment] {msg}", flush=True))

    for key, params in result.checkpoints.items():
        name = f"{key[0]}_seed{key[1]}.ckpt".replace("/", "_")
        save_params(out / name, params, meta={"stage": key[0], "seed": key[1]})
    for (variant, seed), data in result.mobile_results.items():
        (out / f"metrics_{variant}_seed{seed}.csv").write_text(
            metrics_csv_text(data["history"]))

    # affordance/residual maps for one inspection scene with the first PP policy
    from mglab.training import build_mobile_generator

    gen = build_mobile_generator(cfg, MethodVariant.PP,
                                 result.checkpoints[("static", seeds[0])], seeds[0])
    gen.load_named(result.checkpoints[("PP", seeds[0])])
    scene = scene_from_seed(12345, cfg.scene, 1)
    stack = build_rotation_stack(render_heightmap(scene, cfg.frame), cfg.generator.rotations)
    q_m, q_gd, inter = gen.forward_dynamic(stack, 0.15, return_intermediates=True)
    maps = {
        "static": (to_affordance(inter["q_gs"]).values, False),
        "dynamic": (to_affordance(q_gd).values, False),
        "residual": (to_residual(q_m, cfg.generator.residual_clamp).values, True),
    }
    files = render_report(result.report, out, curves=result.curves, map_images=maps)
    print(f"wrote {len(files)} report files to {out}")

    print("\nmean success over velocities [%]:")
    for variant in result.report.variants:
        print(f"  {variant:6s} {result.report.variant_means[variant]:6.1f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
