"""Ablation harness: success-rate tables, residual statistics, timing/MPPH,
learning curves, and deterministic report files.

Five wiring variants are compared: the static-only baseline (BL), the full
pipeline (PP), and PP with one module removed (WO_SG / WO_M / WO_DG). Each
(variant, velocity) cell runs seeded independent episodes, so trials can fan
out to worker processes and aggregate order-independently.
"""

from __future__ import annotations

import dataclasses
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .heightmap import build_rotation_stack, render_heightmap
from .policy import Generator, MethodVariant, export_map_images, plan_action
from .scene import scene_from_seed, simulate_mobile_grasp
from . import scene as scene_mod
from .training import build_mobile_generator, train_mobile, train_static

EVAL_SALT = 3


class InsufficientDataError(RuntimeError):
    pass


class GraspOracleSearchError(RuntimeError):
    """The cheating reference policy found no valid pinch in a scene."""


def mpph(mean_time_s: float) -> int:
    """Mean picks per hour for one attempt cycle, truncated to an integer."""
    if mean_time_s <= 0:
        raise ValueError("mean time must be positive")
    return int(3600.0 / mean_time_s)


def collection_time(v: float, approach_distance_m: float, overhead_s: float) -> float:
    """Moving-grasp cycle time: approach at v plus grasp/lift overhead."""
    if not 1.0 <= approach_distance_m <= 1.5:
        raise ValueError("approach distance outside the modeled 1.0-1.5 m range")
    if v <= 0:
        raise ValueError("velocity must be positive")
    return approach_distance_m / v + overhead_s


def stop_and_grasp_time(approach_distance_m: float, cruise_v: float,
                        stop_penalty_s: float, overhead_s: float) -> float:
    """Sequential stop-then-grasp cycle: cruise approach, decelerate/stop penalty, grasp."""
    if not 1.0 <= approach_distance_m <= 1.5:
        raise ValueError("approach distance outside the modeled 1.0-1.5 m range")
    return approach_distance_m / cruise_v + stop_penalty_s + overhead_s


def residual_stats(pairs) -> dict[str, tuple[float, float, int]]:
    """Sample mean and std of predicted residuals grouped by velocity label."""
    groups: dict[str, list[float]] = {}
    for label, value in pairs:
        groups.setdefault(str(label), []).append(float(value))
    out = {}
    for label, values in groups.items():
        if len(values) < 2:
            raise InsufficientDataError(f"need >=2 successful records for v={label}")
        out[label] = (float(np.mean(values)), float(np.std(values, ddof=1)), len(values))
    return out


@dataclass
class TrialRow:
    variant: str
    seed: int
    vel_label: str
    v_cmd: float
    success: int
    residual_pred: float
    v_true: float
    elapsed: float
    distance: float


@dataclass
class EvalReport:
    variants: list[str]
    velocities: list[str]
    trials_per_cell: int
    seeds: list[int]
    success: dict = field(default_factory=dict)  # (variant, vel) -> percent
    variant_means: dict = field(default_factory=dict)
    residuals: dict = field(default_factory=dict)  # vel -> (mean, std, n), PP successes
    timing: dict = field(default_factory=dict)  # vel -> mean seconds (PP attempts)
    rows: list[TrialRow] = field(default_factory=list)

    def success_rate(self, variant: str, vel: str) -> float:
        return self.success[(variant, vel)]

    def mpph_table(self) -> dict[str, dict[str, float]]:
        out = {}
        for vel, t in self.timing.items():
            attempt = mpph(t)
            rate = self.success.get(("PP", vel))
            out[vel] = {
                "mean_time_s": t,
                "mpph": attempt,
                "mpph_success_weighted": (attempt * rate / 100.0) if rate is not None else float("nan"),
            }
        return out


def _vel_for_trial(vel_label: str, rv_choices, rng) -> float:
    if vel_label == "rv":
        return float(rv_choices[int(rng.integers(0, len(rv_choices)))])
    return float(vel_label)


def run_eval_cell(cfg, gen: Generator, variant: MethodVariant, vel_label: str,
                  n_trials: int, seed: int) -> list[TrialRow]:
    """Greedy-policy episodes for one (variant, velocity, seed) cell."""
    rows = []
    vel_index = list(cfg.eval.velocities).index(vel_label) if vel_label in cfg.eval.velocities else 99
    for trial in range(n_trials):
        rng = np.random.default_rng([seed, EVAL_SALT, _variant_index(variant), vel_index, trial])
        v = _vel_for_trial(vel_label, cfg.eval.rv_choices, rng)
        scene_seed = int(rng.integers(2**63))
        sim_seed = int(rng.integers(2**63))
        distance = float(rng.uniform(*cfg.eval.approach_distance_range))
        scene = scene_from_seed(scene_seed, cfg.scene, cfg.eval.n_objects)
        stack = build_rotation_stack(render_heightmap(scene, cfg.frame), cfg.generator.rotations)
        move, grasp, info = plan_action(gen, stack, v, cfg.frame, variant, 0.0, rng)
        outcome = simulate_mobile_grasp(
            scene, move, grasp, cfg.gripper, cfg.error_model,
            np.random.default_rng(sim_seed), v_target=v,
            approach_distance=distance, overhead=cfg.eval.overhead_s,
        )
        rows.append(TrialRow(
            variant=variant.value, seed=seed, vel_label=vel_label, v_cmd=v,
            success=int(outcome.success), residual_pred=info["residual"],
            v_true=outcome.v_true, elapsed=outcome.elapsed, distance=distance,
        ))
    return rows


def _variant_index(variant: MethodVariant) -> int:
    return list(MethodVariant).index(variant)


def build_report(cfg, rows: list[TrialRow], variants, velocities, seeds,
                 trials_per_cell: int) -> EvalReport:
    report = EvalReport(
        variants=[v.value for v in variants],
        velocities=list(velocities),
        trials_per_cell=trials_per_cell,
        seeds=list(seeds),
        rows=rows,
    )
    for variant in report.variants:
        per_vel = []
        for vel in report.velocities:
            cell = [r.success for r in rows if r.variant == variant and r.vel_label == vel]
            rate = 100.0 * float(np.mean(cell)) if cell else float("nan")
            report.success[(variant, vel)] = rate
            per_vel.append(rate)
        report.variant_means[variant] = float(np.mean(per_vel)) if per_vel else float("nan")

    pp_success = [(r.vel_label, r.residual_pred) for r in rows
                  if r.variant == "PP" and r.success == 1 and r.vel_label != "rv"]
    if pp_success:
        try:
            report.residuals = residual_stats(pp_success)
        except InsufficientDataError:
            report.residuals = {}

    pp_rows = [r for r in rows if r.variant == "PP"]
    for vel in report.velocities:
        cell = [r for r in pp_rows if r.vel_label == vel]
        if cell:
            report.timing[vel] = float(np.mean([r.elapsed for r in cell]))
    if pp_rows:
        stop_times = [
            stop_and_grasp_time(r.distance, cfg.eval.cruise_v, cfg.eval.stop_penalty_s, cfg.eval.overhead_s)
            for r in pp_rows
        ]
        report.timing["0.00"] = float(np.mean(stop_times))
    return report


def run_ablation(cfg, policies: dict[MethodVariant, dict[int, Generator]],
                 n_trials: int | None = None, velocities=None, workers: int = 1) -> EvalReport:
    """Evaluate trained variant policies over the velocity grid.

    ``policies`` maps variant -> seed -> trained generator. Every cell uses
    per-trial derived seeds, so any worker count gives identical results.
    """
    n_trials = cfg.eval.trials_per_velocity if n_trials is None else n_trials
    velocities = list(cfg.eval.velocities) if velocities is None else list(velocities)
    variants = list(policies)
    seeds = sorted({s for by_seed in policies.values() for s in by_seed})
    tasks = []
    for variant, by_seed in policies.items():
        for seed, gen in by_seed.items():
            for vel in velocities:
                tasks.append((variant, seed, vel, gen))
    rows: list[TrialRow] = []
    if workers <= 1:
        for variant, seed, vel, gen in tasks:
            rows.extend(run_eval_cell(cfg, gen, variant, vel, n_trials, seed))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_eval_cell_task, cfg, gen.named_params(),
                            dataclasses.asdict(gen.cfg), variant.value, vel, n_trials, seed)
                for variant, seed, vel, gen in tasks
            ]
            for fut in futures:
                rows.extend(fut.result())
    rows.sort(key=lambda r: (r.variant, r.seed, r.vel_label))
    return build_report(cfg, rows, variants, velocities, seeds, n_trials)


def _eval_cell_task(cfg, params, gen_cfg_dict, variant_value, vel, n_trials, seed):
    from .policy import GeneratorConfig

    variant = MethodVariant(variant_value)
    gen = Generator(GeneratorConfig(**{k: (tuple(v) if isinstance(v, list) else v)
                                       for k, v in gen_cfg_dict.items()}), wiring=variant.wiring)
    gen.load_named(params)
    return run_eval_cell(cfg, gen, variant, vel, n_trials, seed)


# ---------------------------------------------------------------------------
# Reference policies (sanity bounds for the harness)


def compensate_drift(err, v_target: float) -> float:
    """Command u with u + drift(u) = v_target (Newton's method)."""
    u = v_target
    for _ in range(20):
        f = u + float(err.drift(u)) - v_target
        h = 1e-6
        fp = (u + h + float(err.drift(u + h)) - v_target - f) / h
        u -= f / fp
    return u


def oracle_policy_action(scene, cfg, v: float):
    """Cheating reference: search the pinch oracle directly and null the drift.

    Candidate pinches slide along each part's axes at both aligned wrist
    orientations; a coarse grid over all rotations is the fallback for
    cluttered unions.
    """
    from .policy import GraspPrimitive, MovePrimitive
    from .scene import grasp_oracle

    grip = cfg.gripper
    candidates = []
    for obj in scene.objects:
        for part in obj.parts:
            u, t = part.axes()
            c = np.asarray(part.center)
            for frac in (0.0, 0.25, -0.25, 0.45, -0.45):
                for point in (c + frac * part.size[1] * t, c + frac * part.size[0] * u):
                    for theta in (part.yaw - math.pi / 2.0, part.yaw):
                        candidates.append((float(point[0]), float(point[1]),
                                           theta % (2 * math.pi)))
    x_min, x_max, y_min, y_max = cfg.frame.extent
    grid = np.linspace(0.0, 1.0, 24)
    for gx in grid:
        for gy in grid:
            for k in range(cfg.generator.rotations):
                candidates.append((x_min + gx * (x_max - x_min),
                                   y_min + gy * (y_max - y_min),
                                   k * 2 * math.pi / cfg.generator.rotations))
    for x, y, theta in candidates:
        if grasp_oracle(scene, x, y, theta, grip):
            v_hat = float(np.clip(compensate_drift(cfg.error_model, v), scene_mod.V_MIN, scene_mod.V_MAX))
            return MovePrimitive(v_hat=v_hat), GraspPrimitive(x=x, y=y, theta=theta, pixel=(0, 0, 0))
    raise GraspOracleSearchError("no oracle grasp found for scene")


def random_policy_action(rng, cfg, v: float):
    from .heightmap import pixel_to_world
    from .policy import GraspPrimitive, MovePrimitive

    r = cfg.generator.rotations
    i = int(rng.integers(0, cfg.frame.grid_h))
    j = int(rng.integers(0, cfg.frame.grid_w))
    k = int(rng.integers(0, r))
    x, y = pixel_to_world(i, j, k, r, cfg.frame)
    return MovePrimitive(v_hat=v), GraspPrimitive(x=x, y=y, theta=k * 2 * math.pi / r, pixel=(i, j, k))


def evaluate_reference_policy(cfg, kind: str, vel_label: str, n_trials: int, seed: int) -> list[TrialRow]:
    rows = []
    for trial in range(n_trials):
        rng = np.random.default_rng([seed, EVAL_SALT, 90 if kind == "oracle" else 91, trial])
        v = _vel_for_trial(vel_label, cfg.eval.rv_choices, rng)
        scene_seed = int(rng.integers(2**63))
        sim_seed = int(rng.integers(2**63))
        distance = float(rng.uniform(*cfg.eval.approach_distance_range))
        scene = scene_from_seed(scene_seed, cfg.scene, cfg.eval.n_objects)
        if kind == "oracle":
            try:
                move, grasp = oracle_policy_action(scene, cfg, v)
            except GraspOracleSearchError:
                rows.append(TrialRow(kind, seed, vel_label, v, 0, 0.0, v, 0.0, distance))
                continue
        elif kind == "random":
            move, grasp = random_policy_action(rng, cfg, v)
        else:
            raise ValueError(f"unknown reference policy '{kind}'")
        outcome = simulate_mobile_grasp(
            scene, move, grasp, cfg.gripper, cfg.error_model,
            np.random.default_rng(sim_seed), v_target=v,
            approach_distance=distance, overhead=cfg.eval.overhead_s,
        )
        rows.append(TrialRow(kind, seed, vel_label, v, int(outcome.success),
                             0.0, outcome.v_true, outcome.elapsed, distance))
    return rows


# ---------------------------------------------------------------------------
# Report rendering


def _fmt(x: float) -> str:
    return "nan" if not np.isfinite(x) else f"{x:.4f}"


def render_report(report: EvalReport, out_dir, curves: dict | None = None,
                  map_images: dict | None = None) -> list[Path]:
    """Write deterministic CSV/JSON/PNG artifacts for an evaluation report."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    path = out_dir / "success_rates.csv"
    lines = ["v," + ",".join(report.variants)]
    for vel in report.velocities:
        row = [("rv" if vel == "rv" else vel)]
        row += [_fmt(report.success[(var, vel)]) for var in report.variants]
        lines.append(",".join(row))
    lines.append("mean," + ",".join(_fmt(report.variant_means[v]) for v in report.variants))
    path.write_text("\n".join(lines) + "\n")
    written.append(path)

    path = out_dir / "timing.csv"
    lines = ["v,mean_time_s,mpph,mpph_success_weighted"]
    for vel in sorted(report.timing, key=lambda s: float(s) if s != "rv" else -1.0):
        cell = report.mpph_table()[vel]
        lines.append(
            f"{vel},{_fmt(cell['mean_time_s'])},{cell['mpph']},{_fmt(cell['mpph_success_weighted'])}"
        )
    path.write_text("\n".join(lines) + "\n")
    written.append(path)

    path = out_dir / "residuals.csv"
    lines = ["v,mean,std,n"]
    for vel in sorted(report.residuals):
        mean, std, n = report.residuals[vel]
        lines.append(f"{vel},{mean:.6f},{std:.6f},{n}")
    path.write_text("\n".join(lines) + "\n")
    written.append(path)

    path = out_dir / "summary.json"
    payload = {
        "variants": report.variants,
        "velocities": report.velocities,
        "trials_per_cell": report.trials_per_cell,
        "seeds": report.seeds,
        "success": {f"{var}/{vel}": report.success[(var, vel)]
                    for var, vel in report.success},
        "variant_means": report.variant_means,
        "residuals": {k: list(v) for k, v in report.residuals.items()},
        "timing": report.timing,
        "mpph": report.mpph_table(),
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    written.append(path)

    if curves:
        written.append(_render_curves(curves, out_dir / "learning_curves.png"))
    if map_images:
        for prefix, (values, signed) in map_images.items():
            written.extend(export_map_images(values, out_dir / "maps", prefix, signed=signed))
    return written


def _render_curves(curves: dict[str, list[float]], path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for name in sorted(curves):
        ys = np.asarray(curves[name], dtype=float)
        ax.plot(np.arange(len(ys)), 100.0 * ys, label=name, linewidth=1.2)
    ax.set_xlabel("training step")
    ax.set_ylabel("rolling success rate [%]")
    ax.set_ylim(0, 100)
    ax.legend(loc="lower right", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# Full desk-scale experiment


@dataclass
class ExperimentResult:
    report: EvalReport
    curves: dict[str, list[float]]
    static_results: dict[int, dict]
    mobile_results: dict[tuple[str, int], dict]
    checkpoints: dict[tuple[str, int], dict]


def _static_task(cfg, seed):
    result = train_static(cfg, seed)
    return seed, result.state.params, result.history


def _mobile_task(cfg, variant_value, static_params, seed):
    variant = MethodVariant(variant_value)
    result = train_mobile(cfg, variant, static_params, seed)
    return variant_value, seed, result.state.params, result.history


def run_full_experiment(cfg, seeds, workers: int = 1, n_trials: int | None = None,
                        progress=None) -> ExperimentResult:
    """Train all variants on every seed, then run the ablation evaluation."""
    def note(msg):
        if progress:
            progress(msg)

    static_params: dict[int, dict] = {}
    static_hist: dict[int, list] = {}
    stage2 = [v for v in MethodVariant if v.needs_stage2]

    if workers <= 1:
        for seed in seeds:
            note(f"stage-1 training, seed {seed}")
            s, params, hist = _static_task(cfg, seed)
            static_params[s], static_hist[s] = params, hist
        mobile_out = []
        for variant in stage2:
            for seed in seeds:
                note(f"stage-2 training, {variant.value}, seed {seed}")
                mobile_out.append(_mobile_task(
                    cfg, variant.value,
                    static_params[seed] if variant.wiring.use_static else None, seed))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(_static_task, cfg, seed) for seed in seeds]
            for fut in futs:
                s, params, hist = fut.result()
                static_params[s], static_hist[s] = params, hist
                note(f"stage-1 done, seed {s}")
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [
                pool.submit(_mobile_task, cfg, variant.value,
                            static_params[seed] if variant.wiring.use_static else None, seed)
                for variant in stage2 for seed in seeds
            ]
            mobile_out = []
            for fut in futs:
                out = fut.result()
                mobile_out.append(out)
                note(f"stage-2 done, {out[0]}, seed {out[1]}")

    mobile_params: dict[tuple[str, int], dict] = {}
    mobile_hist: dict[tuple[str, int], list] = {}
    for variant_value, seed, params, hist in mobile_out:
        mobile_params[(variant_value, seed)] = params
        mobile_hist[(variant_value, seed)] = hist

    policies: dict[MethodVariant, dict[int, Generator]] = {}
    for variant in MethodVariant:
        by_seed = {}
        for seed in seeds:
            if variant is MethodVariant.BL:
                gen = _bl_generator(cfg, static_params[seed])
            else:
                gen = build_mobile_generator(
                    cfg, variant,
                    static_params[seed] if variant.wiring.use_static else None, seed)
                gen.load_named(mobile_params[(variant.value, seed)])
            by_seed[seed] = gen
        policies[variant] = by_seed

    note("running ablation evaluation")
    report = run_ablation(cfg, policies, n_trials=n_trials, workers=workers)

    curves: dict[str, list[float]] = {}
    for variant in stage2:
        per_seed = [
            [row["rolling_success"] for row in mobile_hist[(variant.value, seed)]]
            for seed in seeds
        ]
        n = min(len(c) for c in per_seed)
        curves[variant.value] = list(np.nanmean([c[:n] for c in per_seed], axis=0))

    return ExperimentResult(
        report=report,
        curves=curves,
        static_results={s: {"history": static_hist[s]} for s in seeds},
        mobile_results={k: {"history": v} for k, v in mobile_hist.items()},
        checkpoints={("static", s): static_params[s] for s in seeds}
        | {(v.value, s): mobile_params[(v.value, s)] for v in stage2 for s in seeds},
    )


def _bl_generator(cfg, static_params):
    gen = Generator(cfg.generator, wiring=MethodVariant.BL.wiring)
    gen.frame = cfg.frame
    gen.load_named({k: v for k, v in static_params.items()
                    if k.startswith(("perception1.", "static_head."))})
    return gen
