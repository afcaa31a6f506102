"""Two-stage self-supervised training.

Stage 1 trains the perception trunk and static-grasp head on stationary
pinches scored by the geometry oracle. Stage 2 freezes those weights and
trains the second perception stage plus the moving/dynamic heads on mobile
grasps executed under the velocity-error model. Updates are online and
single-sample: the loss is applied only at the executed pixel/rotation.

All randomness is derived per trial from (run seed, stage, step), so runs
are bit-reproducible and can be resumed mid-stream.
"""

from __future__ import annotations

import dataclasses
import io
from collections import deque
from dataclasses import dataclass

import numpy as np

from .heightmap import build_rotation_stack, render_heightmap
from .nn import SGD, LossValue, bce_logit_grad, combined_loss, huber_grad, params_digest
from .policy import Generator, MethodVariant, plan_action
from .scene import scene_from_seed, simulate_mobile_grasp, grasp_oracle, true_residual

STATIC_SALT = 1
MOBILE_SALT = 2


class TrainingDiverged(RuntimeError):
    pass


class FrozenWeightsMutated(RuntimeError):
    pass


@dataclass
class TrialRecord:
    """One executed self-supervised sample; enough to replay the trial."""

    step: int
    stage: str
    workspace: int
    scene_seed: int
    sim_seed: int
    v_cmd: float
    v_hat: float
    x: float
    y: float
    theta: float
    pixel: tuple[int, int, int]
    label: int
    delta_bar: float | None
    v_true: float
    residual_pred: float


@dataclass
class TrainingState:
    """Mid-run snapshot sufficient for bit-exact resumption."""

    step: int
    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray]
    recent_labels: list[int]


@dataclass
class StageResult:
    generator: Generator
    history: list[dict]
    records: list[TrialRecord]
    state: TrainingState

    def rolling_curve(self) -> list[float]:
        return [row["rolling_success"] for row in self.history]

    def first_step_reaching(self, threshold: float) -> int | None:
        for row in self.history:
            r = row["rolling_success"]
            if not np.isnan(r) and r >= threshold:
                return row["step"]
        return None


def epsilon_at(step: int, total: int, start: float, end: float) -> float:
    if total <= 1:
        return end
    frac = min(step / (total - 1), 1.0)
    return start + (end - start) * frac


def label_from_trial(outcome, v_target: float) -> tuple[int, float | None]:
    """Self-supervised labels: closure test gives G; residual defined on success."""
    g = int(outcome.success)
    return g, (true_residual(v_target, outcome.v_true) if g else None)


def _rolling(window: deque, capacity: int) -> float:
    if len(window) < capacity:
        return float("nan")
    return float(np.mean(window))


def _check_finite(loss: LossValue, step: int):
    if not np.isfinite(loss.total):
        raise TrainingDiverged(f"non-finite loss at step {step}")


def apply_static_update(gen: Generator, opt: SGD, q_gs: np.ndarray,
                        pixel: tuple[int, int, int], label: int,
                        positive_weight: float = 1.0,
                        negative_weight: float = 1.0) -> LossValue:
    """Pixel-masked BCE step on the static head; all other pixels get zero grad.

    The class weights rescale the per-sample gradient to counter the
    failure-heavy label stream of self-supervised exploration, which would
    otherwise saturate the whole map toward zero before successes arrive.
    """
    i, j, k = pixel
    q = float(q_gs[k, i, j, 0])
    gen.zero_grads()
    d = np.zeros_like(q_gs)
    d[k, i, j, 0] = bce_logit_grad(q, label) * (positive_weight if label == 1 else negative_weight)
    gen.backward_static(d)
    opt.step()
    return combined_loss(q, label, 0.0, 0.0)


def apply_mobile_update(gen: Generator, opt: SGD,
                        q_m: np.ndarray | None, q_gd: np.ndarray | None,
                        pick_value: float, pixel: tuple[int, int, int],
                        label: int, delta_bar: float | None,
                        positive_weight: float = 1.0,
                        negative_weight: float = 1.0) -> LossValue:
    """Pixel-masked combined step: BCE into the dynamic head (when present),
    label-masked Huber into the moving head. Without a dynamic head the grasp
    term is diagnostic only (no trainable grasp path exists)."""
    i, j, k = pixel
    gen.zero_grads()
    d_qgd = None
    if gen.dynamic_head is not None:
        d_qgd = np.zeros_like(q_gd)
        d_qgd[k, i, j, 0] = bce_logit_grad(float(q_gd[k, i, j, 0]), label) \
            * (positive_weight if label == 1 else negative_weight)
    d_qm = None
    delta = float(q_m[k, i, j, 0]) if q_m is not None else 0.0
    if gen.moving_head is not None and label == 1:
        d_qm = np.zeros_like(q_m)
        d_qm[k, i, j, 0] = huber_grad(delta, delta_bar)
    gen.backward_dynamic(d_qgd, d_qm)
    opt.step()
    return combined_loss(pick_value, label, delta, delta_bar if delta_bar is not None else 0.0)


def _make_optimizer(gen: Generator, cfg) -> SGD:
    return SGD(
        gen.named_params(trainable_only=True),
        gen.named_grads(trainable_only=True),
        lr=cfg.train.lr,
        momentum=cfg.train.momentum,
        weight_decay=cfg.train.weight_decay,
        lr_scale={
            "moving_head.": cfg.train.moving_lr_scale,
            "static_head.": cfg.train.head_lr_scale,
            "dynamic_head.": cfg.train.head_lr_scale,
        },
        clip_norm=cfg.train.grad_clip,
    )


def train_static(cfg, seed: int, steps: int | None = None) -> StageResult:
    """Stage 1: stationary pinches labeled by the grasp oracle."""
    gcfg = cfg.generator
    init_seed = int(np.random.default_rng([seed, STATIC_SALT, 0]).integers(2**31))
    gen = Generator(dataclasses.replace(gcfg, init_seed=init_seed), wiring=MethodVariant.BL.wiring)
    gen.frame = cfg.frame
    opt = _make_optimizer(gen, cfg)
    total = cfg.train.static_steps if steps is None else steps
    window: deque = deque(maxlen=cfg.train.rolling_window)
    history, records = [], []
    for step in range(total):
        rng = np.random.default_rng([seed, STATIC_SALT, 1 + step])
        scene_seed = int(rng.integers(2**63))
        scene = scene_from_seed(scene_seed, cfg.scene, cfg.train.n_objects)
        stack = build_rotation_stack(render_heightmap(scene, cfg.frame), gcfg.rotations)
        eps = epsilon_at(step, total, cfg.train.epsilon_start, cfg.train.epsilon_end)
        try:
            _, grasp, info = plan_action(gen, stack, 0.15, cfg.frame, MethodVariant.BL, eps, rng)
        except ValueError as exc:
            raise TrainingDiverged(f"non-finite maps at step {step}: {exc}") from exc
        label = int(grasp_oracle(scene, grasp.x, grasp.y, grasp.theta, cfg.gripper))
        loss = apply_static_update(gen, opt, info["q_gs"], grasp.pixel, label,
                                   cfg.train.positive_weight, cfg.train.negative_weight)
        _check_finite(loss, step)
        window.append(label)
        rolling = _rolling(window, cfg.train.rolling_window)
        records.append(TrialRecord(
            step=step, stage="static", workspace=0, scene_seed=scene_seed, sim_seed=0,
            v_cmd=0.0, v_hat=0.0, x=grasp.x, y=grasp.y, theta=grasp.theta, pixel=grasp.pixel,
            label=label, delta_bar=None, v_true=0.0, residual_pred=0.0,
        ))
        history.append({
            "step": step, "stage": "static", "workspace": 0, "v": 0.0, "label": label,
            "loss_total": loss.total, "loss_grasp": loss.grasp_term, "loss_move": loss.move_term,
            "rolling_success": rolling, "epsilon": eps,
        })
    state = TrainingState(step=total, params=gen.named_params(), momentum=opt.momentum_state(),
                          recent_labels=list(window))
    return StageResult(generator=gen, history=history, records=records, state=state)


def build_mobile_generator(cfg, variant: MethodVariant, static_params: dict | None, seed: int) -> Generator:
    gcfg = cfg.generator
    init_seed = int(np.random.default_rng([seed, MOBILE_SALT, _variant_id(variant), 0]).integers(2**31))
    gen = Generator(dataclasses.replace(gcfg, init_seed=init_seed), wiring=variant.wiring)
    gen.frame = cfg.frame
    if gen.wiring.use_static:
        if static_params is None:
            raise ValueError(f"variant {variant.value} needs a stage-1 checkpoint")
        stage1 = {k: v for k, v in static_params.items()
                  if k.startswith(("perception1.", "static_head."))}
        gen.load_named(stage1)
        gen.freeze_stage1()
    return gen


def _variant_id(variant: MethodVariant) -> int:
    return list(MethodVariant).index(variant)


def _stage1_digest(gen: Generator) -> str:
    named = gen.named_params()
    return params_digest({k: v for k, v in named.items()
                          if k.startswith(("perception1.", "static_head."))})


def train_mobile(cfg, variant: MethodVariant, static_params: dict | None, seed: int,
                 steps: int | None = None, resume_state: TrainingState | None = None,
                 stop_after: int | None = None) -> StageResult:
    """Stage 2: mobile grasps under the velocity-error model.

    The grasp term always updates the dynamic head (when wired); the residual
    term updates the moving head only on successful trials. Stage-1 weights
    are frozen and hash-checked every ``freeze_check_every`` steps.
    """
    if not variant.needs_stage2:
        raise ValueError("BL has no stage-2 training")
    gen = build_mobile_generator(cfg, variant, static_params, seed)
    opt = _make_optimizer(gen, cfg)
    total = (cfg.train.mobile_workspaces * cfg.train.mobile_steps_per_workspace
             if steps is None else steps)
    window: deque = deque(maxlen=cfg.train.rolling_window)
    start_step = 0
    if resume_state is not None:
        gen.load_named(resume_state.params)
        opt.load_momentum(resume_state.momentum)
        window.extend(resume_state.recent_labels)
        start_step = resume_state.step
    frozen_digest = _stage1_digest(gen) if gen.wiring.use_static else None

    history, records = [], []
    end_step = total if stop_after is None else min(stop_after, total)
    for step in range(start_step, end_step):
        workspace = step % cfg.train.mobile_workspaces
        rng = np.random.default_rng([seed, MOBILE_SALT, _variant_id(variant), 1 + step])
        scene_seed = int(rng.integers(2**63))
        sim_seed = int(rng.integers(2**63))
        v = float(rng.uniform(*cfg.train.v_train_range))
        scene = scene_from_seed(scene_seed, cfg.scene, cfg.train.n_objects)
        stack = build_rotation_stack(render_heightmap(scene, cfg.frame), cfg.generator.rotations)
        eps = epsilon_at(step, total, cfg.train.epsilon_start, cfg.train.epsilon_end)
        try:
            move, grasp, info = plan_action(gen, stack, v, cfg.frame, variant, eps, rng)
        except ValueError as exc:
            raise TrainingDiverged(f"non-finite maps at step {step}: {exc}") from exc
        outcome = simulate_mobile_grasp(
            scene, move, grasp, cfg.gripper, cfg.error_model,
            np.random.default_rng(sim_seed), v_target=v,
            approach_distance=cfg.train.approach_distance, overhead=cfg.train.grasp_overhead,
        )
        label, delta_bar = label_from_trial(outcome, v)
        i, j, k = grasp.pixel
        pick_value = float(info["pick_map"][i, j, k])
        loss = apply_mobile_update(gen, opt, info["q_m"], info["q_gd"], pick_value,
                                   grasp.pixel, label, delta_bar,
                                   cfg.train.positive_weight, cfg.train.negative_weight)
        _check_finite(loss, step)
        if frozen_digest is not None and (step + 1) % cfg.train.freeze_check_every == 0:
            if _stage1_digest(gen) != frozen_digest:
                raise FrozenWeightsMutated(f"stage-1 weights changed by step {step}")
        window.append(label)
        rolling = _rolling(window, cfg.train.rolling_window)
        records.append(TrialRecord(
            step=step, stage="mobile", workspace=workspace, scene_seed=scene_seed,
            sim_seed=sim_seed, v_cmd=v, v_hat=move.v_hat, x=grasp.x, y=grasp.y,
            theta=grasp.theta, pixel=grasp.pixel, label=label, delta_bar=delta_bar,
            v_true=outcome.v_true, residual_pred=info["residual"],
        ))
        history.append({
            "step": step, "stage": "mobile", "workspace": workspace, "v": v, "label": label,
            "loss_total": loss.total, "loss_grasp": loss.grasp_term, "loss_move": loss.move_term,
            "rolling_success": rolling, "epsilon": eps,
        })
    if frozen_digest is not None and _stage1_digest(gen) != frozen_digest:
        raise FrozenWeightsMutated("stage-1 weights changed during training")
    state = TrainingState(step=end_step, params=gen.named_params(),
                          momentum=opt.momentum_state(), recent_labels=list(window))
    return StageResult(generator=gen, history=history, records=records, state=state)


def single_pixel_update(gen: Generator, opt: SGD, record: TrialRecord, cfg) -> LossValue:
    """Recompute the forward pass for a recorded trial and apply its update.

    The loss acts only at the recorded pixel/rotation; every other output
    pixel contributes zero gradient.
    """
    scene = scene_from_seed(record.scene_seed, cfg.scene, cfg.train.n_objects)
    stack = build_rotation_stack(render_heightmap(scene, cfg.frame), cfg.generator.rotations)
    i, j, k = record.pixel
    if record.stage == "static":
        _, q_gs = gen.forward_static(stack)
        if not (0 <= i < q_gs.shape[1] and 0 <= j < q_gs.shape[2] and 0 <= k < q_gs.shape[0]):
            raise IndexError("record pixel out of bounds for this generator")
        return apply_static_update(gen, opt, q_gs, record.pixel, record.label)
    q_m, q_gd = gen.forward_dynamic(stack, record.v_cmd)
    ref = q_gd if q_gd is not None else q_m
    if ref is None or not (0 <= i < ref.shape[1] and 0 <= j < ref.shape[2] and 0 <= k < ref.shape[0]):
        raise IndexError("record pixel out of bounds for this generator")
    pick = float(q_gd[k, i, j, 0]) if q_gd is not None else 0.5
    return apply_mobile_update(gen, opt, q_m, q_gd, pick, record.pixel,
                               record.label, record.delta_bar)


def replay_record(record: TrialRecord, cfg) -> int:
    """Re-simulate a recorded trial from its seeds; returns the label."""
    from .policy import GraspPrimitive, MovePrimitive

    scene = scene_from_seed(record.scene_seed, cfg.scene, cfg.train.n_objects)
    if record.stage == "static":
        return int(grasp_oracle(scene, record.x, record.y, record.theta, cfg.gripper))
    outcome = simulate_mobile_grasp(
        scene,
        MovePrimitive(v_hat=record.v_hat),
        GraspPrimitive(x=record.x, y=record.y, theta=record.theta, pixel=record.pixel),
        cfg.gripper, cfg.error_model, np.random.default_rng(record.sim_seed),
        v_target=record.v_cmd, approach_distance=cfg.train.approach_distance,
        overhead=cfg.train.grasp_overhead,
    )
    return int(outcome.success)


# ---------------------------------------------------------------------------
# Metrics / state persistence

METRIC_COLUMNS = ("step", "stage", "workspace", "v", "label",
                  "loss_total", "loss_grasp", "loss_move", "rolling_success", "epsilon")


def metrics_csv_text(history: list[dict]) -> str:
    out = io.StringIO()
    out.write(",".join(METRIC_COLUMNS) + "\n")
    for row in history:
        out.write(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                           for c in METRIC_COLUMNS) + "\n")
    return out.getvalue()


def save_state(path, state: TrainingState) -> None:
    arrays = {f"p::{k}": v for k, v in state.params.items()}
    arrays |= {f"m::{k}": v for k, v in state.momentum.items()}
    arrays["step"] = np.array(state.step, dtype=np.int64)
    arrays["recent_labels"] = np.array(state.recent_labels, dtype=np.int64)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_state(path) -> TrainingState:
    data = np.load(path)
    params = {k[3:]: data[k] for k in data.files if k.startswith("p::")}
    momentum = {k[3:]: data[k] for k in data.files if k.startswith("m::")}
    return TrainingState(
        step=int(data["step"]),
        params=params,
        momentum=momentum,
        recent_labels=[int(x) for x in data["recent_labels"]],
    )
