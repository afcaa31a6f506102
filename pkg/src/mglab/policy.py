"""Mobile-grasping action generator: three heads over a shared rotation stack.

A perception trunk maps each rotated copy of the input image to a feature
grid. The static-grasp head scores stationary pinches per pixel. A second
perception stage consumes the trunk features concatenated with the static
map, gets a tiled constant velocity block appended, and feeds two heads: a
residual-velocity regressor and a dynamic-grasp classifier (which also sees
the residual map, gradient-stopped). Action selection is a global argmax
over the dynamic map with deterministic lexicographic tie-breaking.
"""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass, field

import numpy as np

from .heightmap import FrameConfig, RotationStack, pixel_to_world, rotation_matrix
from .nn import Conv2d, HardClip, LinearResample2d, ResidualBlock, Sequential, ShapeError, Sigmoid
from .scene import V_MAX, V_MIN

EXPLORE_TOP_FRACTION = 0.05


@dataclass(frozen=True)
class Wiring:
    """Which generator modules exist (the ablation axes)."""

    use_static: bool = True
    use_moving: bool = True
    use_dynamic: bool = True


class MethodVariant(str, enum.Enum):
    """The five module-wiring configurations compared in the ablation."""

    BL = "BL"
    WO_SG = "WO_SG"
    WO_M = "WO_M"
    WO_DG = "WO_DG"
    PP = "PP"

    @property
    def wiring(self) -> Wiring:
        return _VARIANT_WIRING[self]

    @property
    def needs_stage2(self) -> bool:
        return self is not MethodVariant.BL

    @property
    def grasp_from_static(self) -> bool:
        """BL and WO_DG take the grasp pixel from the static map."""
        return self in (MethodVariant.BL, MethodVariant.WO_DG)


_VARIANT_WIRING = {
    MethodVariant.BL: Wiring(use_static=True, use_moving=False, use_dynamic=False),
    MethodVariant.WO_SG: Wiring(use_static=False, use_moving=True, use_dynamic=True),
    MethodVariant.WO_M: Wiring(use_static=True, use_moving=False, use_dynamic=True),
    MethodVariant.WO_DG: Wiring(use_static=True, use_moving=True, use_dynamic=False),
    MethodVariant.PP: Wiring(use_static=True, use_moving=True, use_dynamic=True),
}


@dataclass(frozen=True)
class GeneratorConfig:
    grid: int = 64
    rotations: int = 8
    trunk_channels: int = 32
    vel_channels: int = 16
    residual_clamp: float = 0.05
    height_scale: float = 10.0
    init_seed: int = 0


def trunk_spatial(grid: int) -> int:
    """Feature-grid edge length: stride-2 conv then a fixed 5/7 bilinear resize."""
    h1 = (grid + 2 - 3) // 2 + 1
    return int(round(h1 * 5.0 / 7.0))


@dataclass
class AffordanceMap:
    """Per-pixel, per-rotation success probabilities in [0, 1]."""

    values: np.ndarray  # (H, W, R)


@dataclass
class ResidualMap:
    """Per-pixel, per-rotation residual velocity [m/s], clamped."""

    values: np.ndarray  # (H, W, R)
    clamp: float = 0.05


@dataclass(frozen=True)
class GraspPrimitive:
    x: float
    y: float
    theta: float
    pixel: tuple[int, int, int]  # (i, j, rot_k)


@dataclass(frozen=True)
class MovePrimitive:
    v_hat: float


class Head:
    """1x1 conv + upsample to full resolution + output nonlinearity.

    The conv starts at zero so untrained heads emit neutral maps (0.5 after
    sigmoid, 0 residual velocity) instead of saturating their output range.
    """

    def __init__(self, in_ch: int, trunk_hw: tuple[int, int], grid: int, act, rng, dtype):
        self.pre = Sequential([
            Conv2d(in_ch, 1, 1, rng=rng, dtype=dtype, init="zero"),
            LinearResample2d.bilinear(trunk_hw, (grid, grid), dtype=dtype),
        ])
        self.act = act

    @property
    def trainable(self):
        return self.pre.trainable

    @trainable.setter
    def trainable(self, value):
        self.pre.trainable = value

    def forward(self, x):
        return self.act.forward(self.pre.forward(x))

    def backward_from_preact(self, d):
        """Backward skipping the output nonlinearity (fused-loss gradients)."""
        return self.pre.backward(d)

    def backward_from_output(self, d):
        return self.pre.backward(self.act.backward(d))

    def named_params(self, prefix):
        return self.pre.named_params(prefix)

    def named_grads(self, prefix):
        return self.pre.named_grads(prefix)

    def zero_grads(self):
        self.pre.zero_grads()

    def load_named(self, named, prefix):
        self.pre.load_named(named, prefix)


class Generator:
    """The wired action generator; frozen stage-1 parts are plain flags here."""

    def __init__(self, cfg: GeneratorConfig, wiring: Wiring = Wiring(), dtype=np.float32):
        self.cfg = cfg
        self.wiring = wiring
        self.dtype = dtype
        self.frame: FrameConfig | None = None
        rng = np.random.default_rng(cfg.init_seed)
        g, c = cfg.grid, cfg.trunk_channels
        h1 = (g + 2 - 3) // 2 + 1
        t = trunk_spatial(g)
        self.trunk_hw = (t, t)

        self.perception1 = Sequential([
            Conv2d(4, c, 3, stride=2, pad=1, rng=rng, dtype=dtype),
            ResidualBlock(c, rng=rng, dtype=dtype),
            ResidualBlock(c, rng=rng, dtype=dtype),
            Conv2d(c, c, 3, stride=1, pad=1, rng=rng, dtype=dtype),
            LinearResample2d.bilinear((h1, h1), (t, t), dtype=dtype),
        ])
        self.static_head = Head(c, (t, t), g, Sigmoid(), rng, dtype) if wiring.use_static else None

        p2_in = c + 1 if wiring.use_static else c
        self.perception2 = Sequential([
            Conv2d(p2_in, c, 3, stride=1, pad=1, rng=rng, dtype=dtype),
            ResidualBlock(c, rng=rng, dtype=dtype),
            ResidualBlock(c, rng=rng, dtype=dtype),
            Conv2d(c, c, 3, stride=1, pad=1, rng=rng, dtype=dtype),
        ])
        self.moving_head = (
            Head(c + cfg.vel_channels, (t, t), g, HardClip(cfg.residual_clamp), rng, dtype)
            if wiring.use_moving else None
        )
        dyn_in = c + cfg.vel_channels + (1 if wiring.use_moving else 0)
        self.dynamic_head = Head(dyn_in, (t, t), g, Sigmoid(), rng, dtype) if wiring.use_dynamic else None

        self._pool_qgs = LinearResample2d.avg_pool((g, g), (t, t), dtype=dtype)
        self._pool_qm = LinearResample2d.avg_pool((g, g), (t, t), dtype=dtype)

    # -- parameter plumbing ------------------------------------------------

    def _groups(self):
        groups = {"perception1": self.perception1, "perception2": self.perception2}
        if self.static_head is not None:
            groups["static_head"] = self.static_head
        if self.moving_head is not None:
            groups["moving_head"] = self.moving_head
        if self.dynamic_head is not None:
            groups["dynamic_head"] = self.dynamic_head
        return groups

    def stage1_groups(self) -> tuple[str, ...]:
        return ("perception1", "static_head") if self.wiring.use_static else ()

    def named_params(self, trainable_only: bool = False) -> dict[str, np.ndarray]:
        out = {}
        for name, group in self._groups().items():
            if trainable_only and not group.trainable:
                continue
            out.update(group.named_params(f"{name}."))
        return out

    def named_grads(self, trainable_only: bool = False) -> dict[str, np.ndarray]:
        out = {}
        for name, group in self._groups().items():
            if trainable_only and not group.trainable:
                continue
            out.update(group.named_grads(f"{name}."))
        return out

    def zero_grads(self):
        for group in self._groups().values():
            group.zero_grads()

    def load_named(self, named: dict[str, np.ndarray]):
        for name, group in self._groups().items():
            group.load_named({k: v for k, v in named.items() if k.startswith(f"{name}.")}, f"{name}.")

    def freeze_stage1(self):
        """Stage-2 contract: stage-1 weights receive zero updates."""
        self.perception1.trainable = False
        if self.static_head is not None:
            self.static_head.trainable = False

    # -- forward / backward -------------------------------------------------

    def prep_input(self, stack: RotationStack) -> np.ndarray:
        if stack.rotations != self.cfg.rotations or stack.maps.shape[1] != self.cfg.grid:
            raise ShapeError(
                f"stack {stack.maps.shape} incompatible with generator grid={self.cfg.grid} R={self.cfg.rotations}"
            )
        x = stack.maps.astype(self.dtype)  # already (R, H, W, 4)
        x[..., 3] *= self.cfg.height_scale
        return x

    def forward_static(self, stack: RotationStack):
        """Trunk features and the static affordance map (R,H,W,1)."""
        x = self.prep_input(stack)
        mu_s = self.perception1.forward(x)
        q_gs = self.static_head.forward(mu_s) if self.static_head is not None else None
        return mu_s, q_gs

    def forward_dynamic(self, stack: RotationStack, v: float, return_intermediates: bool = False):
        """Residual map and dynamic affordance map for commanded velocity ``v``."""
        if not V_MIN <= v <= V_MAX:
            raise ValueError(f"velocity {v} outside actuator limits")
        mu_s, q_gs = self.forward_static(stack)
        if self.wiring.use_static:
            q_gs_small = self._pool_qgs.forward(q_gs)  # gradient-stopped: frozen path
            mu_s_star = np.concatenate([mu_s, q_gs_small], axis=3)
        else:
            mu_s_star = mu_s
        mu_d = self.perception2.forward(mu_s_star)
        vel = np.full(mu_d.shape[:3] + (self.cfg.vel_channels,), v, dtype=self.dtype)
        mu_d_star = np.concatenate([mu_d, vel], axis=3)

        q_m = self.moving_head.forward(mu_d_star) if self.moving_head is not None else None
        q_gd = None
        if self.dynamic_head is not None:
            if self.moving_head is not None:
                q_m_small = self._pool_qm.forward(q_m)  # gradient-stopped by design
                dyn_in = np.concatenate([mu_d_star, q_m_small], axis=3)
            else:
                dyn_in = mu_d_star
            q_gd = self.dynamic_head.forward(dyn_in)
        if return_intermediates:
            return q_m, q_gd, {
                "mu_s": mu_s, "q_gs": q_gs, "mu_s_star": mu_s_star,
                "mu_d": mu_d, "mu_d_star": mu_d_star,
            }
        return q_m, q_gd

    def backward_static(self, d_qgs_logit: np.ndarray):
        """Stage-1 backward from the static head's pre-sigmoid gradient."""
        d_mu = self.static_head.backward_from_preact(d_qgs_logit)
        self.perception1.backward(d_mu)

    def backward_dynamic(self, d_qgd_logit: np.ndarray | None, d_qm_out: np.ndarray | None):
        """Stage-2 backward; gradients stop at the frozen stage-1 boundary.

        ``d_qgd_logit`` feeds the dynamic head at its pre-sigmoid output;
        ``d_qm_out`` feeds the moving head at its clamped output. The residual
        map's copy inside the dynamic head's input is gradient-stopped, so on
        failure trials the moving head receives exactly zero gradient.
        """
        c = self.cfg.trunk_channels
        width = c + self.cfg.vel_channels
        d_mu_d_star = None
        if d_qgd_logit is not None and self.dynamic_head is not None:
            d_dyn_in = self.dynamic_head.backward_from_preact(d_qgd_logit)
            d_mu_d_star = d_dyn_in[..., :width]
        if d_qm_out is not None and self.moving_head is not None:
            d_moving = self.moving_head.backward_from_output(d_qm_out)
            d_mu_d_star = d_moving[..., :width] if d_mu_d_star is None else d_mu_d_star + d_moving[..., :width]
        if d_mu_d_star is None:
            return
        d_mu_s_star = self.perception2.backward(np.ascontiguousarray(d_mu_d_star[..., :c]))
        if not self.wiring.use_static and self.perception1.trainable:
            self.perception1.backward(d_mu_s_star)


def to_affordance(q: np.ndarray) -> AffordanceMap:
    """(R,H,W,1) network output -> (H,W,R) map."""
    return AffordanceMap(values=np.transpose(q[..., 0], (1, 2, 0)))


def to_residual(q: np.ndarray, clamp: float) -> ResidualMap:
    return ResidualMap(values=np.transpose(q[..., 0], (1, 2, 0)), clamp=clamp)


@functools.lru_cache(maxsize=8)
def valid_action_mask(grid: int, rotations: int) -> np.ndarray:
    """(H, W, R) mask of executable pixels.

    A pixel of a rotated copy is a valid action only if its un-rotated
    position lies on the original grid; border-fill pixels map to world
    points outside the frame, which the simulator's preconditions reject.
    """
    c = (grid - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(grid, dtype=np.float64),
                         np.arange(grid, dtype=np.float64), indexing="ij")
    di, dj = ii - c, jj - c
    mask = np.empty((grid, grid, rotations), dtype=bool)
    for k in range(rotations):
        m = rotation_matrix(k, rotations)
        si = m[0, 0] * di + m[1, 0] * dj + c
        sj = m[0, 1] * di + m[1, 1] * dj + c
        mask[:, :, k] = (si >= 0) & (si <= grid - 1) & (sj >= 0) & (sj <= grid - 1)
    mask.setflags(write=False)
    return mask


def argmax_pixel(values: np.ndarray, mask: np.ndarray | None = None) -> tuple[int, int, int]:
    """Argmax of an (H,W,R) map over executable pixels; ties break to
    smallest (k, i, j)."""
    if not np.all(np.isfinite(values)):
        raise ValueError("map contains non-finite values")
    if mask is not None:
        values = np.where(mask, values, -np.inf)
    by_rot = values.transpose(2, 0, 1)  # (R,H,W): flat order is (k,i,j)
    k, i, j = np.unravel_index(int(np.argmax(by_rot)), by_rot.shape)
    return int(i), int(j), int(k)


def action_determination(
    q_m: ResidualMap | None,
    q_gd: AffordanceMap,
    v: float,
    frame: FrameConfig,
    rotations: int,
) -> tuple[MovePrimitive, GraspPrimitive]:
    """Read the action primitives from the output maps.

    The grasp point/orientation comes from the dynamic map's argmax; the
    residual velocity is the residual map's value at that same pixel, added
    to the user velocity and clamped to the actuator limits.
    """
    i, j, k = argmax_pixel(q_gd.values, valid_action_mask(q_gd.values.shape[0], rotations))
    theta = k * (2.0 * math.pi / rotations)
    x, y = pixel_to_world(i, j, k, rotations, frame)
    residual = float(q_m.values[i, j, k]) if q_m is not None else 0.0
    v_hat = float(np.clip(v + residual, V_MIN, V_MAX))
    return MovePrimitive(v_hat=v_hat), GraspPrimitive(x=x, y=y, theta=theta, pixel=(i, j, k))


def top_candidates(values: np.ndarray, fraction: float = EXPLORE_TOP_FRACTION,
                   mask: np.ndarray | None = None) -> np.ndarray:
    """Flat (k,i,j)-order indices of the top-scoring fraction of pixels.

    Pixels tied with the cutoff score are all included, so a constant map
    yields the whole executable grid (uniform exploration at init).
    """
    if mask is not None:
        values = np.where(mask, values, -np.inf)
    flat = values.transpose(2, 0, 1).reshape(-1)
    finite = np.isfinite(flat)
    n_valid = int(finite.sum())
    if n_valid == 0:
        raise ValueError("no finite candidate pixels in the map")
    n_top = max(1, math.ceil(fraction * n_valid))
    cutoff = np.sort(flat[finite])[n_valid - n_top]
    return np.flatnonzero(flat >= cutoff)


def exploration_action(
    values: np.ndarray, epsilon: float, rng: np.random.Generator,
    mask: np.ndarray | None = None,
) -> tuple[int, int, int]:
    """Epsilon-greedy pixel choice: argmax, or uniform over the top 5% scores."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must be in [0, 1]")
    shape = values.transpose(2, 0, 1).shape
    if epsilon > 0.0 and rng.random() < epsilon:
        candidates = top_candidates(values, mask=mask)
        flat = int(candidates[int(rng.integers(0, len(candidates)))])
        k, i, j = np.unravel_index(flat, shape)
        return int(i), int(j), int(k)
    return argmax_pixel(values, mask)


def plan_action(
    gen: Generator,
    stack: RotationStack,
    v: float,
    frame: FrameConfig,
    variant: MethodVariant = MethodVariant.PP,
    epsilon: float = 0.0,
    rng: np.random.Generator | None = None,
):
    """Variant-aware action selection used by both training and evaluation.

    Returns (move, grasp, info); info carries the raw maps and the predicted
    residual at the chosen pixel.
    """
    rng = rng or np.random.default_rng(0)
    if variant is MethodVariant.BL:
        _, q_gs = gen.forward_static(stack)
        q_m = q_gd = None
        pick_map = to_affordance(q_gs).values
    else:
        q_m, q_gd, inter = gen.forward_dynamic(stack, v, return_intermediates=True)
        q_gs = inter["q_gs"]
        if variant.grasp_from_static:
            pick_map = to_affordance(q_gs).values
        else:
            pick_map = to_affordance(q_gd).values
    mask = valid_action_mask(gen.cfg.grid, gen.cfg.rotations)
    i, j, k = exploration_action(pick_map, epsilon, rng, mask)
    theta = k * (2.0 * math.pi / gen.cfg.rotations)
    x, y = pixel_to_world(i, j, k, gen.cfg.rotations, frame)
    residual = float(q_m[k, i, j, 0]) if q_m is not None else 0.0
    v_hat = float(np.clip(v + residual, V_MIN, V_MAX))
    info = {"residual": residual, "pick_map": pick_map,
            "q_gs": q_gs, "q_m": q_m, "q_gd": q_gd}
    return MovePrimitive(v_hat=v_hat), GraspPrimitive(x=x, y=y, theta=theta, pixel=(i, j, k)), info


def save_generator(path, gen: Generator, stage: str, extra_meta: dict | None = None) -> None:
    """Checkpoint a generator: parameter blobs plus architecture metadata."""
    from dataclasses import asdict

    from .nn import save_params

    meta = {
        "stage": stage,
        "generator": asdict(gen.cfg),
        "wiring": asdict(gen.wiring),
    }
    meta.update(extra_meta or {})
    save_params(path, gen.named_params(), meta)


def load_generator(path, frame: FrameConfig | None = None) -> tuple[Generator, dict]:
    """Rebuild a generator from a checkpoint written by :func:`save_generator`."""
    from .nn import CheckpointError, load_params

    named, meta = load_params(path)
    try:
        cfg = GeneratorConfig(**meta["generator"])
        wiring = Wiring(**meta["wiring"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint {path} lacks generator metadata: {exc}") from exc
    gen = Generator(cfg, wiring=wiring)
    gen.frame = frame
    gen.load_named(named)
    return gen, meta


def export_map_images(values: np.ndarray, out_dir, prefix: str, signed: bool = False) -> list:
    """Write one false-color PNG per rotation channel of an (H,W,R) map."""
    from pathlib import Path

    import matplotlib
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    if signed:
        bound = max(float(np.abs(values).max()), 1e-9)
        norm = (values / bound + 1.0) / 2.0
        cmap = matplotlib.colormaps["coolwarm"]
    else:
        norm = np.clip(values, 0.0, 1.0)
        cmap = matplotlib.colormaps["viridis"]
    for k in range(values.shape[2]):
        rgba = cmap(norm[:, :, k])
        rgb = np.round(rgba[:, :, :3] * 255.0).astype(np.uint8)
        path = out_dir / f"{prefix}_rot{k:02d}.png"
        Image.fromarray(rgb, mode="RGB").save(path)
        paths.append(path)
    return paths
