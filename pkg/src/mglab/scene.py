"""Domain-randomized scenes, grasp geometry, and the mobile-grasp simulator.

Objects are connected unions of oriented rectangles. A vertical two-finger
pinch is resolved analytically: the finger band is intersected with the
rectangle union along the closing axis, and the pinched cross-section decides
success. Base-motion velocity error enters grasp success only through a
trigger-lag positional offset along the motion axis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

SCENE_SCHEMA_VERSION = 1

# Actuator limits on the commanded base velocity [m/s].
V_MIN = 0.05
V_MAX = 0.30


class SceneSampleError(RuntimeError):
    """Retry budget exhausted while sampling a valid object or scene."""


@dataclass(frozen=True)
class RectPart:
    """One oriented rectangle: size[0] along the yaw axis, size[1] across it."""

    center: tuple[float, float]
    size: tuple[float, float]
    yaw: float
    height: float
    color: tuple[float, float, float]

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        return np.array([c, s]), np.array([-s, c])

    def corners(self) -> np.ndarray:
        """(4, 2) world corner coordinates in ring order."""
        u, t = self.axes()
        hw, hl = self.size[0] / 2.0, self.size[1] / 2.0
        c = np.asarray(self.center)
        return np.array([c + su * hw * u + st * hl * t
                         for su, st in ((-1, -1), (1, -1), (1, 1), (-1, 1))])


@dataclass
class ObjectSpec:
    """A target object: a connected union of rectangle parts."""

    parts: list[RectPart]

    def is_connected(self) -> bool:
        n = len(self.parts)
        if n <= 1:
            return True
        seen = {0}
        frontier = [0]
        while frontier:
            i = frontier.pop()
            for j in range(n):
                if j not in seen and rects_intersect(self.parts[i], self.parts[j]):
                    seen.add(j)
                    frontier.append(j)
        return len(seen) == n


@dataclass
class SceneSpec:
    """One randomized workspace: floor color plus posed objects."""

    workspace_color: tuple[float, float, float]
    objects: list[ObjectSpec]
    seed: int

    def all_parts(self) -> list[RectPart]:
        return [p for o in self.objects for p in o.parts]


@dataclass(frozen=True)
class GripperConfig:
    """Parallel two-finger gripper closing horizontally after a vertical approach."""

    max_opening: float = 0.08
    finger_width: float = 0.012
    close_tolerance: float = 0.005  # residual opening at/below this counts as empty
    min_pinch_height: float = 0.01  # contact cross-section must be taller than this

    def __post_init__(self):
        if not self.max_opening > self.close_tolerance > 0:
            raise ValueError("require max_opening > close_tolerance > 0")


@dataclass(frozen=True)
class VelocityErrorModel:
    """Systematic drift polynomial plus white noise and a grasp-trigger lag.

    ``drift_coeffs`` are polynomial coefficients in increasing order, so the
    default (0.005, -0.1) means drift(v) = 0.005 - 0.1 v: a speed-dependent
    undershoot producing residuals of order 1e-3..1e-2 m/s.
    """

    drift_coeffs: tuple[float, ...] = (0.005, -0.1)
    noise_std: float = 0.002
    trigger_lag: float = 0.5

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        vs = np.linspace(V_MIN, V_MAX, 26)
        if np.any(np.abs(self.drift(vs)) >= vs):
            raise ValueError("|drift(v)| must stay below v over the actuator range")

    def drift(self, v):
        return np.polynomial.polynomial.polyval(v, self.drift_coeffs)


def zero_error_model() -> VelocityErrorModel:
    return VelocityErrorModel(drift_coeffs=(0.0,), noise_std=0.0, trigger_lag=0.5)


@dataclass
class TrialOutcome:
    """Result of one executed grasp attempt."""

    success: bool
    v_true: float
    x_effective: float
    elapsed: float


@dataclass(frozen=True)
class ObjectSamplerConfig:
    max_parts: int = 4
    width_range: tuple[float, float] = (0.02, 0.05)
    length_range: tuple[float, float] = (0.05, 0.12)
    height_range: tuple[float, float] = (0.02, 0.05)
    graspable_max: float = 0.07  # min cross-section of some part must not exceed this
    max_retries: int = 50


@dataclass(frozen=True)
class SceneSamplerConfig:
    x_range: tuple[float, float] = (-0.12, 0.12)
    y_range: tuple[float, float] = (-0.12, 0.12)
    min_separation: float = 0.04
    color_range: tuple[float, float] = (0.05, 0.95)
    max_retries: int = 200
    object_cfg: ObjectSamplerConfig = field(default_factory=ObjectSamplerConfig)


def rects_intersect(a: RectPart, b: RectPart, inflate: float = 0.0) -> bool:
    """Oriented-rectangle overlap via the separating-axis test.

    ``inflate`` widens each rectangle's extents, turning the test into an
    approximate minimum-separation check.
    """
    ca, cb = a.corners(), b.corners()
    for part, corners_other in ((a, cb), (b, ca)):
        u, t = part.axes()
        for axis, half in ((u, part.size[0] / 2.0), (t, part.size[1] / 2.0)):
            center_proj = float(np.dot(np.asarray(part.center), axis))
            other_proj = corners_other @ axis
            if other_proj.min() > center_proj + half + inflate or other_proj.max() < center_proj - half - inflate:
                return False
    return True


def sample_object(rng: np.random.Generator, cfg: ObjectSamplerConfig) -> ObjectSpec:
    """Sample a connected rectangle-union object in object-local coordinates.

    Guarantees at least one part with a graspable cross-section. Resamples
    internally on invalid draws and raises after ``max_retries`` failures.
    """
    for _ in range(cfg.max_retries):
        n_parts = int(rng.integers(1, cfg.max_parts + 1))
        parts: list[RectPart] = []
        for i in range(n_parts):
            size = (
                float(rng.uniform(*cfg.width_range)),
                float(rng.uniform(*cfg.length_range)),
            )
            yaw = float(rng.uniform(0.0, np.pi))
            height = float(rng.uniform(*cfg.height_range))
            color = tuple(rng.uniform(0.05, 0.95, size=3).tolist())
            if i == 0:
                center = (0.0, 0.0)
            else:
                anchor = parts[int(rng.integers(0, len(parts)))]
                u, t = anchor.axes()
                du = rng.uniform(-0.4, 0.4) * anchor.size[0]
                dt = rng.uniform(-0.4, 0.4) * anchor.size[1]
                c = np.asarray(anchor.center) + du * u + dt * t
                center = (float(c[0]), float(c[1]))
            parts.append(RectPart(center=center, size=size, yaw=yaw, height=height, color=color))
        obj = ObjectSpec(parts=parts)
        graspable = any(min(p.size) <= cfg.graspable_max for p in parts)
        if graspable and obj.is_connected():
            return obj
    raise SceneSampleError("could not sample a valid object within the retry budget")


def _posed(obj: ObjectSpec, shift: np.ndarray, angle: float) -> ObjectSpec:
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    parts = [
        RectPart(
            center=tuple((rot @ np.asarray(p.center) + shift).tolist()),
            size=p.size,
            yaw=p.yaw + angle,
            height=p.height,
            color=p.color,
        )
        for p in obj.parts
    ]
    return ObjectSpec(parts=parts)


def _inside_bounds(obj: ObjectSpec, cfg: SceneSamplerConfig) -> bool:
    for p in obj.parts:
        for cx, cy in p.corners():
            if not (cfg.x_range[0] <= cx <= cfg.x_range[1] and cfg.y_range[0] <= cy <= cfg.y_range[1]):
                return False
    return True


def _objects_separated(a: ObjectSpec, b: ObjectSpec, min_sep: float) -> bool:
    return not any(
        rects_intersect(pa, pb, inflate=min_sep) for pa in a.parts for pb in b.parts
    )


def sample_scene(rng: np.random.Generator, cfg: SceneSamplerConfig, n_objects: int = 1, seed: int = 0) -> SceneSpec:
    """Sample a workspace with ``n_objects`` non-overlapping posed objects."""
    if n_objects < 1:
        raise ValueError("n_objects must be >= 1")
    color = tuple(rng.uniform(*cfg.color_range, size=3).tolist())
    placed: list[ObjectSpec] = []
    for _ in range(n_objects):
        for attempt in range(cfg.max_retries):
            # resample shape and pose together: a sprawling union that cannot
            # fit should not burn the whole retry budget
            obj = sample_object(rng, cfg.object_cfg)
            shift = np.array([rng.uniform(*cfg.x_range), rng.uniform(*cfg.y_range)])
            posed = _posed(obj, shift, float(rng.uniform(0.0, 2 * np.pi)))
            if _inside_bounds(posed, cfg) and all(
                _objects_separated(posed, other, cfg.min_separation) for other in placed
            ):
                placed.append(posed)
                break
        else:
            raise SceneSampleError("could not place object within the retry budget")
    return SceneSpec(workspace_color=color, objects=placed, seed=seed)


def scene_from_seed(seed: int, cfg: SceneSamplerConfig, n_objects: int = 1) -> SceneSpec:
    """Deterministically rebuild the scene identified by ``seed``."""
    return sample_scene(np.random.default_rng(seed), cfg, n_objects=n_objects, seed=seed)


# ---------------------------------------------------------------------------
# Pinch geometry


def _clip_polygon(poly: np.ndarray, axis: int, bound: float, keep_below: bool) -> np.ndarray:
    """Clip a convex polygon against coordinate halfplane (Sutherland-Hodgman)."""
    out = []
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        ia = a[axis] <= bound if keep_below else a[axis] >= bound
        ib = b[axis] <= bound if keep_below else b[axis] >= bound
        if ia:
            out.append(a)
        if ia != ib:
            frac = (bound - a[axis]) / (b[axis] - a[axis])
            out.append(a + frac * (b - a))
    return np.array(out) if out else np.empty((0, 2))


def _band_interval(part: RectPart, gx: float, gy: float, theta: float, half_band: float):
    """Extent of ``part`` along the closing axis, within the finger band.

    The band is centered on the grasp point, runs along theta+90 deg, and is
    ``2*half_band`` wide. Returns (s_lo, s_hi) or None if disjoint.
    """
    ux, uy = np.cos(theta + np.pi / 2.0), np.sin(theta + np.pi / 2.0)
    tx, ty = np.cos(theta), np.sin(theta)
    rel = part.corners() - np.array([gx, gy])
    poly = np.stack([rel @ np.array([ux, uy]), rel @ np.array([tx, ty])], axis=1)
    poly = _clip_polygon(poly, axis=1, bound=half_band, keep_below=True)
    if len(poly) == 0:
        return None
    poly = _clip_polygon(poly, axis=1, bound=-half_band, keep_below=False)
    if len(poly) == 0:
        return None
    return float(poly[:, 0].min()), float(poly[:, 0].max())


@dataclass
class PinchResult:
    residual_opening: float
    contact_height: float
    collision: bool


def pinch_geometry(scene: SceneSpec, x: float, y: float, theta: float, grip: GripperConfig) -> PinchResult:
    """Resolve the antipodal pinch at (x, y) with wrist yaw ``theta``.

    Fingers start at +-max_opening/2 along theta+90 deg and close toward the
    grasp point. A finger descending into material is a collision. Otherwise
    the fingers stop at the extremes of the material inside the opening and
    the pinched cross-section is the residual opening.
    """
    half_open = grip.max_opening / 2.0
    intervals = []
    for part in scene.all_parts():
        span = _band_interval(part, x, y, theta, grip.finger_width / 2.0)
        if span is not None:
            intervals.append((span[0], span[1], part.height))

    collision = any(
        (lo < half_open < hi) or (lo < -half_open < hi) or (lo < -half_open and hi > half_open)
        for lo, hi, _ in intervals
    )
    inside = [(lo, hi, h) for lo, hi, h in intervals if -half_open <= lo and hi <= half_open]
    if collision or not inside:
        return PinchResult(residual_opening=0.0, contact_height=0.0, collision=collision)

    s_hi = max(hi for _, hi, _ in inside)
    s_lo = min(lo for lo, _, _ in inside)
    eps = 1e-12
    hi_h = max(h for _, hi, h in inside if hi >= s_hi - eps)
    lo_h = max(h for lo, _, h in inside if lo <= s_lo + eps)
    return PinchResult(
        residual_opening=s_hi - s_lo,
        contact_height=min(hi_h, lo_h),
        collision=False,
    )


def detect_grasp_success(residual_opening: float, grip: GripperConfig) -> bool:
    """Fully-closed end-effector (residual <= tolerance) means the pinch is empty."""
    if not 0.0 <= residual_opening <= grip.max_opening + 1e-12:
        raise ValueError("residual opening outside [0, max_opening]")
    return residual_opening > grip.close_tolerance


def grasp_oracle(scene: SceneSpec, x: float, y: float, theta: float, grip: GripperConfig) -> bool:
    """Ground-truth static pinch check standing in for a physics engine."""
    pinch = pinch_geometry(scene, x, y, theta, grip)
    if pinch.collision:
        return False
    return detect_grasp_success(pinch.residual_opening, grip) and pinch.contact_height > grip.min_pinch_height


def true_residual(v_target: float, v_true: float) -> float:
    """Correction that, added to the command, moves the realized velocity to target."""
    if v_target <= 0 or v_true <= 0:
        raise ValueError("velocities must be positive")
    return v_target - v_true


def simulate_mobile_grasp(
    scene: SceneSpec,
    move,
    grasp,
    grip: GripperConfig,
    err: VelocityErrorModel,
    rng: np.random.Generator,
    v_target: float | None = None,
    approach_distance: float = 1.25,
    overhead: float = 6.0,
) -> TrialOutcome:
    """Execute one mobile grasp under the velocity-error model.

    The grasp trigger is timed for travel at ``v_target`` (the planned
    velocity, defaulting to the command), so the closure point shifts by
    trigger_lag * (v_true - v_target) along the motion axis.
    """
    v_hat = move.v_hat
    if not V_MIN <= v_hat <= V_MAX:
        raise ValueError(f"commanded velocity {v_hat} outside actuator limits")
    if v_target is None:
        v_target = v_hat
    v_true = v_hat + float(err.drift(v_hat)) + float(rng.normal(0.0, err.noise_std))
    v_true = max(v_true, 1e-3)
    x_eff = grasp.x + err.trigger_lag * (v_true - v_target)
    success = grasp_oracle(scene, x_eff, grasp.y, grasp.theta, grip)
    elapsed = approach_distance / v_true + overhead
    return TrialOutcome(success=success, v_true=v_true, x_effective=x_eff, elapsed=elapsed)


# ---------------------------------------------------------------------------
# Serialization (versioned, human-readable; used to replay failures)


def scene_to_dict(scene: SceneSpec) -> dict:
    return {
        "version": SCENE_SCHEMA_VERSION,
        "seed": scene.seed,
        "workspace_color": list(scene.workspace_color),
        "objects": [
            {
                "parts": [
                    {
                        "center": list(p.center),
                        "size": list(p.size),
                        "yaw": p.yaw,
                        "height": p.height,
                        "color": list(p.color),
                    }
                    for p in obj.parts
                ]
            }
            for obj in scene.objects
        ],
    }


def scene_from_dict(data: dict) -> SceneSpec:
    if data.get("version") != SCENE_SCHEMA_VERSION:
        raise ValueError(f"unsupported scene schema version: {data.get('version')!r}")
    objects = [
        ObjectSpec(
            parts=[
                RectPart(
                    center=tuple(p["center"]),
                    size=tuple(p["size"]),
                    yaw=float(p["yaw"]),
                    height=float(p["height"]),
                    color=tuple(p["color"]),
                )
                for p in obj["parts"]
            ]
        )
        for obj in data["objects"]
    ]
    return SceneSpec(
        workspace_color=tuple(data["workspace_color"]),
        objects=objects,
        seed=int(data["seed"]),
    )


def save_scene(scene: SceneSpec, path) -> None:
    with open(path, "w") as f:
        json.dump(scene_to_dict(scene), f, indent=2, sort_keys=True)


def load_scene(path) -> SceneSpec:
    with open(path) as f:
        return scene_from_dict(json.load(f))
