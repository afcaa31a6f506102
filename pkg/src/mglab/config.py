"""Aggregated run configuration: plain-text (YAML) file, env, and flag overrides.

Precedence: command-line flags > MGLAB_* environment variables > config file
> built-in defaults. Env overrides use double-underscore paths, e.g.
``MGLAB_TRAIN__LR=0.005`` sets ``train.lr``.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

import yaml

from .heightmap import FrameConfig
from .policy import GeneratorConfig
from .scene import GripperConfig, ObjectSamplerConfig, SceneSamplerConfig, VelocityErrorModel

ENV_PREFIX = "MGLAB_"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    static_steps: int = 2000
    mobile_workspaces: int = 8
    mobile_steps_per_workspace: int = 250
    v_train_range: tuple[float, float] = (0.10, 0.20)
    v_test_set: tuple[float, ...] = tuple(round(0.10 + 0.01 * i, 2) for i in range(13))
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    head_lr_scale: float = 10.0
    moving_lr_scale: float = 10.0
    positive_weight: float = 1.0
    negative_weight: float = 1.0
    grad_clip: float = 5.0
    epsilon_start: float = 0.5
    epsilon_end: float = 0.1
    rolling_window: int = 200
    freeze_check_every: int = 100
    n_objects: int = 1
    approach_distance: float = 1.25
    grasp_overhead: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.static_steps < 0 or self.mobile_workspaces <= 0 or self.mobile_steps_per_workspace < 0:
            raise ConfigError("training budgets must be positive")
        from .scene import V_MAX, V_MIN

        lo, hi = self.v_train_range
        if not (V_MIN <= lo <= hi <= V_MAX):
            raise ConfigError("velocity range must sit inside the actuator limits")


@dataclass(frozen=True)
class EvalConfig:
    trials_per_velocity: int = 200
    velocities: tuple[str, ...] = ("rv", "0.10", "0.15", "0.20")
    rv_choices: tuple[float, ...] = tuple(round(0.10 + 0.01 * i, 2) for i in range(13))
    n_objects: int = 1
    approach_distance_range: tuple[float, float] = (1.0, 1.5)
    overhead_s: float = 6.0
    stop_penalty_s: float = 15.5
    cruise_v: float = 0.20


@dataclass
class Config:
    frame: FrameConfig = field(default_factory=FrameConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    gripper: GripperConfig = field(default_factory=GripperConfig)
    error_model: VelocityErrorModel = field(default_factory=VelocityErrorModel)
    scene: SceneSamplerConfig = field(default_factory=SceneSamplerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        x_min, x_max, y_min, y_max = self.frame.extent
        sx, sy = self.scene.x_range, self.scene.y_range
        pad = self.frame.cell_size
        if not (x_min + pad <= sx[0] <= sx[1] <= x_max - pad and y_min + pad <= sy[0] <= sy[1] <= y_max - pad):
            raise ConfigError("scene placement ranges must sit inside the frame with a margin")
        if self.frame.grid_h != self.generator.grid:
            raise ConfigError("frame grid and generator grid disagree")


_SECTIONS = {
    "frame": FrameConfig,
    "generator": GeneratorConfig,
    "gripper": GripperConfig,
    "error_model": VelocityErrorModel,
    "scene": SceneSamplerConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _build_section(cls, data: dict, path: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config field '{path}.{key}'")
        if key == "object_cfg" and isinstance(value, dict):
            kwargs[key] = _build_section(ObjectSamplerConfig, value, f"{path}.{key}")
        else:
            kwargs[key] = _tuplify(value)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid values in config section '{path}': {exc}") from exc


def config_from_dict(data: dict) -> Config:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    kwargs = {}
    for key, value in data.items():
        if key not in _SECTIONS:
            raise ConfigError(f"unknown config section '{key}'")
        if not isinstance(value, dict):
            raise ConfigError(f"config section '{key}' must be a mapping")
        kwargs[key] = _build_section(_SECTIONS[key], value, key)
    cfg = Config(**kwargs)
    cfg.validate()
    return cfg


def _listify(value):
    if isinstance(value, tuple):
        return [_listify(v) for v in value]
    if isinstance(value, dict):
        return {k: _listify(v) for k, v in value.items()}
    return value


def config_to_dict(cfg: Config) -> dict:
    return {name: _listify(dataclasses.asdict(getattr(cfg, name))) for name in _SECTIONS}


def env_overrides(environ=None) -> dict[str, str]:
    """Collect MGLAB_SECTION__FIELD=value overrides from the environment."""
    environ = os.environ if environ is None else environ
    out = {}
    for key, value in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower()
        if "__" not in path:
            continue
        out[path.replace("__", ".")] = value
    return out


def apply_overrides(data: dict, overrides: dict[str, str]) -> dict:
    """Apply dotted-path overrides; values parse as YAML scalars."""
    for path, raw in overrides.items():
        parts = path.split(".")
        if len(parts) < 2:
            raise ConfigError(f"override path '{path}' must be section.field")
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path '{path}' crosses a non-mapping")
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def load_config(path=None, overrides: dict[str, str] | None = None, use_env: bool = True) -> Config:
    data: dict = {}
    if path is not None:
        with open(path) as f:
            loaded = yaml.safe_load(f)
        if loaded is not None:
            if not isinstance(loaded, dict):
                raise ConfigError(f"config file {path} must contain a mapping")
            data = loaded
    merged: dict[str, str] = {}
    if use_env:
        merged.update(env_overrides())
    if overrides:
        merged.update(overrides)
    apply_overrides(data, merged)
    return config_from_dict(data)


def save_config(cfg: Config, path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(config_to_dict(cfg), f, sort_keys=True)
