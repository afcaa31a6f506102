"""SGD with momentum over named parameter/gradient arrays."""

from __future__ import annotations

import numpy as np


class SGD:
    """Classic momentum update; deterministic given parameters and gradients.

    ``lr_scale`` maps name prefixes to learning-rate multipliers (longest
    matching prefix wins), used to give the residual-velocity head a faster
    schedule than the shared trunk.
    """

    def __init__(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                 lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
                 lr_scale: dict[str, float] | None = None, clip_norm: float = 0.0):
        if set(params) != set(grads):
            raise ValueError("params and grads must share names")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self._slots = []
        for name in sorted(params):
            if params[name].shape != grads[name].shape:
                raise ValueError(f"shape mismatch for {name}")
            scale = 1.0
            if lr_scale:
                best = ""
                for prefix, mult in lr_scale.items():
                    if name.startswith(prefix) and len(prefix) >= len(best):
                        best, scale = prefix, mult
            self._slots.append((name, params[name], grads[name], np.zeros_like(params[name]), scale))

    def step(self) -> None:
        clip = 1.0
        if self.clip_norm > 0.0:
            total = np.sqrt(sum(float(np.square(g, dtype=np.float64).sum())
                                for _, _, g, _, _ in self._slots))
            if total > self.clip_norm:
                clip = self.clip_norm / total
        for _, param, grad, buf, scale in self._slots:
            g = grad if clip == 1.0 else grad * np.asarray(clip, dtype=grad.dtype)
            if self.weight_decay:
                g = g + self.weight_decay * param
            buf *= self.momentum
            buf += g
            param -= (self.lr * scale) * buf

    def momentum_state(self) -> dict[str, np.ndarray]:
        return {name: buf for name, _, _, buf, _ in self._slots}

    def load_momentum(self, state: dict[str, np.ndarray]) -> None:
        for name, _, _, buf, _ in self._slots:
            buf[...] = state[name]
