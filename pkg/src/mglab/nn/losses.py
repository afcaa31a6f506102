"""Grasp-label and residual-velocity losses.

The grasp term is binary cross entropy on the predicted success probability;
the residual term is a Huber loss applied only on successful trials. The
combined value satisfies total == grasp_term + G * move_term exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BCE_EPS = 1e-7


@dataclass(frozen=True)
class LossValue:
    total: float
    grasp_term: float
    move_term: float


def _check_label(g) -> int:
    g = int(g)
    if g not in (0, 1):
        raise ValueError("label must be 0 or 1")
    return g


def bce_loss(q: float, g) -> float:
    """Binary cross entropy on probability ``q``, clipped to [eps, 1-eps]."""
    g = _check_label(g)
    q = float(np.clip(q, BCE_EPS, 1.0 - BCE_EPS))
    return -(g * np.log(q) + (1 - g) * np.log(1.0 - q))


def bce_logit_grad(q: float, g) -> float:
    """d(bce)/d(logit) for q = sigmoid(logit): simply q - g."""
    return float(q) - _check_label(g)


def huber_residual_loss(delta: float, delta_bar: float, g) -> float:
    """Huber penalty on the residual-velocity prediction, masked by the label."""
    if _check_label(g) == 0:
        return 0.0
    d = abs(float(delta) - float(delta_bar))
    if d < 1.0:
        return 0.5 * d * d
    return d - 0.5


def huber_grad(delta: float, delta_bar: float) -> float:
    """d(huber)/d(delta) on the G=1 branch: the error clipped to [-1, 1]."""
    d = float(delta) - float(delta_bar)
    return float(np.clip(d, -1.0, 1.0))


def combined_loss(q: float, g, delta: float, delta_bar: float) -> LossValue:
    """Grasp BCE plus label-masked residual Huber."""
    g = _check_label(g)
    grasp = bce_loss(q, g)
    move = huber_residual_loss(delta, delta_bar, g)
    return LossValue(total=grasp + g * move, grasp_term=grasp, move_term=move)
