"""Central-difference verification of analytic gradients.

Run networks in 64-bit mode here: the truncation error of the central
difference is O(h^2) and float32 round-off would swamp it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Relative error uses an absolute floor so near-zero gradient coordinates are
# compared on an absolute scale instead of blowing up the ratio.
REL_FLOOR = 1e-4


@dataclass
class GradCheckEntry:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    checked: int
    worst: list[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def finite_diff_check(params: dict[str, np.ndarray], loss_fn, grad_fn,
                      h: float = 1e-5, tolerance: float = 1e-4,
                      max_coords_per_param: int | None = None,
                      rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn()`` evaluates the scalar loss at the current parameter values;
    ``grad_fn()`` returns analytic gradients as a name->array dict. Every
    coordinate is checked unless ``max_coords_per_param`` caps the count, in
    which case a seeded subset per tensor is probed.
    """
    analytic = grad_fn()
    entries: list[GradCheckEntry] = []
    checked = 0
    for name in sorted(params):
        param = params[name]
        flat = param.reshape(-1)
        n = flat.size
        if max_coords_per_param is None or n <= max_coords_per_param:
            coords = np.arange(n)
        else:
            coords = (rng or np.random.default_rng(0)).choice(n, size=max_coords_per_param, replace=False)
        a_flat = analytic[name].reshape(-1)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + h
            lp = loss_fn()
            flat[idx] = orig - h
            lm = loss_fn()
            flat[idx] = orig
            numeric = (lp - lm) / (2.0 * h)
            a = float(a_flat[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), REL_FLOOR)
            entries.append(GradCheckEntry(name, int(idx), a, float(numeric), float(rel)))
            checked += 1
    entries.sort(key=lambda e: -e.rel_error)
    max_rel = entries[0].rel_error if entries else 0.0
    return GradCheckReport(max_rel_error=max_rel, tolerance=tolerance, checked=checked, worst=entries[:10])
