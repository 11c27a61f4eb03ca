"""Central finite-difference check of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

__all__ = ["GradCheck", "gradient_check"]


@dataclass
class GradCheck:
    max_rel_error: float
    probes: list[tuple[str, tuple, float, float]]
    """(parameter, index, analytic, numeric) per probe."""


def gradient_check(fn, params: dict[str, np.ndarray], n_probes: int = 10,
                   eps: float = 1e-6, rng: np.random.Generator | None = None,
                   floor: float = 1e-8, order: int = 2) -> GradCheck:
    """Compare analytic and central-difference gradients at random entries.

    ``fn(tensors)`` maps a dict of :class:`Tensor` to a scalar Tensor.
    The relative error of a probe is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps entries whose true gradient is ~0 from dividing by
    roundoff. ``order=4`` uses the five-point central stencil, whose smaller
    truncation error allows a larger ``eps`` when the loss is large enough
    for roundoff to dominate the two-point difference.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    offsets = (1.0, -1.0) if order == 2 else (2.0, 1.0, -1.0, -2.0)
    rng = np.random.default_rng(0) if rng is None else rng
    ts = {k: Tensor(np.array(v, dtype=float), requires_grad=True) for k, v in params.items()}
    out = fn(ts)
    out.backward()
    names = sorted(params)
    sizes = np.array([np.size(params[k]) for k in names], dtype=float)
    probes, worst = [], 0.0
    for _ in range(n_probes):
        k = names[rng.choice(len(names), p=sizes / sizes.sum())]
        idx = tuple(int(rng.integers(0, n)) for n in np.shape(params[k]))
        analytic = float(ts[k].grad[idx]) if ts[k].grad is not None else 0.0
        vals = []
        for off in offsets:
            p = {n: np.array(v, dtype=float) for n, v in params.items()}
            p[k][idx] += off * eps
            vals.append(float(fn({n: Tensor(v) for n, v in p.items()}).data))
        if order == 2:
            numeric = (vals[0] - vals[1]) / (2 * eps)
        else:
            numeric = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * eps)
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, err)
        probes.append((k, idx, analytic, numeric))
    return GradCheck(worst, probes)
