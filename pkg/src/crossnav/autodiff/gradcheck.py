"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, grad


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], rng: np.random.Generator,
                    probes: int = 7, eps: float = 1e-5) -> float:
    """Compare analytic and central-difference gradients at random coordinates.

    ``fn`` rebuilds the scalar loss from the current parameter values. For
    each parameter, ``probes`` random coordinates are perturbed by ``±eps``.
    Returns the worst relative error seen.
    """
    analytic = grad(fn(), params)
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(probes, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + eps
            up = fn().item()
            flat[i] = orig - eps
            down = fn().item()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            worst = max(worst, relative_error(float(g.reshape(-1)[i]), numeric))
    return worst


def check_gradients_sampled(fn: Callable[[], Tensor], params: Sequence[Tensor], rng: np.random.Generator,
                            probes: int = 20, eps: float = 1e-6) -> list[tuple[str, int, float, float]]:
    """Central-difference check at ``probes`` coordinates drawn across all parameters.

    Coordinates are sampled uniformly over the concatenated parameter vector
    (without replacement), so large networks get the same probe budget as
    small ones. Returns ``(param index, flat index, analytic, numeric)`` rows.
    """
    params = list(params)
    analytic = grad(fn(), params)
    sizes = np.array([p.data.size for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = rng.choice(int(offsets[-1]), size=min(probes, int(offsets[-1])), replace=False)
    rows = []
    for flat_i in np.sort(picks):
        k = int(np.searchsorted(offsets, flat_i, side="right") - 1)
        i = int(flat_i - offsets[k])
        flat = params[k].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        up = fn().item()
        flat[i] = orig - eps
        down = fn().item()
        flat[i] = orig
        rows.append((k, i, float(analytic[k].reshape(-1)[i]), (up - down) / (2 * eps)))
    return rows
