"""Adam with bias correction, per-group learning rates, and global-norm clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 2.5e-4
    eps: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float | dict[str, float] | None = None) -> None:
    """In-place Adam update of ``params``.

    ``lr`` overrides ``state.lr``; a dict maps parameter name to its rate.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        rate = lr[name] if isinstance(lr, dict) else (state.lr if lr is None else lr)
        p.data = p.data - rate * (m / c1) / (np.sqrt(v / c2) + state.eps)


def global_norm(grads) -> float:
    vals = grads.values() if isinstance(grads, dict) else grads
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in vals)))


def clip_global_norm(grads, max_norm: float = 0.2):
    """Scale all gradients by ``max_norm / norm`` when their joint L2 norm exceeds ``max_norm``.

    Accepts a dict or a list; returns the same container type and the pre-clip norm.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    scale = max_norm / norm if norm > max_norm else 1.0
    if isinstance(grads, dict):
        return {k: g * scale for k, g in grads.items()}, norm
    return [g * scale for g in grads], norm


class Adam:
    """Adam over named parameter groups, each with its own learning rate."""

    def __init__(self, groups: dict[str, tuple[dict[str, Tensor], float]], eps: float = 1e-5,
                 max_grad_norm: float | None = 0.2, clip_per_group: bool = False):
        self.groups = groups
        self.clip_per_group = clip_per_group
        self.params: dict[str, Tensor] = {}
        self.lrs: dict[str, float] = {}
        for _, (params, lr) in groups.items():
            for name, p in params.items():
                if name in self.params:
                    raise ValueError(f"parameter {name!r} appears in two groups")
                self.params[name] = p
                self.lrs[name] = lr
        self.state = AdamState(eps=eps)
        self.max_grad_norm = max_grad_norm

    def step(self, grads: dict[str, np.ndarray]) -> float:
        """Clip (jointly, or separately per group), then update. Returns the pre-clip global norm."""
        norm = global_norm(grads)
        if not np.isfinite(norm):
            bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
            raise NonFiniteGradient(f"non-finite gradient for parameter {bad[0]!r}")
        if self.max_grad_norm is not None and self.clip_per_group:
            clipped = {}
            for params, _ in self.groups.values():
                part = {k: grads[k] for k in params if k in grads}
                if part:
                    clipped.update(clip_global_norm(part, self.max_grad_norm)[0])
            grads = clipped
        elif self.max_grad_norm is not None:
            grads, _ = clip_global_norm(grads, self.max_grad_norm)
        adam_step(self.params, grads, self.state, self.lrs)
        return norm

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"__step__": np.array(self.state.step)}
        for k, m in self.state.m.items():
            out[f"m/{k}"] = m
            out[f"v/{k}"] = self.state.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.state.step = int(arrays["__step__"])
        self.state.m = {k[2:]: np.array(v) for k, v in arrays.items() if k.startswith("m/")}
        self.state.v = {k[2:]: np.array(v) for k, v in arrays.items() if k.startswith("v/")}
