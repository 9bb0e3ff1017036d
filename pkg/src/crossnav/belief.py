"""Auxiliary belief over target location and category, inferred from binaural spectrograms."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import nn
from .autodiff.tensor import Tensor, as_tensor, clip, concat, log, mean, mul, reshape, sigmoid, sub, tsum
from .scene import CATEGORIES, Scene

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class ConvStackConfig:
    """Residual conv stack shape: stem width, (channels, stride) per stage, blocks per stage."""

    stem: int = 16
    stages: tuple = ((16, 1), (32, 2), (64, 2), (128, 2))
    blocks: int = 2

    @classmethod
    def desk(cls) -> "ConvStackConfig":
        return cls(stem=8, stages=((8, 2), (16, 2)), blocks=1)


def pose_features(x, y, heading, t, width: int, height: int, horizon: int) -> np.ndarray:
    """Normalised pose (x/W, y/H, cos, sin, t/H) used by every network input."""
    return np.array([x / width, y / height, np.cos(heading), np.sin(heading), t / horizon])


def spectrogram_input(magnitudes: np.ndarray) -> np.ndarray:
    """Log-compressed magnitudes for the conv encoders."""
    return np.log1p(np.asarray(magnitudes, dtype=np.float64))


@dataclass
class BeliefPrediction:
    goal_global: np.ndarray
    loc_relative: np.ndarray
    cat_probs: np.ndarray


@dataclass
class Belief:
    loc: np.ndarray = field(default_factory=lambda: np.zeros(2))
    cat: np.ndarray = field(default_factory=lambda: np.zeros(len(CATEGORIES)))
    initialized: bool = False

    def copy(self) -> "Belief":
        return Belief(self.loc.copy(), self.cat.copy(), self.initialized)


@dataclass
class BeliefSupervision:
    goal_star: np.ndarray
    cat_star: np.ndarray


def rotation(theta: float) -> np.ndarray:
    """Global-to-agent rotation T(theta) = [[cos, sin], [-sin, cos]]."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, s], [-s, c]])


def to_agent_frame(goal_global, pose) -> np.ndarray:
    """Express a global goal point relative to the agent position and heading."""
    x, y, theta = pose[0], pose[1], pose[2]
    return rotation(theta) @ (np.asarray(goal_global, dtype=np.float64) - np.array([x, y]))


def ema_update(belief: Belief, pred: BeliefPrediction, alpha: float = 0.5) -> Belief:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"EMA coefficient must lie in [0, 1], got {alpha}")
    if not belief.initialized:
        return Belief(np.array(pred.loc_relative, dtype=np.float64), np.array(pred.cat_probs, dtype=np.float64), True)
    loc = alpha * pred.loc_relative + (1 - alpha) * belief.loc
    cat = alpha * pred.cat_probs + (1 - alpha) * belief.cat
    return Belief(loc, cat, True)


def supervision(scene: Scene, cell, target_cells, target_categories, found, metric: str = "geodesic",
                categories=CATEGORIES) -> BeliefSupervision:
    """Nearest unfound target location and the multi-hot label of unfound categories."""
    open_ = [j for j in range(len(target_cells)) if not found[j]]
    if not open_:
        return BeliefSupervision(np.array(cell, dtype=np.float64), np.zeros(len(categories)))
    if metric == "geodesic":
        d = [scene.distance_field(target_cells[j])[cell[1], cell[0]] for j in open_]
    elif metric == "euclidean":
        d = [np.hypot(target_cells[j][0] - cell[0], target_cells[j][1] - cell[1]) for j in open_]
    else:
        raise ValueError(f"unknown distance metric {metric!r}")
    best = open_[int(np.argmin(d))]
    return BeliefSupervision(np.array(target_cells[best], dtype=np.float64),
                             categories.multi_hot([target_categories[j] for j in open_]))


class BeliefPredictor(nn.Module):
    """Residual conv encoder over the spectrogram with a goal head and a category head.

    The goal head sees the conv features together with the pose features, so
    the egocentric audio cue can be placed in the global frame.
    """

    def __init__(self, spec_shape: tuple[int, int, int], rng: np.random.Generator,
                 arch: ConvStackConfig = ConvStackConfig(), n_categories: int = len(CATEGORIES),
                 goal_scale: float = 1.0):
        c, k, f = spec_shape
        self.spec_shape = tuple(spec_shape)
        self.goal_scale = float(goal_scale)
        self.encoder = nn.ResNetStack(c, arch.stem, list(arch.stages), arch.blocks, rng)
        h, w = self.encoder.output_hw(k, f)
        self.feature_dim = self.encoder.out_channels * h * w
        self.goal_head = nn.Linear(self.feature_dim + 5, 2, rng, zero=True)
        self.cat_head = nn.Linear(self.feature_dim, n_categories, rng, zero=True)

    def forward(self, spec, pose_feats):
        """``spec``: (B, 2, K, F) log magnitudes; ``pose_feats``: (B, 5). Returns (goal, probs) tensors."""
        spec = as_tensor(spec)
        if spec.shape[1:] != self.spec_shape:
            raise nn_shape_error(spec.shape[1:], self.spec_shape)
        z = reshape(self.encoder(spec), (spec.shape[0], self.feature_dim))
        goal = mul(self.goal_head(concat([z, as_tensor(pose_feats)], axis=-1)), self.goal_scale)
        probs = clip(sigmoid(self.cat_head(z)), PROB_CLAMP, 1 - PROB_CLAMP)
        return goal, probs

    def predict(self, spec: np.ndarray, pose, pose_feats: np.ndarray) -> BeliefPrediction:
        """Single-observation prediction; ``pose`` is (x, y, heading)."""
        from .autodiff import no_grad

        with no_grad():
            goal, probs = self.forward(spec[None], pose_feats[None])
        g = goal.data[0]
        return BeliefPrediction(g, to_agent_frame(g, pose), probs.data[0])


def nn_shape_error(got, want):
    from .autodiff import ShapeError

    return ShapeError(f"belief predictor expects spectrogram shape {tuple(want)}, got {tuple(got)}")


def belief_loss(goal: Tensor, probs: Tensor, goal_star: np.ndarray, cat_star: np.ndarray,
                weights: np.ndarray | None = None) -> Tensor:
    """Squared goal error plus summed binary cross-entropy, averaged over the batch.

    ``weights`` (per row, 0/1) lets padded or supervision-free rows drop out.
    """
    goal, probs = as_tensor(goal), as_tensor(probs)
    probs = clip(probs, PROB_CLAMP, 1 - PROB_CLAMP)
    diff = sub(goal, goal_star)
    sq = tsum(mul(diff, diff), axis=-1)
    y = np.asarray(cat_star, dtype=np.float64)
    bce = -tsum(mul(y, log(probs)) + mul(1.0 - y, log(1.0 - probs)), axis=-1)
    per_row = sq + bce
    if weights is None:
        return mean(per_row)
    w = np.asarray(weights, dtype=np.float64)
    return tsum(mul(per_row, w / max(w.sum(), 1.0)))
