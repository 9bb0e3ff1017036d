"""Exact tabular check that conditioning a value on the sampled state (and a history-induced belief)
leaves the history value unbiased: E_{s ~ p(s|h)}[V(h, b(h), s)] = V(h).

V(h) is computed by brute-force enumeration of whole trajectories, V(h, s) by
backward recursion, so the two sides share no code beyond the model tables.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import stats


class EnumerationTooLarge(ValueError):
    pass


@dataclass
class TabularDecPOMDP:
    """Two-agent finite model. ``T[s, a1, a2, s']``, ``O[s', a1, a2, o1, o2]``, ``R[s, a1, a2]``."""

    b0: np.ndarray
    T: np.ndarray
    O: np.ndarray
    R: np.ndarray
    horizon: int

    def __post_init__(self):
        S = len(self.b0)
        if S > 10 or self.horizon > 4:
            raise EnumerationTooLarge(f"model too large for exact enumeration ({S} states, horizon {self.horizon})")
        if not np.allclose(self.T.sum(axis=-1), 1) or not np.allclose(self.O.sum(axis=(-1, -2)), 1):
            raise ValueError("transition and observation tables must be normalised")

    @property
    def n_states(self) -> int:
        return len(self.b0)

    @property
    def n_actions(self) -> tuple[int, int]:
        return self.T.shape[1], self.T.shape[2]

    @property
    def n_obs(self) -> tuple[int, int]:
        return self.O.shape[3], self.O.shape[4]

    @classmethod
    def random(cls, rng: np.random.Generator, states: int = 3, actions: int = 2, obs: int = 2,
               horizon: int = 2) -> "TabularDecPOMDP":
        b0 = rng.dirichlet(np.ones(states))
        T = rng.dirichlet(np.ones(states), size=(states, actions, actions))
        O = rng.dirichlet(np.ones(obs * obs), size=(states, actions, actions)).reshape(
            states, actions, actions, obs, obs)
        R = rng.normal(size=(states, actions, actions))
        return cls(b0, T, O, R, horizon)

    @classmethod
    def coin(cls, horizon: int = 2) -> "TabularDecPOMDP":
        """Hidden fair coin that never changes; observations carry no information about it."""
        b0 = np.array([0.5, 0.5])
        T = np.zeros((2, 2, 2, 2))
        for s in range(2):
            T[s, :, :, s] = 1.0
        O = np.full((2, 2, 2, 2, 2), 0.25)
        R = np.zeros((2, 2, 2))
        # guessing the coin pays off; the two agents guess independently
        for s in range(2):
            for a1 in range(2):
                for a2 in range(2):
                    R[s, a1, a2] = float(a1 == s) + float(a2 == s)
        return cls(b0, T, O, R, horizon)

    @classmethod
    def fully_observed(cls, horizon: int = 2) -> "TabularDecPOMDP":
        """A single reachable state per history: the start is known and transitions are deterministic."""
        S = 3
        b0 = np.array([1.0, 0.0, 0.0])
        T = np.zeros((S, 2, 2, S))
        for s in range(S):
            for a1 in range(2):
                for a2 in range(2):
                    T[s, a1, a2, (s + a1 + a2) % S] = 1.0
        O = np.zeros((S, 2, 2, 2, 2))
        O[..., 0, 0] = 1.0
        R = np.arange(S * 4, dtype=float).reshape(S, 2, 2) / 4.0
        return cls(b0, T, O, R, horizon)


@dataclass
class TabularPolicy:
    """Independent stochastic policies pi_i(a_i | local history), one random table per agent."""

    tables: list = field(default_factory=list)

    @classmethod
    def random(cls, model: TabularDecPOMDP, rng: np.random.Generator) -> "TabularPolicy":
        tables = []
        for i in range(2):
            na, no = model.n_actions[i], model.n_obs[i]
            table = {}
            for t in range(model.horizon):
                for hist in itertools.product(itertools.product(range(na), range(no)), repeat=t):
                    table[hist] = rng.dirichlet(np.ones(na))
            tables.append(table)
        return cls(tables)

    def prob(self, i: int, local_history: tuple, action: int) -> float:
        return float(self.tables[i][local_history][action])


def _local(joint_history: tuple, i: int) -> tuple:
    return tuple((a[i], o[i]) for a, o in joint_history)


def enumerate_trajectories(model: TabularDecPOMDP, policy: TabularPolicy, limit: int = 2_000_000):
    """Every full trajectory with positive probability: (prob, joint history, per-step rewards)."""
    S = model.n_states
    (A1, A2), (O1, O2) = model.n_actions, model.n_obs
    size = S * (S * A1 * A2 * O1 * O2) ** model.horizon
    if size > limit:
        raise EnumerationTooLarge(f"{size} trajectories exceed the enumeration limit {limit}")
    out = []

    def rec(t, s, prob, hist, rewards):
        if t == model.horizon:
            out.append((prob, hist, tuple(rewards)))
            return
        h1, h2 = _local(hist, 0), _local(hist, 1)
        for a1 in range(A1):
            p1 = policy.prob(0, h1, a1)
            for a2 in range(A2):
                pa = p1 * policy.prob(1, h2, a2)
                if pa == 0:
                    continue
                r = model.R[s, a1, a2]
                for s2 in range(S):
                    pt = model.T[s, a1, a2, s2]
                    if pt == 0:
                        continue
                    for o1 in range(O1):
                        for o2 in range(O2):
                            po = model.O[s2, a1, a2, o1, o2]
                            if po == 0:
                                continue
                            rec(t + 1, s2, prob * pa * pt * po, hist + (((a1, a2), (o1, o2)),), rewards + [r])

    for s0 in range(S):
        if model.b0[s0] > 0:
            rec(0, s0, model.b0[s0], (), [])
    return out


def exact_history_values(model: TabularDecPOMDP, policy: TabularPolicy) -> dict:
    """V(h) for every reachable joint history, by conditioning the enumerated trajectories on h."""
    num: dict = {}
    den: dict = {}
    for prob, hist, rewards in enumerate_trajectories(model, policy):
        for t in range(model.horizon):
            h = hist[:t]
            num[h] = num.get(h, 0.0) + prob * sum(rewards[t:])
            den[h] = den.get(h, 0.0) + prob
    return {h: num[h] / den[h] for h in den if den[h] > 0}


def posterior(model: TabularDecPOMDP, history: tuple) -> np.ndarray:
    """p(s_t | h_t) by forward filtering (policy terms cancel)."""
    b = model.b0.copy()
    for (a1, a2), (o1, o2) in history:
        b = (b @ model.T[:, a1, a2, :]) * model.O[:, a1, a2, o1, o2]
        z = b.sum()
        if z <= 0:
            raise ValueError(f"history {history} has zero probability")
        b = b / z
    return b


def state_history_value(model: TabularDecPOMDP, policy: TabularPolicy):
    """Return V(h, s) computed by backward recursion over the model."""
    S = model.n_states
    (A1, A2), (O1, O2) = model.n_actions, model.n_obs

    @lru_cache(maxsize=None)
    def V(hist: tuple, s: int) -> float:
        t = len(hist)
        if t == model.horizon:
            return 0.0
        h1, h2 = _local(hist, 0), _local(hist, 1)
        total = 0.0
        for a1 in range(A1):
            p1 = policy.prob(0, h1, a1)
            for a2 in range(A2):
                pa = p1 * policy.prob(1, h2, a2)
                if pa == 0:
                    continue
                future = 0.0
                for s2 in range(S):
                    pt = model.T[s, a1, a2, s2]
                    if pt == 0:
                        continue
                    for o1 in range(O1):
                        for o2 in range(O2):
                            po = model.O[s2, a1, a2, o1, o2]
                            if po:
                                future += pt * po * V(hist + (((a1, a2), (o1, o2)),), s2)
                total += pa * (model.R[s, a1, a2] + future)
        return total

    return V


@dataclass
class HistoryCheck:
    history: tuple
    exact: float
    mean: float
    half_width: float

    @property
    def error(self) -> float:
        return abs(self.mean - self.exact)

    @property
    def inside(self) -> bool:
        return self.error <= self.half_width


@dataclass
class UnbiasednessReport:
    rows: list

    @property
    def all_inside(self) -> bool:
        return all(r.inside for r in self.rows)

    @property
    def failures(self) -> list:
        return [r for r in self.rows if not r.inside]


def unbiasedness_harness(model: TabularDecPOMDP, policy: TabularPolicy, samples: int = 100_000,
                         rng: np.random.Generator | None = None, bias_state: int | None = None,
                         level: float = 0.99, simultaneous: bool = True, floor: float = 1e-9) -> UnbiasednessReport:
    """Compare the sampled mean of V(h, b(h), s), s ~ p(s|h), against exact V(h) for each reachable h.

    The intervals are normal-approximation intervals at ``level``. With ``simultaneous`` the level
    holds jointly over all reachable histories (Bonferroni), so an unbiased estimator passes every
    history with probability at least ``level``; per-history intervals would flag some history by
    chance once there are more than a handful. ``bias_state`` adds 1{s = bias_state} to the
    estimator (a negative control that must fail).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    exact = exact_history_values(model, policy)
    tail = (1.0 - level) / (len(exact) if simultaneous else 1)
    z = float(stats.norm.ppf(1.0 - tail / 2))
    V = state_history_value(model, policy)
    rows = []
    for h in sorted(exact, key=lambda h: (len(h), h)):
        post = posterior(model, h)
        # the belief is a deterministic function of h, so V(h, b(h), s) reduces to V(h, s)
        vals = np.array([V(h, s) + (1.0 if bias_state is not None and s == bias_state else 0.0)
                         for s in range(model.n_states)])
        draws = rng.choice(model.n_states, size=samples, p=post)
        x = vals[draws]
        sd = x.std(ddof=1) if samples > 1 else 0.0
        rows.append(HistoryCheck(h, exact[h], float(x.mean()), max(z * sd / np.sqrt(samples), floor)))
    return UnbiasednessReport(rows)
