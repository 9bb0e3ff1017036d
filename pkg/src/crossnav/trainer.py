"""Centralized training: rollouts, advantage estimation, clipped PPO losses and the joint update."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Adam, NonFiniteGradient, grad, load_checkpoint, no_grad, save_checkpoint
from .autodiff.tensor import (
    Tensor,
    as_tensor,
    clip,
    concat,
    exp,
    maximum,
    mean,
    minimum,
    mul,
    sub,
    take_rows,
    tsum,
)
from .belief import Belief, BeliefPrediction, belief_loss, ema_update, spectrogram_input, supervision, to_agent_frame
from .env import Env, RewardConfig, SensorConfig, finalize_metrics
from .policy import (
    BELIEF_DIM,
    DecentralizedActor,
    ModelConfig,
    MultiAgentModel,
    WorldDims,
    HistoryCache,
    log_prob_entropy,
    observation_inputs,
    one_hot,
    policy_distribution,
    sample_actions,
    state_feature,
)
from .scene import (
    CATEGORIES,
    DEFAULT_HORIZON,
    KINDS,
    SCENE_TARGETS,
    EpisodeConstraints,
    generate_episodes,
    generate_scene,
    split_episodes,
)
from .sensors import AudioConfig, DepthConfig


class ConfigError(ValueError):
    """A configuration field is missing or out of range; the message names the field."""


# -- configuration -----------------------------------------------------------------
@dataclass
class TrainConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    value_clip: float = 0.25
    mu: float = 0.67
    beta: float = 0.05
    alpha: float = 0.5
    actor_lr: float = 2.5e-4
    critic_lr: float = 2e-4
    adam_eps: float = 1e-5
    epochs: int = 2
    minibatches: int = 1
    rollout: int = 150
    grad_clip: float = 0.2
    updates: int = 8000
    normalize_advantages: bool = False
    belief_weight: float = 1.0
    n_envs: int = 1
    seed: int = 0
    scene: str = "studio"
    scene_seed: int = 0
    horizon: int | None = None
    episodes: int | None = None
    agents: list = field(default_factory=lambda: [["audio"], ["depth"]])
    use_loc_belief: bool = True
    use_cat_belief: bool = True
    use_state: bool = True
    supervision_metric: str = "geodesic"
    eval_every: int = 50
    eval_episodes: int | None = None
    checkpoint_every: int = 500
    target_success: float | None = None
    sensors: str = "default"  # default | desk
    depth_resolution: int = 16
    max_depth: float = 5.0
    model: dict = field(default_factory=dict)
    reward: dict = field(default_factory=dict)

    def validate(self) -> "TrainConfig":
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(f"{name}: {msg} (got {getattr(self, name)!r})")

        for name in ("gamma", "lam", "mu", "alpha"):
            need(0.0 <= getattr(self, name) <= 1.0, name, "must lie in [0, 1]")
        for name in ("clip_eps", "value_clip", "actor_lr", "critic_lr", "adam_eps", "grad_clip", "max_depth"):
            need(getattr(self, name) > 0, name, "must be positive")
        for name in ("epochs", "minibatches", "rollout", "updates", "n_envs", "eval_every",
                     "checkpoint_every", "depth_resolution"):
            need(isinstance(getattr(self, name), int) and getattr(self, name) >= 1, name, "must be a positive integer")
        need(self.beta >= 0, "beta", "must be non-negative")
        need(self.belief_weight >= 0, "belief_weight", "must be non-negative")
        need(self.minibatches <= self.rollout * self.n_envs, "minibatches", "cannot exceed the batch size")
        need(self.scene in KINDS, "scene", f"must be one of {KINDS}")
        need(self.sensors in ("default", "desk"), "sensors", "must be 'default' or 'desk'")
        need(self.supervision_metric in ("geodesic", "euclidean"), "supervision_metric",
             "must be 'geodesic' or 'euclidean'")
        need(isinstance(self.agents, (list, tuple)) and len(self.agents) >= 1, "agents", "needs at least one agent")
        for mods in self.agents:
            need(len(mods) >= 1 and set(mods) <= {"depth", "audio"}, "agents",
                 "each agent needs a non-empty subset of {depth, audio}")
        need(self.horizon is None or self.horizon >= 1, "horizon", "must be positive")
        need(self.target_success is None or 0 < self.target_success <= 1, "target_success", "must lie in (0, 1]")
        try:
            ModelConfig.from_dict({**self.base_model().to_dict(), **self.model})
        except TypeError as err:
            raise ConfigError(f"model: {err}") from None
        try:
            RewardConfig(**self.reward)
        except TypeError as err:
            raise ConfigError(f"reward: {err}") from None
        return self

    def base_model(self) -> ModelConfig:
        return ModelConfig.desk() if self.sensors == "desk" else ModelConfig()

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict({**self.base_model().to_dict(), **self.model})

    def sensor_config(self) -> SensorConfig:
        audio = AudioConfig.desk() if self.sensors == "desk" else AudioConfig()
        depth = DepthConfig(self.depth_resolution, self.depth_resolution, 10.0, self.max_depth)
        return SensorConfig(depth, audio)

    def reward_config(self) -> RewardConfig:
        return RewardConfig(**self.reward)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown field")
        return cls(**d).validate()


# -- closed-form pieces ------------------------------------------------------------
def compute_gae(rewards, values, dones, gamma: float = 0.99, lam: float = 0.95):
    """Advantages and returns.

    ``rewards`` and ``dones`` have shape (T, ...); ``values`` has shape
    (T + 1, ...) where ``values[T]`` bootstraps the step after the rollout.
    A done flag at step t zeroes the bootstrap from t + 1 and stops the
    recursion there. Returns (advantages, returns = advantages + values[:T]).
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=np.float64)
    T = r.shape[0]
    if v.shape[0] != T + 1:
        raise ValueError(f"values must have length T + 1 = {T + 1}, got {v.shape[0]}")
    adv = np.zeros_like(r)
    last = np.zeros_like(r[0])
    for t in range(T - 1, -1, -1):
        nonterminal = 1.0 - d[t]
        delta = r[t] + gamma * v[t + 1] * nonterminal - v[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv, adv + v[:T]


def value_loss(v_new, v_old, returns, xi: float = 0.25) -> Tensor:
    """Mean of max((V - R)^2, (clip(V, V_old - xi, V_old + xi) - R)^2)."""
    if xi <= 0:
        raise ValueError("value clip range must be positive")
    v_new = as_tensor(v_new)
    v_old = np.asarray(v_old, dtype=np.float64)
    ret = np.asarray(returns, dtype=np.float64)
    unclipped = sub(v_new, ret)
    clipped = sub(clip(v_new, v_old - xi, v_old + xi), ret)
    return mean(maximum(mul(unclipped, unclipped), mul(clipped, clipped)))


def policy_objective(logp_new, logp_old, advantages, entropy, eps: float = 0.2, beta: float = 0.05) -> Tensor:
    """Mean clipped surrogate min(rho A, clip(rho, 1-eps, 1+eps) A) plus beta times mean entropy."""
    logp_new = as_tensor(logp_new)
    adv = np.asarray(advantages, dtype=np.float64)
    ratio = exp(sub(logp_new, np.asarray(logp_old, dtype=np.float64)))
    surr = minimum(mul(ratio, adv), mul(clip(ratio, 1 - eps, 1 + eps), adv))
    return mean(surr) + mul(mean(as_tensor(entropy)), beta)


def combine_shared_loss(J, L, mu: float = 0.67, n_agents: int = 2):
    """Weighted objective -mu * J + ((1 - mu) / n) * L applied to the shared modules."""
    return -mu * J + ((1.0 - mu) / n_agents) * L


# -- world construction -----------------------------------------------------------
@dataclass
class World:
    scene: object
    train: list
    val: list
    dims: WorldDims
    sensors: SensorConfig
    reward: RewardConfig
    horizon: int


def build_world(cfg: TrainConfig) -> World:
    scene = generate_scene(cfg.scene, cfg.scene_seed)
    horizon = cfg.horizon or DEFAULT_HORIZON[cfg.scene]
    cons = EpisodeConstraints.for_kind(cfg.scene)
    cons = EpisodeConstraints(**{**cons.__dict__, "n_agents": len(cfg.agents)})
    eps = generate_episodes(scene, cons, count=cfg.episodes, seed=cfg.scene_seed, horizon=horizon)
    sensors = cfg.sensor_config()
    dims = WorldDims(scene.width, scene.height, horizon, (sensors.depth.height, sensors.depth.width),
                     (2, sensors.audio.bins, sensors.audio.frames), sensors.depth.max_depth)
    return World(scene, split_episodes(eps, "train"), split_episodes(eps, "val"), dims, sensors,
                 cfg.reward_config(), horizon)


def build_model(cfg: TrainConfig, world: World, rng=None) -> MultiAgentModel:
    rng = rng if rng is not None else np.random.default_rng([cfg.seed, 1])
    return MultiAgentModel([tuple(a) for a in cfg.agents], world.dims, cfg.model_config(),
                           len(SCENE_TARGETS[cfg.scene]), rng)


# -- rollout ---------------------------------------------------------------------------
@dataclass
class AgentTable:
    """Raw per-agent observation rows referenced by history windows."""

    depth: list = field(default_factory=list)
    spec: list = field(default_factory=list)
    pose5: list = field(default_factory=list)
    goal: list = field(default_factory=list)
    prev: list = field(default_factory=list)

    def add(self, depth, spec, pose5, goal, prev) -> int:
        self.depth.append(depth)
        self.spec.append(spec)
        self.pose5.append(pose5)
        self.goal.append(goal)
        self.prev.append(prev)
        return len(self.pose5) - 1

    def row(self, i: int):
        return self.depth[i], self.spec[i], self.pose5[i], self.goal[i], self.prev[i]

    def arrays(self):
        d = None if self.depth[0] is None else np.stack(self.depth)
        s = None if self.spec[0] is None else np.stack(self.spec)
        return d, s, np.stack(self.pose5), np.stack(self.goal), np.stack(self.prev)

    def __len__(self) -> int:
        return len(self.pose5)


@dataclass
class RolloutBatch:
    tables: list  # per agent AgentTable
    windows: list  # per agent (T, E, k + 1) int rows, -1 = padding
    actions: np.ndarray  # (n, T, E)
    logp_old: np.ndarray  # (n, T, E)
    beliefs: np.ndarray  # (n, T, E, BELIEF_DIM)
    belief_rows: list  # per agent (T, E) table rows with spectrograms
    goal_star: np.ndarray  # (n, T, E, 2)
    cat_star: np.ndarray  # (n, T, E, C)
    rewards: np.ndarray  # (T, E)
    dones: np.ndarray  # (T, E)
    values: np.ndarray  # (T + 1, E)
    states: np.ndarray  # (T, E, S)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    episodes: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.rewards.size


class RolloutCollector:
    """Steps ``n_envs`` environments with the current parameters and records everything the update needs."""

    def __init__(self, model: MultiAgentModel, world: World, cfg: TrainConfig, rng: np.random.Generator):
        self.model, self.world, self.cfg, self.rng = model, world, cfg, rng
        self.n = len(model.agents)
        self.E = cfg.n_envs
        mods = [tuple(a.modalities) for a in model.agents]
        self.envs = [Env(world.scene, world.sensors, world.reward, modalities=mods) for _ in range(self.E)]
        k = model.config.cache
        self.caches = [HistoryCache(k, ag.d_obs, self.E) for ag in model.agents]
        self.beliefs = [[Belief() for _ in range(self.E)] for _ in range(self.n)]
        self.prev = np.full((self.n, self.E), -1, dtype=np.int64)
        self.obs = [None] * self.E
        self.carry: list[AgentTable] | None = None
        self.ep_return = np.zeros(self.E)
        for e in range(self.E):
            self._reset_env(e)

    def _reset_env(self, e: int) -> None:
        spec = self.world.train[int(self.rng.integers(len(self.world.train)))]
        _, obs = self.envs[e].reset(spec)
        self.obs[e] = obs
        for i in range(self.n):
            self.caches[i].clear(e)
            self.beliefs[i][e] = Belief()
        self.prev[:, e] = -1

    def _embed_rows(self, i: int, table: AgentTable, rows) -> np.ndarray:
        net = self.model.agents[i]
        sub_t = [table.row(r) for r in rows]
        depth = None if sub_t[0][0] is None else np.stack([s[0] for s in sub_t])
        spec = None if sub_t[0][1] is None else np.stack([s[1] for s in sub_t])
        with no_grad():
            return net.embed(depth, spec, np.stack([s[2] for s in sub_t]), np.stack([s[3] for s in sub_t])).data

    def _start_tables(self) -> list[AgentTable]:
        """New tables seeded with the rows still referenced by each cache; cached embeddings are recomputed."""
        tables = [AgentTable() for _ in range(self.n)]
        for i in range(self.n):
            cache = self.caches[i]
            if self.carry is None:
                continue
            mapping = {}
            for e in range(self.E):
                for s in range(cache.k):
                    r = int(cache.refs[e, s])
                    if r < 0:
                        continue
                    if r not in mapping:
                        mapping[r] = tables[i].add(*self.carry[i].row(r))
                    cache.refs[e, s] = mapping[r]
            if len(tables[i]):
                z = self._embed_rows(i, tables[i], range(len(tables[i])))
                ok = cache.refs >= 0
                cache.z[ok] = z[cache.refs[ok]]
        return tables

    def _agent_inputs(self, i: int):
        rows = [observation_inputs(self.obs[e][i], self.world.dims) for e in range(self.E)]
        return rows

    def _forward_agents(self, tables=None, commit: bool = True):
        """One decision for every agent and env. Returns per-agent dicts and the stacked critic inputs."""
        out = []
        for i, net in enumerate(self.model.agents):
            rows = self._agent_inputs(i)
            depth = None if rows[0][0] is None else np.stack([r[0] for r in rows])
            spec = None if rows[0][1] is None else np.stack([r[1] for r in rows])
            pose5 = np.stack([r[2] for r in rows])
            goal = np.stack([r[3] for r in rows])
            prev = one_hot(self.prev[i])
            with no_grad():
                z = net.embed(depth, spec, pose5, goal).data
                zw, aw, pw, vw = self.caches[i].window(z, prev, pose5)
                z_h = net.history(zw, aw, pw, vw).data
                beliefs = []
                if net.belief is not None:
                    g, p = net.belief(spec, pose5)
                    for e in range(self.E):
                        pose = self.obs[e][i].pose
                        gg = g.data[e]
                        pred = BeliefPrediction(gg, to_agent_frame(gg, (pose.x, pose.y, pose.heading)), p.data[e])
                        beliefs.append(ema_update(self.beliefs[i][e], pred, self.cfg.alpha))
                else:
                    beliefs = [self.beliefs[i][e] for e in range(self.E)]
                bvec = np.stack([net.belief_vector(b, self.cfg.use_loc_belief, self.cfg.use_cat_belief)
                                 for b in beliefs])
                logits = net.logits(z_h, bvec).data
            out.append(dict(rows=rows, z=z, z_h=z_h, bvec=bvec, beliefs=beliefs, logits=logits,
                            prev=prev, pose5=pose5, window_refs=self.caches[i].refs.copy()))
        return out

    def _value(self, per_agent, states) -> np.ndarray:
        with no_grad():
            return self.model.joint_value([p["z_h"] for p in per_agent], [p["bvec"] for p in per_agent],
                                          states).data

    def _states(self) -> np.ndarray:
        rows = []
        for env in self.envs:
            st = env.state
            s = state_feature(env.scene, env.spec.targets, st.found, st.poses, st.t, env.spec.horizon)
            rows.append(s if self.cfg.use_state else np.zeros_like(s))
        return np.stack(rows)

    def collect(self) -> RolloutBatch:
        T, E, n = self.cfg.rollout, self.E, self.n
        tables = self._start_tables()
        k = self.model.config.cache
        windows = [np.full((T, E, k + 1), -1, dtype=np.int64) for _ in range(n)]
        belief_rows = [np.full((T, E), -1, dtype=np.int64) for _ in range(n)]
        actions = np.zeros((n, T, E), dtype=np.int64)
        logp_old = np.zeros((n, T, E))
        beliefs = np.zeros((n, T, E, BELIEF_DIM))
        goal_star = np.zeros((n, T, E, 2))
        cat_star = np.zeros((n, T, E, len(CATEGORIES)))
        rewards = np.zeros((T, E))
        dones = np.zeros((T, E))
        values = np.zeros((T + 1, E))
        states = np.zeros((T, E, self.model.critic.s_dim))
        finished = []
        for t in range(T):
            states[t] = self._states()
            per = self._forward_agents()
            values[t] = self._value(per, states[t])
            for i, p in enumerate(per):
                logp, _ = policy_distribution(p["logits"])
                a = sample_actions(logp, self.rng)
                actions[i, t] = a
                logp_old[i, t] = logp[np.arange(E), a]
                beliefs[i, t] = p["bvec"]
                refs = np.zeros(E, dtype=np.int64)
                for e in range(E):
                    d, s, pose5, goal = p["rows"][e]
                    refs[e] = tables[i].add(d, s, pose5, goal, p["prev"][e])
                    env = self.envs[e]
                    if s is not None:
                        belief_rows[i][t, e] = refs[e]
                        cells = env.target_cells()
                        cats = [env.scene.targets[ti].category for ti in env.spec.targets]
                        sup = supervision(env.scene, env.state.poses[i].cell, cells, cats, env.state.found,
                                          self.cfg.supervision_metric)
                        goal_star[i, t, e] = sup.goal_star
                        cat_star[i, t, e] = sup.cat_star
                windows[i][t] = np.concatenate([p["window_refs"], refs[:, None]], axis=1)
                self.caches[i].push(p["z"], p["prev"], p["pose5"], refs)
                for e in range(E):
                    self.beliefs[i][e] = p["beliefs"][e]
                self.prev[i] = a
            for e in range(E):
                outcome = self.envs[e].step(actions[:, t, e])
                rewards[t, e] = outcome.reward
                self.ep_return[e] += outcome.reward
                if outcome.terminal:
                    dones[t, e] = 1.0
                    finished.append(self.envs[e].metrics())
                    self.ep_return[e] = 0.0
                    self._reset_env(e)
                else:
                    self.obs[e] = outcome.observations
        # bootstrap from the observation after the last step, without advancing any state
        per = self._forward_agents()
        values[T] = self._value(per, self._states())
        self.carry = tables
        return RolloutBatch(tables, windows, actions, logp_old, beliefs, belief_rows, goal_star, cat_star,
                            rewards, dones, values, states, episodes=finished)


# -- update ---------------------------------------------------------------------------
def _window_gather(table_arr: np.ndarray, idx: np.ndarray) -> np.ndarray:
    padded = np.concatenate([table_arr, np.zeros((1,) + table_arr.shape[1:])], axis=0)
    return padded[np.where(idx < 0, len(table_arr), idx)]


class Learner:
    """Owns the optimizer and applies the joint clipped update to all agents and the critic."""

    def __init__(self, model: MultiAgentModel, cfg: TrainConfig):
        self.model, self.cfg = model, cfg
        self.params = dict(model.named_parameters())
        self.optimizer = Adam(model.parameter_groups(cfg.actor_lr, cfg.critic_lr), eps=cfg.adam_eps,
                              max_grad_norm=cfg.grad_clip, clip_per_group=True)

    def losses(self, batch: RolloutBatch, sel: np.ndarray):
        """Build the combined loss for the flattened sample indices ``sel``. Returns (loss, stats)."""
        cfg, model = self.cfg, self.model
        n = len(model.agents)
        E = batch.rewards.shape[1]
        adv = batch.advantages.reshape(-1)[sel]
        if cfg.normalize_advantages and adv.size > 1:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        z_hs, bvecs, J_terms, b_terms = [], [], [], []
        stats = {}
        ents = []
        kls = []
        for i, net in enumerate(model.agents):
            depth, spec, pose5, goal, prev = batch.tables[i].arrays()
            Z = net.embed(depth, spec, pose5, goal)
            Zp = concat([Z, np.zeros((1, Z.shape[1]))], axis=0)
            idx = batch.windows[i].reshape(-1, batch.windows[i].shape[-1])[sel]
            zw = take_rows(Zp, np.where(idx < 0, Z.shape[0], idx))
            aw = _window_gather(prev, idx)
            pw = _window_gather(pose5, idx)
            z_h = net.history(zw, aw, pw, idx >= 0)
            bvec = batch.beliefs[i].reshape(-1, BELIEF_DIM)[sel]
            logits = net.logits(z_h, bvec)
            logp_all, ent = log_prob_entropy(logits)
            acts = batch.actions[i].reshape(-1)[sel]
            lp = tsum(mul(logp_all, one_hot(acts)), axis=-1)
            old = batch.logp_old[i].reshape(-1)[sel]
            J_terms.append(policy_objective(lp, old, adv, ent, cfg.clip_eps, cfg.beta))
            ents.append(float(ent.data.mean()))
            kls.append(float(np.mean(old - lp.data)))
            z_hs.append(z_h)
            bvecs.append(bvec)
            if net.belief is not None and cfg.belief_weight > 0:
                rows = batch.belief_rows[i].reshape(-1)[sel]
                g, p = net.belief(spec[rows], pose5[rows])
                bl = belief_loss(g, p, batch.goal_star[i].reshape(-1, 2)[sel], batch.cat_star[i].reshape(-1, len(CATEGORIES))[sel])
                b_terms.append(bl)
                stats[f"belief_loss_{i}"] = bl.item()
        v_new = model.joint_value(z_hs, bvecs, batch.states.reshape(-1, batch.states.shape[-1])[sel])
        L = value_loss(v_new, batch.values[:-1].reshape(-1)[sel], batch.returns.reshape(-1)[sel], cfg.value_clip)
        J = J_terms[0]
        for term in J_terms[1:]:
            J = J + term
        loss = combine_shared_loss(J, L, cfg.mu, n)
        for bl in b_terms:
            loss = loss + mul(bl, cfg.belief_weight)
        stats.update(policy_objective=J.item(), value_loss=L.item(), loss=loss.item(),
                     entropy=float(np.mean(ents)), approx_kl=float(np.mean(kls)))
        return loss, stats

    def update(self, batch: RolloutBatch, rng: np.random.Generator) -> dict:
        if batch.advantages is None:
            raise ValueError("advantages must be computed before the update")
        B = batch.size
        names = list(self.params)
        tensors = [self.params[k] for k in names]
        stats = {}
        for _ in range(self.cfg.epochs):
            order = rng.permutation(B) if self.cfg.minibatches > 1 else np.arange(B)
            for sel in np.array_split(order, self.cfg.minibatches):
                loss, stats = self.losses(batch, sel)
                if not math.isfinite(loss.item()):
                    raise NonFiniteGradient(f"non-finite loss {loss.item()} at optimizer step {self.optimizer.state.step}")
                gs = grad(loss, tensors)
                stats["grad_norm"] = self.optimizer.step(dict(zip(names, gs)))
        return stats


# -- evaluation -------------------------------------------------------------------------
def evaluate(model: MultiAgentModel, world: World, episodes, cfg: TrainConfig | None = None, greedy: bool = True,
             seed: int = 0, return_traces: bool = False):
    """Run decentralized actors over ``episodes``; returns EpisodeMetrics (and traces)."""
    alpha = cfg.alpha if cfg else 0.5
    use_loc = cfg.use_loc_belief if cfg else True
    use_cat = cfg.use_cat_belief if cfg else True
    actors = [DecentralizedActor(net, alpha, use_loc, use_cat) for net in model.agents]
    return run_actors(actors, world, episodes, greedy, seed, return_traces)


def run_actors(actors, world: World, episodes, greedy: bool = True, seed: int = 0, return_traces: bool = False):
    mods = [tuple(a.net.modalities) for a in actors]
    env = Env(world.scene, world.sensors, world.reward, modalities=mods)
    rng = np.random.default_rng(seed)
    results, traces = [], []
    for spec in episodes:
        for a in actors:
            a.reset()
        _, obs = env.reset(spec)
        while True:
            acts = [a.step(o, rng, greedy)[0] for a, o in zip(actors, obs)]
            out = env.step(acts)
            if out.terminal:
                break
            obs = out.observations
        results.append(env.metrics())
        if return_traces:
            traces.append(list(env.trace))
    return (results, traces) if return_traces else results


def summarize(metrics) -> dict:
    if not metrics:
        return {}
    return {"success": float(np.mean([m.success for m in metrics])),
            "dist": float(np.mean([m.dist for m in metrics])),
            "detect": float(np.mean([m.detect for m in metrics])),
            "steps": float(np.mean([m.steps for m in metrics])),
            "timeout": float(np.mean([m.timeout for m in metrics])),
            "return": float(np.mean([m.ret for m in metrics])),
            "episodes": len(metrics)}


# -- training loop ------------------------------------------------------------------------
def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _set_rng_state(rng: np.random.Generator, state: dict) -> None:
    rng.bit_generator.state = state


class Trainer:
    """Full training loop with evaluation cadence, a JSON-lines metrics log and checkpoints."""

    def __init__(self, cfg: TrainConfig, run_dir=None):
        self.cfg = cfg.validate()
        self.world = build_world(cfg)
        self.model = build_model(cfg, self.world)
        self.learner = Learner(self.model, cfg)
        self.rng = np.random.default_rng([cfg.seed, 2])
        self.collector = RolloutCollector(self.model, self.world, cfg, np.random.default_rng([cfg.seed, 3]))
        self.update_index = 0
        self.best_eval = None
        self.run_dir = Path(run_dir) if run_dir else None
        if self.run_dir:
            (self.run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
            (self.run_dir / "episodes").mkdir(exist_ok=True)
            snap = self.run_dir / "config.snapshot"
            snap.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))

    @property
    def log_path(self):
        return self.run_dir / "metrics.log" if self.run_dir else None

    def eval_episodes(self):
        eps = self.world.val
        if self.cfg.eval_episodes:
            eps = eps[: self.cfg.eval_episodes]
        return eps

    def train_step(self) -> dict:
        batch = self.collector.collect()
        batch.advantages, batch.returns = compute_gae(batch.rewards, batch.values, batch.dones,
                                                      self.cfg.gamma, self.cfg.lam)
        stats = self.learner.update(batch, self.rng)
        row = {"update": self.update_index}
        row.update({k: round(float(v), 12) for k, v in stats.items()})
        ep = summarize(batch.episodes)
        row.update({f"train_{k}": v for k, v in ep.items()})
        self.update_index += 1
        if self.update_index % self.cfg.eval_every == 0:
            eps = self.eval_episodes()
            metrics = evaluate(self.model, self.world, eps, self.cfg)
            if self.run_dir:
                with open(self.run_dir / "episodes" / f"eval_{self.update_index:06d}.jsonl", "w") as fh:
                    for spec, m in zip(eps, metrics):
                        fh.write(json.dumps(dict(m.to_dict(), episode_id=spec.episode_id), sort_keys=True) + "\n")
            ev = summarize(metrics)
            row.update({f"eval_{k}": v for k, v in ev.items()})
            if self.best_eval is None or ev["success"] > self.best_eval:
                self.best_eval = ev["success"]
        return row

    def train(self, updates: int | None = None, callback=None) -> list[dict]:
        total = updates if updates is not None else self.cfg.updates
        rows = []
        while self.update_index < total:
            row = self.train_step()
            rows.append(row)
            if self.log_path:
                with open(self.log_path, "a") as fh:
                    fh.write(json.dumps(row, sort_keys=True) + "\n")
            if self.run_dir and self.update_index % self.cfg.checkpoint_every == 0:
                self.save(self.run_dir / "checkpoints" / f"update_{self.update_index:06d}.ckpt")
            if callback:
                callback(row)
            if (self.cfg.target_success is not None and "eval_success" in row
                    and row["eval_success"] >= self.cfg.target_success):
                break
        if self.run_dir:
            self.save(self.run_dir / "checkpoints" / "final.ckpt")
        return rows

    def save(self, path) -> None:
        arrays = {f"param/{k}": v for k, v in self.model.state_dict().items()}
        arrays.update({f"optim/{k}": v for k, v in self.learner.optimizer.state_arrays().items()})
        meta = {"config": self.cfg.to_dict(), "update": self.update_index, "best_eval": self.best_eval,
                "rng": _rng_state(self.rng), "collector_rng": _rng_state(self.collector.rng)}
        save_checkpoint(path, arrays, meta)

    @classmethod
    def resume(cls, path, run_dir=None) -> "Trainer":
        arrays, meta = load_checkpoint(path)
        tr = cls(TrainConfig.from_dict(meta["config"]), run_dir)
        tr.model.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
        tr.learner.optimizer.load_state_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("optim/")})
        tr.update_index = int(meta["update"])
        tr.best_eval = meta.get("best_eval")
        _set_rng_state(tr.rng, meta["rng"])
        _set_rng_state(tr.collector.rng, meta["collector_rng"])
        return tr


def load_model(path) -> tuple[MultiAgentModel, TrainConfig, World, dict]:
    """Rebuild a trained model and its world from a checkpoint."""
    arrays, meta = load_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    world = build_world(cfg)
    model = build_model(cfg, world)
    model.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
    return model, cfg, world, meta
