"""Per-agent actors (encoders, history transformer, policy head) and the centralized critic."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import nn, no_grad
from .autodiff import functional as F
from .autodiff.tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat,
    exp,
    getitem,
    log_softmax,
    mul,
    relu,
    reshape,
    tsum,
)
from .belief import Belief, BeliefPredictor, ConvStackConfig, pose_features, spectrogram_input, to_agent_frame
from .env import N_ACTIONS
from .scene import CATEGORIES

MODALITIES = ("depth", "audio")
BELIEF_DIM = 2 + len(CATEGORIES)
GOAL_DIM = len(CATEGORIES)
POSE_DIM = 5


@dataclass(frozen=True)
class ModelConfig:
    """Network sizes. Defaults follow the full architecture; ``desk`` is the CPU-scale variant."""

    vision_hidden: int = 128
    audio_hidden: int = 128
    hidden: int = 256
    heads: int = 8
    cache: int = 150
    vision_arch: ConvStackConfig = ConvStackConfig()
    belief_arch: ConvStackConfig = ConvStackConfig()
    audio_channels: tuple = (32, 64, 64)
    resize: int | None = 64
    action_embed: int = 16
    pose_embed: int = 16
    head_gain: float = 0.01
    positional: str = "sinusoidal"  # sinusoidal | learned

    @classmethod
    def desk(cls) -> "ModelConfig":
        return cls(vision_hidden=32, audio_hidden=32, hidden=32, heads=8, cache=8,
                   vision_arch=ConvStackConfig(stem=4, stages=((8, 2), (8, 2)), blocks=1),
                   belief_arch=ConvStackConfig.desk(), audio_channels=(8, 16, 16), resize=None)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["vision_arch"] = dict(self.vision_arch.__dict__)
        d["belief_arch"] = dict(self.belief_arch.__dict__)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("vision_arch", "belief_arch"):
            if isinstance(d.get(key), dict):
                a = dict(d[key])
                a["stages"] = tuple(tuple(s) for s in a["stages"])
                d[key] = ConvStackConfig(**a)
        if "audio_channels" in d:
            d["audio_channels"] = tuple(d["audio_channels"])
        return cls(**d)


@dataclass(frozen=True)
class WorldDims:
    """Static sizes an agent network needs: grid bounds, horizon and sensor shapes."""

    width: int
    height: int
    horizon: int
    depth_shape: tuple[int, int]
    spec_shape: tuple[int, int, int]
    max_depth: float = 5.0


class VisionEncoder(nn.Module):
    """Residual conv stack over the depth image, then Linear + ReLU."""

    def __init__(self, depth_shape, rng, arch: ConvStackConfig, hidden: int, resize: int | None, max_depth: float):
        self.resize = resize
        self.max_depth = max_depth
        h, w = (resize, resize) if resize else depth_shape
        self.stack = nn.ResNetStack(1, arch.stem, list(arch.stages), arch.blocks, rng)
        oh, ow = self.stack.output_hw(h, w)
        self.flat = self.stack.out_channels * oh * ow
        self.proj = nn.Linear(self.flat, hidden, rng)
        self.out_dim = hidden

    def preprocess(self, depth: np.ndarray) -> np.ndarray:
        x = np.asarray(depth, dtype=np.float64) / self.max_depth
        if self.resize:
            x = F.resize_nearest(x, self.resize)
        return x[:, None] if x.ndim == 3 else x

    def forward(self, x):
        x = as_tensor(x)
        z = reshape(self.stack(x), (x.shape[0], self.flat))
        return relu(self.proj(z))


class AudioEncoder(nn.Module):
    """Three-layer conv encoder over the spectrogram, then Linear + ReLU."""

    def __init__(self, spec_shape, rng, channels, hidden: int):
        c, k, f = spec_shape
        c1, c2, c3 = channels
        self.conv1 = nn.Conv2d(c, c1, 5, rng, stride=2)
        self.conv2 = nn.Conv2d(c1, c2, 3, rng, stride=2)
        self.conv3 = nn.Conv2d(c2, c3, 3, rng, stride=1)
        h, w = self.conv1.output_hw(k, f)
        h, w = self.conv2.output_hw(h, w)
        h, w = self.conv3.output_hw(h, w)
        if h <= 0 or w <= 0:
            raise ShapeError(f"spectrogram shape {tuple(spec_shape)} too small for the audio encoder")
        self.flat = c3 * h * w
        self.proj = nn.Linear(self.flat, hidden, rng)
        self.out_dim = hidden

    def forward(self, x):
        x = as_tensor(x)
        h = relu(self.conv1(x))
        h = relu(self.conv2(h))
        h = self.conv3(h)
        return relu(self.proj(reshape(h, (x.shape[0], self.flat))))


def sinusoidal_table(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    rate = 1.0 / np.power(10000.0, (2 * (i // 2)) / dim)
    ang = pos * rate
    return np.where(i % 2 == 0, np.sin(ang), np.cos(ang))


class HistoryEncoder(nn.Module):
    """Fuses each step's observation embedding, previous action and pose into a token,
    then runs one encoder and one decoder layer over the right-aligned window.
    The output is read at the last (current) position.
    """

    def __init__(self, d_obs: int, config: ModelConfig, rng):
        d = config.hidden
        self.window = config.cache + 1
        self.action_proj = nn.Linear(N_ACTIONS, config.action_embed, rng, gain=1.0)
        self.pose_proj = nn.Linear(POSE_DIM, config.pose_embed, rng, gain=1.0)
        self.fuse = nn.MLP([d_obs + config.action_embed + config.pose_embed, d, d], rng, out_gain=1.0)
        self.encoder = nn.TransformerEncoderLayer(d, config.heads, d, rng)
        self.decoder = nn.TransformerDecoderLayer(d, config.heads, d, rng)
        if config.positional == "learned":
            self.position = nn.parameter(0.02 * rng.standard_normal((self.window, d)))
        else:
            self.position = sinusoidal_table(self.window, d)
        self.dim = d

    def forward(self, z, prev_actions, poses, valid):
        """``z``: (B, S, d_obs); ``prev_actions``: (B, S, |A|); ``poses``: (B, S, 5); ``valid``: (B, S) bool.

        S must equal cache + 1 and the last slot must be valid.
        """
        z = as_tensor(z)
        b, s = z.shape[0], z.shape[1]
        if s != self.window:
            raise ShapeError(f"history window has {s} slots, expected {self.window}")
        valid = np.asarray(valid, dtype=bool)
        if not valid[:, -1].all():
            raise ShapeError("the current (last) history slot must be valid")
        tok = concat([z, self.action_proj(prev_actions), self.pose_proj(poses)], axis=-1)
        tok = add(self.fuse(tok), self.position)
        key_ok = valid[:, None, :]
        pad_mask = np.broadcast_to(key_ok, (b, s, s))
        causal = np.tril(np.ones((s, s), dtype=bool))[None]
        memory = self.encoder(tok, pad_mask)
        out = self.decoder(tok, memory, pad_mask & causal, pad_mask)
        return getitem(out, (slice(None), s - 1))


class HistoryCache:
    """Fixed-capacity history of the last ``k`` steps for ``n`` parallel streams, oldest first."""

    def __init__(self, k: int, d_obs: int, n: int = 1):
        self.k, self.d_obs, self.n = k, d_obs, n
        self.z = np.zeros((n, k, d_obs))
        self.actions = np.zeros((n, k, N_ACTIONS))
        self.poses = np.zeros((n, k, POSE_DIM))
        self.valid = np.zeros((n, k), dtype=bool)
        self.refs = np.full((n, k), -1, dtype=np.int64)

    def __len__(self) -> int:
        return int(self.valid[0].sum())

    def sizes(self) -> np.ndarray:
        return self.valid.sum(axis=1)

    def clear(self, stream: int | None = None) -> None:
        idx = slice(None) if stream is None else stream
        self.z[idx] = 0.0
        self.actions[idx] = 0.0
        self.poses[idx] = 0.0
        self.valid[idx] = False
        self.refs[idx] = -1

    def push(self, z, prev_actions, poses, refs=None) -> None:
        """Append one step for every stream, evicting the oldest entry when full."""
        if self.k == 0:
            return
        for arr in (self.z, self.actions, self.poses, self.valid, self.refs):
            arr[:, :-1] = arr[:, 1:]
        self.z[:, -1] = z
        self.actions[:, -1] = prev_actions
        self.poses[:, -1] = poses
        self.valid[:, -1] = True
        self.refs[:, -1] = -1 if refs is None else refs

    def window(self, z, prev_actions, poses):
        """Cached steps followed by the current one: arrays of shape (n, k + 1, ...)."""
        return (np.concatenate([self.z, np.asarray(z)[:, None]], axis=1),
                np.concatenate([self.actions, np.asarray(prev_actions)[:, None]], axis=1),
                np.concatenate([self.poses, np.asarray(poses)[:, None]], axis=1),
                np.concatenate([self.valid, np.ones((self.n, 1), dtype=bool)], axis=1))


def one_hot(actions, n: int = N_ACTIONS) -> np.ndarray:
    a = np.asarray(actions, dtype=np.int64)
    out = np.zeros(a.shape + (n,))
    ok = a >= 0
    out[ok, a[ok]] = 1.0
    return out


class AgentNetwork(nn.Module):
    """Everything one agent needs to act: its encoders, belief predictor, history transformer and policy head."""

    def __init__(self, modalities, dims: WorldDims, config: ModelConfig, rng: np.random.Generator):
        modalities = tuple(m for m in MODALITIES if m in modalities)
        if not modalities:
            raise ValueError("an agent needs at least one modality")
        self.modalities = modalities
        self.dims = dims
        self.config = config
        d_obs = POSE_DIM + GOAL_DIM
        self.vision = None
        self.audio = None
        self.belief = None
        if "depth" in modalities:
            self.vision = VisionEncoder(dims.depth_shape, rng, config.vision_arch, config.vision_hidden,
                                        config.resize, dims.max_depth)
            d_obs += self.vision.out_dim
        if "audio" in modalities:
            self.audio = AudioEncoder(dims.spec_shape, rng, config.audio_channels, config.audio_hidden)
            d_obs += self.audio.out_dim
            self.belief = BeliefPredictor(dims.spec_shape, rng, config.belief_arch,
                                          goal_scale=max(dims.width, dims.height) / 2.0)
        self.d_obs = d_obs
        self.history = HistoryEncoder(d_obs, config, rng)
        self.policy_head = nn.MLP([config.hidden + BELIEF_DIM, config.hidden, N_ACTIONS], rng,
                                  out_gain=config.head_gain)
        self.loc_scale = float(max(dims.width, dims.height))

    def shared_parameters(self) -> dict:
        """Parameters used by both the actor and the critic (everything except the two heads)."""
        return {k: v for k, v in self.named_parameters() if not k.startswith(("policy_head.", "belief."))}

    def embed(self, depth, spec, pose5, goal):
        """Observation embedding z_o = z_depth ⊕ z_audio ⊕ pose ⊕ goal for a batch."""
        parts = []
        if self.vision is not None:
            if depth is None:
                raise ValueError("agent declares a depth sensor but no depth input was given")
            parts.append(self.vision(self.vision.preprocess(depth)))
        if self.audio is not None:
            if spec is None:
                raise ValueError("agent declares an audio sensor but no spectrogram was given")
            parts.append(self.audio(spec))
        pose5, goal = np.asarray(pose5, dtype=np.float64), np.asarray(goal, dtype=np.float64)
        if pose5.shape[-1] != POSE_DIM or goal.shape[-1] != GOAL_DIM:
            raise ShapeError(f"embed expects pose width {POSE_DIM} and goal width {GOAL_DIM}, "
                             f"got {pose5.shape[-1]} and {goal.shape[-1]}")
        parts += [as_tensor(pose5), as_tensor(goal)]
        return concat(parts, axis=-1)

    def belief_vector(self, belief: Belief | None, use_loc: bool = True, use_cat: bool = True) -> np.ndarray:
        if belief is None or self.belief is None or not belief.initialized:
            return np.zeros(BELIEF_DIM)
        loc = belief.loc / self.loc_scale if use_loc else np.zeros(2)
        cat = belief.cat if use_cat else np.zeros(len(CATEGORIES))
        return np.concatenate([loc, cat])

    def logits(self, z_h, beliefs):
        return self.policy_head(concat([as_tensor(z_h), as_tensor(beliefs)], axis=-1))


# -- observation preprocessing shared by rollout, evaluation and the actor -------
def observation_inputs(obs, dims: WorldDims, max_depth: float | None = None):
    """Numpy inputs for one observation: (depth (1,H,W) | None, spec (2,K,F) | None, pose5, goal)."""
    p = obs.pose
    pose5 = pose_features(p.x, p.y, p.heading, p.t, dims.width, dims.height, dims.horizon)
    depth = None if obs.depth is None else obs.depth.values[None]
    spec = None if obs.spectrogram is None else spectrogram_input(obs.spectrogram.magnitudes)
    return depth, spec, pose5, np.asarray(obs.goal, dtype=np.float64)


def policy_distribution(logits) -> tuple[np.ndarray, np.ndarray]:
    """(log-probabilities, entropy) of a categorical over the last axis (numpy)."""
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    ent = -(np.exp(logp) * logp).sum(axis=-1)
    return logp, ent


def sample_actions(logp: np.ndarray, rng: np.random.Generator, greedy: bool = False) -> np.ndarray:
    if greedy:
        return logp.argmax(axis=-1)
    u = rng.random(logp.shape[:-1])
    cdf = np.cumsum(np.exp(logp), axis=-1)
    cdf[..., -1] = 1.0
    return (u[..., None] > cdf).sum(axis=-1)


def log_prob_entropy(logits):
    """Tensor (log-probs, entropy) for a batch of logits."""
    logp = log_softmax(logits, axis=-1)
    ent = -tsum(mul(exp(logp), logp), axis=-1)
    return logp, ent


@dataclass
class StepContext:
    """Per-stream recurrent state of an acting agent."""

    cache: HistoryCache
    beliefs: list = field(default_factory=list)
    prev_actions: np.ndarray | None = None


class DecentralizedActor:
    """Execution-time policy for one agent.

    It is built from the agent network alone and reads nothing but that
    agent's own observation stream, its own previous actions and its own
    belief. There is no path to the critic or to any global state.
    """

    def __init__(self, net: AgentNetwork, alpha: float = 0.5, use_loc: bool = True, use_cat: bool = True):
        self.net = net
        self.alpha = alpha
        self.use_loc, self.use_cat = use_loc, use_cat
        self.reset()

    def reset(self) -> None:
        self.cache = HistoryCache(self.net.config.cache, self.net.d_obs, 1)
        self.belief = Belief()
        self.prev_action = -1

    def step(self, obs, rng: np.random.Generator | None = None, greedy: bool = True):
        """Choose an action from one local observation. Returns (action, log-prob, entropy, belief)."""
        from .belief import ema_update

        net = self.net
        depth, spec, pose5, goal = observation_inputs(obs, net.dims)
        prev = one_hot([self.prev_action])
        with no_grad():
            z = net.embed(None if depth is None else depth[None], None if spec is None else spec[None],
                          pose5[None], goal[None]).data
            zw, aw, pw, vw = self.cache.window(z, prev, pose5[None])
            z_h = net.history(zw, aw, pw, vw).data
            if net.belief is not None:
                pred = net.belief.predict(spec, (obs.pose.x, obs.pose.y, obs.pose.heading), pose5)
                self.belief = ema_update(self.belief, pred, self.alpha)
            b = net.belief_vector(self.belief, self.use_loc, self.use_cat)[None]
            logits = net.logits(z_h, b).data
        logp, ent = policy_distribution(logits)
        a = int(sample_actions(logp, rng, greedy)[0])
        self.cache.push(z, prev, pose5[None])
        self.prev_action = a
        return a, float(logp[0, a]), float(ent[0]), self.belief


# -- critic -------------------------------------------------------------------
def state_dim(n_agents: int, n_targets: int) -> int:
    return n_targets * (2 + len(CATEGORIES) + 1) + n_agents * 4 + 1


def state_feature(scene, target_indices, found, poses, t: int, horizon: int) -> np.ndarray:
    """Global state for the critic: targets (position, category, found), agent poses, time. All in [0, 1]."""
    w, h = scene.width, scene.height
    parts = []
    for j, ti in enumerate(target_indices):
        tgt = scene.targets[ti]
        parts += [tgt.cell[0] / w, tgt.cell[1] / h]
        parts += list(CATEGORIES.multi_hot([tgt.category]))
        parts.append(float(found[j]))
    for p in poses:
        parts += [p.x / w, p.y / h, (np.cos(p.heading) + 1) / 2, (np.sin(p.heading) + 1) / 2]
    parts.append(t / horizon)
    return np.clip(np.array(parts, dtype=np.float64), 0.0, 1.0)


class Critic(nn.Module):
    """Value head over the joint history embedding, the joint beliefs and the state feature."""

    def __init__(self, n_agents: int, hidden: int, s_dim: int, rng, head_gain: float = 0.01, zero: bool = False):
        self.n_agents = n_agents
        self.s_dim = s_dim
        d_in = n_agents * (hidden + BELIEF_DIM) + s_dim
        self.head = nn.MLP([d_in, hidden, hidden, 1], rng, out_gain=head_gain, zero_last=zero)

    def forward(self, z_hs, beliefs, state):
        if len(z_hs) != self.n_agents or len(beliefs) != self.n_agents:
            raise ValueError(f"critic expects {self.n_agents} agents, got {len(z_hs)} embeddings "
                             f"and {len(beliefs)} beliefs")
        x = concat([as_tensor(z) for z in z_hs] + [as_tensor(b) for b in beliefs] + [as_tensor(state)], axis=-1)
        return reshape(self.head(x), (x.shape[0],))


class MultiAgentModel(nn.Module):
    """All agents' networks plus the centralized critic that reuses their history encoders."""

    def __init__(self, agent_modalities, dims: WorldDims, config: ModelConfig, n_targets: int,
                 rng: np.random.Generator, zero_value_head: bool = False):
        self.agents = [AgentNetwork(m, dims, config, rng) for m in agent_modalities]
        self.dims = dims
        self.config = config
        self.n_targets = n_targets
        self.critic = Critic(len(self.agents), config.hidden, state_dim(len(self.agents), n_targets), rng,
                             config.head_gain, zero_value_head)

    def joint_value(self, z_hs, beliefs, state):
        return self.critic(z_hs, beliefs, state)

    def parameter_groups(self, actor_lr: float, critic_lr: float) -> dict:
        groups = {}
        for i, ag in enumerate(self.agents):
            params = {f"agents.{i}.{k}": v for k, v in ag.named_parameters()}
            groups[f"agent{i}"] = ({k: v for k, v in params.items() if f"agents.{i}.belief." not in k}, actor_lr)
            belief = {k: v for k, v in params.items() if f"agents.{i}.belief." in k}
            if belief:
                groups[f"agent{i}.belief"] = (belief, actor_lr)
        groups["critic"] = (dict(self.critic.named_parameters("critic.")), critic_lr)
        return groups
