"""Cooperative multi-agent navigation environment on a scene grid.

Agents move on the 4-connected grid with cardinal headings, share one team
reward, and find targets by issuing Stop within the success radius.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .scene import CATEGORIES, EpisodeSpec, Scene
from .sensors import (
    HEADINGS,
    AudioConfig,
    DepthConfig,
    Observation,
    Pose,
    make_source,
    render_binaural,
    render_depth,
    stft_spectrogram,
)


class Action(enum.IntEnum):
    MOVE_FORWARD = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2
    STOP = 3


N_ACTIONS = len(Action)


class EnvError(RuntimeError):
    pass


@dataclass(frozen=True)
class SensorConfig:
    depth: DepthConfig = DepthConfig()
    audio: AudioConfig = AudioConfig()

    @classmethod
    def desk(cls) -> "SensorConfig":
        return cls(DepthConfig(), AudioConfig.desk())


@dataclass(frozen=True)
class RewardConfig:
    """Reward constants. ``mode`` is chosen from the episode when left as ``auto``."""

    mode: str = "auto"  # auto | single | multi | maze
    agent_slack: float = -0.02
    success_reward: float = 20.0
    team_slack: float = -0.02
    stop_penalty: float = -0.2
    goal_reward: float = 20.0
    maze_slack: float = -0.002
    maze_goal_scale: float = 3.0
    maze_distance_scale: float = 2.0
    maze_progressive_scale: float = 1.5
    progressive_on: str = "goal"  # goal | distance

    def resolve(self, scene: Scene, n_targets: int) -> str:
        if self.mode != "auto":
            return self.mode
        if scene.kind == "maze":
            return "maze"
        return "single" if n_targets == 1 else "multi"


@dataclass
class WorldState:
    scene: Scene
    poses: list[Pose]
    found: np.ndarray  # bool per episode target
    t: int = 0
    terminal: bool = False

    @property
    def remaining_sounds(self) -> set[int]:
        return {int(i) for i in np.flatnonzero(~self.found)}


@dataclass
class StepOutcome:
    observations: list[Observation | None]
    reward: float
    terminal: bool
    newly_found: list[int]
    stopped: list[bool]
    components: dict = field(default_factory=dict)


@dataclass
class EpisodeMetrics:
    success: bool
    steps: int
    timeout: bool
    dist: float
    detect: int
    ret: float

    def to_dict(self) -> dict:
        return {"success": self.success, "steps": self.steps, "timeout": self.timeout,
                "dist": self.dist, "detect": self.detect, "return": self.ret}


def _move(scene: Scene, pose: Pose, action: int, t: int) -> Pose:
    h = pose.heading_index
    x, y = pose.cell
    if action == Action.MOVE_FORWARD:
        nx, ny = x + int(HEADINGS[h][0]), y + int(HEADINGS[h][1])
        if scene.navigable((nx, ny)):
            x, y = nx, ny
    elif action == Action.TURN_LEFT:
        h = (h + 1) % 4
    elif action == Action.TURN_RIGHT:
        h = (h - 1) % 4
    return Pose.from_cell(x, y, h, t)


class Env:
    """Joint-action environment for one scene.

    ``modalities`` lists, per agent, which sensors to render ("depth",
    "audio"). With ``observe=False`` no sensors are rendered at all, which is
    handy for reward bookkeeping runs.
    """

    def __init__(self, scene: Scene, sensors: SensorConfig = SensorConfig(),
                 reward: RewardConfig = RewardConfig(), modalities=None, observe: bool = True):
        self.scene = scene
        self.sensors = sensors
        self.reward_cfg = reward
        self.modalities = modalities
        self.observe = observe
        self.state: WorldState | None = None
        self.spec: EpisodeSpec | None = None
        self.trace: list[dict] = []
        self._sources = []

    # -- helpers --------------------------------------------------------------
    def target_cells(self) -> list[tuple[int, int]]:
        return [self.scene.targets[i].cell for i in self.spec.targets]

    def _dist(self, cell, target_pos: int) -> float:
        tc = self.scene.targets[self.spec.targets[target_pos]].cell
        return float(self.scene.distance_field(tc)[cell[1], cell[0]])

    def _nearest(self, cell, candidates) -> float:
        if not candidates:
            return 0.0
        return min(self._dist(cell, j) for j in candidates)

    def _agent_modalities(self, i: int):
        if self.modalities is None:
            return ("depth", "audio")
        return self.modalities[i]

    def remaining_categories(self) -> list[str]:
        return [self.scene.targets[self.spec.targets[j]].category for j in np.flatnonzero(~self.state.found)]

    def observe_agent(self, i: int) -> Observation:
        st = self.state
        pose = st.poses[i]
        goal = CATEGORIES.multi_hot(self.remaining_categories())
        obs = Observation(pose, goal)
        mods = self._agent_modalities(i)
        if "depth" in mods:
            obs.depth = render_depth(self.scene, pose, self.sensors.depth)
        if "audio" in mods:
            a = self.sensors.audio
            active = [self._sources[j] for j in np.flatnonzero(~st.found)]
            obs.audio = render_binaural(self.scene, pose, active, a, step=st.t)
            obs.spectrogram = stft_spectrogram(obs.audio, a.n_fft, a.hop, a.window_kind)
        return obs

    def _observations(self):
        if not self.observe:
            return [None] * len(self.state.poses)
        return [self.observe_agent(i) for i in range(len(self.state.poses))]

    # -- api ------------------------------------------------------------------
    def reset(self, spec: EpisodeSpec):
        if spec.scene != self.scene.name:
            raise EnvError(f"episode {spec.episode_id} belongs to scene {spec.scene!r}, not {self.scene.name!r}")
        if not spec.targets or not spec.starts:
            raise EnvError(f"episode {spec.episode_id} needs at least one start and one target")
        for x, y, h in spec.starts:
            if not self.scene.navigable((x, y)) or not 0 <= h < 4:
                raise EnvError(f"episode {spec.episode_id}: invalid start {(x, y, h)}")
        for ti in spec.targets:
            if not 0 <= ti < len(self.scene.targets):
                raise EnvError(f"episode {spec.episode_id}: target index {ti} out of range")
        self.spec = spec
        self.mode = self.reward_cfg.resolve(self.scene, len(spec.targets))
        poses = [Pose.from_cell(x, y, h, 0) for x, y, h in spec.starts]
        self.state = WorldState(self.scene, poses, np.zeros(len(spec.targets), dtype=bool))
        if self.observe and any("audio" in self._agent_modalities(i) for i in range(len(poses))):
            self._sources = [make_source(self.scene.targets[ti].category, self.scene.targets[ti].cell,
                                         spec.seed * 1009 + k, self.sensors.audio)
                             for k, ti in enumerate(spec.targets)]
        else:
            self._sources = []
        self.ret = 0.0
        self.trace = [{"t": 0, "poses": [[p.cell[0], p.cell[1], p.heading_index] for p in poses]}]
        return self.state, self._observations()

    def step(self, actions) -> StepOutcome:
        st = self.state
        if st is None or st.terminal:
            raise EnvError("step() called on a terminal or un-reset environment")
        actions = [int(a) for a in actions]
        if len(actions) != len(st.poses):
            raise EnvError(f"expected {len(st.poses)} actions, got {len(actions)}")
        rc = self.reward_cfg
        unfound = [j for j in range(len(st.found)) if not st.found[j]]
        t = st.t + 1
        prev = st.poses
        new = [_move(self.scene, p, a, t) for p, a in zip(prev, actions)]
        stopped = [a == Action.STOP for a in actions]

        # Stop finds every unfound target within its radius
        newly: list[int] = []
        succ_agents = [False] * len(new)
        for i, p in enumerate(new):
            if not stopped[i]:
                continue
            for j in unfound:
                r = self.scene.targets[self.spec.targets[j]].radius
                if self._dist(p.cell, j) <= r:
                    succ_agents[i] = True
                    if j not in newly:
                        newly.append(j)
        newly.sort()

        progress = [self._nearest(p.cell, unfound) - self._nearest(q.cell, unfound) for p, q in zip(prev, new)]
        n_total = len(st.found)
        n_before = int(st.found.sum())
        comp = {"slack": 0.0, "dist": 0.0, "stop": 0.0, "goal": 0.0}
        if self.mode == "single":
            comp["slack"] = rc.agent_slack * len(new)
            comp["dist"] = float(sum(progress))
            comp["goal"] = rc.success_reward * sum(succ_agents)
        else:
            maze = self.mode == "maze"
            dscale = rc.maze_distance_scale if maze else 1.0
            gscale = rc.maze_goal_scale if maze else 1.0
            if maze and rc.progressive_on == "distance":
                dscale *= rc.maze_progressive_scale
            elif maze:
                gscale *= rc.maze_progressive_scale
            comp["slack"] = rc.maze_slack if maze else rc.team_slack
            comp["dist"] = dscale * float(sum(progress))
            comp["stop"] = rc.stop_penalty * sum(stopped)
            comp["goal"] = sum(gscale * rc.goal_reward * (n_before + k + 1) / n_total for k in range(len(newly)))
        reward = comp["slack"] + comp["dist"] + comp["stop"] + comp["goal"]

        for j in newly:
            st.found[j] = True
        st.poses = new
        st.t = t
        all_found = bool(st.found.all())
        st.terminal = all_found or all(stopped) or t >= self.spec.horizon
        self.ret += reward
        self.trace.append({"t": t, "actions": actions, "poses": [[p.cell[0], p.cell[1], p.heading_index] for p in new],
                           "reward": reward, "found": newly, "components": comp})
        return StepOutcome(self._observations(), reward, st.terminal, newly, stopped, comp)

    def metrics(self) -> EpisodeMetrics:
        return finalize_metrics(self.scene, self.spec, self.trace)


def finalize_metrics(scene: Scene, spec: EpisodeSpec, trace: list[dict]) -> EpisodeMetrics:
    """Episode summary from a trace; dist uses the nearest of all episode targets."""
    found = sorted(j for rec in trace[1:] for j in rec["found"])
    success = len(found) == len(spec.targets)
    steps = trace[-1]["t"]
    final = trace[-1]["poses"]
    dists = []
    for x, y, _ in final:
        dists.append(min(float(scene.distance_field(scene.targets[ti].cell)[y, x]) for ti in spec.targets))
    ret = float(sum(rec["reward"] for rec in trace[1:]))
    return EpisodeMetrics(success, steps, (not success) and steps >= spec.horizon,
                          float(np.mean(dists)), len(found), ret)


def account_trace(scene: Scene, spec: EpisodeSpec, trace: list[dict], reward: RewardConfig = RewardConfig()) -> dict:
    """Recompute the return from poses and actions alone.

    Works from a fresh breadth-first distance table per target and replays
    found events from Stop actions, then splits the return into slack,
    distance progress, stop penalties and goal rewards.
    """
    from collections import deque

    def bfs(cell):
        h, w = scene.grid.shape
        d = np.full((h, w), np.inf)
        # a blocked target cell is reached through its navigable neighbours
        q = deque()
        cx, cy = cell
        if scene.grid[cy, cx]:
            d[cy, cx] = 0
            q.append((cx, cy))
        else:
            for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                nx, ny = cx + dx, cy + dy
                if 0 <= nx < w and 0 <= ny < h and scene.grid[ny, nx]:
                    d[ny, nx] = 1
                    q.append((nx, ny))
        while q:
            x, y = q.popleft()
            for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                nx, ny = x + dx, y + dy
                if 0 <= nx < w and 0 <= ny < h and scene.grid[ny, nx] and d[ny, nx] == np.inf:
                    d[ny, nx] = d[y, x] + 1
                    q.append((nx, ny))
        return d

    tables = [bfs(scene.targets[ti].cell) for ti in spec.targets]
    radii = [scene.targets[ti].radius for ti in spec.targets]
    n = len(spec.targets)
    mode = reward.resolve(scene, n)
    found = [False] * n
    totals = {"slack": 0.0, "dist": 0.0, "stop": 0.0, "goal": 0.0}
    rewards = []
    for prev, rec in zip(trace[:-1], trace[1:]):
        open_ = [j for j in range(n) if not found[j]]

        def near(pose):
            return min(tables[j][pose[1], pose[0]] for j in open_)

        prog = sum(near(a) - near(b) for a, b in zip(prev["poses"], rec["poses"]))
        stops = [i for i, a in enumerate(rec["actions"]) if a == Action.STOP]
        hits = {i: [j for j in open_ if tables[j][rec["poses"][i][1], rec["poses"][i][0]] <= radii[j]] for i in stops}
        new = sorted({j for js in hits.values() for j in js})
        n_succ = sum(1 for js in hits.values() if js)
        if mode == "single":
            c = (reward.agent_slack * len(rec["poses"]), prog, 0.0, reward.success_reward * n_succ)
        else:
            maze = mode == "maze"
            ds = reward.maze_distance_scale if maze else 1.0
            gs = reward.maze_goal_scale if maze else 1.0
            if maze:
                if reward.progressive_on == "distance":
                    ds *= reward.maze_progressive_scale
                else:
                    gs *= reward.maze_progressive_scale
            before = sum(found)
            goal = sum(gs * reward.goal_reward * (before + k + 1) / n for k in range(len(new)))
            c = (reward.maze_slack if maze else reward.team_slack, ds * prog, reward.stop_penalty * len(stops), goal)
        for j in new:
            found[j] = True
        for k, v in zip(("slack", "dist", "stop", "goal"), c):
            totals[k] += v
        rewards.append(sum(c))
    totals["return"] = float(sum(rewards))
    totals["rewards"] = rewards
    totals["found"] = sum(found)
    return totals


def dump_trace(trace: list[dict], path) -> None:
    """Write one JSON record per step."""
    with open(path, "w") as fh:
        for rec in trace:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_trace(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
