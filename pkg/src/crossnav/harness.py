"""Experiment orchestration: training jobs, greedy evaluation tables, replays and ablation sweeps."""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .belief import rotation, supervision
from .config import PRESETS, dump_config
from .env import Env, dump_trace
from .policy import DecentralizedActor
from .trainer import TrainConfig, Trainer, load_model, run_actors, summarize

RUNS_ENV = "CROSSNAV_RUNS"
METRIC_KEYS = ("success", "dist", "detect", "steps", "timeout")


def runs_root() -> Path:
    """Directory holding run folders; ``CROSSNAV_RUNS`` overrides the ``./runs`` default."""
    return Path(os.environ.get(RUNS_ENV, "runs"))


def method_label(agents) -> str:
    layout = tuple(tuple(sorted(m)) for m in agents)
    for p in PRESETS.values():
        if tuple(tuple(sorted(m)) for m in p.agents) == layout:
            return p.label
    return "custom"


# -- training ------------------------------------------------------------------------
@dataclass
class TrainResult:
    run_dir: Path
    checkpoint: Path
    rows: list


def latest_checkpoint(run_dir) -> Path | None:
    ckpts = sorted((Path(run_dir) / "checkpoints").glob("update_*.ckpt"))
    final = Path(run_dir) / "checkpoints" / "final.ckpt"
    candidates = ckpts + ([final] if final.exists() else [])
    if not candidates:
        return None
    from .autodiff import load_checkpoint

    return max(candidates, key=lambda p: load_checkpoint(p)[1]["update"])


def _truncate_log(path: Path, upto: int) -> None:
    """Drop metrics rows written after the checkpoint being resumed from."""
    if not path.exists():
        return
    keep = [line for line in path.read_text().splitlines() if line and json.loads(line)["update"] < upto]
    path.write_text("".join(line + "\n" for line in keep))


def run_train(cfg: TrainConfig, run_dir=None, updates: int | None = None, resume: bool = False,
              callback=None) -> TrainResult:
    """Train to ``updates`` (default ``cfg.updates``) inside ``run_dir``.

    The run directory holds ``config.snapshot``, ``metrics.log``,
    ``checkpoints/`` and ``episodes/``. With ``resume`` the newest checkpoint
    is reloaded and the metrics log continues from its update index.
    """
    run_dir = Path(run_dir) if run_dir else runs_root() / f"{cfg.scene}-{method_label(cfg.agents)}-s{cfg.seed}"
    trainer = None
    if resume:
        ckpt = latest_checkpoint(run_dir)
        if ckpt is not None:
            trainer = Trainer.resume(ckpt, run_dir)
            _truncate_log(trainer.log_path, trainer.update_index)
    if trainer is None:
        trainer = Trainer(cfg, run_dir)
        if trainer.log_path.exists():
            trainer.log_path.unlink()
    rows = trainer.train(updates, callback)
    return TrainResult(run_dir, run_dir / "checkpoints" / "final.ckpt", rows)


def read_metrics(run_dir) -> list[dict]:
    path = Path(run_dir) / "metrics.log"
    return [json.loads(line) for line in path.read_text().splitlines() if line]


# -- evaluation tables -----------------------------------------------------------------
def bootstrap_ci(values, level: float = 0.9, resamples: int = 1000, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval of the mean."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        return (float("nan"), float("nan"))
    if np.all(x == x[0]):
        return (float(x[0]), float(x[0]))
    res = stats.bootstrap((x,), np.mean, n_resamples=resamples, confidence_level=level, method="percentile",
                          random_state=np.random.default_rng(seed))
    return float(res.confidence_interval.low), float(res.confidence_interval.high)


@dataclass
class ResultsRow:
    method: str
    scene: str
    seed: int
    records: list  # per-episode EpisodeMetrics dicts
    tag: str = ""

    def aggregates(self) -> dict:
        out = {}
        for k in METRIC_KEYS:
            vals = [float(r[k]) for r in self.records]
            out[k] = float(np.mean(vals)) if vals else float("nan")
        return out

    def intervals(self, level: float = 0.9) -> dict:
        return {k: bootstrap_ci([float(r[k]) for r in self.records], level) for k in METRIC_KEYS}

    def to_dict(self) -> dict:
        return {"method": self.method, "scene": self.scene, "seed": self.seed, "tag": self.tag,
                "records": self.records}

    @classmethod
    def from_dict(cls, d: dict) -> "ResultsRow":
        return cls(d["method"], d["scene"], int(d["seed"]), list(d["records"]), d.get("tag", ""))


@dataclass
class ResultsTable:
    rows: list = field(default_factory=list)

    def add(self, row: ResultsRow) -> None:
        self.rows.append(row)

    def to_markdown(self, with_ci: bool = True) -> str:
        head = "| method | tag | scene | seed | Succ | Dist | Detect | Steps | Timeout |"
        lines = [head, "|" + "---|" * 9]
        for r in self.rows:
            agg = r.aggregates()
            ci = r.intervals() if with_ci else {}
            cells = []
            for k in METRIC_KEYS:
                v = agg[k] * (100 if k in ("success", "timeout") else 1)
                s = f"{v:.2f}"
                if with_ci:
                    lo, hi = ci[k]
                    scale = 100 if k in ("success", "timeout") else 1
                    s += f" [{lo * scale:.2f}, {hi * scale:.2f}]"
                cells.append(s)
            lines.append(f"| {r.method} | {r.tag} | {r.scene} | {r.seed} | " + " | ".join(cells) + " |")
        return "\n".join(lines)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps([r.to_dict() for r in self.rows], indent=1))

    @classmethod
    def load(cls, path) -> "ResultsTable":
        return cls([ResultsRow.from_dict(d) for d in json.loads(Path(path).read_text())])


class CheckpointMismatch(ValueError):
    pass


def _select(world, split: str):
    if split == "val":
        return world.val
    if split == "train":
        return world.train
    if split == "all":
        return world.train + world.val
    raise ValueError(f"unknown split {split!r}")


def run_eval(checkpoint, split: str = "val", episodes: int | None = None, scene: str | None = None,
             seed: int = 0, tag: str = "") -> ResultsRow:
    """Greedy decentralized rollouts of a checkpoint over a dataset split."""
    model, cfg, world, _ = load_model(checkpoint)
    if scene is not None and scene != cfg.scene:
        raise CheckpointMismatch(f"checkpoint was trained on {cfg.scene!r}, not {scene!r}")
    eps = _select(world, split)
    if episodes is not None:
        eps = eps[:episodes]
    metrics = run_actors([DecentralizedActor(net, cfg.alpha, cfg.use_loc_belief, cfg.use_cat_belief)
                          for net in model.agents], world, eps, greedy=True, seed=seed)
    records = [dict(m.to_dict(), episode_id=spec.episode_id) for m, spec in zip(metrics, eps)]
    return ResultsRow(method_label(cfg.agents), cfg.scene, cfg.seed, records, tag)


# -- replay ------------------------------------------------------------------------------
def write_pgm(path, image: np.ndarray, max_value: float | None = None) -> None:
    """Binary greyscale PGM; values are scaled so ``max_value`` maps to 255."""
    img = np.asarray(image, dtype=np.float64)
    top = max_value if max_value else (img.max() if img.max() > 0 else 1.0)
    data = np.clip(np.round(img / top * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


class MissingEpisode(KeyError):
    pass


def run_replay(checkpoint, episode_id: int, out_dir, seed: int = 0) -> dict:
    """Re-run one episode greedily and dump its trace, beliefs and sensor frames.

    Files: ``trace.jsonl`` (poses, actions, rewards per step), ``steps.csv``,
    ``beliefs.csv`` (predicted versus true goal per agent and step) and
    ``frames/`` with depth PGMs and spectrogram arrays.
    """
    model, cfg, world, _ = load_model(checkpoint)
    by_id = {e.episode_id: e for e in world.train + world.val}
    if episode_id not in by_id:
        raise MissingEpisode(f"episode {episode_id} is not in the dataset of scene {cfg.scene!r}")
    spec = by_id[episode_id]
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    actors = [DecentralizedActor(net, cfg.alpha, cfg.use_loc_belief, cfg.use_cat_belief) for net in model.agents]
    env = Env(world.scene, world.sensors, world.reward, modalities=[tuple(a.net.modalities) for a in actors])
    rng = np.random.default_rng(seed)
    _, obs = env.reset(spec)
    target_cells = env.target_cells()
    target_cats = [world.scene.targets[t].category for t in spec.targets]
    belief_rows = []
    t = 0
    while True:
        acts = []
        for i, (a, o) in enumerate(zip(actors, obs)):
            if o.depth is not None:
                write_pgm(out / "frames" / f"depth_t{t:04d}_a{i}.pgm", o.depth.values, o.depth.max_depth)
            if o.spectrogram is not None:
                np.save(out / "frames" / f"spec_t{t:04d}_a{i}.npy", o.spectrogram.magnitudes)
            act, _, _, b = a.step(o, rng, greedy=True)
            acts.append(act)
            if a.net.belief is not None and b.initialized:
                pose = o.pose
                pred = np.array([pose.x, pose.y]) + rotation(pose.heading).T @ b.loc
                sup = supervision(world.scene, pose.cell, target_cells, target_cats, env.state.found,
                                  cfg.supervision_metric)
                belief_rows.append((t, i, pred[0], pred[1], sup.goal_star[0], sup.goal_star[1],
                                    *np.round(b.cat, 6)))
        step = env.step(acts)
        t += 1
        if step.terminal:
            break
        obs = step.observations
    dump_trace(env.trace, out / "trace.jsonl")
    with open(out / "steps.csv", "w") as fh:
        n = len(actors)
        fh.write("t," + ",".join(f"x{i},y{i},h{i},action{i}" for i in range(n)) + ",reward\n")
        for rec in env.trace:
            acts = rec.get("actions", [""] * n)
            cols = []
            for i in range(n):
                x, y, h = rec["poses"][i]
                cols += [str(x), str(y), str(h), str(acts[i])]
            fh.write(f"{rec['t']}," + ",".join(cols) + f",{rec.get('reward', 0.0)!r}\n")
    with open(out / "beliefs.csv", "w") as fh:
        n_cat = len(belief_rows[0]) - 6 if belief_rows else 0
        fh.write("t,agent,pred_x,pred_y,true_x,true_y," + ",".join(f"cat{k}" for k in range(n_cat)) + "\n")
        for row in belief_rows:
            fh.write(",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in row) + "\n")
    m = env.metrics()
    summary = {"episode_id": episode_id, "metrics": m.to_dict(), "steps": len(env.trace) - 1}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


# -- ablations -------------------------------------------------------------------------
@dataclass(frozen=True)
class AblationCell:
    group: str
    name: str
    overrides: dict


COMPONENT_TOGGLES = {
    "w/o Category Belief": {"use_cat_belief": False},
    "w/o Location Belief": {"use_loc_belief": False},
    "w/o Any Belief": {"use_cat_belief": False, "use_loc_belief": False},
    "Critic w/o State": {"use_state": False},
    "Full": {},
}
EMBED_SIZES = (60, 100, 140, 180)
RESOLUTIONS = (4, 8, 16, 32)


def ablation_matrix(groups=("component", "embedding", "resolution")) -> list[AblationCell]:
    cells = []
    if "component" in groups:
        cells += [AblationCell("component", k, v) for k, v in COMPONENT_TOGGLES.items()]
    if "embedding" in groups:
        cells += [AblationCell("embedding", str(e), {"model": {"vision_hidden": e, "audio_hidden": e}})
                  for e in EMBED_SIZES]
    if "resolution" in groups:
        cells += [AblationCell("resolution", f"{r}x{r}", {"depth_resolution": r}) for r in RESOLUTIONS]
    return cells


def _apply(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    d = cfg.to_dict()
    for k, v in overrides.items():
        d[k] = {**d.get(k, {}), **v} if k == "model" else v
    return TrainConfig.from_dict(d)


def _ablation_job(args):
    cfg_dict, cell_name, run_dir, updates, eval_episodes = args
    cfg = TrainConfig.from_dict(cfg_dict)
    res = run_train(cfg, run_dir, updates)
    return run_eval(res.checkpoint, episodes=eval_episodes, tag=cell_name).to_dict()


def run_ablation(base: TrainConfig, cells: list[AblationCell] | None = None, root=None,
                 updates: int | None = None, eval_episodes: int | None = None, workers: int = 1) -> ResultsTable:
    """Train and evaluate every cell independently; one job per cell, optionally across processes."""
    cells = ablation_matrix() if cells is None else cells
    root = Path(root) if root else runs_root() / "ablation"
    jobs = []
    for c in cells:
        cfg = _apply(base, c.overrides)
        slug = f"{c.group}-{c.name}".replace("/", "").replace(" ", "_")
        jobs.append((cfg.to_dict(), f"{c.group}:{c.name}", root / slug, updates, eval_episodes))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_ablation_job, jobs))
    else:
        rows = [_ablation_job(j) for j in jobs]
    table = ResultsTable([ResultsRow.from_dict(r) for r in rows])
    root.mkdir(parents=True, exist_ok=True)
    table.save(root / "results.json")
    dump_config(base, root / "base.snapshot")
    return table


__all__ = [
    "AblationCell", "CheckpointMismatch", "MissingEpisode", "ResultsRow", "ResultsTable", "TrainResult",
    "ablation_matrix", "bootstrap_ci", "latest_checkpoint", "method_label", "read_metrics", "read_pgm",
    "run_ablation", "run_eval", "run_replay", "run_train", "runs_root", "summarize", "write_pgm",
]
