"""Acceptance suite: nine end-to-end criteria, each reported as one PASS/FAIL line.

The first five are exact checks and finish in minutes. The last four train agents on the studio
scene at desk scale and take hours on one core. Training runs are stored under
``$CROSSNAV_ACCEPTANCE_DIR`` (default ``runs/acceptance`` in the repository) together with a
fingerprint of the package source and the run config; a stored run is reused only when both match,
so edits to the code always trigger retraining. Deselect the training criteria with ``-m "not slow"``.
"""

import hashlib
import json
import os
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

import crossnav
from crossnav import verify
from crossnav.config import PRESETS, preset_config
from crossnav.env import RewardConfig
from crossnav.harness import read_metrics, run_eval, run_train
from crossnav.policy import DecentralizedActor
from crossnav.trainer import evaluate, load_model, run_actors

SEEDS = (0, 1, 2)
HORIZON = 70
SMOKE_MAX_UPDATES = 2000
SMOKE_TARGET = 0.8
# Matched budget for the preset comparison: every preset gets the same number of updates with the
# same rollout length and environment count, hence the same number of environment steps.
COMPARISON_UPDATES = 500


def report(lines, number, name, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'} criterion {number} ({name}): {detail}"
    print(line)
    lines.append(line)
    return line


# -- stored training runs ------------------------------------------------------------------
def _source_fingerprint() -> str:
    root = Path(crossnav.__file__).parent
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*.py")):
        digest.update(str(path.relative_to(root)).encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


FINGERPRINT = _source_fingerprint()


def _runs_root() -> Path:
    default = Path(__file__).resolve().parents[1] / "runs" / "acceptance"
    return Path(os.environ.get("CROSSNAV_ACCEPTANCE_DIR", default))


def stored_run(name, cfg, updates) -> dict:
    """Train ``cfg`` for ``updates`` in its own directory, or reuse an identical finished run."""
    run_dir = _runs_root() / name
    done = run_dir / "done.json"
    if done.exists():
        info = json.loads(done.read_text())
        if info["config"] == cfg.to_dict() and info["updates"] == updates and info["source"] == FINGERPRINT:
            return info
    shutil.rmtree(run_dir, ignore_errors=True)
    start = time.perf_counter()
    result = run_train(cfg, run_dir, updates=updates)
    info = {"config": cfg.to_dict(), "updates": updates, "source": FINGERPRINT,
            "seconds": time.perf_counter() - start, "trained_updates": len(result.rows),
            "checkpoint": str(result.checkpoint)}
    done.write_text(json.dumps(info, indent=1))
    return info


def smoke_config(seed):
    return preset_config("crona", desk=True, seed=seed, horizon=HORIZON, target_success=SMOKE_TARGET,
                         eval_every=50, eval_episodes=None)


@pytest.fixture(scope="module")
def smoke_runs():
    return [stored_run(f"learning-smoke-crona-s{s}", smoke_config(s), SMOKE_MAX_UPDATES) for s in SEEDS]


@pytest.fixture(scope="module")
def comparison_runs():
    runs = {name: [] for name in PRESETS}
    for name in PRESETS:
        for s in SEEDS:
            cfg = preset_config(name, desk=True, seed=s, horizon=HORIZON, eval_every=100, eval_episodes=30)
            runs[name].append(stored_run(f"comparison-{name}-s{s}", cfg, COMPARISON_UPDATES))
    return runs


def validation_success(info) -> float:
    return float(np.mean([r["success"] for r in run_eval(info["checkpoint"], split="val").records]))


# -- exact criteria ------------------------------------------------------------------------
def test_gradient_checks(acceptance_lines):
    start = time.perf_counter()
    results = verify.check_op_gradients(probes=20) + verify.check_network_gradients(probes=24)
    seconds = time.perf_counter() - start
    names = [r.name for r in results]
    networks = {"actor audio", "actor depth", "actor depth+audio", "critic", "belief predictor"}
    covered = networks <= {n.removeprefix("gradcheck network ") for n in names}
    probes_ok = all(int(r.detail.split()[0]) >= 20 for r in results)
    worst = max(r.value for r in results)
    ok = all(r.passed for r in results) and covered and probes_ok and seconds < 300
    line = report(acceptance_lines, 1, "gradient checks", ok,
                  f"{len(results)} checks, worst relative error {worst:.2e} (limit 1e-4), {seconds:.1f} s (limit 300 s)")
    assert ok, line + "\n" + "\n".join(r.line() for r in results if not r.passed)


def test_oracle_equivalence(acceptance_lines):
    start = time.perf_counter()
    results = [verify.check_stft(tol=1e-9), verify.check_gae(tol=1e-10), verify.check_ema(),
               verify.check_frame_transform(tol=1e-12), verify.check_geodesic()]
    seconds = time.perf_counter() - start
    ok = all(r.passed for r in results) and seconds < 120
    detail = "; ".join(f"{r.name} {r.value:.1e}" for r in results)
    line = report(acceptance_lines, 2, "oracle equivalence", ok, f"{detail}; {seconds:.1f} s (limit 120 s)")
    assert ok, line


def test_closed_form_losses(acceptance_lines):
    results = verify.check_closed_forms(tol=1e-9)
    ok = len(results) == 4 and all(r.passed for r in results)
    line = report(acceptance_lines, 3, "closed-form losses", ok,
                  "; ".join(f"{r.name} error {r.value:.1e}" for r in results))
    assert ok, line


def test_reward_accounting(acceptance_lines):
    r = RewardConfig()
    constants = (r.agent_slack, r.team_slack, r.goal_reward, r.stop_penalty, r.maze_slack, r.maze_goal_scale,
                 r.maze_distance_scale, r.maze_progressive_scale)
    constants_ok = constants == (-0.02, -0.02, 20.0, -0.2, -0.002, 3.0, 2.0, 1.5)
    results = verify.check_reward_accounting(episodes=200, tol=1e-9)
    counts_ok = all(r.detail.startswith("200 ") for r in results)
    ok = constants_ok and counts_ok and all(r.passed for r in results) and len(results) == 5
    line = report(acceptance_lines, 4, "reward accounting", ok,
                  f"{len(results)} scene kinds x 200 episodes, worst error {max(r.value for r in results):.1e}")
    assert ok, line


def test_state_conditioned_value_is_unbiased(acceptance_lines):
    start = time.perf_counter()
    results = verify.check_unbiasedness(samples=100_000)
    seconds = time.perf_counter() - start
    controls = [r for r in results if "control" in r.name]
    ok = all(r.passed for r in results) and len(controls) >= 1 and seconds < 180
    line = report(acceptance_lines, 5, "tabular unbiasedness", ok,
                  f"{len(results) - len(controls)} models inside the 99% interval, {len(controls)} biased "
                  f"controls rejected, {seconds:.1f} s (limit 180 s)")
    assert ok, line


# -- training criteria ---------------------------------------------------------------------
@pytest.mark.slow
def test_crona_learns_studio(acceptance_lines, smoke_runs):
    succ = [validation_success(info) for info in smoke_runs]
    hours = sum(info["seconds"] for info in smoke_runs) / 3600
    within = all(info["trained_updates"] <= SMOKE_MAX_UPDATES for info in smoke_runs)
    ok = float(np.mean(succ)) >= SMOKE_TARGET and within and hours < 2
    updates = [info["trained_updates"] for info in smoke_runs]
    line = report(acceptance_lines, 6, "CRONA learning smoke", ok,
                  f"validation success {np.mean(succ):.3f} (per seed {[round(s, 3) for s in succ]}, need 0.8) "
                  f"after {updates} updates, {hours:.2f} h training")
    assert ok, line


@pytest.mark.slow
def test_two_agent_presets_beat_single_agent(acceptance_lines, comparison_runs):
    succ = {name: float(np.mean([validation_success(i) for i in runs])) for name, runs in comparison_runs.items()}
    margins = {name: succ[name] - succ["single"] for name in succ if name != "single"}
    ok = all(m >= 0.10 for m in margins.values())
    detail = ", ".join(f"{PRESETS[n].label} {s:.3f}" for n, s in succ.items())
    line = report(acceptance_lines, 7, "two-agent presets vs single agent", ok,
                  f"{detail} after {COMPARISON_UPDATES} updates each; smallest margin {min(margins.values()):+.3f} "
                  f"(need +0.100)")
    assert ok, line


@pytest.mark.slow
def test_execution_never_touches_the_critic(acceptance_lines, smoke_runs, monkeypatch):
    ckpt = smoke_runs[0]["checkpoint"]
    model, cfg, world, _ = load_model(ckpt)
    episodes = world.val
    _, reference = evaluate(model, world, episodes, cfg, return_traces=True)

    # rebuild, keep only the per-agent networks, and make every path to global state explode
    model, cfg, world, _ = load_model(ckpt)
    nets = list(model.agents)
    model.critic = None
    del model

    def forbidden(*args, **kwargs):
        raise AssertionError("decentralized execution reached the global state")

    import crossnav.policy
    import crossnav.trainer

    monkeypatch.setattr(crossnav.policy, "state_feature", forbidden)
    monkeypatch.setattr(crossnav.trainer, "state_feature", forbidden)
    actors = [DecentralizedActor(net, cfg.alpha, cfg.use_loc_belief, cfg.use_cat_belief) for net in nets]
    _, stripped = run_actors(actors, world, episodes, greedy=True, return_traces=True)

    def actions(traces):
        return [[rec.get("actions") for rec in trace] for trace in traces]

    same = actions(reference) == actions(stripped)
    steps = sum(len(t) - 1 for t in reference)
    line = report(acceptance_lines, 8, "decentralized execution", same,
                  f"{len(episodes)} validation episodes, {steps} joint actions "
                  f"{'bit-identical' if same else 'DIFFER'} with critic and state removed")
    assert same, line


@pytest.mark.slow
def test_training_is_deterministic(acceptance_lines, tmp_path):
    cfg = preset_config("crona", desk=True, seed=0, horizon=HORIZON)
    for name in ("a", "b"):
        run_train(cfg, tmp_path / name, updates=100)
    logs = [(tmp_path / name / "metrics.log").read_bytes() for name in ("a", "b")]
    rows = read_metrics(tmp_path / "a")
    same = logs[0] == logs[1] and [r["update"] for r in rows] == list(range(100))
    line = report(acceptance_lines, 9, "determinism", same,
                  f"metrics logs of two 100-update runs {'identical' if same else 'DIFFER'} "
                  f"({len(logs[0])} bytes, {sum('eval_success' in r for r in rows)} evaluations)")
    assert same, line
