"""Run orchestration: presets, metrics logs, resumption, evaluation tables, replays and ablations."""

import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossnav.config import PRESETS, config_from_dict, dump_config, get_preset, load_config, preset_config
from crossnav.harness import (
    COMPONENT_TOGGLES,
    EMBED_SIZES,
    RESOLUTIONS,
    CheckpointMismatch,
    MissingEpisode,
    ResultsRow,
    ResultsTable,
    _apply,
    ablation_matrix,
    bootstrap_ci,
    latest_checkpoint,
    method_label,
    read_metrics,
    read_pgm,
    run_eval,
    run_replay,
    run_train,
    runs_root,
    write_pgm,
)
from crossnav.trainer import ConfigError, TrainConfig


def tiny(**kw):
    base = {"rollout": 24, "n_envs": 2, "horizon": 12, "eval_every": 2, "eval_episodes": 3, "checkpoint_every": 2}
    return preset_config("crona", desk=True, **{**base, **kw})


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("run")
    return run_train(tiny(), run_dir, updates=4)


# -- presets and configs -------------------------------------------------------------------
def test_presets_are_a_bijection_with_sensor_layouts():
    expected = {
        "Single-Agent": (("audio", "depth"),),
        "VLA-Collab": (("depth",), ("depth",)),
        "ALA-Collab": (("audio",), ("audio",)),
        "AVLA-Collab": (("audio", "depth"), ("audio", "depth")),
        "CRONA": (("audio",), ("depth",)),
    }
    layouts = {p.label: tuple(tuple(sorted(m)) for m in p.agents) for p in PRESETS.values()}
    assert layouts == expected
    assert len(set(layouts.values())) == len(layouts)
    for p in PRESETS.values():
        assert method_label(p.agent_lists()) == p.label
    assert method_label([["audio"]]) == "custom"


def test_unknown_preset_is_a_config_error():
    with pytest.raises(ConfigError, match="preset"):
        get_preset("telepathy")


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_every_preset_round_trips_through_a_config_file(tmp_path, name):
    cfg = preset_config(name, desk=True, seed=3)
    dump_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg


def test_plain_config_uses_the_training_defaults():
    assert config_from_dict({}) == TrainConfig()
    assert config_from_dict({}).updates == 8000


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text("[]")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "list.json")


def test_runs_root_follows_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("CROSSNAV_RUNS", str(tmp_path))
    assert runs_root() == tmp_path
    monkeypatch.delenv("CROSSNAV_RUNS")
    assert str(runs_root()) == "runs"


# -- training runs ----------------------------------------------------------------------------
def test_run_directory_layout(trained):
    d = trained.run_dir
    assert trained.checkpoint.exists()
    assert json.loads((d / "config.snapshot").read_text()) == tiny().to_dict()
    assert [r["update"] for r in read_metrics(d)] == [0, 1, 2, 3]
    assert sorted(p.name for p in (d / "episodes").iterdir()) == ["eval_000002.jsonl", "eval_000004.jsonl"]
    assert latest_checkpoint(d).name in {"update_000004.ckpt", "final.ckpt"}


def test_resume_continues_the_log_without_gaps(tmp_path):
    run_train(tiny(), tmp_path, updates=2)
    res = run_train(tiny(), tmp_path, updates=4, resume=True)
    assert [r["update"] for r in res.rows] == [2, 3]
    assert [r["update"] for r in read_metrics(tmp_path)] == [0, 1, 2, 3]


def test_resume_discards_rows_past_the_checkpoint(tmp_path):
    run_train(tiny(), tmp_path, updates=3)
    (tmp_path / "checkpoints" / "final.ckpt").unlink()  # newest checkpoint is now update 2
    res = run_train(tiny(), tmp_path, updates=3, resume=True)
    assert [r["update"] for r in res.rows] == [2]
    assert [r["update"] for r in read_metrics(tmp_path)] == [0, 1, 2]


def test_fresh_run_replaces_an_old_log(tmp_path):
    run_train(tiny(), tmp_path, updates=2)
    run_train(tiny(), tmp_path, updates=1)
    assert [r["update"] for r in read_metrics(tmp_path)] == [0]


# -- evaluation ------------------------------------------------------------------------------------
def test_eval_is_repeatable(trained):
    a = run_eval(trained.checkpoint, episodes=5)
    b = run_eval(trained.checkpoint, episodes=5)
    assert a.to_dict() == b.to_dict()
    assert a.method == "CRONA" and a.scene == "studio" and len(a.records) == 5


def test_eval_rejects_a_scene_mismatch(trained):
    with pytest.raises(CheckpointMismatch):
        run_eval(trained.checkpoint, episodes=1, scene="maze")


def test_eval_rejects_unknown_split(trained):
    with pytest.raises(ValueError):
        run_eval(trained.checkpoint, split="test", episodes=1)


def test_aggregates_are_recomputable_from_records(trained, tmp_path):
    row = run_eval(trained.checkpoint, episodes=6, tag="x")
    table = ResultsTable([row])
    table.save(tmp_path / "t.json")
    loaded = ResultsTable.load(tmp_path / "t.json").rows[0]
    for key, value in loaded.aggregates().items():
        assert value == pytest.approx(np.mean([r[key] for r in row.records]), abs=1e-12)
    assert loaded.to_dict() == row.to_dict()
    md = table.to_markdown()
    assert "| CRONA | x | studio |" in md and md.count("\n") == 2


def percentile_bootstrap(x, level, resamples, rng):
    idx = rng.integers(0, len(x), size=(resamples, len(x)))
    means = np.asarray(x)[idx].mean(axis=1)
    tail = (1 - level) / 2 * 100
    return np.percentile(means, tail), np.percentile(means, 100 - tail)


def test_bootstrap_interval_agrees_with_a_direct_resampler():
    rng = np.random.default_rng(0)
    x = rng.random(200) < 0.6
    lo, hi = bootstrap_ci(x)
    ref_lo, ref_hi = percentile_bootstrap(x.astype(float), 0.9, 200_000, np.random.default_rng(1))
    assert lo == pytest.approx(ref_lo, abs=0.01) and hi == pytest.approx(ref_hi, abs=0.01)
    assert bootstrap_ci.__defaults__ == (0.9, 1000, 0)


def test_bootstrap_interval_edge_cases():
    assert bootstrap_ci([1.0, 1.0, 1.0]) == (1.0, 1.0)
    assert all(np.isnan(bootstrap_ci([])))


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=2, max_size=40))
def test_bootstrap_interval_brackets_sample_range(values):
    lo, hi = bootstrap_ci(values)
    assert min(values) - 1e-9 <= lo <= hi <= max(values) + 1e-9


def test_results_row_from_records():
    recs = [{"success": s, "dist": 1.0, "detect": 1, "steps": 10, "timeout": 0} for s in (1, 0, 1, 1)]
    row = ResultsRow("CRONA", "studio", 0, recs)
    assert row.aggregates()["success"] == 0.75
    assert set(row.intervals()) == {"success", "dist", "detect", "steps", "timeout"}


# -- replay ------------------------------------------------------------------------------------------------
@pytest.fixture(scope="module")
def replay(trained, tmp_path_factory):
    out = tmp_path_factory.mktemp("replay")
    row = run_eval(trained.checkpoint, episodes=1)
    ep = row.records[0]["episode_id"]
    return out, run_replay(trained.checkpoint, ep, out), row.records[0]


def test_replay_matches_the_evaluated_episode(replay):
    _, summary, record = replay
    for key in ("success", "dist", "detect", "steps", "timeout"):
        assert summary["metrics"][key] == record[key]


def test_replay_pose_count_is_steps_plus_one(replay):
    out, summary, _ = replay
    trace = [json.loads(line) for line in (out / "trace.jsonl").read_text().splitlines()]
    assert len(trace) == summary["steps"] + 1
    with open(out / "steps.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == summary["steps"] + 1
    assert {"x0", "y0", "h0", "x1", "y1", "h1", "action0", "action1", "reward"} <= set(rows[0])


def test_replay_rewards_sum_to_the_return(replay):
    out, summary, _ = replay
    with open(out / "steps.csv") as fh:
        total = sum(float(r["reward"]) for r in csv.DictReader(fh))
    assert total == pytest.approx(summary["metrics"]["return"], abs=1e-9)


def test_replay_belief_trace_has_predicted_and_true_goal(replay):
    out, summary, _ = replay
    with open(out / "beliefs.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows, "the audio agent predicts a goal every step"
    assert {"t", "agent", "pred_x", "pred_y", "true_x", "true_y"} <= set(rows[0])
    assert {int(r["agent"]) for r in rows} == {0}  # only the listening agent carries a belief
    assert len(rows) == summary["steps"]


def test_replay_frames(replay):
    out, summary, _ = replay
    depth = sorted((out / "frames").glob("depth_*.pgm"))
    specs = sorted((out / "frames").glob("spec_*.npy"))
    assert len(depth) == len(specs) == summary["steps"]
    img = read_pgm(depth[0])
    assert img.dtype == np.uint8 and img.ndim == 2


def test_replay_unknown_episode(trained, tmp_path):
    with pytest.raises(MissingEpisode):
        run_replay(trained.checkpoint, 10**9, tmp_path)


def test_pgm_round_trip(tmp_path):
    img = np.arange(12, dtype=float).reshape(3, 4)
    write_pgm(tmp_path / "a.pgm", img, 11.0)
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), np.round(img / 11 * 255).astype(np.uint8))


# -- ablations ---------------------------------------------------------------------------------------------------
def test_ablation_matrix_columns():
    cells = ablation_matrix()
    comp = [c.name for c in cells if c.group == "component"]
    assert comp == ["w/o Category Belief", "w/o Location Belief", "w/o Any Belief", "Critic w/o State", "Full"]
    assert [c.name for c in cells if c.group == "embedding"] == ["60", "100", "140", "180"]
    assert [c.name for c in cells if c.group == "resolution"] == ["4x4", "8x8", "16x16", "32x32"]
    assert EMBED_SIZES == (60, 100, 140, 180) and RESOLUTIONS == (4, 8, 16, 32)
    assert len(ablation_matrix(("embedding",))) == 4


def test_ablation_overrides_apply_to_the_config():
    base = preset_config("crona", desk=True)
    for name, over in COMPONENT_TOGGLES.items():
        cfg = _apply(base, over)
        for k, v in over.items():
            assert getattr(cfg, k) == v, name
    cell = next(c for c in ablation_matrix(("embedding",)) if c.name == "140")
    cfg = _apply(base, cell.overrides)
    assert cfg.model["vision_hidden"] == 140 and cfg.model["audio_hidden"] == 140
    untouched = {k: v for k, v in base.model.items() if k not in ("vision_hidden", "audio_hidden")}
    assert {k: cfg.model[k] for k in untouched} == untouched
