"""Environment stepping, reward formulas, termination and metric accounting."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossnav.env import Action, Env, EnvError, RewardConfig, SensorConfig, account_trace
from crossnav.scene import (
    CATEGORIES,
    DEFAULT_HORIZON,
    EpisodeSpec,
    Scene,
    Target,
    generate_episodes,
    generate_scene,
)
from crossnav.sensors import make_source, render_binaural

F, L, R, S = Action.MOVE_FORWARD, Action.TURN_LEFT, Action.TURN_RIGHT, Action.STOP


def hall(kind="corridor", targets=(("sink", (10, 1)), ("bed", (1, 1)))) -> Scene:
    """A one-cell-wide hallway from x=1 to x=10 along y=1."""
    grid = np.zeros((3, 12), dtype=bool)
    grid[1, 1:11] = True
    return Scene("hall", kind, grid, [Target(c, cell) for c, cell in targets], 0.1, grid.copy())


def spec(starts, targets, horizon=70, seed=0):
    return EpisodeSpec(0, "hall", tuple(starts), tuple(targets), horizon, seed, "train")


def blind(scene, **kw):
    return Env(scene, observe=False, **kw)


# -- single target --------------------------------------------------------------
def test_single_idle_step_costs_per_agent_slack():
    env = blind(hall())
    env.reset(spec([(3, 1, 0), (5, 1, 0)], [0]))
    assert env.step([L, R]).reward == pytest.approx(-0.04, abs=1e-12)


def test_single_one_metre_closer():
    env = blind(hall())
    env.reset(spec([(3, 1, 0), (5, 1, 0)], [0]))
    assert env.step([F, L]).reward == pytest.approx(0.96, abs=1e-12)


def test_single_success_adds_twenty_and_ends():
    env = blind(hall())
    env.reset(spec([(9, 1, 0), (5, 1, 0)], [0]))
    out = env.step([S, L])
    assert out.reward == pytest.approx(20 - 0.04, abs=1e-12)
    assert out.terminal and out.newly_found == [0]
    m = env.metrics()
    assert m.success and not m.timeout and m.steps == 1 and m.detect == 1


def test_stop_two_cells_away_finds_nothing():
    env = blind(hall())
    env.reset(spec([(8, 1, 0), (5, 1, 0)], [0]))
    out = env.step([S, L])
    assert out.newly_found == [] and not out.terminal


def test_forward_into_wall_is_a_no_op_in_space():
    env = blind(hall())
    env.reset(spec([(10, 1, 0), (5, 1, 2)], [1]))
    env.step([F, L])
    assert env.state.poses[0].cell == (10, 1) and env.state.t == 1


def test_turns_rotate_heading():
    env = blind(hall())
    env.reset(spec([(3, 1, 0)], [0]))
    env.step([L])
    assert env.state.poses[0].heading_index == 1
    env.step([R])
    env.step([R])
    assert env.state.poses[0].heading_index == 3


# -- multiple targets -------------------------------------------------------------
def test_multi_idle_is_team_slack():
    env = blind(hall())
    env.reset(spec([(4, 1, 0), (6, 1, 0)], [0, 1]))
    assert env.step([L, L]).reward == pytest.approx(-0.02, abs=1e-12)


def test_multi_stop_away_from_targets_is_penalised():
    env = blind(hall())
    env.reset(spec([(4, 1, 0), (6, 1, 0)], [0, 1]))
    assert env.step([S, L]).reward == pytest.approx(-0.22, abs=1e-12)


def test_multi_discoveries_pay_ten_then_twenty():
    env = blind(hall())
    env.reset(spec([(9, 1, 0), (2, 1, 2)], [0, 1]))
    first = env.step([S, L])
    assert first.newly_found == [0]
    assert first.components["goal"] == pytest.approx(10.0)
    assert first.reward == pytest.approx(10 - 0.2 - 0.02, abs=1e-12)
    assert not first.terminal
    second = env.step([L, S])
    assert second.components["goal"] == pytest.approx(20.0)
    assert second.terminal and env.metrics().success


def test_simultaneous_double_discovery_pays_both():
    scene = hall(targets=(("sink", (10, 1)), ("bed", (9, 1))))
    env = blind(scene)
    env.reset(spec([(9, 1, 0), (3, 1, 0)], [0, 1]))
    out = env.step([S, L])
    assert out.newly_found == [0, 1]
    assert out.components["goal"] == pytest.approx(30.0)


def test_all_stop_with_targets_left_ends_unsuccessfully():
    env = blind(hall())
    env.reset(spec([(4, 1, 0), (6, 1, 0)], [0, 1]))
    out = env.step([S, S])
    assert out.terminal
    m = env.metrics()
    assert not m.success and not m.timeout and m.detect == 0


def test_step_after_terminal_raises():
    env = blind(hall())
    env.reset(spec([(4, 1, 0), (6, 1, 0)], [0, 1]))
    env.step([S, S])
    with pytest.raises(EnvError):
        env.step([L, L])


def test_horizon_timeout():
    env = blind(hall())
    env.reset(spec([(4, 1, 0), (6, 1, 0)], [0, 1], horizon=3))
    for _ in range(3):
        out = env.step([L, L])
    assert out.terminal
    m = env.metrics()
    assert m.timeout and not m.success and m.steps == 3


def test_maze_rewards():
    targets = (("sink", (10, 1)), ("bed", (1, 1)), ("chair", (6, 1)))
    env = blind(hall("maze", targets))
    env.reset(spec([(4, 1, 0), (8, 1, 1)], [0, 1, 2]))
    assert env.step([L, L]).reward == pytest.approx(-0.002, abs=1e-12)
    # agent 0 turns back to face +x and steps toward the chair at x=6
    env.step([R, R])
    out = env.step([F, L])
    assert out.components["dist"] == pytest.approx(2.0)
    env.reset(spec([(10, 1, 0), (3, 1, 0)], [0, 1, 2]))
    out = env.step([S, L])
    assert out.components["goal"] == pytest.approx(30.0)


def test_progressive_factor_can_move_to_distance_term():
    targets = (("sink", (10, 1)), ("bed", (1, 1)), ("chair", (6, 1)))
    env = blind(hall("maze", targets), reward=RewardConfig(progressive_on="distance"))
    env.reset(spec([(4, 1, 0), (8, 1, 1)], [0, 1, 2]))
    assert env.step([F, L]).components["dist"] == pytest.approx(3.0)
    env.reset(spec([(10, 1, 0), (3, 1, 0)], [0, 1, 2]))
    assert env.step([S, L]).components["goal"] == pytest.approx(20.0)


def test_default_horizons():
    assert [DEFAULT_HORIZON[k] for k in ("studio", "corridor", "apartment", "ranch", "maze")] == \
        [70, 150, 500, 1000, 1500]


# -- reset, observations, sounds ------------------------------------------------------
def test_reset_rejects_bad_specs():
    env = blind(hall())
    with pytest.raises(EnvError):
        env.reset(spec([(0, 0, 0)], [0]))
    with pytest.raises(EnvError):
        env.reset(spec([(3, 1, 0)], [7]))
    with pytest.raises(EnvError):
        env.reset(spec([(3, 1, 0)], []))


def test_reset_twice_gives_identical_observations():
    env = Env(hall(), SensorConfig.desk())
    s = spec([(3, 1, 0), (6, 1, 2)], [0, 1])
    _, a = env.reset(s)
    _, b = env.reset(s)
    for x, y in zip(a, b):
        assert np.array_equal(x.depth.values, y.depth.values)
        assert np.array_equal(x.audio.samples, y.audio.samples)
        assert np.array_equal(x.goal, y.goal)


def test_initial_goal_is_multi_hot_of_targets():
    env = Env(hall(), SensorConfig.desk(), modalities=[("depth",)])
    _, obs = env.reset(spec([(3, 1, 0)], [0, 1]))
    want = np.zeros(len(CATEGORIES.ids))
    want[[CATEGORIES.ids.index("sink"), CATEGORIES.ids.index("bed")]] = 1
    assert np.array_equal(obs[0].goal, want)


def test_found_target_sound_is_removed():
    scene = hall()
    cfg = SensorConfig.desk()
    env = Env(scene, cfg, modalities=[("audio",), ("audio",)])
    s = spec([(9, 1, 0), (4, 1, 2)], [0, 1], seed=5)
    env.reset(s)
    out = env.step([S, L])
    assert env.state.remaining_sounds == {1}
    bed = make_source("bed", (1, 1), 5 * 1009 + 1, cfg.audio)
    want = render_binaural(scene, env.state.poses[1], [bed], cfg.audio, step=1).samples
    assert np.array_equal(out.observations[1].audio.samples, want)
    assert out.observations[1].goal[CATEGORIES.ids.index("sink")] == 0


def test_modalities_limit_rendered_sensors():
    env = Env(hall(), SensorConfig.desk(), modalities=[("audio",), ("depth",)])
    _, obs = env.reset(spec([(3, 1, 0), (6, 1, 2)], [0, 1]))
    assert obs[0].depth is None and obs[0].spectrogram is not None
    assert obs[1].depth is not None and obs[1].audio is None


def test_two_object_episode_starts_are_separated():
    scene = generate_scene("corridor", 0)
    for e in generate_episodes(scene, count=30, seed=0):
        (ax, ay, _), (bx, by, _) = e.starts
        assert scene.geodesic((ax, ay), (bx, by)) >= 1.5


# -- properties ------------------------------------------------------------------------
POLICY = [0.4, 0.25, 0.25, 0.1]


def rollout(scene, e, seed):
    env = blind(scene)
    env.reset(e)
    rng = np.random.default_rng(seed)
    found_before = np.zeros(len(e.targets), dtype=bool)
    while not env.state.terminal:
        env.step(rng.choice(4, size=len(e.starts), p=POLICY))
        assert np.all(env.state.found >= found_before)
        found_before = env.state.found.copy()
        assert env.state.remaining_sounds == set(np.flatnonzero(~env.state.found).tolist())
        assert env.state.t <= e.horizon
    return env


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["studio", "corridor", "apartment"]), st.integers(0, 10_000))
def test_independent_accounting_matches_step_rewards(kind, seed):
    scene = generate_scene(kind, 0)
    e = generate_episodes(scene, count=4, seed=1)[seed % 4]
    e = EpisodeSpec(e.episode_id, e.scene, e.starts, e.targets, min(e.horizon, 80), e.seed, e.split)
    env = rollout(scene, e, seed)
    acc = account_trace(scene, e, env.trace)
    step_rewards = [rec["reward"] for rec in env.trace[1:]]
    np.testing.assert_allclose(acc["rewards"], step_rewards, atol=1e-9)
    assert acc["return"] == pytest.approx(env.metrics().ret, abs=1e-9)
    parts = acc["slack"] + acc["dist"] + acc["stop"] + acc["goal"]
    assert parts == pytest.approx(acc["return"], abs=1e-9)
    m = env.metrics()
    assert acc["found"] == m.detect <= len(e.targets)
    assert not (m.success and m.timeout)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_same_actions_give_same_trace(seed):
    scene = generate_scene("studio", 0)
    e = generate_episodes(scene, count=1, seed=seed)[0]
    assert rollout(scene, e, seed).trace == rollout(scene, e, seed).trace


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_single_target_success_iff_some_agent_stops_in_radius(seed):
    scene = generate_scene("studio", 0)
    e = generate_episodes(scene, count=1, seed=seed)[0]
    env = rollout(scene, e, seed)
    cell = scene.targets[e.targets[0]].cell
    hit = any(a == S and scene.geodesic(tuple(p[:2]), cell) <= 1.0
              for rec in env.trace[1:] for a, p in zip(rec["actions"], rec["poses"]))
    assert env.metrics().success == hit


def test_final_distance_zero_on_target_cell():
    scene = hall(targets=(("sink", (6, 1)),))
    env = blind(scene)
    env.reset(spec([(6, 1, 0), (4, 1, 0)], [0], horizon=1))
    env.step([L, F])
    m = env.metrics()
    assert m.dist == pytest.approx((0 + 1) / 2)
