"""Actor and critic networks: shapes, history masking, sampling, and the decentralized execution path."""

import copy
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossnav.autodiff import ShapeError, grad, no_grad
from crossnav.autodiff import tensor as T
from crossnav.autodiff.gradcheck import check_gradients
from crossnav.config import preset_config
from crossnav.policy import (
    BELIEF_DIM,
    GOAL_DIM,
    AgentNetwork,
    Critic,
    DecentralizedActor,
    HistoryCache,
    ModelConfig,
    WorldDims,
    one_hot,
    policy_distribution,
    sample_actions,
    state_dim,
    state_feature,
)
from crossnav.scene import generate_scene
from crossnav.sensors import Pose
from crossnav.trainer import build_model, build_world, run_actors

DIMS = WorldDims(6, 5, 70, (16, 16), (2, 33, 31))


def desk_net(mods=("depth", "audio"), seed=0, **cfg):
    return AgentNetwork(mods, DIMS, ModelConfig(**{**ModelConfig.desk().__dict__, **cfg}), np.random.default_rng(seed))


def inputs(rng, n=1):
    return (rng.uniform(0, 5, size=(n, 1, 16, 16)), rng.normal(size=(n, 2, 33, 31)),
            rng.uniform(0, 1, size=(n, 5)), (rng.random((n, GOAL_DIM)) > 0.5).astype(float))


# -- architecture -----------------------------------------------------------------------
def test_full_size_architecture_numbers():
    cfg = ModelConfig()
    assert (cfg.vision_hidden, cfg.audio_hidden, cfg.hidden, cfg.heads, cfg.cache) == (128, 128, 256, 8, 150)
    dims = WorldDims(6, 5, 70, (16, 16), (2, 257, 61))
    net = AgentNetwork(("audio",), dims, cfg, np.random.default_rng(0))
    assert net.audio.conv2.weight.shape == (64, 32, 3, 3) and net.audio.conv2.stride == 2
    assert net.audio.out_dim == 128
    assert net.history.action_proj.weight.shape == (4, 16)
    assert net.history.pose_proj.weight.shape == (5, 16)
    assert net.history.encoder.attn.heads == 8 and net.history.decoder.self_attn.heads == 8


def test_agent_needs_a_modality():
    with pytest.raises(ValueError):
        desk_net(())


def test_missing_declared_modality_raises():
    net = desk_net()
    d, s, p, g = inputs(np.random.default_rng(0))
    with pytest.raises(ValueError, match="depth"):
        net.embed(None, s, p, g)
    with pytest.raises(ValueError, match="audio"):
        net.embed(d, None, p, g)
    with pytest.raises(ShapeError):
        net.embed(d, s, p, g[:, :-1])


def test_pose_change_only_moves_pose_slots():
    net = desk_net()
    rng = np.random.default_rng(1)
    d, s, p, g = inputs(rng)
    a = net.embed(d, s, p, g).data[0]
    b = net.embed(d, s, p + 0.1, g).data[0]
    start = net.vision.out_dim + net.audio.out_dim
    changed = np.flatnonzero(a != b)
    assert set(changed) <= set(range(start, start + 5)) and len(changed) == 5


def test_embedding_length_fixed_by_modalities():
    rng = np.random.default_rng(2)
    d, s, p, g = inputs(rng, 3)
    for mods, want in ((("depth",), 32 + 5 + GOAL_DIM), (("audio",), 32 + 5 + GOAL_DIM),
                       (("depth", "audio"), 64 + 5 + GOAL_DIM)):
        net = desk_net(mods)
        assert net.embed(d, s, p, g).shape == (3, want) and net.d_obs == want


# -- history --------------------------------------------------------------------------------
def history_out(net, zw, aw, pw, vw):
    with no_grad():
        return net.history(zw, aw, pw, vw).data


def test_empty_cache_output_depends_only_on_current_step():
    net = desk_net(("depth",))
    rng = np.random.default_rng(3)
    k = net.config.cache
    cur = rng.normal(size=(1, 1, net.d_obs))
    outs = []
    for trial in range(3):
        junk = rng.normal(size=(1, k, net.d_obs)) * (trial + 1)
        zw = np.concatenate([junk, cur], axis=1)
        aw = np.concatenate([rng.normal(size=(1, k, 4)), np.zeros((1, 1, 4))], axis=1)
        pw = np.concatenate([rng.normal(size=(1, k, 5)), np.full((1, 1, 5), 0.3)], axis=1)
        vw = np.zeros((1, k + 1), dtype=bool)
        vw[:, -1] = True
        outs.append(history_out(net, zw, aw, pw, vw))
    assert np.array_equal(outs[0], outs[1]) and np.array_equal(outs[0], outs[2])


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 7))
def test_masked_slots_can_be_permuted_freely(seed, n_valid):
    net = desk_net(("depth",))
    rng = np.random.default_rng(seed)
    s = net.config.cache + 1
    zw, aw, pw = rng.normal(size=(1, s, net.d_obs)), rng.normal(size=(1, s, 4)), rng.normal(size=(1, s, 5))
    vw = np.zeros((1, s), dtype=bool)
    vw[:, s - n_valid:] = True
    base = history_out(net, zw, aw, pw, vw)
    pad = np.flatnonzero(~vw[0])
    perm = np.arange(s)
    perm[pad] = rng.permutation(pad)
    got = history_out(net, zw[:, perm], aw[:, perm], pw[:, perm], vw)
    np.testing.assert_allclose(got, base, atol=1e-9)


def test_cache_evicts_oldest():
    cache = HistoryCache(3, 2)
    for i in range(7):
        cache.push(np.full((1, 2), float(i)), one_hot([i % 4]), np.zeros((1, 5)))
        assert len(cache) == min(i + 1, 3)
    assert cache.z[0, :, 0].tolist() == [4.0, 5.0, 6.0]
    cache.clear()
    assert len(cache) == 0 and not cache.z.any()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(0, 20))
def test_cache_holds_exactly_the_last_k(k, m):
    cache = HistoryCache(k, 1)
    for i in range(k + m):
        cache.push(np.array([[float(i)]]), one_hot([0]), np.zeros((1, 5)))
    assert cache.z[0, :, 0].tolist() == [float(i) for i in range(m, k + m)]
    zw, _, _, vw = cache.window(np.array([[99.0]]), one_hot([1]), np.zeros((1, 5)))
    assert zw.shape == (1, k + 1, 1) and zw[0, -1, 0] == 99.0 and vw.all()


# -- action distribution ---------------------------------------------------------------------
def test_uniform_logits_have_max_entropy():
    _, ent = policy_distribution(np.zeros((1, 4)))
    assert ent[0] == pytest.approx(math.log(4), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=4, max_size=4))
def test_distribution_normalised_and_entropy_bounded(logits):
    logp, ent = policy_distribution(np.array([logits]))
    assert np.exp(logp).sum() == pytest.approx(1.0, abs=1e-6)
    assert -1e-12 <= ent[0] <= math.log(4) + 1e-12


def test_greedy_is_argmax():
    logp, _ = policy_distribution(np.array([[0.1, 2.0, -1.0, 0.5], [3.0, 0.0, 0.0, 0.0]]))
    assert sample_actions(logp, None, greedy=True).tolist() == [1, 0]


def test_sample_frequencies_match_probabilities():
    logp, _ = policy_distribution(np.array([[0.3, -1.2, 0.8, 0.0]]))
    p = np.exp(logp[0])
    n = 100_000
    draws = sample_actions(np.repeat(logp, n, axis=0), np.random.default_rng(0))
    counts = np.bincount(draws, minlength=4)
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma)


# -- critic ---------------------------------------------------------------------------------------
def test_zero_value_head_outputs_zero():
    rng = np.random.default_rng(0)
    critic = Critic(2, 8, 5, rng, zero=True)
    v = critic([rng.normal(size=(3, 8))] * 2, [rng.normal(size=(3, BELIEF_DIM))] * 2, rng.normal(size=(3, 5)))
    assert np.all(v.data == 0)


def test_agent_count_mismatch_rejected():
    rng = np.random.default_rng(0)
    critic = Critic(2, 8, 5, rng)
    with pytest.raises(ValueError):
        critic([np.zeros((1, 8))], [np.zeros((1, BELIEF_DIM))], np.zeros((1, 5)))


def test_swapping_agents_only_swaps_input_slots():
    rng = np.random.default_rng(1)
    critic = Critic(2, 8, 5, rng, head_gain=1.0)
    z, b, s = [rng.normal(size=(2, 8)) for _ in range(2)], [rng.normal(size=(2, BELIEF_DIM)) for _ in range(2)], \
        rng.normal(size=(2, 5))
    swapped = copy.deepcopy(critic)
    w = swapped.head.layers[0].weight.data
    d = BELIEF_DIM
    order = np.r_[8:16, 0:8, 16 + d:16 + 2 * d, 16:16 + d, 16 + 2 * d:16 + 2 * d + 5]
    w[:] = w[order]
    np.testing.assert_allclose(swapped(z[::-1], b[::-1], s).data, critic(z, b, s).data, atol=1e-12)


def test_value_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    critic = Critic(2, 6, 4, rng, head_gain=1.0)
    z, b, s = [rng.normal(size=(3, 6))] * 2, [rng.normal(size=(3, BELIEF_DIM))] * 2, rng.normal(size=(3, 4))
    worst = check_gradients(lambda: T.tsum(critic(z, b, s)), critic.parameters(), rng, probes=20)
    assert worst < 1e-4


def test_state_feature_range_and_length():
    scene = generate_scene("apartment", 0)
    poses = [Pose.from_cell(*scene.targets[0].cell, 2), Pose.from_cell(1, 1, 3)]
    f = state_feature(scene, [0, 1], [True, False], poses, 17, 500)
    assert f.shape == (state_dim(2, 2),)
    assert np.all((f >= 0) & (f <= 1))


def test_model_config_round_trip():
    cfg = ModelConfig.desk()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# -- shared modules and decentralized execution ------------------------------------------------------
@pytest.fixture(scope="module")
def crona():
    cfg = preset_config("crona", desk=True)
    world = build_world(cfg)
    return cfg, world, build_model(cfg, world)


def test_critic_reuses_agent_encoders(crona):
    _, _, model = crona
    own = dict(model.critic.named_parameters())
    assert all(k.startswith("head.") for k in own)
    rng = np.random.default_rng(0)
    z_hs, params = [], []
    for net in model.agents:
        k = net.config.cache + 1
        depth = rng.uniform(0, 5, (k, 1, 16, 16)) if net.vision else None
        spec = rng.normal(size=(k,) + net.dims.spec_shape) if net.audio else None
        zw = net.embed(depth, spec, rng.uniform(size=(k, 5)), np.ones((k, GOAL_DIM)))
        z_h = net.history(T.reshape(zw, (1, k, net.d_obs)), np.zeros((1, k, 4)), np.zeros((1, k, 5)),
                          np.ones((1, k), dtype=bool))
        z_hs.append(z_h)
        shared = net.shared_parameters()
        named = dict(net.named_parameters())
        assert all(shared[name] is named[name] for name in shared)
        params += list(shared.values())
    v = model.joint_value(z_hs, [np.zeros((1, BELIEF_DIM))] * 2, np.zeros((1, model.critic.s_dim)))
    grads = grad(T.tsum(v), params)
    assert sum(np.abs(g).sum() for g in grads) > 0


def test_execution_runs_without_critic_or_state(crona):
    cfg, world, model = crona
    episodes = world.val[:2]
    ref, ref_traces = run_actors([DecentralizedActor(n) for n in model.agents], world, episodes, return_traces=True)
    stripped = copy.deepcopy(model)
    del stripped.critic
    nets = stripped.agents
    del stripped
    got, traces = run_actors([DecentralizedActor(n) for n in nets], world, episodes, return_traces=True)
    assert traces == ref_traces
    assert [m.to_dict() for m in got] == [m.to_dict() for m in ref]


def test_greedy_actor_is_deterministic(crona):
    _, world, model = crona
    a = run_actors([DecentralizedActor(n) for n in model.agents], world, world.val[:1], return_traces=True)[1]
    b = run_actors([DecentralizedActor(n) for n in model.agents], world, world.val[:1], return_traces=True)[1]
    assert a == b


def test_multi_agent_model_groups_cover_every_parameter(crona):
    cfg, _, model = crona
    groups = model.parameter_groups(1.0, 2.0)
    names = [k for params, _ in groups.values() for k in params]
    assert len(names) == len(set(names)) == len(dict(model.named_parameters()))
    assert groups["critic"][1] == 2.0 and groups["agent0"][1] == 1.0
