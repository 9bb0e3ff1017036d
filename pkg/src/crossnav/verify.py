"""Self-contained oracle and invariant checks, runnable from the command line.

Each check compares a library routine against an independent reference
computation (direct sums, plain loops, a graph library, finite differences)
and returns a ``CheckResult``. The ``verify`` CLI verb runs them all.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .autodiff import functional as F
from .autodiff import nn
from .autodiff import tensor as T
from .autodiff.gradcheck import check_gradients_sampled, relative_error


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.value:.3g} (tolerance {self.tolerance:g}) {self.detail}".rstrip()


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        for r in res if isinstance(res, list) else [res]:
            r.seconds = time.perf_counter() - t0
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# -- gradient checks ------------------------------------------------------------------------
def _away_from_kinks(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def op_cases(rng: np.random.Generator) -> dict:
    """Loss builders per differentiable op: name -> (fn, params)."""
    P = nn.parameter
    cases = {}

    def add_case(name, build, *arrays):
        params = [P(a) for a in arrays]
        cases[name] = (lambda: build(*params), params)

    w_out = rng.normal(size=(4, 6))  # random projection makes every output coordinate matter

    def proj(t):
        return T.tsum(T.mul(t, w_out))

    a, b = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    add_case("add", lambda x, y: proj(T.add(x, y[0])), a, b)
    add_case("sub", lambda x, y: proj(T.sub(x, y)), a, b)
    add_case("mul", lambda x, y: proj(T.mul(x, y)), a, b)
    add_case("div", lambda x, y: proj(T.div(x, y)), a, rng.uniform(0.5, 2.0, (4, 6)))
    gap = rng.uniform(0.2, 1.0, (4, 6)) * rng.choice([-1, 1], (4, 6))
    add_case("minimum", lambda x, y: proj(T.minimum(x, y)), a, a + gap)
    add_case("maximum", lambda x, y: proj(T.maximum(x, y)), a, a + gap)
    cond = rng.uniform(size=(4, 6)) > 0.5
    add_case("where", lambda x, y: proj(T.where(cond, x, y)), a, b)
    add_case("neg", lambda x: proj(T.neg(x)), a)
    add_case("power", lambda x: proj(T.power(x, 3.0)), a)
    add_case("exp", lambda x: proj(T.exp(x)), a)
    add_case("log", lambda x: proj(T.log(x)), rng.uniform(0.5, 2.0, (4, 6)))
    add_case("tanh", lambda x: proj(T.tanh(x)), a)
    add_case("sigmoid", lambda x: proj(T.sigmoid(x)), a)
    add_case("relu", lambda x: proj(T.relu(x)), _away_from_kinks(rng, (4, 6)))
    add_case("gelu", lambda x: proj(T.gelu(x)), a)
    add_case("clip", lambda x: proj(T.clip(x, -0.05, 0.05)), _away_from_kinks(rng, (4, 6)) * 0.04 / 1.5)
    add_case("tsum", lambda x: T.tsum(T.mul(T.tsum(x, axis=0), w_out[0])), a)
    add_case("mean", lambda x: T.tsum(T.mul(T.mean(x, axis=1, keepdims=True), w_out[:, :1])), a)
    add_case("reshape", lambda x: T.tsum(T.mul(T.reshape(x, (6, 4)), w_out.reshape(6, 4))), a)
    add_case("transpose", lambda x: T.tsum(T.mul(T.transpose(x), w_out.T)), a)
    add_case("swapaxes", lambda x: T.tsum(T.mul(T.swapaxes(x, 0, 1), w_out.T)), a)
    add_case("getitem", lambda x: T.tsum(T.mul(x[1:, ::2], w_out[1:, ::2])), a)
    rows = np.array([2, 0, 3, 2, 1])
    w4 = rng.normal(size=(5, 6))
    add_case("take_rows", lambda x: T.tsum(T.mul(T.take_rows(x, rows), w4)), a)
    add_case("concat", lambda x, y: T.tsum(T.mul(T.concat([x, y], axis=0), np.vstack([w_out, w_out * 2]))), a, b)
    add_case("stack", lambda x, y: T.tsum(T.mul(T.stack([x, y], axis=0), np.stack([w_out, -w_out]))), a, b)
    add_case("matmul", lambda x, y: proj(T.matmul(x, y)), a, rng.normal(size=(6, 6)))
    add_case("softmax", lambda x: proj(T.softmax(x, axis=-1)), a)
    add_case("log_softmax", lambda x: proj(T.log_softmax(x, axis=-1)), a)
    add_case("linear", lambda x, w, bb: proj(F.linear(x, w, bb)), a, rng.normal(size=(6, 6)), rng.normal(size=6))
    wc = rng.normal(size=(2, 3, 6, 6))
    add_case("conv2d", lambda x, w, bb: T.tsum(T.mul(F.conv2d(x, w, bb, stride=2, padding=1), wc)),
             rng.normal(size=(2, 2, 11, 11)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3))
    add_case("layer_norm", lambda x, w, bb: proj(F.layer_norm(x, w, bb)), a, rng.normal(size=6), rng.normal(size=6))
    wg = rng.normal(size=(2, 4, 3, 3))
    add_case("group_norm", lambda x, w, bb: T.tsum(T.mul(F.group_norm(x, 2, w, bb), wg)),
             rng.normal(size=(2, 4, 3, 3)), rng.normal(size=4), rng.normal(size=4))
    mask = np.tril(np.ones((5, 5), dtype=bool))
    wa = rng.normal(size=(2, 5, 4))
    add_case("attention", lambda q, k, v: T.tsum(T.mul(F.attention(q, k, v, mask)[0], wa)),
             rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 5, 4)))
    add_case("mse", lambda x: F.mse(x, b), a)
    return cases


@_timed
def check_op_gradients(seed: int = 0, probes: int = 20, tol: float = 1e-4) -> list[CheckResult]:
    """Finite-difference check for every differentiable op (probes spread over its inputs)."""
    rng = np.random.default_rng(seed)
    out = []
    for name, (fn, params) in op_cases(rng).items():
        rows = check_gradients_sampled(fn, params, rng, probes=probes)
        worst = max(relative_error(a, n) for _, _, a, n in rows)
        out.append(CheckResult(f"gradcheck op {name}", worst <= tol and len(rows) >= min(probes, sum(
            p.data.size for p in params)), worst, tol, f"{len(rows)} probes"))
    return out


def _desk_world(agents=(("audio",), ("depth",))):
    from .trainer import TrainConfig, build_world

    cfg = TrainConfig(sensors="desk", agents=[list(a) for a in agents])
    return cfg, build_world(cfg)


def network_cases(seed: int = 0) -> dict:
    """Full-network losses (actor per modality, critic, belief predictor) on random desk-sized inputs."""
    from .belief import BeliefPredictor, ConvStackConfig, belief_loss
    from .policy import BELIEF_DIM, AgentNetwork, Critic, ModelConfig, log_prob_entropy, state_dim

    rng = np.random.default_rng(seed)
    cfg, world = _desk_world()
    mc = ModelConfig.desk()
    # unit output gain keeps gradients well above finite-difference roundoff
    mc = ModelConfig.from_dict({**mc.to_dict(), "cache": 3, "head_gain": 1.0})
    dims = world.dims
    B, S = 2, mc.cache + 1
    cases = {}
    for mods in (("audio",), ("depth",), ("depth", "audio")):
        net = AgentNetwork(mods, dims, mc, np.random.default_rng([seed, len(mods), int("audio" in mods)]))
        depth = rng.uniform(0, dims.max_depth, size=(B * S, 1, *dims.depth_shape)) if "depth" in mods else None
        spec = rng.uniform(0, 2, size=(B * S, *dims.spec_shape)) if "audio" in mods else None
        pose5 = rng.uniform(-1, 1, size=(B * S, 5))
        goal = (rng.uniform(size=(B * S, 7)) > 0.5).astype(float)
        prev = np.eye(4)[rng.integers(4, size=(B, S))]
        valid = np.ones((B, S), dtype=bool)
        valid[0, 0] = False
        bel = rng.normal(size=(B, BELIEF_DIM))
        acts = rng.integers(4, size=B)
        adv = rng.normal(size=B)

        def actor_loss(net=net, depth=depth, spec=spec, pose5=pose5, goal=goal, prev=prev, valid=valid, bel=bel,
                       acts=acts, adv=adv):
            z = net.embed(depth, spec, pose5, goal)
            z = T.reshape(z, (B, S, z.shape[-1]))
            zh = net.history(z, prev, pose5.reshape(B, S, 5), valid)
            logits = net.logits(zh, bel)
            logp, ent = log_prob_entropy(logits)
            chosen = T.take_rows(T.reshape(logp, (B * 4,)), np.arange(B) * 4 + acts)
            return T.mean(T.mul(chosen, adv)) + T.mul(T.mean(ent), 0.05)

        params = [p for k, p in net.named_parameters() if not k.startswith("belief.")]
        cases["actor " + "+".join(mods)] = (actor_loss, params)

    n, nt = 2, 1
    critic = Critic(n, mc.hidden, state_dim(n, nt), np.random.default_rng([seed, 9]), head_gain=1.0)
    zs = [rng.normal(size=(3, mc.hidden)) for _ in range(n)]
    bs = [rng.normal(size=(3, BELIEF_DIM)) for _ in range(n)]
    st = rng.uniform(size=(3, state_dim(n, nt)))
    ret, vold = rng.normal(size=3), rng.normal(size=3)

    def critic_loss():
        from .trainer import value_loss

        return value_loss(critic(zs, bs, st), vold, ret, 10.0)

    cases["critic"] = (critic_loss, [p for _, p in critic.named_parameters()])

    bp = BeliefPredictor(dims.spec_shape, np.random.default_rng([seed, 11]), ConvStackConfig.desk(), goal_scale=5.0)
    for _, p in bp.named_parameters():  # move away from the zero-initialised heads
        p.data += 0.1 * rng.normal(size=p.data.shape)
    spec = rng.uniform(0, 2, size=(3, *dims.spec_shape))
    pf = rng.uniform(-1, 1, size=(3, 5))
    g_star = rng.uniform(0, 5, size=(3, 2))
    c_star = (rng.uniform(size=(3, 7)) > 0.5).astype(float)

    def bel_loss():
        goal, probs = bp.forward(spec, pf)
        return belief_loss(goal, probs, g_star, c_star)

    cases["belief predictor"] = (bel_loss, [p for _, p in bp.named_parameters()])
    return cases


@_timed
def check_network_gradients(seed: int = 0, probes: int = 24, tol: float = 1e-4) -> list[CheckResult]:
    rng = np.random.default_rng([seed, 99])
    out = []
    for name, (fn, params) in network_cases(seed).items():
        rows = check_gradients_sampled(fn, params, rng, probes=probes)
        worst = max(relative_error(a, n) for _, _, a, n in rows)
        out.append(CheckResult(f"gradcheck network {name}", worst <= tol and len(rows) >= 20, worst, tol,
                               f"{len(rows)} probes"))
    return out


# -- oracle equivalences --------------------------------------------------------------------
def naive_stft(x: np.ndarray, n_fft: int, hop: int, window: np.ndarray) -> np.ndarray:
    """Direct double sum |sum_l x(l) w(l - tau hop) exp(-2 pi j k (l - tau hop) / n_fft)|."""
    frames = (len(x) - n_fft) // hop + 1
    out = np.zeros((n_fft // 2 + 1, frames))
    for tau in range(frames):
        for k in range(n_fft // 2 + 1):
            acc = 0j
            for m in range(n_fft):
                acc += x[tau * hop + m] * window[m] * complex(math.cos(-2 * math.pi * k * m / n_fft),
                                                              math.sin(-2 * math.pi * k * m / n_fft))
            out[k, tau] = abs(acc)
    return out


def hann(n: int) -> np.ndarray:
    """Periodic Hann window written out from its definition."""
    return np.array([0.5 - 0.5 * math.cos(2 * math.pi * m / n) for m in range(n)])


@_timed
def check_stft(seed: int = 0, tol: float = 1e-9) -> CheckResult:
    from .sensors import stft_spectrogram

    rng = np.random.default_rng(seed)
    worst = 0.0
    for n_fft, hop, length in ((32, 16, 200), (64, 64, 300), (16, 5, 97)):
        x = rng.normal(size=(2, length))
        got = stft_spectrogram(x, n_fft, hop, "hann").magnitudes
        for c in range(2):
            worst = max(worst, float(np.abs(got[c] - naive_stft(x[c], n_fft, hop, hann(n_fft))).max()))
    return CheckResult("STFT vs direct DFT sum", worst <= tol, worst, tol)


def brute_force_gae(rewards, values, dones, gamma, lam):
    """Direct double sum over future TD errors, truncated at the first episode end."""
    n = len(rewards)
    adv = np.zeros(n)
    for t in range(n):
        total, weight = 0.0, 1.0
        for l in range(t, n):
            nonterminal = 0.0 if dones[l] else 1.0
            delta = rewards[l] + gamma * values[l + 1] * nonterminal - values[l]
            total += weight * delta
            if dones[l]:
                break
            weight *= gamma * lam
        adv[t] = total
    return adv


@_timed
def check_gae(seed: int = 0, trials: int = 50, tol: float = 1e-10) -> CheckResult:
    from .trainer import compute_gae

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, 65))
        r, v = rng.normal(size=n), rng.normal(size=n + 1)
        d = rng.uniform(size=n) < 0.1
        gamma, lam = rng.uniform(0.8, 1.0), rng.uniform(0.0, 1.0)
        adv, ret = compute_gae(r, v, d, gamma, lam)
        ref = brute_force_gae(r, v, d, gamma, lam)
        worst = max(worst, float(np.abs(adv - ref).max()), float(np.abs(ret - (ref + v[:n])).max()))
    return CheckResult("GAE vs brute-force sum", worst <= tol, worst, tol, f"{trials} random sequences")


@_timed
def check_ema(seed: int = 0, steps: int = 40) -> CheckResult:
    from .belief import Belief, BeliefPrediction, ema_update

    rng = np.random.default_rng(seed)
    mismatches = 0
    for alpha in (0.0, 0.25, 0.5, 1.0, float(rng.uniform())):
        b = Belief()
        loc, cat = None, None
        for _ in range(steps):
            p_loc, p_cat = rng.normal(size=2), rng.uniform(size=7)
            b = ema_update(b, BeliefPrediction(np.zeros(2), p_loc, p_cat), alpha)
            if loc is None:
                loc, cat = list(p_loc), list(p_cat)
            else:
                loc = [alpha * p + (1 - alpha) * q for p, q in zip(p_loc, loc)]
                cat = [alpha * p + (1 - alpha) * q for p, q in zip(p_cat, cat)]
            mismatches += int(list(b.loc) != loc) + int(list(b.cat) != cat)
    return CheckResult("EMA vs direct recursion", mismatches == 0, float(mismatches), 0.0, "bit-exact")


@_timed
def check_frame_transform(seed: int = 0, trials: int = 500, tol: float = 1e-12) -> CheckResult:
    from .belief import to_agent_frame

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        g, pos, th = rng.uniform(-20, 20, 2), rng.uniform(-20, 20, 2), rng.uniform(-2 * math.pi, 2 * math.pi)
        got = to_agent_frame(g, (pos[0], pos[1], th))
        dx, dy = g[0] - pos[0], g[1] - pos[1]
        ref = np.array([math.cos(th) * dx + math.sin(th) * dy, -math.sin(th) * dx + math.cos(th) * dy])
        worst = max(worst, float(np.abs(got - ref).max()))
    return CheckResult("frame transform vs explicit rotation", worst <= tol, worst, tol)


@_timed
def check_geodesic(kinds=("studio", "corridor", "apartment"), sources: int = 4, seed: int = 0) -> CheckResult:
    import networkx as nx

    from .scene import generate_scene

    rng = np.random.default_rng(seed)
    mismatches = 0
    compared = 0
    for kind in kinds:
        scene = generate_scene(kind, 0)
        g = nx.Graph()
        free = [tuple(c) for c in zip(*np.nonzero(scene.grid.T))]  # (x, y)
        g.add_nodes_from(free)
        for x, y in free:
            for nx_, ny in ((x + 1, y), (x, y + 1)):
                if scene.navigable((nx_, ny)):
                    g.add_edge((x, y), (nx_, ny))
        for k in rng.choice(len(free), size=min(sources, len(free)), replace=False):
            src = free[int(k)]
            ref = nx.single_source_shortest_path_length(g, src)
            field = scene.distance_field(src)
            for cell in free:
                compared += 1
                want = ref.get(cell, math.inf)
                if field[cell[1], cell[0]] != want:
                    mismatches += 1
    return CheckResult("geodesic vs graph BFS", mismatches == 0, float(mismatches), 0.0,
                       f"{compared} cell pairs")


# -- closed-form values ------------------------------------------------------------------------
@_timed
def check_closed_forms(tol: float = 1e-9) -> list[CheckResult]:
    from .belief import belief_loss
    from .trainer import combine_shared_loss, policy_objective, value_loss

    b = belief_loss(np.array([[1.0, 1.0]]), np.array([[0.5, 0.5]]), np.array([[0.0, 0.0]]),
                    np.array([[1.0, 0.0]])).item()
    v = value_loss(np.array([2.0]), np.array([1.0]), np.array([1.0]), 0.25).item()
    p = policy_objective(np.array([math.log(1.5)]), np.array([0.0]), np.array([1.0]), np.array([0.0]),
                         0.2, 0.05).item()
    c = combine_shared_loss(2.0, 3.0, 0.67, 2)
    out = []
    for name, got, want in (("belief loss example", b, 2 + 2 * math.log(2)),
                            ("clipped value loss example", v, 1.0),
                            ("clipped surrogate example", p, 1.2),
                            ("shared-module loss example", c, -0.845)):
        err = abs(got - want)
        out.append(CheckResult(name, err <= tol, err, tol, f"got {got!r}, want {want!r}"))
    return out


# -- reward accounting -------------------------------------------------------------------------
@_timed
def check_reward_accounting(episodes: int = 200, kinds=None, seed: int = 0, tol: float = 1e-9) -> list[CheckResult]:
    """Random-policy episodes per scene kind; independent trace accounting must match logged returns."""
    from .env import Env, RewardConfig, account_trace
    from .scene import KINDS, generate_episodes, generate_scene

    kinds = KINDS if kinds is None else kinds
    out = []
    for kind in kinds:
        scene = generate_scene(kind, 0)
        specs = generate_episodes(scene, count=episodes, seed=0, horizon=60 if kind != "studio" else None)
        rng = np.random.default_rng([seed, len(kind)])
        env = Env(scene, observe=False)
        worst = 0.0
        for spec in specs[:episodes]:
            env.reset(spec)
            while True:
                # random policy with a lowered stop rate so episodes run on
                acts = [int(a) for a in rng.choice(4, size=len(spec.starts), p=[0.4, 0.25, 0.25, 0.1])]
                if env.step(acts).terminal:
                    break
            acc = account_trace(scene, spec, env.trace, RewardConfig())
            worst = max(worst, abs(acc["return"] - env.ret), abs(acc["return"] - env.metrics().ret))
        out.append(CheckResult(f"reward accounting {kind}", worst <= tol, worst, tol, f"{len(specs)} episodes"))
    return out


# -- tabular unbiasedness ------------------------------------------------------------------------
@_timed
def check_unbiasedness(samples: int = 100_000, seed: int = 0) -> list[CheckResult]:
    from .tabular import TabularDecPOMDP, TabularPolicy, unbiasedness_harness

    models = {"coin": TabularDecPOMDP.coin(horizon=2),
              "fully observed": TabularDecPOMDP.fully_observed(horizon=3),
              "random": TabularDecPOMDP.random(np.random.default_rng([seed, 1]), states=3, horizon=2)}
    out = []
    for name, model in models.items():
        policy = TabularPolicy.random(model, np.random.default_rng([seed, 2]))
        rep = unbiasedness_harness(model, policy, samples, np.random.default_rng([seed, 3]))
        worst = max(r.error / r.half_width for r in rep.rows)
        out.append(CheckResult(f"state-conditioned value unbiased ({name})", rep.all_inside, worst, 1.0,
                               f"{len(rep.rows)} histories, error / CI half-width"))
        if name != "fully observed":
            neg = unbiasedness_harness(model, policy, samples, np.random.default_rng([seed, 3]), bias_state=0)
            out.append(CheckResult(f"biased control rejected ({name})", not neg.all_inside,
                                   float(len(neg.failures)), 1.0, "histories outside the CI"))
    return out


SUITES = {
    "gradients": lambda quick: check_op_gradients() + check_network_gradients(),
    "oracles": lambda quick: [check_stft(), check_gae(), check_ema(), check_frame_transform(), check_geodesic()],
    "closed-form": lambda quick: check_closed_forms(),
    "accounting": lambda quick: check_reward_accounting(episodes=20 if quick else 200),
    "unbiasedness": lambda quick: check_unbiasedness(samples=20_000 if quick else 100_000),
}


def run_checks(suites=None, quick: bool = False) -> list[CheckResult]:
    names = list(SUITES) if not suites else list(suites)
    results = []
    for name in names:
        if name not in SUITES:
            raise KeyError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
        results.extend(SUITES[name](quick))
    return results
