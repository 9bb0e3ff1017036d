"""Why a critic may look at the hidden state without biasing the policy gradient.

On a tiny two-agent problem we enumerate every joint history exactly. For each history h we sample
hidden states from the posterior p(s | h) and average the state-conditioned value V(h, s). The
average should land on the exact history value V(h) within a 99% interval. Adding a bonus that
depends on the state breaks that, and the same test catches it.
"""

import numpy as np

from crossnav.tabular import TabularDecPOMDP, TabularPolicy, unbiasedness_harness

model = TabularDecPOMDP.coin()
policy = TabularPolicy.random(model, np.random.default_rng(0))

honest = unbiasedness_harness(model, policy, samples=100_000, rng=np.random.default_rng(1))
print(f"{'history':<40} {'exact V(h)':>10} {'sampled':>10} {'99% half-width':>15}")
for row in honest.rows[:8]:
    print(f"{str(row.history):<40} {row.exact:10.4f} {row.mean:10.4f} {row.half_width:15.4f}")
print(f"... {len(honest.rows)} histories in all; every one inside its interval: {honest.all_inside}")

biased = unbiasedness_harness(model, policy, samples=100_000, rng=np.random.default_rng(1), bias_state=0)
print(f"\nWith a state-dependent bonus, {len(biased.failures)} of {len(biased.rows)} histories fall outside.")
