"""Train the cross-modal pair (one listener, one looker) on the studio scene, evaluate it greedily,
and replay one validation episode to disk.

The default 40 updates take a couple of minutes and mostly show the plumbing. Pass a larger count
(around 400 at desk scale) to watch greedy success climb.

    python3 demos/04_train_evaluate_replay.py [updates] [run_dir]
"""

import sys
import tempfile
from pathlib import Path

from crossnav.config import preset_config
from crossnav.harness import ResultsTable, run_eval, run_replay, run_train

updates = int(sys.argv[1]) if len(sys.argv) > 1 else 40
run_dir = Path(sys.argv[2]) if len(sys.argv) > 2 else Path(tempfile.mkdtemp(prefix="crossnav-demo-"))

cfg = preset_config("crona", desk=True, eval_every=20, eval_episodes=10)


def report(row):
    if row["update"] % 10 == 0 or "eval_success" in row:
        extra = f", greedy eval success {row['eval_success']:.2f}" if "eval_success" in row else ""
        print(f"update {row['update']:4d}: entropy {row['entropy']:.3f}, "
              f"train success {row.get('train_success', float('nan')):.2f}{extra}", flush=True)


result = run_train(cfg, run_dir, updates=updates, callback=report)
print(f"\nrun directory: {result.run_dir}")

row = run_eval(result.checkpoint, split="val")
print(ResultsTable([row]).to_markdown())

episode = row.records[0]["episode_id"]
summary = run_replay(result.checkpoint, episode, run_dir / "replay")
print(f"\nreplayed episode {episode}: {summary['steps']} steps, return {summary['metrics']['return']:.2f}")
print(f"trace, per-step CSVs, belief trace and frames are in {run_dir / 'replay'}")
