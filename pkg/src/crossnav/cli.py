"""Command-line entry point: ``crossnav <verb> ...``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure,
3 a verification check failed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(pairs) -> dict:
    from .trainer import ConfigError

    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"{pair}: overrides must look like field=value")
        key, value = pair.split("=", 1)
        out[key.strip()] = _parse_value(value)
    return out


def _train_config(args):
    from .config import config_from_dict, load_config

    over = _overrides(args.set)
    for name in ("scene", "seed", "updates"):
        value = getattr(args, name, None)
        if value is not None:
            over[name] = value
    if args.config:
        base = load_config(args.config).to_dict()
        if args.preset:
            from .config import get_preset

            base["agents"] = get_preset(args.preset).agent_lists()
        return config_from_dict({**base, **over})
    return config_from_dict({"preset": args.preset or "crona", "desk": args.desk, **over})


def cmd_gen_scenes(args) -> int:
    from .scene import EpisodeConstraints, generate_episodes, generate_scene, save_dataset

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for kind in args.kind:
        for seed in args.seed:
            scene = generate_scene(kind, seed)
            cons = EpisodeConstraints.for_kind(kind)
            eps = generate_episodes(scene, cons, count=args.episodes, seed=seed)
            path = out / f"{kind}-{seed}.json"
            save_dataset(path, scene, eps, cons)
            print(f"{path}: {scene.width}x{scene.height}, {len(scene.targets)} targets, {len(eps)} episodes")
    return EXIT_OK


def cmd_train(args) -> int:
    from .harness import run_train

    cfg = _train_config(args)

    def report(row):
        if "eval_success" in row or row["update"] % args.log_every == 0:
            keys = ("update", "train_success", "train_return", "entropy", "eval_success")
            print(" ".join(f"{k}={row[k]:.4g}" if isinstance(row[k], float) else f"{k}={row[k]}"
                           for k in keys if k in row), flush=True)

    res = run_train(cfg, args.run_dir, cfg.updates, resume=args.resume, callback=report)
    print(f"run directory: {res.run_dir}")
    print(f"final checkpoint: {res.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .harness import ResultsTable, run_eval

    row = run_eval(args.checkpoint, args.split, args.episodes, args.scene, args.seed)
    table = ResultsTable([row])
    print(table.to_markdown())
    if args.out:
        table.save(args.out)
    return EXIT_OK


def cmd_replay(args) -> int:
    from .harness import run_replay

    summary = run_replay(args.checkpoint, args.episode, args.out)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .harness import ablation_matrix, run_ablation

    cfg = _train_config(args)
    cells = ablation_matrix(tuple(args.group))
    table = run_ablation(cfg, cells, args.root, cfg.updates, args.episodes, args.workers)
    print(table.to_markdown())
    return EXIT_OK


def cmd_verify(args) -> int:
    from .trainer import ConfigError
    from .verify import SUITES, run_checks

    unknown = sorted(set(args.suite or ()) - set(SUITES))
    if unknown:
        raise ConfigError(f"suite: unknown suite(s) {unknown}; choose from {sorted(SUITES)}")
    results = run_checks(args.suite, quick=args.quick)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_CHECK if failed else EXIT_OK


def _add_train_options(p):
    p.add_argument("--config", help="JSON config file (fields of TrainConfig, optional 'preset' and 'desk')")
    p.add_argument("--preset", help="single | vla | ala | avla | crona")
    p.add_argument("--scene", help="studio | corridor | apartment | ranch | maze")
    p.add_argument("--seed", type=int)
    p.add_argument("--updates", type=int)
    p.add_argument("--desk", action="store_true", help="CPU-scale sensors, networks and learning rates")
    p.add_argument("--set", nargs="*", metavar="FIELD=VALUE", help="override config fields (JSON values)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossnav", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-scenes", help="generate scenes and episode datasets")
    p.add_argument("--kind", nargs="+", default=["studio"])
    p.add_argument("--seed", nargs="+", type=int, default=[0])
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--out", default="datasets")
    p.set_defaults(func=cmd_gen_scenes)

    p = sub.add_parser("train", help="train a method preset")
    _add_train_options(p)
    p.add_argument("--run-dir", help="run directory (default: $CROSSNAV_RUNS/<scene>-<method>-s<seed>)")
    p.add_argument("--resume", action="store_true", help="continue from the newest checkpoint in the run dir")
    p.add_argument("--log-every", type=int, default=10)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=["val", "train", "all"])
    p.add_argument("--episodes", type=int)
    p.add_argument("--scene", help="assert the checkpoint was trained on this scene kind")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the results table (with per-episode records) as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("replay", help="dump one episode's trace, beliefs and sensor frames")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episode", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("ablate", help="train and evaluate the ablation matrix")
    _add_train_options(p)
    p.add_argument("--group", nargs="+", default=["component", "embedding", "resolution"],
                   choices=["component", "embedding", "resolution"])
    p.add_argument("--episodes", type=int, help="validation episodes per cell")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--root", help="output directory (default: $CROSSNAV_RUNS/ablation)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("verify", help="run the oracle and invariant checks")
    p.add_argument("--suite", nargs="*", help="gradients | oracles | closed-form | accounting | unbiasedness")
    p.add_argument("--quick", action="store_true", help="fewer episodes and samples")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    from .trainer import ConfigError

    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as err:  # noqa: BLE001 - report any runtime failure with a distinct exit code
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
