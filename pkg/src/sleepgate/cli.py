"""Command-line driver: data generation, training, evaluation, reporting,
gradient checks, bound verification, and the streaming demo.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .baselines import METHODS, make_policy
from .config import HyperParams, ModelConfig, load_config, save_config, stream_rng
from .data import (EVAL_DEPTHS, gen_eval_set, gen_mixed_relevance_episode,
                   gen_multi_entity_episode, gen_pi_episode, load_episodes,
                   serialize_episodes)
from .evalharness import emit_report, evaluate, read_results_csv, summarize, write_results_csv
from .gradchecks import run_all
from .model import load_checkpoint, load_into_tensors
from .streaming import run_demo
from .theory import run_grid, write_theory_csv
from .training import train_method


def _depth_list(text: str) -> tuple[int, ...]:
    try:
        depths = tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad depth list: {text!r}")
    if not depths or any(d < 1 for d in depths):
        raise argparse.ArgumentTypeError(f"depths must be positive: {text!r}")
    return depths


def _load_or_default_config(path) -> tuple[ModelConfig, HyperParams]:
    if path is None:
        return ModelConfig(), HyperParams()
    return load_config(path)


def cmd_gen_data(args) -> int:
    rng = stream_rng(args.seed, "eval", 0)
    if args.kind == "pi":
        episodes = gen_eval_set(rng, depths=args.depths, per_depth=args.per_depth)
    else:
        episodes = []
        for depth in args.depths:
            for _ in range(args.per_depth):
                if args.kind == "multi":
                    episodes.append(gen_multi_entity_episode(2, depth, rng))
                else:
                    episodes.append(gen_mixed_relevance_episode(1, 1, depth, rng))
    serialize_episodes(episodes, args.out)
    print(f"wrote {len(episodes)} episodes -> {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg, hp = _load_or_default_config(args.config)
    overrides = {}
    for flag, field in [("stage0_epochs", "epochs_stage0"),
                        ("stage1_epochs", "epochs_stage1"),
                        ("stage2_epochs", "epochs_stage2"),
                        ("baseline_epochs", "baseline_epochs"),
                        ("episodes_per_epoch", "episodes_per_epoch")]:
        value = getattr(args, flag)
        if value is not None:
            overrides[field] = value
    if overrides:
        hp = dataclasses.replace(hp, **overrides)
    train_method(args.method, cfg, hp, args.seed, args.out)
    print(f"trained {args.method} -> {args.out}")
    return 0


def _eval_chunk(arg):
    ckpt, cfg, episodes, method = arg
    params = load_into_tensors(ckpt)
    return evaluate(params, cfg, episodes, method,
                    policy=make_policy(method), biased=(method == "sleepgate"))


def cmd_eval(args) -> int:
    cfg, hp = _load_or_default_config(args.config)
    episodes = load_episodes(args.episodes)
    if args.jobs > 1:
        from multiprocessing import Pool
        chunks = [episodes[i::args.jobs] for i in range(args.jobs)]
        work = [(args.checkpoint, cfg, c, args.method) for c in chunks if c]
        with Pool(len(work)) as pool:
            parts = pool.map(_eval_chunk, work)
        records = [r for part in parts for r in part]
    else:
        records = _eval_chunk((args.checkpoint, cfg, episodes, args.method))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cells = summarize(records)
    write_results_csv(cells, out / "results.csv")
    save_config(out / "config.txt", cfg, hp)
    for c in sorted(cells, key=lambda c: c.depth):
        print(f"{c.method:10s} depth={c.depth:<3d} n={c.n:<4d} "
              f"acc={c.accuracy:.3f} [{c.acc_lo:.3f},{c.acc_hi:.3f}] "
              f"stale={c.stale_rate:.3f}")
    print(f"wrote {out / 'results.csv'}")
    return 0


def cmd_report(args) -> int:
    cells = []
    for d in args.indirs.split(","):
        cells.extend(read_results_csv(Path(d.strip()) / "results.csv"))
    paths = emit_report(cells, args.out)
    for name, p in paths.items():
        print(f"{name}: {p}")
    return 0


def cmd_gradcheck(args) -> int:
    failures = 0
    for name, res in run_all():
        status = "ok" if res["pass"] else "FAIL"
        failures += not res["pass"]
        print(f"{name:28s} {status}  max_rel_err={res['max_rel_err']:.3e}")
    if failures:
        print(f"{failures} gradient check(s) failed", file=sys.stderr)
        return 1
    return 0


def cmd_theory(args) -> int:
    rows = run_grid(args.seed, trials=args.trials, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_theory_csv(rows, out / "theory.csv")
    bad = [r for r in rows if r.violates]
    for r in rows:
        mark = "VIOLATES" if r.violates else "ok"
        print(f"p_c={r.p_c:<5g} N={r.cycle_interval:<4d} n={r.n_updates:<5d} "
              f"mean={r.mc_mean:9.4f} bound={r.bound:9.4f} {mark}")
    print(f"wrote {out / 'theory.csv'}; {len(bad)} of {len(rows)} points violate")
    return 1 if bad else 0


def cmd_streaming_demo(args) -> int:
    params = load_checkpoint(args.checkpoint)
    episode = gen_pi_episode(args.depth, stream_rng(args.seed, "eval", 7700, args.depth))
    result = run_demo(params, ModelConfig(), episode, mode=args.mode)
    for ev in result["events"]:
        print(f"step={ev.step:<4d} reason={ev.reason:<24s} "
              f"entropy={ev.entropy:.4f} density={ev.density:.3f} "
              f"entries {ev.entries_before}->{ev.entries_after}"
              f"{'  (forced)' if ev.forced else ''}")
    print(f"depth={result['depth']} tokens={result['n_tokens']} "
          f"cycles={len(result['events'])} entries={result['final_entries']}")
    print(f"gold={result['gold']} predicted={result['predicted']} "
          f"correct={result['correct']} stale={result['stale']}")
    if "predicted_unbiased" in result:
        print(f"unbiased prediction={result['predicted_unbiased']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sleepgate",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate an episode file")
    p.add_argument("--kind", choices=["pi", "multi", "mixed"], default="pi")
    p.add_argument("--depths", type=_depth_list, default=EVAL_DEPTHS,
                   metavar="D1,D2,...")
    p.add_argument("--per-depth", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one method end to end")
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--stage0-epochs", type=int, default=None)
    p.add_argument("--stage1-epochs", type=int, default=None)
    p.add_argument("--stage2-epochs", type=int, default=None)
    p.add_argument("--baseline-epochs", type=int, default=None)
    p.add_argument("--episodes-per-epoch", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on an episode file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--episodes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="merge eval outputs into tables")
    p.add_argument("--in", dest="indirs", required=True, metavar="DIR[,DIR...]")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("theory", help="Monte Carlo check of the staleness bound")
    p.add_argument("--grid", choices=["default"], default="default")
    p.add_argument("--trials", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("streaming-demo",
                       help="token-at-a-time decode with adaptive sleep cycles")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--depth", type=int, default=10)
    p.add_argument("--mode", choices=["soft", "hard"], default="soft")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_streaming_demo)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
