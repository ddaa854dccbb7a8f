"""Command-line entry point: synth, build-graph, train, evaluate, ablate, search, report."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .cohort import CohortFormatError, generate_cohort, read_cohort, split_patients, write_cohort
from .config import ModelConfig, desk_config
from .experiments import ABLATION_KINDS, random_search, run_ablation, run_once, write_report
from .graph_build import build_graph, read_edges, summary_line, write_edges
from .metrics import write_report_table
from .train import DivergenceError, evaluate_split, load_checkpoint, prepare

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("losgraph")


class UsageError(Exception):
    """Bad configuration or flag combination (exit code 2)."""


def load_config(args: argparse.Namespace) -> ModelConfig:
    """Preset, then ``--config`` file, then ``--set`` overrides, then ``--seed``."""
    base = desk_config() if args.preset == "desk" else ModelConfig()
    try:
        if args.config:
            base = ModelConfig.from_kv(Path(args.config).read_text(), base)
        if args.set:
            base = ModelConfig.from_kv("\n".join(args.set), base)
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from exc
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return replace(base, seed=args.seed)


def _load_inputs(args: argparse.Namespace):
    cohort = read_cohort(args.cohort)
    edges = read_edges(args.graph)
    if edges.n_nodes != cohort.n:
        raise CohortFormatError(f"graph has {edges.n_nodes} nodes but cohort has {cohort.n} stays")
    return cohort, edges


# ------------------------------------------------------------------ commands

def cmd_synth(args) -> int:
    cohort = generate_cohort(args.seed, args.n, args.d_ts, args.d_flat, args.d_codes, args.emb_dim)
    cohort = split_patients(cohort, args.seed)
    write_cohort(cohort, args.out)
    print(f"wrote {cohort.n} stays to {args.out}")
    return EXIT_OK


def cmd_build_graph(args) -> int:
    cfg = load_config(args)
    cohort = read_cohort(args.cohort)
    if cohort.codes is None or cohort.emb is None:
        raise CohortFormatError("cohort lacks diagnosis codes or embeddings needed for the graph")
    E = build_graph(cohort.codes, cohort.emb, cfg.graph_settings())
    write_edges(E, args.out)
    print(summary_line(E))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args)
    cohort, edges = _load_inputs(args)
    _, _, record = run_once(cohort, edges, cfg, args.out, checkpoint=True)
    (Path(args.out) / "config.cfg").write_text(cfg.to_kv())
    print(f"best epoch {record.best_epoch}  val R2 {record.val_report['r2']:.4f}  "
          f"test R2 {record.test_report['r2']:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cohort, edges = _load_inputs(args)
    model, cfg, norm = load_checkpoint(args.checkpoint, 2 * cohort.d_ts, cohort.d_flat)
    data = prepare(cohort, edges, cfg, norm_stats=norm)
    text = evaluate_split(model, data, cfg, args.split).to_kv()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    cohort, edges = _load_inputs(args)
    groups = [g for g in args.groups.split(",") if g] if args.groups else None
    seeds = [args.seed + i for i in range(args.n_seeds)]
    try:
        rows = run_ablation(cohort, edges, cfg, args.kind, seeds, groups, not args.reevaluate, args.out)
    except ValueError as exc:
        if "feature group" in str(exc):
            raise UsageError(str(exc)) from exc
        raise
    for label, rep in rows:
        print(f"{label}\tR2 {rep.r2:.4f} +/- {rep.std['r2']:.4f}")
    return EXIT_OK


def cmd_search(args) -> int:
    if args.n_trials < 1:
        raise UsageError("--n-trials must be at least 1")
    cfg = load_config(args)
    cohort, edges = _load_inputs(args)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    best_rmse, best_r2, trials = random_search(cohort, edges, cfg, args.n_trials, args.seed, out_dir=args.out)
    print(f"{len(trials)} trials; best by val RMSE: trial {best_rmse.index} ({best_rmse.val_rmse:.4f}); "
          f"best by val R2: trial {best_r2.index} ({best_r2.val_r2:.4f})")
    return EXIT_OK


def cmd_report(args) -> int:
    paths = write_report(args.run_dir, args.out)
    for p in paths:
        print(p)
    return EXIT_OK


# -------------------------------------------------------------------- parser

def _config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--preset", choices=("desk", "full"), default="desk",
                   help="starting configuration: CPU-sized (default) or the full-size tuned values")


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--cohort", required=True, help="cohort directory")
    p.add_argument("--graph", required=True, help="edge list written by build-graph")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="losgraph", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort with patient-wise splits")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=2000, help="number of stays")
    p.add_argument("--d-ts", type=int, default=16)
    p.add_argument("--d-flat", type=int, default=8)
    p.add_argument("--d-codes", type=int, default=64)
    p.add_argument("--emb-dim", type=int, default=32)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-graph", help="build the multi-view patient graph")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True, help="output edge list (TSV)")
    _config_flags(p)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train", help="train with early stopping; writes checkpoint and reports")
    _data_flags(p)
    p.add_argument("--out", required=True, help="run directory")
    _config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="full-graph evaluation of a checkpoint")
    _data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", help="also write the key=value report here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run an ablation suite over several seeds")
    _data_flags(p)
    p.add_argument("--kind", choices=ABLATION_KINDS, required=True)
    p.add_argument("--groups", help="comma-separated feature groups (features ablation)")
    p.add_argument("--n-seeds", type=int, default=3)
    p.add_argument("--reevaluate", action="store_true",
                   help="edges ablation: thin the graph at evaluation only instead of retraining")
    p.add_argument("--out", required=True)
    _config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("search", help="seeded random hyperparameter search")
    _data_flags(p)
    p.add_argument("--n-trials", type=int, default=10)
    p.add_argument("--out", required=True)
    _config_flags(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("report", help="summary tables and SVG plots from run records")
    p.add_argument("run_dir")
    p.add_argument("--out", help="output directory (default RUN_DIR/report)")
    p.set_defaults(func=cmd_report)

    for action in sub.choices.values():
        action.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CohortFormatError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
