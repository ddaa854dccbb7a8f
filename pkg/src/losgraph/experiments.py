"""Single runs, ablation suites, random search and report emission."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .cohort import Cohort
from .config import SEARCH_SPACE, ModelConfig, sample_config
from .graph_build import EdgeList, edge_dropout
from .metrics import MetricReport, aggregate_seeds, write_report_table
from .train import RunRecord, evaluate_split, make_record, prepare, save_checkpoint, train_model

log = logging.getLogger(__name__)

ABLATION_KINDS = ("window", "features", "modality", "edges")
EDGE_FRACTIONS = (0.3, 0.5, 0.7)
WINDOWS = (24, 6)
MODALITIES = ("no-static", "static-only")


def run_once(cohort: Cohort, edges: EdgeList, cfg: ModelConfig, out_dir: str | Path | None = None,
             checkpoint: bool = False):
    """Train one configuration and return ``(model, prepared data, RunRecord)``."""
    data = prepare(cohort, edges, cfg)
    model, info = train_model(data, cfg)
    record = make_record(model, data, cfg, info)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "record.json").write_text(record.to_json() + "\n")
        for split in ("train", "val", "test"):
            rep = MetricReport(**getattr(record, f"{split}_report"))
            (out / f"metrics_{split}.txt").write_text(rep.to_kv())
        if checkpoint:
            save_checkpoint(model, cfg, data, out / "checkpoint.npz")
    return model, data, record


# ------------------------------------------------------------------ ablation

def ablation_variants(kind: str, cohort: Cohort | None = None,
                      groups: list[str] | None = None) -> list[tuple[str, dict]]:
    """``(label, config overrides)`` pairs, baseline first."""
    if kind == "window":
        return [("window=48", {})] + [(f"window={w}", {"window": w}) for w in WINDOWS]
    if kind == "edges":
        return [("drop=0.0", {})] + [(f"drop={f}", {"edge_dropout": f}) for f in EDGE_FRACTIONS]
    if kind == "modality":
        return [("full", {})] + [(m, {"modality": m}) for m in MODALITIES]
    if kind == "features":
        valid = sorted(cohort.groups) if cohort is not None else []
        names = groups if groups else valid
        unknown = [g for g in names if g not in valid]
        if unknown:
            raise ValueError(f"unknown feature group(s) {unknown}; valid groups: {valid}")
        return [("all-features", {})] + [(f"no-{g}", {"drop_groups": g}) for g in names]
    raise ValueError(f"unknown ablation kind {kind!r}; choose from {ABLATION_KINDS}")


def _reevaluate_edges(edges, cfg, frac, model, data):
    """Test report of a baseline model when only inference sees the thinned graph."""
    thinned = replace(data, edges=edge_dropout(edges, frac, seed=cfg.seed))
    return evaluate_split(model, thinned, cfg, "test")


def run_ablation(cohort: Cohort, edges: EdgeList, base: ModelConfig, kind: str, seeds=(0, 1, 2),
                 groups: list[str] | None = None, retrain: bool = True,
                 out_dir: str | Path | None = None) -> list[tuple[str, MetricReport]]:
    """Train every variant under every seed; aggregate test reports per variant.

    With ``retrain=False`` the edge ablation reuses each seed's baseline model
    and only thins the graph at evaluation time.
    """
    variants = ablation_variants(kind, cohort, groups)
    per_variant: dict[str, list[MetricReport]] = {label: [] for label, _ in variants}
    for seed in seeds:
        baseline = None
        for label, overrides in variants:
            cfg = replace(base, seed=int(seed), **overrides)
            run_dir = Path(out_dir) / "runs" / f"{kind}_{label}_seed{seed}" if out_dir else None
            if kind == "edges" and not retrain and overrides:
                model, data = baseline
                rep = _reevaluate_edges(edges, cfg, cfg.edge_dropout, model, data)
            else:
                model, data, record = run_once(cohort, edges, cfg, run_dir)
                rep = MetricReport(**record.test_report)
                if not overrides:
                    baseline = (model, data)
            per_variant[label].append(rep)
            log.info("%s %s seed %d: test R2 %.4f", kind, label, seed, rep.r2)
    rows = [(label, aggregate_seeds(per_variant[label])) for label, _ in variants]
    if out_dir is not None:
        write_report_table(rows, Path(out_dir) / f"ablation_{kind}.tsv")
    return rows


# -------------------------------------------------------------------- search

@dataclass
class Trial:
    index: int
    config: ModelConfig
    val_rmse: float
    val_r2: float
    test_r2: float
    seconds: float
    n_parameters: int


TRIAL_COLUMNS = ("trial", "val_rmse", "val_r2", "test_r2", "seconds", "n_parameters") + tuple(SEARCH_SPACE)


def _trial_row(t: Trial) -> list[str]:
    cfg = asdict(t.config)
    cells = [str(t.index), repr(t.val_rmse), repr(t.val_r2), repr(t.test_r2), f"{t.seconds:.3f}",
             str(t.n_parameters)]
    for key in SEARCH_SPACE:
        cells.append(f"{cfg['fanout_1']},{cfg['fanout_2']}" if key == "fanouts" else str(cfg[key]))
    return cells


def _nan_last(value: float) -> float:
    return math.inf if not np.isfinite(value) else value


def random_search(cohort: Cohort, edges: EdgeList, base: ModelConfig, n_trials: int, seed: int = 0,
                  space: dict | None = None, out_dir: str | Path | None = None):
    """Seeded uniform random search.

    Returns ``(best_by_rmse, best_by_r2, trials)``; ties keep the earlier trial.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    rng = np.random.default_rng(seed)
    trials: list[Trial] = []
    for i in range(n_trials):
        cfg = sample_config(rng, replace(base, seed=seed), space)
        run_dir = Path(out_dir) / "runs" / f"trial{i:03d}" if out_dir else None
        _, _, rec = run_once(cohort, edges, cfg, run_dir)
        trials.append(Trial(i, cfg, math.sqrt(rec.val_report["mse"]), rec.val_report["r2"],
                            rec.test_report["r2"], rec.seconds, rec.n_parameters))
        log.info("trial %d: val RMSE %.4f val R2 %.4f", i, trials[-1].val_rmse, trials[-1].val_r2)
    best_rmse = min(trials, key=lambda t: (_nan_last(t.val_rmse), t.index))
    best_r2 = min(trials, key=lambda t: (_nan_last(-t.val_r2), t.index))
    if out_dir is not None:
        out = Path(out_dir)
        lines = ["\t".join(TRIAL_COLUMNS)] + ["\t".join(_trial_row(t)) for t in trials]
        (out / "trials.tsv").write_text("\n".join(lines) + "\n")
        (out / "best_rmse.cfg").write_text(best_rmse.config.to_kv())
        (out / "best_r2.cfg").write_text(best_r2.config.to_kv())
    return best_rmse, best_r2, trials


# -------------------------------------------------------------------- report

RUN_COLUMNS = ("run", "n_parameters", "seconds", "best_epoch", "val_r2", "test_r2", "test_mse", "test_kappa",
               "test_ece")


def collect_records(run_dir: str | Path) -> list[tuple[str, RunRecord]]:
    root = Path(run_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"run directory {root} does not exist")
    found = []
    for path in sorted(root.rglob("record.json")):
        name = path.parent.relative_to(root).as_posix() or "."
        found.append((name, RunRecord.from_json(path.read_text())))
    if not found:
        raise FileNotFoundError(f"no run records (record.json) under {root}")
    return found


def _svg(fig, path: Path) -> None:
    # fixed hash salt and no date keep the SVG byte-stable across reruns
    import matplotlib
    matplotlib.rcParams["svg.hashsalt"] = "losgraph"
    fig.savefig(path, format="svg", metadata={"Date": None})


def write_report(run_dir: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Emit summary tables and SVG plots for every record under ``run_dir``."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = collect_records(run_dir)
    out = Path(out_dir) if out_dir is not None else Path(run_dir) / "report"
    out.mkdir(parents=True, exist_ok=True)
    written = []

    rows = ["\t".join(RUN_COLUMNS)]
    for name, rec in records:
        rows.append("\t".join([name, str(rec.n_parameters), f"{rec.seconds:.3f}", str(rec.best_epoch),
                               repr(rec.val_report["r2"]), repr(rec.test_report["r2"]),
                               repr(rec.test_report["mse"]), repr(rec.test_report["kappa"]),
                               repr(rec.test_report["ece"])]))
    (out / "runs.tsv").write_text("\n".join(rows) + "\n")
    written.append(out / "runs.tsv")

    rel = ["\t".join(("run", "bin", "mean_pred", "mean_true", "count"))]
    for name, rec in records:
        bins = rec.reliability
        for b, (p, t, c) in enumerate(zip(bins["mean_pred"], bins["mean_true"], bins["counts"])):
            rel.append("\t".join([name, str(b), repr(p), repr(t), str(c)]))
    (out / "reliability.tsv").write_text("\n".join(rel) + "\n")
    written.append(out / "reliability.tsv")

    test_r2 = [rec.test_report["r2"] for _, rec in records]
    for column, label, fname in (("n_parameters", "parameter count", "params_vs_r2.svg"),
                                 ("seconds", "training time (s)", "time_vs_r2.svg")):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.scatter([getattr(rec, column) for _, rec in records], test_r2)
        ax.set_xlabel(label)
        ax.set_ylabel("test R2")
        fig.tight_layout()
        _svg(fig, out / fname)
        plt.close(fig)
        written.append(out / fname)

    fig, ax = plt.subplots(figsize=(4, 4))
    for name, rec in records:
        ax.plot(rec.reliability["mean_pred"], rec.reliability["mean_true"], marker="o", label=name)
    lim = ax.get_xlim()
    ax.plot(lim, lim, color="grey", linestyle="--")
    ax.set_xlabel("mean predicted LOS (days)")
    ax.set_ylabel("mean observed LOS (days)")
    if len(records) <= 8:
        ax.legend(fontsize=6)
    fig.tight_layout()
    _svg(fig, out / "reliability.svg")
    plt.close(fig)
    written.append(out / "reliability.svg")

    root = Path(run_dir)
    for table in sorted(root.rglob("ablation_*.tsv")):
        if table.stem.endswith("_bars") or out.resolve() in table.resolve().parents:
            continue
        rel = table.parent.relative_to(root)
        stem = table.stem if rel == Path(".") else "_".join(rel.parts) + "_" + table.stem
        lines = table.read_text().splitlines()
        header = lines[0].split("\t")
        recs = [dict(zip(header, line.split("\t"))) for line in lines[1:]]
        bars = ["\t".join(("variant", "r2", "r2_std"))] + \
               ["\t".join((r["label"], r["r2"], r["r2_std"])) for r in recs]
        bar_path = out / f"{stem}_bars.tsv"
        bar_path.write_text("\n".join(bars) + "\n")
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.bar([r["label"] for r in recs], [float(r["r2"]) for r in recs],
               yerr=[float(r["r2_std"]) for r in recs])
        ax.set_ylabel("test R2")
        ax.tick_params(axis="x", labelrotation=30)
        fig.tight_layout()
        _svg(fig, out / f"{stem}.svg")
        plt.close(fig)
        written += [bar_path, out / f"{stem}.svg"]
    return written
