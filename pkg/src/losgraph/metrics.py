"""Length-of-stay evaluation metrics, weighted kappa, calibration and seed aggregation."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


METRIC_NAMES = ("mse", "msle", "mad", "log_mape_pct", "r2", "kappa", "ece")


def _pair(y_true, y_pred) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y_true, dtype=np.float64).ravel()
    p = np.asarray(y_pred, dtype=np.float64).ravel()
    if y.shape != p.shape or y.size == 0:
        raise ValueError("y_true and y_pred must be non-empty and of equal length")
    if (y < 0).any() or (p < 0).any():
        raise ValueError("length of stay values must be non-negative")
    return y, p


def regression_metrics(y_true, y_pred, eps: float = 1e-8) -> dict[str, float]:
    """MSE, MSLE, MAD, log-MAPE (percent) and R^2.

    R^2 is NaN (with a warning) when ``y_true`` is constant.
    """
    y, p = _pair(y_true, y_pred)
    err = y - p
    ly, lp = np.log1p(y), np.log1p(p)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        warnings.warn("R^2 undefined for constant y_true", RuntimeWarning, stacklevel=2)
        r2 = math.nan
    else:
        r2 = 1.0 - float((err ** 2).sum()) / ss_tot
    return {
        "mse": float(np.mean(err ** 2)),
        "msle": float(np.mean((ly - lp) ** 2)),
        "mad": float(np.mean(np.abs(err))),
        "log_mape_pct": float(100.0 * np.mean(np.abs(ly - lp) / np.maximum(ly, eps))),
        "r2": r2,
    }


def kappa_bin_edges(y_true, bins: int = 10) -> np.ndarray:
    """Interior equal-frequency edges on ``y_true`` (duplicates removed)."""
    y = np.asarray(y_true, dtype=np.float64)
    qs = np.quantile(y, np.arange(1, bins) / bins)
    return np.unique(qs)


def digitize(values, edges: np.ndarray) -> np.ndarray:
    return np.searchsorted(edges, np.asarray(values, dtype=np.float64), side="right")


def weighted_kappa_from_bins(a, b, k: int) -> float:
    """Linear weighted kappa of two integer ratings in ``range(k)``."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if k < 2:
        return math.nan
    conf = np.zeros((k, k))
    np.add.at(conf, (a, b), 1.0)
    conf /= conf.sum()
    i = np.arange(k)
    w = 1.0 - np.abs(i[:, None] - i[None, :]) / (k - 1)
    p_o = float((w * conf).sum())
    p_e = float((w * np.outer(conf.sum(axis=1), conf.sum(axis=0))).sum())
    if p_e == 1.0:
        return math.nan
    return (p_o - p_e) / (1.0 - p_e)


def weighted_kappa(y_true, y_pred, bins: int = 10, edges: np.ndarray | None = None) -> float:
    """Linear weighted kappa after binning both series on y_true deciles.

    Returns NaN when the truth collapses into a single bin.
    """
    y, p = _pair(y_true, y_pred)
    if y.size < 2:
        raise ValueError("kappa needs at least two samples")
    if edges is None:
        edges = kappa_bin_edges(y, bins)
    k = len(edges) + 1
    a = digitize(y, edges)
    if k < 2 or np.unique(a).size < 2:
        warnings.warn("kappa undefined: all truths fall in one bin", RuntimeWarning, stacklevel=2)
        return math.nan
    return weighted_kappa_from_bins(a, digitize(p, edges), k)


@dataclass
class Reliability:
    mean_pred: np.ndarray
    mean_true: np.ndarray
    counts: np.ndarray
    ece: float


def reliability_ece(y_true, y_pred, n_bins: int = 10) -> Reliability:
    """Equal-frequency reliability bins over predictions and range-normalized ECE.

    Samples are ordered by prediction (ties by index) and cut into ``n_bins``
    near-equal groups.  ECE is the count-weighted mean absolute gap between
    bin means divided by ``max(y_true) - min(y_true)``; NaN if that range is 0.
    """
    y, p = _pair(y_true, y_pred)
    order = np.argsort(p, kind="stable")
    groups = [g for g in np.array_split(order, min(n_bins, y.size)) if g.size]
    mean_pred = np.array([p[g].mean() for g in groups])
    mean_true = np.array([y[g].mean() for g in groups])
    counts = np.array([g.size for g in groups])
    gap = float((counts / y.size * np.abs(mean_pred - mean_true)).sum())
    rng = float(y.max() - y.min())
    if rng == 0.0:
        warnings.warn("ECE normalization undefined for constant y_true", RuntimeWarning, stacklevel=2)
        ece = math.nan
    else:
        ece = gap / rng
    return Reliability(mean_pred, mean_true, counts, ece)


@dataclass
class MetricReport:
    mse: float
    msle: float
    mad: float
    log_mape_pct: float
    r2: float
    kappa: float
    ece: float
    n: int = 0
    kappa_edges: list[float] = field(default_factory=list)
    std: dict[str, float] | None = None
    per_seed: dict[str, list[float]] | None = None

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_NAMES}

    def to_kv(self) -> str:
        """Flat ``key=value`` text, one metric per line, repr-exact floats."""
        lines = [f"{k}={v!r}" for k, v in self.values().items()]
        lines.append(f"n={self.n}")
        if self.std is not None:
            lines += [f"{k}_std={self.std[k]!r}" for k in METRIC_NAMES]
        if self.kappa_edges:
            lines.append("kappa_edges=" + ",".join(repr(float(e)) for e in self.kappa_edges))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_kv(cls, text: str) -> "MetricReport":
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        std = {k: float(kv[f"{k}_std"]) for k in METRIC_NAMES} if "mse_std" in kv else None
        edges = [float(e) for e in kv["kappa_edges"].split(",")] if kv.get("kappa_edges") else []
        return cls(**{k: float(kv[k]) for k in METRIC_NAMES}, n=int(kv.get("n", 0)),
                   kappa_edges=edges, std=std)


def evaluate_predictions(y_true, y_pred, kappa_bins: int = 10, ece_bins: int = 10) -> MetricReport:
    y, p = _pair(y_true, y_pred)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        reg = regression_metrics(y, p)
        edges = kappa_bin_edges(y, kappa_bins)
        kap = weighted_kappa(y, p, kappa_bins, edges) if y.size >= 2 else math.nan
        ece = reliability_ece(y, p, ece_bins).ece
    return MetricReport(**reg, kappa=kap, ece=ece, n=int(y.size), kappa_edges=[float(e) for e in edges])


def aggregate_seeds(reports: list[MetricReport]) -> MetricReport:
    """Per-metric sample mean and standard deviation (ddof=1; 0 for one report)."""
    if not reports:
        raise ValueError("need at least one report")
    table = {k: [getattr(r, k) for r in reports] for k in METRIC_NAMES}
    mean = {k: float(np.mean(v)) for k, v in table.items()}
    std = {k: float(np.std(v, ddof=1)) if len(v) > 1 else 0.0 for k, v in table.items()}
    return MetricReport(**mean, n=reports[0].n, kappa_edges=list(reports[0].kappa_edges),
                        std=std, per_seed=table)


REPORT_COLUMNS = ("label",) + METRIC_NAMES + tuple(f"{k}_std" for k in METRIC_NAMES) + ("n",)


def write_report_table(rows: list[tuple[str, MetricReport]], path: str | Path) -> None:
    """Tab-separated table: ``label``, the seven metrics, their std columns, ``n``."""
    out = ["\t".join(REPORT_COLUMNS)]
    for label, rep in rows:
        std = rep.std or {k: 0.0 for k in METRIC_NAMES}
        vals = [label] + [repr(getattr(rep, k)) for k in METRIC_NAMES] + \
               [repr(std[k]) for k in METRIC_NAMES] + [str(rep.n)]
        out.append("\t".join(vals))
    Path(path).write_text("\n".join(out) + "\n")


def read_report_table(path: str | Path) -> list[tuple[str, MetricReport]]:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split("\t")
    rows = []
    for line in lines[1:]:
        rec = dict(zip(header, line.split("\t")))
        rep = MetricReport(**{k: float(rec[k]) for k in METRIC_NAMES}, n=int(rec["n"]),
                           std={k: float(rec[f"{k}_std"]) for k in METRIC_NAMES})
        rows.append((rec["label"], rep))
    return rows
