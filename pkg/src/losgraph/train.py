"""Training with neighbourhood-sampled mini-batches, early stopping and evaluation."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .cohort import SPLIT_NAMES, Cohort, model_inputs
from .config import ModelConfig
from .graph_build import EdgeList, edge_dropout
from .graph_encoder import _in_edge_index, sample_neighborhood
from .metrics import MetricReport, evaluate_predictions, regression_metrics, reliability_ece
from .model import Batch, Branches, LosModel, compute_loss, fuse, inverse_transform
from .optim import AdamW

log = logging.getLogger(__name__)

EVAL_SEED = 0
_CHUNK = 256


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or parameter."""


@dataclass
class Prepared:
    """Model-ready arrays for one cohort under one configuration."""

    x_ts: np.ndarray        # (N, T, 2 d_ts): standardized values + decay
    step_mask: np.ndarray   # (N, T)
    static: np.ndarray      # (N, d_flat) standardized
    y: np.ndarray           # (N,) days
    split: np.ndarray
    edges: EdgeList
    norm_stats: dict[str, np.ndarray] = field(default_factory=dict)


def _group_columns(cohort: Cohort, names: list[str]) -> tuple[list[int], list[int]]:
    ts_cols, st_cols = [], []
    for name in names:
        if name not in cohort.groups:
            raise ValueError(f"unknown feature group {name!r}; valid groups: {sorted(cohort.groups)}")
        kind, cols = cohort.groups[name]
        (ts_cols if kind == "ts" else st_cols).extend(cols)
    return ts_cols, st_cols


def prepare(cohort: Cohort, edges: EdgeList, cfg: ModelConfig,
            norm_stats: dict[str, np.ndarray] | None = None) -> Prepared:
    """Impute, standardize on training statistics and apply ablation switches."""
    if cohort.split is None:
        raise ValueError("cohort has no split tags")
    if edges.n_nodes != cohort.n:
        raise ValueError(f"graph has {edges.n_nodes} nodes but cohort has {cohort.n} stays")
    x, step_mask = model_inputs(cohort, cfg.window)
    static = cohort.static.astype(np.float64)
    d = cohort.d_ts
    if norm_stats is None:
        tr = cohort.indices("train")
        obs = cohort.mask[tr].astype(bool)
        vals = cohort.ts[tr].astype(np.float64)
        cnt = np.maximum(obs.sum(axis=(0, 1)), 1)
        mu = (vals * obs).sum(axis=(0, 1)) / cnt
        sd = np.sqrt((((vals - mu) * obs) ** 2).sum(axis=(0, 1)) / cnt)
        norm_stats = {
            "ts_mean": mu, "ts_std": np.where(sd > 0, sd, 1.0),
            "static_mean": static[tr].mean(axis=0),
            "static_std": np.where(static[tr].std(axis=0) > 0, static[tr].std(axis=0), 1.0),
        }
    seen = x[..., d:] > 0
    x[..., :d] = np.where(seen, (x[..., :d] - norm_stats["ts_mean"]) / norm_stats["ts_std"], 0.0)
    static = (static - norm_stats["static_mean"]) / norm_stats["static_std"]
    groups = [g for g in cfg.drop_groups.split(",") if g]
    ts_cols, st_cols = _group_columns(cohort, groups)
    if ts_cols:
        x[..., ts_cols] = 0.0
        x[..., [d + c for c in ts_cols]] = 0.0
    if st_cols:
        static[:, st_cols] = 0.0
    if cfg.edge_dropout > 0:
        edges = edge_dropout(edges, cfg.edge_dropout, seed=cfg.seed)
    return Prepared(x, step_mask, static, cohort.y.astype(np.float64), cohort.split, edges, norm_stats)


def build_model(cfg: ModelConfig, d_in: int, d_flat: int) -> LosModel:
    rng = np.random.default_rng(cfg.seed)
    return LosModel(d_in, d_flat, rng, d_model=cfg.mamba_d_model, mamba_layers=cfg.mamba_layers,
                    d_state=cfg.mamba_d_state, mamba_dropout=cfg.mamba_dropout, pooling=cfg.pooling,
                    gps_layers=cfg.gps_layers, gps_dropout=cfg.gps_dropout,
                    fusion_init=cfg.fusion_lambda, static_dropout=cfg.mamba_dropout)


def full_graph_predict(model: LosModel, data: Prepared, cfg: ModelConfig,
                       nodes: np.ndarray | None = None) -> np.ndarray:
    """Evaluation-mode log-domain main-head output for ``nodes`` (default all)."""
    br = Branches.from_name(cfg.modality)
    n = len(data.y)
    nodes = np.arange(n) if nodes is None else np.asarray(nodes)
    model.eval()
    with ad.no_grad():
        d = model.d_model
        need_all = br.graph
        ts_nodes = np.arange(n) if need_all else nodes
        z = np.zeros((len(ts_nodes), d))
        if br.ts or br.graph:
            for start in range(0, len(ts_nodes), _CHUNK):
                part = ts_nodes[start:start + _CHUNK]
                z[start:start + len(part)] = model.temporal(data.x_ts[part], data.step_mask[part]).data
        z_all = ad.tensor(z)
        if br.graph:
            z_graph = model.graph(z_all, data.edges, EVAL_SEED).data[nodes]
            z_ts = z[nodes]
        else:
            z_graph = np.zeros((len(nodes), d))
            z_ts = z
        zeros = np.zeros((len(nodes), d))
        z_flat = model.static(data.static[nodes]).data if br.static else zeros
        fused = fuse(ad.tensor(z_graph if br.graph else zeros), ad.tensor(z_ts if br.ts else zeros),
                     ad.tensor(z_flat), model.fusion_logits)
        main = model.head_main(fused).data.ravel()
    model.train()
    return main


def split_predictions(model: LosModel, data: Prepared, cfg: ModelConfig, split: str):
    """``(y_true, y_pred)`` in days for one named split."""
    idx = np.flatnonzero(data.split == SPLIT_NAMES.index(split))
    return data.y[idx], inverse_transform(full_graph_predict(model, data, cfg, idx))


def evaluate_split(model: LosModel, data: Prepared, cfg: ModelConfig, split: str) -> MetricReport:
    return evaluate_predictions(*split_predictions(model, data, cfg, split))


@dataclass
class RunRecord:
    config: dict
    seed: int
    val_r2: list[float]
    train_loss: list[float]
    best_epoch: int
    val_report: dict
    test_report: dict
    train_report: dict
    seconds: float
    n_parameters: int
    reliability: dict = field(default_factory=dict)  # test-split bins

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls(**json.loads(text))


def _batch(data: Prepared, seeds: np.ndarray, cfg: ModelConfig, sample_seed: int, index) -> Batch:
    sub = sample_neighborhood(data.edges, seeds, cfg.fanouts, sample_seed, index=index)
    return Batch(data.x_ts[sub.nodes], data.step_mask[sub.nodes], data.static[seeds], sub.edges,
                 sub.seed_index, data.y[seeds])


def learning_rate(cfg: ModelConfig, epoch: int) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.lr
    if cfg.lr_schedule == "cosine":
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.max_epochs))
    raise ValueError(f"unknown lr_schedule {cfg.lr_schedule!r}")


def train_model(data: Prepared, cfg: ModelConfig, log_every: bool = False):
    """Train with AdamW + global-norm clipping and early stopping on validation R^2.

    Returns ``(model, record_fields)`` with the best-validation parameters loaded.
    """
    t0 = time.perf_counter()
    d_in, d_flat = data.x_ts.shape[2], data.static.shape[1]
    model = build_model(cfg, d_in, d_flat)
    br = Branches.from_name(cfg.modality)
    loss_cfg = cfg.loss()
    if not br.ts:
        loss_cfg.alpha = 0.0
    opt = AdamW(model.parameters(), cfg.lr, cfg.weight_decay, cfg.grad_clip)
    train_idx = np.flatnonzero(data.split == 0)
    val_idx = np.flatnonzero(data.split == 1)
    index = _in_edge_index(data.edges)
    rng = np.random.default_rng(cfg.seed + 1)
    best_r2, best_state, best_epoch = -np.inf, model.state_dict(), 0
    val_hist, loss_hist = [], []
    stale = 0
    step = 0
    for epoch in range(cfg.max_epochs):
        opt.lr = learning_rate(cfg, epoch)
        model.train()
        perm = rng.permutation(train_idx)
        losses = []
        for start in range(0, len(perm), cfg.batch_size):
            seeds = perm[start:start + cfg.batch_size]
            batch = _batch(data, seeds, cfg, int(rng.integers(2**31)), index)
            try:
                main, aux = model.forward(batch, br, seed=step, rng=rng)
                loss = compute_loss(main, aux, batch.y, loss_cfg)
                opt.zero_grad()
                ad.backward(loss)
                opt.step()
                for p in model.parameters():
                    if not np.isfinite(p.data).all():
                        raise ad.NonFiniteError("parameter became non-finite")
            except ad.NonFiniteError as exc:
                raise DivergenceError(f"epoch {epoch} step {step}: {exc}") from exc
            losses.append(loss.item())
            step += 1
        pred = inverse_transform(full_graph_predict(model, data, cfg, val_idx))
        r2 = regression_metrics(data.y[val_idx], pred)["r2"]
        val_hist.append(float(r2))
        loss_hist.append(float(np.mean(losses)))
        if log_every:
            log.info("epoch %d loss %.4f val R2 %.4f", epoch, loss_hist[-1], r2)
        if r2 > best_r2:
            best_r2, best_state, best_epoch, stale = r2, model.state_dict(), epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.load_state_dict(best_state)
    info = {"val_r2": val_hist, "train_loss": loss_hist, "best_epoch": best_epoch,
            "seconds": time.perf_counter() - t0, "n_parameters": model.n_parameters()}
    return model, info


def make_record(model: LosModel, data: Prepared, cfg: ModelConfig, info: dict) -> RunRecord:
    preds = {s: split_predictions(model, data, cfg, s) for s in SPLIT_NAMES}
    reports = {s: asdict(evaluate_predictions(*preds[s])) for s in SPLIT_NAMES}
    rel = reliability_ece(*preds["test"])
    bins = {"mean_pred": rel.mean_pred.tolist(), "mean_true": rel.mean_true.tolist(),
            "counts": rel.counts.tolist()}
    return RunRecord(asdict(cfg), cfg.seed, info["val_r2"], info["train_loss"], info["best_epoch"],
                     reports["val"], reports["test"], reports["train"], info["seconds"],
                     info["n_parameters"], bins)


def save_checkpoint(model: LosModel, cfg: ModelConfig, data: Prepared, path: str | Path) -> None:
    state = model.state_dict()
    state.update({f"norm:{k}": v for k, v in data.norm_stats.items()})
    state["config"] = np.array(cfg.to_kv())
    np.savez(path, **state)


def load_checkpoint(path: str | Path, d_in: int | None = None, d_flat: int | None = None):
    with np.load(path, allow_pickle=False) as z:
        state = {k: z[k] for k in z.files}
    cfg = ModelConfig.from_kv(str(state.pop("config")))
    norm = {k[5:]: state.pop(k) for k in list(state) if k.startswith("norm:")}
    w = state["param:temporal.embed.proj.weight"]
    s = state["param:static.proj.weight"]
    if d_in is not None and w.shape[0] != d_in:
        raise ValueError(f"checkpoint expects {w.shape[0]} time-series inputs, cohort provides {d_in}")
    if d_flat is not None and s.shape[0] != d_flat:
        raise ValueError(f"checkpoint expects {s.shape[0]} static features, cohort provides {d_flat}")
    model = build_model(cfg, w.shape[0], s.shape[0])
    model.load_state_dict(state)
    return model, cfg, norm
