"""Static encoder, modality fusion, regression heads and the log-domain loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph_build import EdgeList
from .graph_encoder import GraphEncoder
from .layers import LayerNorm, Linear, Module, param
from .temporal import TemporalEncoder


# ----------------------------------------------------------- target transform

def target_transform(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if (y < 0).any():
        raise ValueError("length of stay must be non-negative")
    return np.log1p(y)


def inverse_transform(z) -> np.ndarray:
    """``max(0, exp(z) - 1)``."""
    return np.maximum(0.0, np.expm1(np.asarray(z, dtype=np.float64)))


# --------------------------------------------------------------------- loss

@dataclass
class LossConfig:
    alpha: float = 0.3
    gamma: float = 0.5
    tau: float = 7.0
    delta: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.delta <= 0:
            raise ValueError("huber delta must be positive")


def tail_weights(y_days, gamma: float, tau: float) -> np.ndarray:
    return 1.0 + gamma * (np.asarray(y_days, dtype=np.float64) > tau)


def compute_loss(pred_main, pred_ts, y_days, cfg: LossConfig) -> Tensor:
    """Batch mean of ``w(y) * ((1-alpha) H(main) + alpha H(ts))`` in the log domain."""
    target = target_transform(y_days)
    w = tail_weights(y_days, cfg.gamma, cfg.tau)
    per = (1.0 - cfg.alpha) * ad.huber(pred_main, target, cfg.delta)
    per = per + cfg.alpha * ad.huber(pred_ts, target, cfg.delta)
    return ad.tmean(per * w)


# ---------------------------------------------------------- static / fusion

class StaticEncoder(Module):
    """Linear -> LayerNorm -> GELU -> Dropout."""

    def __init__(self, d_in: int, d_model: int, rng: np.random.Generator, dropout: float = 0.0):
        super().__init__()
        self.proj = Linear(d_in, d_model, rng)
        self.norm = LayerNorm(d_model)
        self.dropout = dropout

    def __call__(self, x, rng: np.random.Generator | None = None) -> Tensor:
        if x.shape[-1] != self.proj.d_in:
            raise ValueError(f"static input width {x.shape[-1]} != {self.proj.d_in}")
        return ad.dropout(ad.gelu(self.norm(self.proj(x))), self.dropout, rng, self.training)


def encode_static(x, enc: StaticEncoder, rng=None) -> Tensor:
    return enc(x, rng)


def fuse(z_graph, z_ts, z_flat, logits) -> Tensor:
    """Concatenate the three embeddings scaled by ``softmax(logits)``."""
    if not (z_graph.shape[0] == z_ts.shape[0] == z_flat.shape[0]):
        raise ValueError("branch batch sizes differ")
    lam = ad.softmax(logits)
    parts = [z * ad.reshape(ad.take_rows(lam, [i]), (1, 1)) for i, z in enumerate((z_graph, z_ts, z_flat))]
    return ad.concat(parts, axis=1)


# ---------------------------------------------------------------- full model

@dataclass
class Branches:
    """Which modalities reach the fused representation."""

    graph: bool = True
    ts: bool = True
    static: bool = True

    @classmethod
    def from_name(cls, name: str) -> "Branches":
        table = {
            "full": cls(),
            "no-static": cls(static=False),
            "static-only": cls(graph=False, ts=False),
            "no-graph": cls(graph=False),
        }
        if name not in table:
            raise ValueError(f"unknown modality setting {name!r}; choose from {sorted(table)}")
        return table[name]


@dataclass
class Batch:
    """Everything one forward pass needs, already gathered for a subgraph."""

    x_ts: np.ndarray        # (M, T, d_in) for every subgraph node
    step_mask: np.ndarray   # (M, T)
    static: np.ndarray      # (B, d_flat) for the seeds
    edges: EdgeList         # local subgraph edges over M nodes
    seed_index: np.ndarray  # (B,) positions of the seeds among the M nodes
    y: np.ndarray | None = None


class LosModel(Module):
    def __init__(self, d_in: int, d_flat: int, rng: np.random.Generator, d_model: int = 128,
                 mamba_layers: int = 2, d_state: int = 16, mamba_dropout: float = 0.1,
                 pooling: str = "last", gps_layers: int = 2, gps_dropout: float = 0.1,
                 fusion_init: float = 0.5, static_dropout: float = 0.1):
        super().__init__()
        self.temporal = TemporalEncoder(d_in, d_model, mamba_layers, d_state, rng, mamba_dropout, pooling)
        self.graph = GraphEncoder(d_model, gps_layers, d_state, rng, gps_dropout)
        self.static = StaticEncoder(d_flat, d_model, rng, static_dropout)
        self.fusion_logits = param(np.array([fusion_init, 0.0, 0.0]))
        self.head_main = Linear(3 * d_model, 1, rng)
        self.head_ts = Linear(d_model, 1, rng)
        self.d_model = d_model

    def forward(self, batch: Batch, branches: Branches | None = None, seed: int = 0,
                rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        """Log-domain (main, ts) predictions for the seeds, each of shape (B,)."""
        br = branches or Branches()
        n_seeds = len(batch.seed_index)
        zeros = ad.tensor(np.zeros((n_seeds, self.d_model)))
        need_ts = br.ts or br.graph
        if need_ts:
            if br.graph:
                z_nodes = self.temporal(batch.x_ts, batch.step_mask, rng)
                z_ts = ad.take_rows(z_nodes, batch.seed_index)
                z_graph = ad.take_rows(self.graph(z_nodes, batch.edges, seed, rng), batch.seed_index)
            else:
                z_ts = self.temporal(batch.x_ts[batch.seed_index], batch.step_mask[batch.seed_index], rng)
                z_graph = zeros
        else:
            z_ts = z_graph = zeros
        z_flat = self.static(batch.static, rng) if br.static else zeros
        fused = fuse(z_graph if br.graph else zeros, z_ts if br.ts else zeros, z_flat, self.fusion_logits)
        main = ad.reshape(self.head_main(fused), (n_seeds,))
        aux = ad.reshape(self.head_ts(z_ts), (n_seeds,))
        return main, aux

    def predict(self, batch: Batch, branches: Branches | None = None, seed: int = 0) -> np.ndarray:
        """Days, ``max(0, exp(main) - 1)``; always run in evaluation mode."""
        was_training = self.training
        self.eval()
        try:
            main, _ = self.forward(batch, branches, seed)
        finally:
            self.train(was_training)
        return inverse_transform(main.data)


def predict(model: LosModel, batch: Batch, branches: Branches | None = None, seed: int = 0) -> np.ndarray:
    return model.predict(batch, branches, seed)
