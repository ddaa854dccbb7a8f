"""Graph encoder: node init, typed-edge softmax message passing, degree-ordered
global SSM mixing, residual GPS blocks, and two-hop neighbourhood sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph_build import EdgeList
from .layers import MLP, BatchNorm, LayerNorm, Linear, Module, param
from .temporal import SsmBlock

N_EDGE_TYPES = 4


class NodeInit(Module):
    """``x0 = Linear2(LayerNorm(Linear1(z)))``."""

    def __init__(self, d_model: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(d_model, d_model, rng)
        self.norm = LayerNorm(d_model)
        self.fc2 = Linear(d_model, d_model, rng)

    def __call__(self, z) -> Tensor:
        if z.ndim != 2 or z.shape[1] != self.fc1.d_in:
            raise ValueError(f"node_init expects (N, {self.fc1.d_in}), got {z.shape}")
        return self.fc2(self.norm(self.fc1(z)))


def node_init(z, module: NodeInit) -> Tensor:
    return module(z)


class LocalConv(Module):
    """GENConv-style typed, weighted message passing with softmax aggregation.

    For an edge ``j -> i`` of type ``t`` and weight ``w``::

        m_ij = relu(x_j + type_proj(type_emb[t]) + w * weight_vec) + eps
        a_ij = softmax over in-edges of i of (beta * m_ij), per channel
        h_i  = MLP(x_i + sum_j a_ij m_ij)

    Nodes with no in-edges get ``h_i = MLP(x_i)``.
    """

    def __init__(self, d_model: int, rng: np.random.Generator, d_edge: int = 8, eps: float = 1e-7):
        super().__init__()
        self.type_emb = param(rng.normal(0.0, 0.1, (N_EDGE_TYPES, d_edge)))
        self.type_proj = Linear(d_edge, d_model, rng)
        self.weight_vec = param(np.ones(d_model))
        self.beta = param(np.array(1.0))
        self.mlp = MLP(d_model, 2 * d_model, d_model, rng, activation="relu")
        self.eps = eps

    def aggregate(self, x, E: EdgeList) -> Tensor:
        n = x.shape[0]
        if len(E) == 0:
            return ad.tensor(np.zeros(x.shape))
        # deterministic reduction order: edges sorted by (dst, src)
        order = np.lexsort((E.src, E.dst))
        src, dst = E.src[order], E.dst[order]
        et = E.etype[order]
        w = E.weight[order][:, None]
        type_vec = self.type_proj(ad.take_rows(self.type_emb, et))
        msg = ad.relu(ad.take_rows(x, src) + type_vec + w * self.weight_vec) + self.eps
        score = msg * self.beta
        smax = np.full((n, x.shape[1]), -np.inf)
        np.maximum.at(smax, dst, score.data)
        e = ad.exp(score - smax[dst])
        denom = ad.scatter_rows(e, dst, n)
        alpha = e / ad.take_rows(denom, dst)
        return ad.scatter_rows(alpha * msg, dst, n)

    def __call__(self, x, E: EdgeList) -> Tensor:
        return self.mlp(x + self.aggregate(x, E))


def local_update(x, E: EdgeList, conv: LocalConv) -> Tensor:
    return conv(x, E)


def degree_order(E: EdgeList, seed: int) -> np.ndarray:
    """Node order by ascending in+out degree plus uniform noise in [0, 0.01)."""
    deg = (E.in_degree() + E.out_degree()).astype(np.float64)
    noise = np.random.default_rng(seed).uniform(0.0, 0.01, E.n_nodes)
    return np.argsort(deg + noise, kind="stable")


def global_mix(x, E: EdgeList, block: SsmBlock, seed: int, rng: np.random.Generator | None = None) -> Tensor:
    """Run one SSM block over the degree-ordered node sequence; scatter back."""
    order = degree_order(E, seed)
    inverse = np.empty_like(order)
    inverse[order] = np.arange(len(order))
    seq = ad.reshape(ad.take_rows(x, order), (1, x.shape[0], x.shape[1]))
    out = block(seq, rng)
    out = ad.reshape(out, (x.shape[0], x.shape[1]))
    return ad.take_rows(out, inverse)


class GpsBlock(Module):
    """Residual pre-norm block::

        u  = BN(h + g)
        u~ = Dropout(MLP(LN(u)))
        x' = x + u~
    """

    def __init__(self, d_model: int, d_state: int, rng: np.random.Generator, dropout: float = 0.0):
        super().__init__()
        self.local = LocalConv(d_model, rng)
        self.global_ssm = SsmBlock(d_model, d_state, rng)
        self.bn = BatchNorm(d_model)
        self.ln = LayerNorm(d_model)
        self.mlp = MLP(d_model, 2 * d_model, d_model, rng)
        self.dropout = dropout

    def __call__(self, x, E: EdgeList, seed: int, rng: np.random.Generator | None = None) -> Tensor:
        h = self.local(x, E)
        g = global_mix(x, E, self.global_ssm, seed, rng)
        u = self.bn(h + g)
        u_t = ad.dropout(self.mlp(self.ln(u)), self.dropout, rng, self.training)
        return x + u_t


def gps_block(x, E: EdgeList, block: GpsBlock, seed: int, rng=None) -> Tensor:
    return block(x, E, seed, rng)


class GraphEncoder(Module):
    def __init__(self, d_model: int, n_layers: int, d_state: int, rng: np.random.Generator,
                 dropout: float = 0.0):
        super().__init__()
        self.init = NodeInit(d_model, rng)
        self.blocks = [GpsBlock(d_model, d_state, rng, dropout) for _ in range(n_layers)]

    def __call__(self, z_ts, E: EdgeList, seed: int, rng: np.random.Generator | None = None) -> Tensor:
        x = self.init(z_ts)
        for layer, block in enumerate(self.blocks):
            x = block(x, E, seed + 7919 * layer, rng)
        return x


# ------------------------------------------------------------------- sampling

@dataclass
class Subgraph:
    nodes: np.ndarray      # global ids; seeds occupy the first len(seeds) slots
    edges: EdgeList        # local indices
    seed_index: np.ndarray  # local positions of the seeds

    def local(self, global_ids) -> np.ndarray:
        lookup = {g: i for i, g in enumerate(self.nodes.tolist())}
        return np.array([lookup[g] for g in np.asarray(global_ids).tolist()], dtype=np.int64)


def _in_edge_index(E: EdgeList):
    order = np.argsort(E.dst, kind="stable")
    bounds = np.searchsorted(E.dst[order], np.arange(E.n_nodes + 1))
    return order, bounds


def sample_neighborhood(E: EdgeList, seeds, fanouts=(15, 10), seed: int = 0,
                        index=None) -> Subgraph:
    """Layer-wise in-edge sampling around ``seeds``.

    Hop ``h`` samples up to ``fanouts[h]`` in-edges (without replacement) of
    every node first reached at hop ``h - 1``.  The subgraph keeps exactly the
    sampled edges.
    """
    seeds = np.asarray(seeds, dtype=np.int64)
    if any(f <= 0 for f in fanouts):
        raise ValueError("fanouts must be positive")
    if seeds.size and (seeds.min() < 0 or seeds.max() >= E.n_nodes):
        raise ValueError("seed node out of range")
    rng = np.random.default_rng(seed)
    order, bounds = index if index is not None else _in_edge_index(E)
    nodes = list(dict.fromkeys(seeds.tolist()))
    pos = {g: i for i, g in enumerate(nodes)}
    frontier = list(nodes)
    picked: list[np.ndarray] = []
    for fan in fanouts:
        nxt = []
        for v in sorted(frontier):
            cand = order[bounds[v]:bounds[v + 1]]
            if len(cand) > fan:
                cand = np.sort(rng.choice(cand, fan, replace=False))
            picked.append(cand)
            for u in E.src[cand].tolist():
                if u not in pos:
                    pos[u] = len(nodes)
                    nodes.append(u)
                    nxt.append(u)
        frontier = nxt
    eidx = np.concatenate(picked) if picked else np.zeros(0, dtype=np.int64)
    remap = np.vectorize(pos.__getitem__, otypes=[np.int64])
    local = EdgeList(len(nodes), remap(E.src[eidx]) if eidx.size else eidx,
                     remap(E.dst[eidx]) if eidx.size else eidx, E.weight[eidx], E.etype[eidx])
    return Subgraph(np.array(nodes, dtype=np.int64), local,
                    np.array([pos[s] for s in dict.fromkeys(seeds.tolist())], dtype=np.int64))
