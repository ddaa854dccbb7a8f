"""State-space temporal encoder: input embedding, selective SSM blocks, masked pooling."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Linear, Module, RMSNorm, param


def embed_input(x, weight, bias, gain, eps: float = 1e-6) -> Tensor:
    """``GELU(RMSNorm(x @ weight + bias))`` applied per time step."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"input width {x.shape[-1]} does not match projection {weight.shape}")
    return ad.gelu(ad.rms_norm(ad.matmul(x, weight) + bias, gain, eps))


class InputEmbedding(Module):
    def __init__(self, d_in: int, d_model: int, rng: np.random.Generator):
        super().__init__()
        self.proj = Linear(d_in, d_model, rng)
        self.norm = RMSNorm(d_model)

    def __call__(self, x) -> Tensor:
        return embed_input(x, self.proj.weight, self.proj.bias, self.norm.gain, self.norm.eps)


def init_a_log(d_inner: int, d_state: int) -> np.ndarray:
    """log of -A: per-state rates log-spaced in [1, d_state]."""
    rates = np.logspace(0.0, np.log10(max(d_state, 1)), d_state) if d_state > 1 else np.ones(1)
    return np.log(np.tile(rates, (d_inner, 1)))


class SsmBlock(Module):
    """Selective SSM block with SiLU gate and residual connection.

    For input ``h`` (B, T, D)::

        delta = softplus(h W_dt + b_dt)          (B, T, D)
        B_t, C_t = h W_B, h W_C                  (B, T, N)
        y = scan(h W_in, delta, A, B, C)          A = -exp(a_log)
        out = h + dropout((y * silu(h W_gate)) W_out)
    """

    def __init__(self, d_model: int, d_state: int, rng: np.random.Generator, dropout: float = 0.0,
                 zero_out: bool = False):
        super().__init__()
        if d_state < 1:
            raise ValueError("d_state must be at least 1")
        self.d_model, self.d_state = d_model, d_state
        self.in_proj = Linear(d_model, d_model, rng, bias=False)
        self.gate_proj = Linear(d_model, d_model, rng, bias=False)
        self.dt_proj = Linear(d_model, d_model, rng)
        self.dt_proj.bias.data[:] = np.log(np.expm1(0.1))     # softplus(bias) = 0.1 at start
        self.dt_proj.weight.data *= 0.1
        self.b_proj = Linear(d_model, d_state, rng, bias=False)
        self.c_proj = Linear(d_model, d_state, rng, bias=False)
        self.a_log = param(init_a_log(d_model, d_state))
        self.out_proj = Linear(d_model, d_model, rng, zero=zero_out)
        self.dropout = dropout

    def A(self) -> Tensor:
        return ad.neg(ad.exp(self.a_log))

    def __call__(self, h, rng: np.random.Generator | None = None) -> Tensor:
        if h.ndim != 3 or h.shape[1] < 1:
            raise ValueError(f"expected (B, T, D) input with T >= 1, got {h.shape}")
        delta = ad.softplus(self.dt_proj(h))
        y = ad.selective_scan(self.in_proj(h), delta, self.A(), self.b_proj(h), self.c_proj(h))
        branch = self.out_proj(y * ad.silu(self.gate_proj(h)))
        branch = ad.dropout(branch, self.dropout, rng, self.training)
        return h + branch


def ssm_block_forward(h, block: SsmBlock, rng: np.random.Generator | None = None) -> Tensor:
    return block(h, rng)


def mask_pool(H, mask, mode: str = "last") -> Tensor:
    """Pool (B, T, D) over time using a (B, T) 0/1 observation mask.

    ``mean`` averages observed steps; ``last`` takes the last observed step.
    """
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != H.shape[:2]:
        raise ValueError(f"mask shape {m.shape} does not match sequence shape {H.shape[:2]}")
    counts = m.sum(axis=1)
    if (counts == 0).any():
        raise ValueError("every row needs at least one observed step")
    if mode == "mean":
        return ad.tsum(H * m[:, :, None], axis=1) / counts[:, None]
    if mode == "last":
        T = m.shape[1]
        last = T - 1 - np.argmax(m[:, ::-1] > 0, axis=1)
        idx = np.broadcast_to(last[:, None, None], (m.shape[0], 1, H.shape[2]))
        return ad.reshape(ad.take_along(H, idx, axis=1), (m.shape[0], H.shape[2]))
    raise ValueError(f"unknown pooling mode {mode!r}")


class TemporalEncoder(Module):
    """Input embedding, ``n_layers`` SSM blocks, masked pooling."""

    def __init__(self, d_in: int, d_model: int, n_layers: int, d_state: int, rng: np.random.Generator,
                 dropout: float = 0.0, pooling: str = "last"):
        super().__init__()
        self.embed = InputEmbedding(d_in, d_model, rng)
        self.blocks = [SsmBlock(d_model, d_state, rng, dropout) for _ in range(n_layers)]
        self.pooling = pooling

    def __call__(self, x, mask, rng: np.random.Generator | None = None) -> Tensor:
        h = self.embed(x)
        for block in self.blocks:
            h = block(h, rng)
        return mask_pool(h, mask, self.pooling)
