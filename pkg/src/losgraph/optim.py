"""AdamW with global-norm gradient clipping."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


def clip_global_norm(grads: list[np.ndarray], clip_norm: float | None) -> tuple[list[np.ndarray], float]:
    """Scale ``grads`` so their joint L2 norm is at most ``clip_norm``.

    ``clip_norm`` of ``None`` or ``<= 0`` disables clipping.  Returns the
    (possibly scaled) gradients and the norm before clipping.
    """
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if clip_norm is None or clip_norm <= 0 or norm <= clip_norm:
        return grads, norm
    scale = clip_norm / norm
    return [g * scale for g in grads], norm


@dataclass
class AdamWState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def optimize_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamWState, lr: float,
                  weight_decay: float = 0.0, clip_norm: float | None = None,
                  betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> list[np.ndarray]:
    """One AdamW update on plain arrays; returns new parameter arrays.

    Weight decay is decoupled: ``p <- p - lr * wd * p`` is applied alongside
    the adaptive step, not folded into the gradient.
    """
    if lr < 0:
        raise ValueError("lr must be non-negative")
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
    grads, _ = clip_global_norm(grads, clip_norm)
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        out.append(p - lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p))
    return out


class AdamW:
    """Stateful wrapper over :func:`optimize_step` for a list of tensors."""

    def __init__(self, params: list[Tensor], lr: float, weight_decay: float = 0.01,
                 clip_norm: float | None = None):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.state = AdamWState()
        self.last_grad_norm = 0.0

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        _, self.last_grad_norm = clip_global_norm(grads, None)
        new = optimize_step([p.data for p in self.params], grads, self.state, self.lr,
                            self.weight_decay, self.clip_norm)
        for p, value in zip(self.params, new):
            p.data = value

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
