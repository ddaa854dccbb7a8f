"""Parameter containers and small layers built on :mod:`losgraph.autodiff`."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Minimal parameter container.

    Parameters are :class:`Tensor` attributes with ``requires_grad``; child
    modules are discovered by attribute scan, lists of modules included.
    Non-trainable state (running statistics) lives in ``self.buffers``.
    """

    training: bool = True

    def __init__(self) -> None:
        self.buffers: dict[str, np.ndarray] = {}

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in sorted(vars(self).items()):
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in sorted(vars(self).items()):
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, buf in sorted(self.buffers.items()):
            yield prefix + name, buf
        for name, value in sorted(vars(self).items()):
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"param:{k}": v.data.copy() for k, v in self.named_parameters()}
        state.update({f"buffer:{k}": v.copy() for k, v in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        expected = {f"param:{k}" for k in params}
        missing = expected - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            value = np.asarray(state[f"param:{name}"], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data = value.copy()
        for m_prefix, module in self._prefixed_modules():
            for bname in module.buffers:
                key = f"buffer:{m_prefix}{bname}"
                if key in state:
                    module.buffers[bname] = np.asarray(state[key], dtype=np.float64).copy()

    def _prefixed_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, value in sorted(vars(self).items()):
            if isinstance(value, Module):
                yield from value._prefixed_modules(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._prefixed_modules(f"{prefix}{name}.{i}.")

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


def param(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 zero: bool = False):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.weight = param(np.zeros((d_in, d_out)) if zero else glorot(rng, d_in, d_out))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ValueError(f"Linear expects last dim {self.d_in}, got shape {x.shape}")
        out = ad.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.gain = param(np.ones(d))
        self.bias = param(np.zeros(d))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


class RMSNorm(Module):
    def __init__(self, d: int, eps: float = 1e-6):
        super().__init__()
        self.gain = param(np.ones(d))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return ad.rms_norm(x, self.gain, self.eps)


class BatchNorm(Module):
    """Batch normalization over the leading axis with running statistics."""

    def __init__(self, d: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gain = param(np.ones(d))
        self.bias = param(np.zeros(d))
        self.momentum = momentum
        self.eps = eps
        self.buffers = {"running_mean": np.zeros(d), "running_var": np.ones(d)}

    def __call__(self, x) -> Tensor:
        if not self.training:
            return ad.batch_norm(x, self.gain, self.bias, self.buffers["running_mean"],
                                 self.buffers["running_var"], self.eps)
        data = ad.no_grad_value(x)
        n = data.shape[0]
        mu = data.mean(axis=0)
        var = data.var(axis=0)
        unbiased = var * n / (n - 1) if n > 1 else var
        m = self.momentum
        self.buffers["running_mean"] = (1 - m) * self.buffers["running_mean"] + m * mu
        self.buffers["running_var"] = (1 - m) * self.buffers["running_var"] + m * unbiased
        return ad.batch_norm(x, self.gain, self.bias, eps=self.eps)


class MLP(Module):
    """Linear -> activation -> Linear."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator,
                 activation: str = "gelu"):
        super().__init__()
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)
        self.activation = activation

    def __call__(self, x) -> Tensor:
        h = self.fc1(x)
        h = ad.relu(h) if self.activation == "relu" else ad.gelu(h)
        return self.fc2(h)
