"""Run configuration and the hyperparameter search space."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .graph_build import GraphSettings
from .model import LossConfig


@dataclass
class ModelConfig:
    # temporal encoder
    mamba_d_model: int = 128
    mamba_layers: int = 2
    mamba_d_state: int = 16
    mamba_dropout: float = 0.1
    pooling: str = "last"
    # graph encoder
    gps_layers: int = 2
    gps_dropout: float = 0.1
    fusion_lambda: float = 0.5
    # optimization
    lr: float = 1.7e-4
    lr_schedule: str = "constant"   # or "cosine": per-epoch decay to zero at max_epochs
    batch_size: int = 32
    grad_clip: float = 2.0
    weight_decay: float = 0.01
    fanout_1: int = 15
    fanout_2: int = 10
    max_epochs: int = 50
    patience: int = 5
    # loss
    alpha: float = 0.3
    gamma: float = 0.5
    tau: float = 7.0
    huber_delta: float = 1.0
    # graph construction
    diag_method: str = "ip"
    k_diag: int = 3
    k_bert: int = 1
    rewire: str = "mst"
    norm: str = "log1p"
    prune_frac: float = 0.30
    max_out: int = 15
    # ablation switches
    window: int = 48
    modality: str = "full"
    edge_dropout: float = 0.0
    drop_groups: str = ""
    seed: int = 0

    def loss(self) -> LossConfig:
        return LossConfig(self.alpha, self.gamma, self.tau, self.huber_delta)

    def graph_settings(self) -> GraphSettings:
        return GraphSettings(self.diag_method, self.k_diag, self.k_bert, self.rewire, self.norm,
                             self.prune_frac, self.max_out, seed=self.seed)

    @property
    def fanouts(self) -> tuple[int, int]:
        return (self.fanout_1, self.fanout_2)

    def to_kv(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_kv(cls, text: str, base: "ModelConfig | None" = None) -> "ModelConfig":
        """Parse ``key=value`` lines (``#`` comments allowed) over ``base``."""
        types = {f.name: f.type for f in fields(cls)}
        updates = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            updates[key] = _coerce(types[key], value)
        return replace(base or cls(), **updates)

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        return cls.from_kv(Path(path).read_text())


def _coerce(type_name, value: str):
    name = type_name if isinstance(type_name, str) else type_name.__name__
    if name == "int":
        return int(value)
    if name == "float":
        return float(value)
    return value


# Table of the tuned search space; "lr" is sampled log-uniformly.
SEARCH_SPACE: dict[str, tuple] = {
    "mamba_d_model": (64, 128, 256),
    "mamba_layers": (2, 3, 4),
    "mamba_d_state": (16, 32, 64),
    "mamba_dropout": (0.1, 0.2),
    "pooling": ("mean", "last"),
    "gps_layers": (2, 3, 4),
    "gps_dropout": (0.1, 0.2),
    "fusion_lambda": (0.3, 0.5, 0.7),
    "lr": (1e-5, 1e-3),
    "batch_size": (32, 64, 128),
    "grad_clip": (0.0, 2.0, 5.0),
    "fanouts": ((15, 10), (25, 15)),
}


def sample_config(rng: np.random.Generator, base: ModelConfig, space: dict | None = None) -> ModelConfig:
    space = space or SEARCH_SPACE
    updates = {}
    for key, choices in space.items():
        if key == "lr":
            lo, hi = choices
            updates["lr"] = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        elif key == "fanouts":
            f1, f2 = choices[rng.integers(len(choices))]
            updates["fanout_1"], updates["fanout_2"] = int(f1), int(f2)
        else:
            value = choices[rng.integers(len(choices))]
            updates[key] = value.item() if isinstance(value, np.generic) else value
    return replace(base, **updates)


def desk_config(**overrides) -> ModelConfig:
    """The tuned configuration shrunk to run on a CPU in minutes."""
    cfg = ModelConfig(mamba_d_model=24, mamba_d_state=8, batch_size=64, lr=1e-3, lr_schedule="cosine",
                      max_epochs=20, fanout_1=8, fanout_2=4)
    return replace(cfg, **overrides)
