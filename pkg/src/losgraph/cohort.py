"""Cohort container, synthetic generator, splitting, imputation and file IO.

On-disk layout of a cohort directory::

    manifest.txt   key=value lines (magic, version, sizes, feature groups)
    stays.txt      one "stay_id<TAB>split" line per stay
    ts.bin         float32 (N, T*d_ts) time series, zeros where unobserved
    mask.bin       uint8   (N, T*d_ts) per-channel observation mask
    static.bin     float32 (N, d_flat)
    labels.bin     float32 (N, 1) length of stay in days
    emb.bin        float32 (N, emb_dim) precomputed note embeddings
    codes.txt      sparse "row col 1" triplets of the diagnosis matrix

Every ``.bin`` file starts with an 8-byte header of two little-endian uint32
values (row count, row width) followed by row-major little-endian data.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

MAGIC = "LOSCOHORT"
VERSION = 1
T_HOURS = 48
DECAY_HOURS = 12.0
N_PHENOTYPES = 8
SPLIT_NAMES = ("train", "val", "test")


class CohortFormatError(ValueError):
    """A cohort directory is missing, truncated or inconsistent."""


@dataclass
class Cohort:
    stay_ids: np.ndarray          # (N,) int64
    ts: np.ndarray                # (N, T, d_ts) float32
    mask: np.ndarray              # (N, T, d_ts) uint8
    static: np.ndarray            # (N, d_flat) float32
    y: np.ndarray                 # (N,) float32, days
    codes: sp.csr_matrix | None = None
    emb: np.ndarray | None = None  # (N, emb_dim) float32
    split: np.ndarray | None = None  # (N,) int8: 0 train, 1 val, 2 test
    groups: dict[str, tuple[str, list[int]]] = field(default_factory=dict)
    latent: np.ndarray | None = None  # planted severity, generator only

    def __post_init__(self) -> None:
        n = len(self.stay_ids)
        if self.ts.shape[0] != n or self.mask.shape != self.ts.shape:
            raise ValueError("time-series and mask shapes must agree with the stay count")
        if self.static.shape[0] != n or self.y.shape != (n,):
            raise ValueError("static features and labels must have one row per stay")
        if self.ts.shape[1] != T_HOURS:
            raise ValueError(f"time series must span {T_HOURS} hourly bins")

    @property
    def n(self) -> int:
        return len(self.stay_ids)

    @property
    def d_ts(self) -> int:
        return self.ts.shape[2]

    @property
    def d_flat(self) -> int:
        return self.static.shape[1]

    def step_mask(self) -> np.ndarray:
        """(N, T) 1 where any channel is observed."""
        return self.mask.any(axis=2).astype(np.uint8)

    def indices(self, split: str) -> np.ndarray:
        if self.split is None:
            raise ValueError("cohort has no split tags; call split_patients first")
        return np.flatnonzero(self.split == SPLIT_NAMES.index(split))


# ------------------------------------------------------------------ generator

def generate_cohort(seed: int, n_stays: int, d_ts: int = 16, d_flat: int = 8, d_codes: int = 64,
                    emb_dim: int = 32, obs_prob: float = 0.6, vitals_noise: float = 1.5,
                    pheno_weight: float = 1.0) -> Cohort:
    """Seeded synthetic ICU cohort with a planted length-of-stay signal.

    Three latent factors drive the log length of stay: a physiological
    severity seen only through the time series, an admission severity seen
    only through the static features, and a phenotype effect.  The phenotype
    (one of 8 clusters) determines the diagnosis codes and note embeddings and
    shifts the vitals channels weakly, so similar patients in the graph carry
    information about each other's outcome.
    """
    if min(n_stays, d_ts, d_flat, d_codes, emb_dim) < 1:
        raise ValueError("all sizes must be at least 1")
    rng = np.random.default_rng(seed)
    n, T = n_stays, T_HOURS
    pheno = rng.integers(0, N_PHENOTYPES, size=n)
    pheno_effect = np.linspace(-1.5, 1.5, N_PHENOTYPES)[rng.permutation(N_PHENOTYPES)]
    s_ts = rng.standard_normal(n)
    s_flat = rng.standard_normal(n)
    phi = pheno_effect[pheno]
    nuisance = rng.standard_normal(n)
    severity = 0.5 * s_ts + 0.4 * s_flat + pheno_weight * phi
    log_los = np.log(2.0) + 0.8 * severity + 0.3 * rng.standard_normal(n)
    y = np.exp(log_los)

    # time series: physiology channels load on s_ts, vitals channels on the phenotype
    n_phys = max(1, d_ts // 2)
    load = np.zeros(d_ts)
    load[:n_phys] = rng.uniform(0.5, 1.0, n_phys) * rng.choice([-1.0, 1.0], n_phys)
    pload = np.zeros(d_ts)
    pload[n_phys:] = rng.uniform(0.3, 0.6, d_ts - n_phys) * rng.choice([-1.0, 1.0], d_ts - n_phys)
    # the vitals shift is blurred by a per-stay nuisance shared across channels,
    # so one stay alone pins down its phenotype poorly; similar stays help
    level = s_ts[:, None] * load + (phi + vitals_noise * nuisance)[:, None] * pload
    noise = np.empty((n, T, d_ts))
    noise[:, 0] = rng.standard_normal((n, d_ts))
    for t in range(1, T):
        noise[:, t] = 0.3 * noise[:, t - 1] + rng.standard_normal((n, d_ts))
    ts = level[:, None, :] + 1.2 * noise
    mask = rng.random((n, T, d_ts)) < obs_prob
    empty = ~mask.any(axis=(1, 2))
    mask[empty, 0, 0] = True
    ts = np.where(mask, ts, 0.0)

    # static: admission severity columns, indicators, uninformative one-hot
    static = np.zeros((n, d_flat))
    n_eth = 2 if d_flat >= 4 else 0
    n_cont = max(1, (d_flat - n_eth) * 2 // 3)
    n_ind = d_flat - n_eth - n_cont
    wts = rng.uniform(0.6, 1.0, n_cont)
    static[:, :n_cont] = s_flat[:, None] * wts + 0.6 * rng.standard_normal((n, n_cont))
    if n_ind:
        static[:, n_cont:n_cont + n_ind] = (s_flat[:, None] + rng.standard_normal((n, n_ind)) > 0.5)
    if n_eth:
        static[np.arange(n), n_cont + n_ind + rng.integers(0, n_eth, n)] = 1.0

    # diagnosis codes clustered by phenotype
    rows, cols = [], []
    per_pheno = max(1, d_codes // N_PHENOTYPES)
    for i in range(n):
        k = rng.integers(2, 6)
        base = (pheno[i] * per_pheno) % d_codes
        own = base + rng.integers(0, per_pheno, size=k)
        other = rng.integers(0, d_codes, size=k)
        chosen = np.where(rng.random(k) < 0.8, own % d_codes, other)
        for c in np.unique(chosen):
            rows.append(i)
            cols.append(int(c))
    codes = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, d_codes))

    centroids = rng.standard_normal((N_PHENOTYPES, emb_dim))
    emb = centroids[pheno] + 0.8 * rng.standard_normal((n, emb_dim))

    groups = {
        "physiology": ("ts", list(range(n_phys))),
        "vitals": ("ts", list(range(n_phys, d_ts))),
        "admission": ("static", list(range(n_cont + n_ind))),
        "ethnicity": ("static", list(range(n_cont + n_ind, d_flat))),
    }
    return Cohort(
        stay_ids=np.arange(1, n + 1, dtype=np.int64) + 30_000_000,
        ts=ts.astype(np.float32),
        mask=mask.astype(np.uint8),
        static=static.astype(np.float32),
        y=y.astype(np.float32),
        codes=codes,
        emb=emb.astype(np.float32),
        groups=groups,
        latent=severity,
    )


# ---------------------------------------------------------------- splitting

def split_counts(n: int, fractions=(0.70, 0.15, 0.15)) -> tuple[int, int, int]:
    """Floor train, floor validation, remainder to test."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    n_train = int(np.floor(n * fractions[0] + 1e-9))
    n_val = int(np.floor(n * fractions[1] + 1e-9))
    return n_train, n_val, n - n_train - n_val


def split_patients(cohort: Cohort, seed: int, fractions=(0.70, 0.15, 0.15)) -> Cohort:
    """Tag every stay train/val/test with a seeded permutation."""
    if cohort.n < 3:
        raise ValueError("need at least three stays to split")
    n_train, n_val, _ = split_counts(cohort.n, fractions)
    perm = np.random.default_rng(seed).permutation(cohort.n)
    tags = np.full(cohort.n, 2, dtype=np.int8)
    tags[perm[:n_train]] = 0
    tags[perm[n_train:n_train + n_val]] = 1
    return replace(cohort, split=tags)


# --------------------------------------------------------------- imputation

def impute_forward_fill(ts: np.ndarray, mask: np.ndarray, tau: float = DECAY_HOURS):
    """Forward-fill unobserved steps and build an exponential decay channel.

    Works on (..., T, d) arrays.  Before the first observation the value is 0
    and the decay is 0; afterwards decay is ``exp(-hours_since_last_obs / tau)``.
    """
    if ts.shape != mask.shape:
        raise ValueError(f"ts shape {ts.shape} != mask shape {mask.shape}")
    obs = mask.astype(bool)
    T = ts.shape[-2]
    steps = np.arange(T).reshape((T, 1))
    last = np.where(obs, steps, -1)
    last = np.maximum.accumulate(last, axis=-2)
    seen = last >= 0
    idx = np.where(seen, last, 0)
    filled = np.take_along_axis(np.asarray(ts), idx, axis=-2)
    filled = np.where(seen, filled, 0.0).astype(ts.dtype)
    filled = np.where(obs, ts, filled)
    decay = np.where(seen, np.exp(-(steps - idx) / tau), 0.0)
    return filled, decay


# ------------------------------------------------------------------------ IO

def _write_bin(path: Path, arr: np.ndarray, dtype) -> None:
    arr = np.ascontiguousarray(arr.reshape(arr.shape[0], -1), dtype=np.dtype(dtype).newbyteorder("<"))
    header = np.array(arr.shape, dtype="<u4").tobytes()
    path.write_bytes(header + arr.tobytes())


def _read_bin(path: Path, dtype, rows: int, width: int) -> np.ndarray:
    name = path.name
    if not path.exists():
        raise CohortFormatError(f"{name}: file missing")
    raw = path.read_bytes()
    if len(raw) < 8:
        raise CohortFormatError(f"{name}: truncated header")
    count, dim = np.frombuffer(raw[:8], dtype="<u4")
    if (count, dim) != (rows, width):
        raise CohortFormatError(f"{name}: header says {count}x{dim}, manifest implies {rows}x{width}")
    dt = np.dtype(dtype).newbyteorder("<")
    expected = 8 + rows * width * dt.itemsize
    if len(raw) != expected:
        raise CohortFormatError(f"{name}: expected {expected} bytes, found {len(raw)} (truncated or padded)")
    return np.frombuffer(raw[8:], dtype=dt).reshape(rows, width).astype(np.dtype(dtype).newbyteorder("="))


def write_cohort(cohort: Cohort, path: str | Path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    n, T, d = cohort.ts.shape
    emb_dim = cohort.emb.shape[1] if cohort.emb is not None else 0
    d_codes = cohort.codes.shape[1] if cohort.codes is not None else 0
    lines = [f"magic={MAGIC}", f"version={VERSION}", f"n_stays={n}", f"t_hours={T}",
             f"d_ts={d}", f"d_flat={cohort.d_flat}", f"d_codes={d_codes}", f"emb_dim={emb_dim}"]
    for name, (kind, cols) in sorted(cohort.groups.items()):
        lines.append(f"group.{name}={kind}:{','.join(map(str, cols))}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    split = cohort.split if cohort.split is not None else np.full(n, -1)
    (out / "stays.txt").write_text("".join(
        f"{sid}\t{SPLIT_NAMES[s] if s >= 0 else '-'}\n" for sid, s in zip(cohort.stay_ids.tolist(), split.tolist())))
    _write_bin(out / "ts.bin", cohort.ts, np.float32)
    _write_bin(out / "mask.bin", cohort.mask, np.uint8)
    _write_bin(out / "static.bin", cohort.static, np.float32)
    _write_bin(out / "labels.bin", cohort.y.reshape(-1, 1), np.float32)
    if cohort.emb is not None:
        _write_bin(out / "emb.bin", cohort.emb, np.float32)
    if cohort.codes is not None:
        coo = cohort.codes.tocoo()
        order = np.lexsort((coo.col, coo.row))
        (out / "codes.txt").write_text("".join(
            f"{r} {c} 1\n" for r, c in zip(coo.row[order].tolist(), coo.col[order].tolist())))
    return out


def _parse_manifest(path: Path) -> dict[str, str]:
    if not path.exists():
        raise CohortFormatError("manifest.txt: file missing")
    meta = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise CohortFormatError(f"manifest.txt:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        meta[k.strip()] = v.strip()
    if meta.get("magic") != MAGIC:
        raise CohortFormatError("manifest.txt: bad magic, not a cohort directory")
    if meta.get("version") != str(VERSION):
        raise CohortFormatError(f"manifest.txt: unsupported version {meta.get('version')}")
    for key in ("n_stays", "t_hours", "d_ts", "d_flat", "d_codes", "emb_dim"):
        if key not in meta:
            raise CohortFormatError(f"manifest.txt: missing {key}")
    return meta


def read_cohort(path: str | Path) -> Cohort:
    root = Path(path)
    meta = _parse_manifest(root / "manifest.txt")
    n, T, d = int(meta["n_stays"]), int(meta["t_hours"]), int(meta["d_ts"])
    d_flat, d_codes, emb_dim = int(meta["d_flat"]), int(meta["d_codes"]), int(meta["emb_dim"])
    if T != T_HOURS:
        raise CohortFormatError(f"manifest.txt: t_hours must be {T_HOURS}")
    ts = _read_bin(root / "ts.bin", np.float32, n, T * d).reshape(n, T, d)
    mask = _read_bin(root / "mask.bin", np.uint8, n, T * d).reshape(n, T, d)
    static = _read_bin(root / "static.bin", np.float32, n, d_flat)
    y = _read_bin(root / "labels.bin", np.float32, n, 1).ravel()
    if not np.isfinite(y).all():
        raise CohortFormatError("labels.bin: NaN or infinite labels")
    if (y < 0).any():
        raise CohortFormatError("labels.bin: negative length of stay")
    if not np.isfinite(ts).all() or not np.isfinite(static).all():
        raise CohortFormatError("ts.bin/static.bin: non-finite values")
    emb = _read_bin(root / "emb.bin", np.float32, n, emb_dim) if emb_dim else None
    codes = None
    if d_codes:
        codes_path = root / "codes.txt"
        if not codes_path.exists():
            raise CohortFormatError("codes.txt: file missing")
        rows, cols = [], []
        for lineno, line in enumerate(codes_path.read_text().splitlines(), 1):
            parts = line.split()
            if len(parts) != 3 or parts[2] != "1":
                raise CohortFormatError(f"codes.txt:{lineno}: expected 'row col 1'")
            r, c = int(parts[0]), int(parts[1])
            if not (0 <= r < n and 0 <= c < d_codes):
                raise CohortFormatError(f"codes.txt:{lineno}: index out of range")
            rows.append(r)
            cols.append(c)
        codes = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, d_codes))
    stays_path = root / "stays.txt"
    if not stays_path.exists():
        raise CohortFormatError("stays.txt: file missing")
    stay_lines = stays_path.read_text().splitlines()
    if len(stay_lines) != n:
        raise CohortFormatError(f"stays.txt: expected {n} lines, found {len(stay_lines)}")
    ids, tags = [], []
    for line in stay_lines:
        sid, tag = line.split("\t")
        ids.append(int(sid))
        tags.append(SPLIT_NAMES.index(tag) if tag in SPLIT_NAMES else -1)
    split = np.array(tags, dtype=np.int8) if all(t >= 0 for t in tags) else None
    groups = {}
    for k, v in meta.items():
        if k.startswith("group."):
            kind, cols = v.split(":", 1)
            groups[k[6:]] = (kind, [int(c) for c in cols.split(",") if c])
    return Cohort(np.array(ids, dtype=np.int64), ts, mask, static, y, codes, emb, split, groups)


def model_inputs(cohort: Cohort, window: int = T_HOURS) -> tuple[np.ndarray, np.ndarray]:
    """Imputed model input (values and decay channels) plus the step mask.

    ``window`` keeps only the last ``window`` hours: earlier steps are marked
    unobserved before imputation.
    """
    mask = cohort.mask.astype(bool)
    if window < T_HOURS:
        mask = mask.copy()
        mask[:, :T_HOURS - window] = False
    ts = np.where(mask, cohort.ts, 0.0).astype(np.float64)
    filled, decay = impute_forward_fill(ts, mask)
    step_mask = mask.any(axis=2)
    step_mask[~step_mask.any(axis=1), -1] = True
    return np.concatenate([filled, decay], axis=2), step_mask.astype(np.float64)
