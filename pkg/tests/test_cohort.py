from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from losgraph.cohort import (T_HOURS, CohortFormatError, generate_cohort, impute_forward_fill, model_inputs,
                             read_cohort, split_counts, split_patients, write_cohort)


def _same(a, b):
    assert np.array_equal(a.stay_ids, b.stay_ids)
    assert np.array_equal(a.ts, b.ts) and a.ts.dtype == b.ts.dtype
    assert np.array_equal(a.mask, b.mask)
    assert np.array_equal(a.static, b.static)
    assert np.array_equal(a.y, b.y)
    assert (a.codes != b.codes).nnz == 0
    assert np.array_equal(a.emb, b.emb)
    if a.split is None:
        assert b.split is None
    else:
        assert np.array_equal(a.split, b.split)
    assert a.groups == b.groups


# ----------------------------------------------------------------- generator

def test_same_seed_gives_identical_cohort():
    _same(generate_cohort(7, 50), generate_cohort(7, 50))


def test_single_stay_cohort_is_valid():
    c = generate_cohort(0, 1)
    assert c.n == 1 and c.ts.shape == (1, T_HOURS, 16)
    assert c.mask.any() and c.y[0] > 0


def test_labels_are_positive_and_every_stay_observed():
    c = generate_cohort(3, 300)
    assert (c.y > 0).all()
    assert c.mask.reshape(c.n, -1).any(axis=1).all()


def _skewness(x):
    # moment estimate: third central moment over the cubed population std
    m = x.mean()
    return ((x - m) ** 3).mean() / ((x - m) ** 2).mean() ** 1.5


@pytest.mark.parametrize("seed", range(5))
def test_length_of_stay_is_right_skewed(seed):
    y = generate_cohort(seed, 1000).y.astype(np.float64)
    assert _skewness(y) > 0
    assert np.median(y) < y.mean()


def test_labels_track_planted_severity():
    c = generate_cohort(0, 2000)
    assert np.corrcoef(c.latent, c.y)[0, 1] > 0.5
    assert np.corrcoef(c.latent, np.log(c.y))[0, 1] > 0.5


def test_rejects_zero_sizes():
    with pytest.raises(ValueError):
        generate_cohort(0, 0)
    with pytest.raises(ValueError):
        generate_cohort(0, 5, d_ts=0)


# ----------------------------------------------------------------- splitting

def test_split_counts_follow_floor_rule():
    assert split_counts(100) == (70, 15, 15)
    assert split_counts(10) == (7, 1, 2)
    with pytest.raises(ValueError):
        split_counts(10, (0.5, 0.2, 0.2))


def test_split_tags_partition_and_repeat():
    c = generate_cohort(0, 100)
    a = split_patients(c, 4)
    b = split_patients(c, 4)
    assert np.array_equal(a.split, b.split)
    sets = [set(a.indices(s)) for s in ("train", "val", "test")]
    assert [len(s) for s in sets] == [70, 15, 15]
    assert set().union(*sets) == set(range(100))
    assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])


def test_split_needs_three_stays():
    with pytest.raises(ValueError):
        split_patients(generate_cohort(0, 2), 0)


# ---------------------------------------------------------------- imputation

def test_fully_observed_is_unchanged():
    ts = np.random.default_rng(0).standard_normal((5, 3))
    filled, decay = impute_forward_fill(ts, np.ones_like(ts))
    assert np.array_equal(filled, ts)
    assert np.array_equal(decay, np.ones_like(ts))


def test_single_first_observation_decays_in_closed_form():
    T = 10
    ts = np.zeros((T, 1))
    ts[0, 0] = 3.5
    mask = np.zeros((T, 1))
    mask[0, 0] = 1
    filled, decay = impute_forward_fill(ts, mask)
    assert np.array_equal(filled[:, 0], np.full(T, 3.5))
    assert np.allclose(decay[:, 0], np.exp(-np.arange(T) / 12.0), rtol=0, atol=1e-15)


def test_never_observed_channel_is_zero():
    ts = np.full((6, 2), 9.0)
    mask = np.zeros((6, 2))
    mask[2, 1] = 1
    filled, decay = impute_forward_fill(ts, mask)
    assert np.array_equal(filled[:, 0], np.zeros(6)) and np.array_equal(decay[:, 0], np.zeros(6))
    assert np.array_equal(filled[:2, 1], [0, 0]) and np.array_equal(decay[:2, 1], [0, 0])


@given(st.integers(0, 10_000), st.floats(0.05, 0.95))
def test_imputation_keeps_observed_entries(seed, p):
    rng = np.random.default_rng(seed)
    ts = rng.standard_normal((3, 12, 4))
    mask = rng.random(ts.shape) < p
    filled, decay = impute_forward_fill(ts, mask)
    assert np.array_equal(filled[mask], ts[mask])
    assert (decay[mask] == 1.0).all()
    assert ((decay >= 0) & (decay <= 1)).all()


def test_window_hides_early_hours():
    c = generate_cohort(1, 20)
    x, step = model_inputs(c, window=6)
    assert (step[:, :T_HOURS - 6] == 0).all()
    assert (x[:, :T_HOURS - 6] == 0).all()
    assert step.any(axis=1).all()


# ------------------------------------------------------------------------ IO

def test_write_read_round_trip(tmp_path):
    c = split_patients(generate_cohort(2, 40), 2)
    write_cohort(c, tmp_path / "c")
    _same(c, read_cohort(tmp_path / "c"))


def test_three_stay_mask_bytes(tmp_path):
    c = generate_cohort(5, 3)
    write_cohort(c, tmp_path / "c")
    raw = (tmp_path / "c" / "mask.bin").read_bytes()
    header = np.frombuffer(raw[:8], dtype="<u4")
    assert header.tolist() == [3, T_HOURS * 16]
    assert raw[8:] == c.mask.reshape(3, -1).astype(np.uint8).tobytes()
    assert np.array_equal(read_cohort(tmp_path / "c").mask, c.mask)


@pytest.mark.parametrize("name", ["ts.bin", "mask.bin", "static.bin", "labels.bin", "emb.bin"])
def test_truncated_file_names_section(tmp_path, name):
    c = generate_cohort(0, 5)
    write_cohort(c, tmp_path / "c")
    path = tmp_path / "c" / name
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(CohortFormatError, match=name):
        read_cohort(tmp_path / "c")


def test_nan_label_is_rejected(tmp_path):
    c = generate_cohort(0, 5)
    c.y[2] = np.nan
    write_cohort(c, tmp_path / "c")
    with pytest.raises(CohortFormatError, match="labels"):
        read_cohort(tmp_path / "c")


def test_bad_manifest_is_rejected(tmp_path):
    c = generate_cohort(0, 5)
    write_cohort(c, tmp_path / "c")
    (tmp_path / "c" / "manifest.txt").write_text("magic=NOPE\n")
    with pytest.raises(CohortFormatError, match="manifest"):
        read_cohort(tmp_path / "c")
    with pytest.raises(CohortFormatError):
        read_cohort(tmp_path / "missing")
