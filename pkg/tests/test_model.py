from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from losgraph import autodiff as ad
from losgraph.autodiff import Tensor, gradcheck
from losgraph.graph_build import EdgeList
from losgraph.model import (
    Batch, Branches, LosModel, LossConfig, StaticEncoder, compute_loss, encode_static, fuse,
    inverse_transform, predict, tail_weights, target_transform,
)


def _toy_batch(rng, n=4, T=4, d_in=3, d_flat=2):
    E = EdgeList(n, [0, 1, 2, 3], [1, 2, 3, 0], [0.5, 1.0, 1.5, 0.7], [0, 1, 2, 3])
    mask = np.ones((n, T))
    mask[1, 3] = 0
    return Batch(rng.normal(size=(n, T, d_in)), mask, rng.normal(size=(2, d_flat)), E,
                 np.array([0, 2]), np.array([3.0, 9.0]))


def _toy_model(seed=0, d=3, **kw):
    return LosModel(3, 2, np.random.default_rng(seed), d_model=d, mamba_layers=1, d_state=2, mamba_dropout=0.0,
                    gps_layers=1, gps_dropout=0.0, static_dropout=0.0, **kw)


# ------------------------------------------------------------------ static

def test_static_encoder_zero_input_finite_and_deterministic():
    enc = StaticEncoder(5, 4, np.random.default_rng(0), dropout=0.0)
    assert np.isfinite(enc(np.zeros((2, 5))).data).all()
    x = np.random.default_rng(1).normal(size=(2, 5))
    np.testing.assert_array_equal(encode_static(x, enc).data, encode_static(x, enc).data)


def test_static_encoder_hand_composition():
    rng = np.random.default_rng(2)
    enc = StaticEncoder(5, 4, rng)
    enc.proj.bias.data[:] = rng.normal(size=4)
    x = rng.normal(size=(2, 5))
    z = x @ enc.proj.weight.data + enc.proj.bias.data
    z = (z - z.mean(axis=1, keepdims=True)) / np.sqrt(z.var(axis=1, keepdims=True) + 1e-5)
    want = np.vectorize(lambda v: 0.5 * v * (1 + math.erf(v / math.sqrt(2))))(z)
    enc.eval()
    np.testing.assert_allclose(enc(x).data, want, atol=1e-14)
    with pytest.raises(ValueError):
        enc(np.zeros((2, 4)))


# ------------------------------------------------------------------ fusion

def test_fuse_equal_logits_scale_by_a_third():
    rng = np.random.default_rng(0)
    zg, zt, zf = rng.normal(size=(2, 3)), rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    out = fuse(Tensor(zg), Tensor(zt), Tensor(zf), Tensor(np.zeros(3))).data
    np.testing.assert_allclose(out, np.concatenate([zg, zt, zf], axis=1) / 3.0, atol=1e-15)


def test_fuse_saturated_logits_select_graph():
    rng = np.random.default_rng(1)
    zg, zt, zf = rng.normal(size=(2, 3)), rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    out = fuse(Tensor(zg), Tensor(zt), Tensor(zf), Tensor(np.array([100.0, 0.0, 0.0]))).data
    np.testing.assert_allclose(out[:, :3], zg, atol=1e-40 + 1e-12)
    assert np.abs(out[:, 3:]).max() < 1e-40


def test_fuse_widths_and_segments():
    zg, zt, zf = np.ones((2, 4)), 2 * np.ones((2, 3)), 3 * np.ones((2, 2))
    logits = np.array([0.2, -0.1, 0.4])
    lam = np.exp(logits) / np.exp(logits).sum()
    out = fuse(Tensor(zg), Tensor(zt), Tensor(zf), Tensor(logits)).data
    assert out.shape == (2, 9)
    np.testing.assert_allclose(out[:, :4], lam[0])
    np.testing.assert_allclose(out[:, 4:7], 2 * lam[1])
    np.testing.assert_allclose(out[:, 7:], 3 * lam[2])
    with pytest.raises(ValueError):
        fuse(Tensor(zg), Tensor(zt[:1]), Tensor(zf), Tensor(logits))


@given(st.lists(st.integers(-64, 64), min_size=3, max_size=3), st.integers(-20, 20))
def test_fusion_logit_shift_invariance(raw, shift):
    logits = np.array(raw, dtype=float) / 8.0
    z = np.random.default_rng(0).normal(size=(2, 3))
    a = fuse(Tensor(z), Tensor(z), Tensor(z), Tensor(logits)).data
    b = fuse(Tensor(z), Tensor(z), Tensor(z), Tensor(logits + shift)).data
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------- transform

def test_target_transform_examples():
    assert target_transform([0.0])[0] == 0.0 and inverse_transform([0.0])[0] == 0.0
    assert inverse_transform([-0.5])[0] == 0.0
    assert target_transform([math.e - 1])[0] == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        target_transform([-1.0])


@given(st.floats(0, 1e4))
def test_transform_round_trip(y):
    assert inverse_transform(target_transform([y]))[0] == pytest.approx(y, rel=1e-12, abs=1e-12)


# --------------------------------------------------------------------- loss

def test_loss_zero_for_exact_heads():
    y = np.array([1.0, 8.0, 20.0])
    t = target_transform(y)
    for alpha, gamma in ((0.0, 0.0), (0.3, 0.5), (1.0, 2.0)):
        assert compute_loss(Tensor(t), Tensor(t), y, LossConfig(alpha, gamma)).item() == 0.0


def test_loss_hand_example():
    y = np.array([10.0])
    t = target_transform(y)
    loss = compute_loss(Tensor(t + 0.2), Tensor(t + 0.4), y, LossConfig(0.3, 0.5, 7.0, 1.0)).item()
    assert abs(loss - 0.057) < 1e-12


@pytest.mark.parametrize("alpha,dead", [(0.0, "ts"), (1.0, "main")])
def test_alpha_extremes_kill_head_gradient(alpha, dead):
    y = np.array([2.0, 12.0, 5.0])
    main = Tensor(np.array([0.3, 1.0, 2.5]), requires_grad=True)
    ts = Tensor(np.array([2.0, 0.1, 1.0]), requires_grad=True)
    ad.backward(compute_loss(main, ts, y, LossConfig(alpha)))
    g = {"main": main.grad, "ts": ts.grad}
    np.testing.assert_array_equal(g[dead], 0.0)
    assert np.abs(g["ts" if dead == "main" else "main"]).max() > 0


def test_loss_gradient_matches_finite_differences():
    y = np.array([2.0, 12.0, 5.0, 0.5])
    rng = np.random.default_rng(0)
    err = gradcheck(lambda m, t: compute_loss(m, t, y, LossConfig(0.3, 0.5)),
                    [target_transform(y) + rng.uniform(-2, 2, 4), target_transform(y) + rng.uniform(-2, 2, 4)])
    assert err < 1e-6


@given(st.lists(st.floats(0, 30), min_size=1, max_size=8), st.floats(0.0, 3.0), st.floats(0.01, 3.0))
def test_loss_monotone_in_gamma(y, gamma, step):
    y = np.array(y + [10.0])
    pred = target_transform(y) + 0.5
    lo = compute_loss(Tensor(pred), Tensor(pred), y, LossConfig(0.3, gamma)).item()
    hi = compute_loss(Tensor(pred), Tensor(pred), y, LossConfig(0.3, gamma + step)).item()
    assert hi > lo


def test_tail_weights_and_config_validation():
    np.testing.assert_array_equal(tail_weights([3.0, 7.0, 7.5], 0.5, 7.0), [1.0, 1.0, 1.5])
    with pytest.raises(ValueError):
        LossConfig(alpha=1.5)


# -------------------------------------------------------------------- model

def test_end_to_end_gradient_four_nodes():
    rng = np.random.default_rng(3)
    batch = _toy_batch(rng)
    model = _toy_model(4)
    w = np.array([0.7, -1.3])

    def loss_from_inputs(x_ts, static, logits):
        model.fusion_logits = logits
        b = Batch(x_ts, batch.step_mask, static, batch.edges, batch.seed_index)
        main, aux = model.forward(b, seed=1)
        return ad.tsum(main * w) + ad.tsum(aux * aux)

    err = gradcheck(loss_from_inputs, [batch.x_ts, batch.static, np.array([0.5, 0.0, 0.0])])
    assert err < 1e-5


def test_predict_examples_and_eval_determinism():
    rng = np.random.default_rng(5)
    batch = _toy_batch(rng)
    model = _toy_model(6)
    a, b = predict(model, batch), predict(model, batch)
    np.testing.assert_array_equal(a, b)
    assert (a >= 0).all() and model.training
    model.head_main.weight.data[:] = 0.0
    model.head_main.bias.data[:] = 0.0
    np.testing.assert_array_equal(predict(model, batch), 0.0)
    model.head_main.bias.data[:] = math.log(4.0)
    np.testing.assert_allclose(predict(model, batch), 3.0, atol=1e-15)


def _fused(model, batch, branches):
    captured = {}
    original = model.head_main

    def spy(z):
        captured["z"] = z.data.copy()
        return original(z)

    model.head_main = spy
    try:
        model.forward(batch, branches, seed=0)
    finally:
        model.head_main = original
    return captured["z"]


def test_modality_switches_zero_the_right_segments():
    rng = np.random.default_rng(7)
    batch = _toy_batch(rng)
    model = _toy_model(8)
    model.eval()
    full = _fused(model, batch, Branches.from_name("full"))
    no_static = _fused(model, batch, Branches.from_name("no-static"))
    static_only = _fused(model, batch, Branches.from_name("static-only"))
    d = model.d_model
    np.testing.assert_array_equal(no_static[:, 2 * d:], 0.0)
    np.testing.assert_array_equal(no_static[:, :2 * d], full[:, :2 * d])
    np.testing.assert_array_equal(static_only[:, :2 * d], 0.0)
    np.testing.assert_array_equal(static_only[:, 2 * d:], full[:, 2 * d:])
    assert not np.array_equal(full, no_static)
    with pytest.raises(ValueError):
        Branches.from_name("graph-only")


def test_fusion_logits_initialised_from_lambda():
    model = _toy_model(0, fusion_init=0.5)
    np.testing.assert_array_equal(model.fusion_logits.data, [0.5, 0.0, 0.0])
