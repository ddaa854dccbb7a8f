from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from losgraph import autodiff as ad
from losgraph.autodiff import Tensor, gradcheck
from losgraph.temporal import SsmBlock, TemporalEncoder, embed_input, mask_pool, ssm_block_forward


def _gelu(v):
    return 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0)))


def test_embed_zero_input_gives_zero():
    out = embed_input(np.zeros((1, 3, 4)), np.ones((4, 5)), np.zeros(5), np.ones(5)).data
    np.testing.assert_array_equal(out, 0.0)


def test_embed_rms_before_activation_is_one():
    rng = np.random.default_rng(0)
    pre = ad.rms_norm(ad.matmul(rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 6))), np.ones(6), eps=0.0).data
    np.testing.assert_allclose(np.sqrt((pre ** 2).mean(axis=-1)), 1.0, atol=1e-9)


def test_embed_matches_step_by_step_hand_evaluation():
    X = np.array([[[0.5, -1.0, 2.0], [1.5, 0.0, -0.5]]])
    W = np.array([[1.0, 0.0], [0.5, -1.0], [0.0, 2.0]])
    b = np.array([0.1, -0.2])
    got = embed_input(X, W, b, np.ones(2), eps=1e-6).data
    for t in range(2):
        z = [sum(X[0, t, i] * W[i, j] for i in range(3)) + b[j] for j in range(2)]
        rms = math.sqrt(sum(v * v for v in z) / 2 + 1e-6)
        for j in range(2):
            assert got[0, t, j] == pytest.approx(_gelu(z[j] / rms), abs=1e-14)


def test_embed_rejects_bad_width():
    with pytest.raises(ValueError):
        embed_input(np.zeros((1, 2, 3)), np.ones((4, 2)), np.zeros(2), np.ones(2))


def test_scan_two_steps_by_hand():
    A = -1.0
    x = [0.7, -0.3]
    dt = [0.5, 0.2]
    B = [1.5, -0.4]
    C = [2.0, 0.8]
    y = ad.selective_scan(np.array(x).reshape(1, 2, 1), np.array(dt).reshape(1, 2, 1), np.array([[A]]),
                          np.array(B).reshape(1, 2, 1), np.array(C).reshape(1, 2, 1)).data.ravel()
    s1 = dt[0] * B[0] * x[0]
    s2 = math.exp(dt[1] * A) * s1 + dt[1] * B[1] * x[1]
    assert y[0] == pytest.approx(C[0] * s1, abs=1e-15)
    assert y[1] == pytest.approx(C[1] * s2, abs=1e-15)


def test_block_zero_input_is_zero():
    block = SsmBlock(4, 3, np.random.default_rng(0))
    np.testing.assert_array_equal(ssm_block_forward(np.zeros((2, 5, 4)), block).data, 0.0)


def test_block_a_is_negative():
    block = SsmBlock(4, 3, np.random.default_rng(0))
    assert (block.A().data < 0).all()


def test_block_gradient_matches_finite_differences():
    block = SsmBlock(3, 2, np.random.default_rng(1))
    h = np.random.default_rng(2).normal(size=(2, 4, 3))
    w = np.random.default_rng(3).normal(size=(2, 4, 3))
    assert gradcheck(lambda x: ad.tsum(block(x) * w), [h]) < 1e-5
    W_in = block.in_proj.weight.data.copy()

    def through_weight(wt):
        block.in_proj.weight = wt
        return ad.tsum(block(Tensor(h)) * w)

    assert gradcheck(through_weight, [W_in]) < 1e-5


def test_block_is_causal():
    block = SsmBlock(4, 3, np.random.default_rng(4))
    h = np.random.default_rng(5).normal(size=(2, 10, 4))
    full = block(h).data
    for t in (1, 4, 9):
        np.testing.assert_allclose(block(h[:, :t]).data, full[:, :t], rtol=0, atol=1e-14)


def test_state_bounded_over_48_steps():
    block = SsmBlock(8, 16, np.random.default_rng(6))
    h = np.random.default_rng(7).uniform(-5, 5, size=(3, 48, 8))
    out = block(h).data
    assert np.isfinite(out).all() and np.abs(out).max() < 1e6


def test_zero_output_projection_stack_is_identity():
    rng = np.random.default_rng(8)
    blocks = [SsmBlock(4, 3, rng, zero_out=True) for _ in range(2)]
    h = rng.normal(size=(2, 6, 4))
    out = Tensor(h)
    for b in blocks:
        out = b(out)
    np.testing.assert_array_equal(out.data, h)


def test_mask_pool_examples():
    H = np.arange(24.0).reshape(1, 4, 6)
    np.testing.assert_allclose(mask_pool(H, np.ones((1, 4)), "mean").data, H.mean(axis=1))
    np.testing.assert_array_equal(mask_pool(H[:, :2], np.array([[1, 0]]), "mean").data, H[:, 0])
    np.testing.assert_array_equal(mask_pool(H, np.array([[1, 1, 0, 1]]), "last").data, H[:, 3])
    np.testing.assert_array_equal(mask_pool(H, np.array([[1, 1, 0, 0]]), "last").data, H[:, 1])
    with pytest.raises(ValueError):
        mask_pool(H, np.zeros((1, 4)), "mean")


@given(st.integers(0, 10_000), st.sampled_from(["mean", "last"]))
def test_mask_pool_ignores_masked_positions(seed, mode):
    rng = np.random.default_rng(seed)
    H = rng.normal(size=(3, 7, 2))
    m = (rng.random((3, 7)) < 0.5).astype(float)
    m[:, 0] = 1
    H2 = H.copy()
    hidden = m == 0
    H2[hidden] = rng.permutation(H[hidden]) * 3.0 + 1.0
    np.testing.assert_array_equal(mask_pool(H, m, mode).data, mask_pool(H2, m, mode).data)


def test_encoder_end_to_end_gradient_to_input_projection():
    rng = np.random.default_rng(9)
    enc = TemporalEncoder(3, 4, 2, 2, rng, pooling="mean")
    x = rng.normal(size=(2, 4, 3))
    mask = np.array([[1, 1, 0, 1], [1, 0, 1, 1]])
    W0 = enc.embed.proj.weight.data.copy()

    def loss(w):
        enc.embed.proj.weight = w
        return ad.tsum(enc(x, mask) * np.arange(4.0))

    assert gradcheck(loss, [W0]) < 1e-5
