import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from snnreg.losses import (
    LossWeights,
    diffusion_reg,
    kd_distill,
    ncc_local,
    ncc_map,
    soft_dice,
    spike_reg,
    total_loss,
)
from snnreg.tensor import Tape, Tensor, grad_check
from snnreg.tensor import core as tc


def ncc_oracle(F, W, window, eps):
    """Per-voxel NCC over explicitly gathered clipped windows."""
    r = window // 2
    F = F - F.mean()
    W = W - W.mean()
    out = np.zeros(F.shape)
    for idx in itertools.product(*map(range, F.shape)):
        sl = tuple(slice(max(i - r, 0), i + r + 1) for i in idx)
        f, w = F[sl].ravel(), W[sl].ravel()
        fc, wc = f - f.mean(), w - w.mean()
        out[idx] = (fc * wc).sum() / (np.sqrt((fc ** 2).sum()) * np.sqrt((wc ** 2).sum()) + eps)
    return out


@given(seed=st.integers(0, 500), window=st.sampled_from([3, 5]), d=st.integers(6, 8))
def test_ncc_box_filter_matches_window_oracle(seed, window, d):
    rng = np.random.default_rng(seed)
    F, W = rng.normal(size=(d, d - 1, d + 1)), rng.normal(size=(d, d - 1, d + 1))
    got = ncc_map(F, W, window, 1e-8).data[0]
    np.testing.assert_allclose(got, ncc_oracle(F, W, window, 1e-8), atol=1e-8)


def test_ncc_large_window_matches_oracle_on_12_cube(rng):
    F, W = rng.normal(size=(12, 12, 12)), rng.normal(size=(12, 12, 12))
    np.testing.assert_allclose(ncc_map(F, W, 9).data[0], ncc_oracle(F, W, 9, 1e-8), atol=1e-8)


def test_ncc_self_anti_and_constant(rng):
    F = rng.normal(size=(10, 10, 10))
    assert float(ncc_local(F, F).data) == pytest.approx(-1.0, abs=1e-6)
    assert float(ncc_local(F, -F).data) == pytest.approx(1.0, abs=1e-6)
    C = np.ones((10, 10, 10))
    assert float(ncc_local(C, C * 2).data) == 0.0


@given(a=st.floats(0.1, 10), b=st.floats(-5, 5), seed=st.integers(0, 100))
def test_ncc_affine_invariance(a, b, seed):
    F = np.random.default_rng(seed).normal(size=(9, 9, 9))
    assert float(ncc_local(F, a * F + b).data) == pytest.approx(-1.0, abs=1e-5)


def test_ncc_float32_inputs_stay_bounded(rng):
    # near-flat float32 images used to cancel catastrophically
    F = (0.5 + 1e-3 * rng.normal(size=(12, 12, 12))).astype(np.float32)
    W = (0.5 + 1e-3 * rng.normal(size=(12, 12, 12))).astype(np.float32)
    m = ncc_map(F, W, 9).data
    assert m.min() >= -1 - 1e-9 and m.max() <= 1 + 1e-9


def test_ncc_errors():
    with pytest.raises(ValueError):
        ncc_local(np.zeros((5, 5, 5)), np.zeros((5, 5, 5)), window=7)
    with pytest.raises(ValueError):
        ncc_local(np.zeros((5, 5, 5)), np.zeros((5, 5, 4)), window=3)
    with pytest.raises(ValueError):
        ncc_local(np.zeros((5, 5, 5)), np.zeros((5, 5, 5)), window=4)


def test_ncc_gradient(rng):
    F, W = rng.normal(size=(5, 5, 5)), rng.normal(size=(5, 5, 5))
    assert grad_check(lambda t: ncc_local(Tensor(F), t, 3), W) < 1e-4


def test_diffusion_examples(rng):
    assert float(diffusion_reg(np.zeros((3, 4, 4, 4))).data) == 0
    assert float(diffusion_reg(np.full((3, 4, 4, 4), 2.5)).data) == 0
    u = np.zeros((3, 5, 4, 3))
    u[0] = np.arange(5.0)[:, None, None]
    assert float(diffusion_reg(u).data) == pytest.approx(1.0)


def test_diffusion_gradient(rng):
    u = rng.normal(size=(3, 4, 3, 5))
    assert grad_check(diffusion_reg, u) < 1e-4


def test_spike_reg_examples():
    assert float(spike_reg([0.1] * 9).data) == pytest.approx(0.9)
    assert float(spike_reg([0.2], 0.1, 0.01).data) == pytest.approx(0.2001)
    assert float(spike_reg([0.0, 0.0, 0.0], 0.1, 0.01).data) == pytest.approx(3 * 0.01 * 0.01)


@given(rho_star=st.floats(0, 1), beta=st.floats(0.01, 100))
def test_spike_reg_minimizer_by_grid_search(rho_star, beta):
    grid = np.linspace(0, 1, 20001)
    vals = [float(spike_reg([r], rho_star, beta).data) for r in grid[::50]]
    coarse = grid[::50][int(np.argmin(vals))]
    expected = max(0.0, rho_star - 1 / (2 * beta))
    assert abs(coarse - expected) <= 0.0025 + 1e-12


def test_kd_examples_and_frozen_teacher(rng):
    a = rng.normal(size=(3, 2, 2, 2))
    assert float(kd_distill(a, a).data) == 0
    assert float(kd_distill(a + 1, a).data) == pytest.approx(1.0)
    s = Tensor(a.copy(), requires_grad=True)
    t = Tensor(a + 1, requires_grad=True)
    with Tape() as tape:
        y = kd_distill(s, t)
    gs, gt = tape.gradient(y, [s, t])
    assert gs.any() and not gt.any()
    with pytest.raises(ValueError):
        kd_distill(a, a[:, :1])


def _onehot(masks):
    return np.stack(masks).astype(float)


def test_soft_dice_examples():
    zero = np.zeros((3, 4, 4, 4))
    A = np.zeros((4, 4, 4))
    A[:2] = 1
    B = np.zeros((4, 4, 4))
    B[2:] = 1
    eps = 1e-5
    assert float(soft_dice(_onehot([A]), _onehot([A]), zero, eps).data) == pytest.approx(0, abs=1e-9)
    assert float(soft_dice(_onehot([A]), _onehot([B]), zero, eps).data) == pytest.approx(1 - eps / (64 + eps))
    H = np.zeros((4, 4, 4))
    H[1:3] = 1
    assert float(soft_dice(_onehot([A]), _onehot([H]), zero, eps).data) == pytest.approx(0.5, abs=1e-6)
    with pytest.raises(ValueError):
        soft_dice(_onehot([A, B]), _onehot([A]), zero)


def test_soft_dice_gradient(rng):
    A = (rng.random((4, 4, 4)) > 0.5).astype(float)
    B = (rng.random((4, 4, 4)) > 0.5).astype(float)
    u = rng.uniform(-0.7, 0.7, size=(3, 4, 4, 4)) + 0.11
    assert grad_check(lambda t: soft_dice(_onehot([A, 1 - A]), _onehot([B, 1 - B]), t), u) < 1e-4


def test_total_loss_weighted_sum(f64):
    w = LossWeights(lambda_sim=1, lambda_reg=0.1, lambda_spk=1e-4)
    total, parts = total_loss("snn", {"sim": -0.9, "reg": 0.2, "spk": 1.3}, w)
    assert float(total.data) == pytest.approx(-0.87987, abs=1e-12)
    assert parts["total"] == pytest.approx(-0.87987)
    total, _ = total_loss("ann", {"sim": -0.5}, LossWeights(lambda_reg=0))
    assert float(total.data) == -0.5
    with pytest.raises(ValueError):
        total_loss("snn", {"sim": -0.9, "reg": 0.2}, w)
    with pytest.raises(ValueError):
        total_loss("cnn", {}, w)


def test_loss_weight_defaults_and_validation():
    w = LossWeights()
    assert (w.lambda_sim, w.lambda_reg, w.lambda_spk, w.beta, w.rho_star) == (1.0, 0.1, 1e-4, 1e-2, 0.1)
    assert (w.lambda_distill, w.lambda_seg, w.ncc_window) == (0.0, 0.0, 9)
    for bad in (dict(lambda_reg=-1), dict(ncc_window=8), dict(rho_star=1.5)):
        with pytest.raises(ValueError):
            LossWeights(**bad)
