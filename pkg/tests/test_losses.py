import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mtnet.autodiff import Tensor, grad_check, precision
from mtnet.losses import (
    PSNR_CAP_DB,
    LossReport,
    LossWeights,
    SSIMConstants,
    classification_loss,
    global_loss,
    mae,
    mae_value,
    mse,
    mse_value,
    psnr,
    psnr_value,
    ssim_global,
    ssim_value,
    translation_loss,
)
from oracles import ssim_oracle


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def rand_pair(seed, shape=(4, 4, 4)):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.1, 2.0, shape)
    return x, x + 0.2 * rng.standard_normal(shape)


# -- weights and constants -------------------------------------------------


def test_default_weights():
    w = LossWeights()
    assert (w.w1, w.w2, w.w3, w.w4, w.psnr_sign) == (0.15, 0.15, 0.60, 0.20, -1)


@pytest.mark.parametrize("kwargs", [{"w1": -0.1}, {"w3": 1.5}, {"psnr_sign": 0}, {"class_balance": -1}])
def test_weights_validate(kwargs):
    with pytest.raises(ValueError):
        LossWeights(**kwargs)


def test_ssim_constants():
    c = SSIMConstants(2.0)
    assert c.c1 == pytest.approx(4e-4) and c.c2 == pytest.approx(36e-4)
    with pytest.raises(ValueError):
        SSIMConstants(0.0)


# -- mse / mae -------------------------------------------------------------


def test_mse_mae_constant_offset():
    x, y = t64(np.full((3, 3, 3), 1.0)), t64(np.full((3, 3, 3), 3.0))
    assert mse(x, y).item() == 4.0
    assert mae(x, y).item() == 2.0
    assert mse(x, x).item() == 0.0 and mae(x, x).item() == 0.0


def test_mse_mae_against_loop_oracle():
    x, y = rand_pair(0)
    sq = [(a - b) ** 2 for a, b in zip(x.ravel(), y.ravel())]
    ab = [abs(a - b) for a, b in zip(x.ravel(), y.ravel())]
    assert mse(t64(x), t64(y)).item() == pytest.approx(math.fsum(sq) / len(sq), rel=1e-6)
    assert mae(t64(x), t64(y)).item() == pytest.approx(math.fsum(ab) / len(ab), rel=1e-6)


def test_shape_mismatch_raises():
    with pytest.raises(ValueError, match="shape"):
        mse(t64(np.zeros((2, 2))), t64(np.zeros((2, 3))))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 3, 2), elements=st.floats(-5, 5)), arrays(np.float64, (3, 3, 2), elements=st.floats(-5, 5)))
def test_mse_mae_zero_iff_equal(a, b):
    m, e = mse_value(a, b), mae_value(a, b)
    assert m >= 0 and e >= 0
    assert (m == 0) == np.array_equal(a, b)
    assert (e == 0) == np.array_equal(a, b)
    assert mse_value(b, a) == m


def test_mae_subgradient_zero_at_equality():
    x = t64(np.ones(4))
    y = Tensor(np.ones(4), requires_grad=True)
    mae(x, y).backward()
    np.testing.assert_array_equal(y.grad, 0.0)


# -- ssim --------------------------------------------------------------


def test_ssim_identity():
    x, _ = rand_pair(1)
    assert ssim_global(t64(x), t64(x), SSIMConstants.from_reference(x)).item() == pytest.approx(1.0, abs=1e-12)


def test_ssim_two_constant_volumes():
    got = ssim_global(t64(np.ones((2, 2, 2))), t64(np.zeros((2, 2, 2))), SSIMConstants(1.0)).item()
    assert got == pytest.approx(1e-4 / (1 + 1e-4), rel=1e-9)


def test_ssim_matches_statistics_oracle():
    for seed in range(5):
        x, y = rand_pair(seed, (5, 4, 3))
        c_max = float(x.max())
        got = ssim_global(t64(x), t64(y), SSIMConstants(c_max)).item()
        assert got == pytest.approx(ssim_oracle(x, y, c_max), rel=1e-6)
        assert ssim_value(x, y, c_max) == pytest.approx(got, rel=1e-12)


def test_ssim_symmetric_and_scale_covariant():
    x, y = rand_pair(7)
    c = SSIMConstants(2.0)
    a = ssim_global(t64(x), t64(y), c).item()
    assert ssim_global(t64(y), t64(x), c).item() == pytest.approx(a, rel=1e-12)
    assert ssim_global(t64(3 * x), t64(3 * y), SSIMConstants(6.0)).item() == pytest.approx(a, rel=1e-9)


def test_ssim_below_one_when_different():
    x, y = rand_pair(8)
    assert ssim_value(x, y) < 1.0


# -- psnr --------------------------------------------------------------


def test_psnr_printed_form():
    x = np.zeros(100)
    y = np.full(100, 0.01)  # mse 1e-4
    assert psnr_value(x, y, c_max=1.0) == pytest.approx(40.0)
    assert psnr_value(x, np.ones(100), c_max=1.0) == pytest.approx(0.0)
    assert psnr(t64(x), t64(y), 1.0).item() == pytest.approx(40.0)


def test_psnr_squared_form():
    x, y = np.zeros(100), np.full(100, 0.1)
    assert psnr_value(x, y, c_max=2.0, squared=True) == pytest.approx(10 * math.log10(4.0 / 0.01))


def test_psnr_identical_is_infinite_and_capped_in_loss():
    x = np.ones(8)
    assert psnr_value(x, x) == math.inf
    assert psnr(t64(x), t64(x), 1.0, cap=None).item() == math.inf
    assert psnr(t64(x), t64(x), 1.0).item() == PSNR_CAP_DB


# -- translation loss ------------------------------------------------------


def test_translation_loss_identity_input():
    x, _ = rand_pair(2)
    got = translation_loss(t64(x), t64(x)).item()
    assert got == pytest.approx(-0.20 * PSNR_CAP_DB, abs=1e-9)


def test_translation_loss_mse_only_weights():
    x, y = rand_pair(3)
    w = LossWeights(1.0, 0.0, 0.0, 0.0)
    assert translation_loss(t64(x), t64(y), w).item() == mse(t64(x), t64(y)).item()


def test_translation_loss_weighted_sum_on_constant_example():
    x, y = t64(np.ones((2, 2, 2))), t64(np.zeros((2, 2, 2)))
    c = SSIMConstants(1.0)
    ssim = 1e-4 / (1 + 1e-4)
    manual = 0.15 * 1.0 + 0.15 * 1.0 + 0.60 * (1 - ssim) - 0.20 * 0.0
    assert translation_loss(x, y, LossWeights(), c).item() == pytest.approx(manual, abs=1e-6)


def test_translation_loss_parts():
    x, y = rand_pair(4)
    parts = {}
    total = translation_loss(t64(x), t64(y), parts=parts).item()
    w = LossWeights()
    recomposed = w.w1 * parts["mse"] + w.w2 * parts["mae"] + w.w3 * (1 - parts["ssim"]) - w.w4 * parts["psnr"]
    assert total == pytest.approx(recomposed, rel=1e-12)


def test_translation_loss_literal_sign_mode():
    x, y = rand_pair(5)
    neg = translation_loss(t64(x), t64(y), LossWeights()).item()
    pos = translation_loss(t64(x), t64(y), LossWeights(psnr_sign=1)).item()
    assert pos - neg == pytest.approx(2 * 0.2 * psnr_value(x, y), rel=1e-9)


def test_translation_loss_gradient():
    x, y = rand_pair(6)
    with precision(np.float64):
        ref = t64(x)
        assert grad_check(lambda t: translation_loss(ref, t), t64(y)) < 1e-4


def test_translation_loss_minimised_at_reference():
    rng = np.random.default_rng(9)
    x = rng.uniform(0.5, 1.5, (2, 2, 2))
    base = translation_loss(t64(x), t64(x)).item()
    for signs in itertools.product([-1, 0, 1], repeat=3):
        d = np.zeros((2, 2, 2))
        d[0, 0, 0], d[1, 0, 1], d[0, 1, 1] = (0.01 * s for s in signs)
        if not d.any():
            continue
        assert translation_loss(t64(x), t64(x + d)).item() > base


# -- classification and global -------------------------------------------


def test_classification_loss_perfect_and_uniform():
    onehot = np.eye(4)[[0, 2]]
    assert classification_loss(t64(onehot), onehot).item() == pytest.approx(0.0, abs=1e-15)
    uniform = np.full((3, 4), 0.25)
    assert classification_loss(t64(uniform), np.eye(4)[[0, 1, 3]]).item() == pytest.approx(-math.log10(0.25), abs=1e-9)


def test_classification_loss_mixed_batch():
    probs = np.array([[0.7, 0.1, 0.1, 0.1], [0.2, 0.2, 0.5, 0.1]])
    labels = np.eye(4)[[0, 2]]
    expected = -(math.log10(0.7) + math.log10(0.5)) / 2
    assert classification_loss(t64(probs), labels).item() == pytest.approx(expected, rel=1e-6)


def test_classification_loss_clamps_zero_probability():
    probs = np.array([[0.0, 1.0, 0.0, 0.0]])
    assert classification_loss(t64(probs), np.eye(4)[[0]]).item() == pytest.approx(12.0)


@pytest.mark.parametrize("labels", [np.array([[1, 1, 0, 0]]), np.array([[0.5, 0.5, 0, 0]]), np.array([[0, 0, 0, 0]])])
def test_classification_loss_rejects_bad_one_hot(labels):
    with pytest.raises(ValueError):
        classification_loss(t64(np.full((1, 4), 0.25)), labels)


def test_classification_loss_rejects_negative_probability():
    with pytest.raises(ValueError, match="negative"):
        classification_loss(t64([[1.1, -0.1, 0.0, 0.0]]), np.eye(4)[[0]])


def test_global_loss_is_plain_sum():
    assert global_loss(t64(0.5), t64(0.3)).item() == pytest.approx(0.8)
    assert global_loss(t64(0.0), t64(0.0)).item() == 0.0
    with pytest.raises(FloatingPointError):
        global_loss(t64(np.nan), t64(0.0))


def test_loss_report_weighted_mean():
    a = LossReport(1, 1, 1, 1, 1, 1, 2)
    b = LossReport(3, 3, 3, 3, 3, 3, 6)
    m = LossReport.mean([a, b], [1, 3])
    assert m.mse == pytest.approx(2.5) and m.l_global == pytest.approx(5.0)
    assert set(m.as_dict()) == set(LossReport.FIELDS)
