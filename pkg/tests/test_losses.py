import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmm import autodiff as ad
from cmm.autodiff import Tensor
from cmm.losses import bce, lm_loss, s_fn, stablemax


@pytest.mark.parametrize("k", [1, 3, 5])
def test_s_at_zero_is_one(k):
    assert s_fn(0.0, k) == 1.0


def test_s_hand_values():
    assert s_fn(1.0, 1) == 2.0
    assert s_fn(-1.0, 1) == 0.5
    assert s_fn(1.0, 3) == pytest.approx(8 / 3, abs=1e-15)
    assert s_fn(-1.0, 3) == pytest.approx(0.375, abs=1e-15)
    assert s_fn(1.0, 5) == pytest.approx(163 / 60, abs=1e-15)


def test_s_rejects_bad_order():
    with pytest.raises(ValueError):
        s_fn(0.0, 2)


@pytest.mark.parametrize("k", [1, 3, 5])
def test_s_positive_increasing_reciprocal(k):
    x = np.linspace(-20, 20, 10001)
    s = s_fn(x, k)
    assert (s > 0).all() and (np.diff(s) > 0).all()
    np.testing.assert_allclose(s_fn(-x, k) * s, 1.0, atol=1e-12, rtol=0)


def test_taylor_bounds():
    x = np.linspace(0, 0.5, 2001)
    assert (np.abs(s_fn(x, 3) - np.exp(x)) <= math.exp(0.5) * 0.5**4 / 24).all()
    assert (np.abs(s_fn(x, 5) - np.exp(x)) <= math.exp(0.5) * 0.5**6 / 720).all()


def test_stablemax_uniform_and_hand_case():
    np.testing.assert_allclose(stablemax(Tensor(np.zeros((1, 4))), 3).data, 0.25)
    np.testing.assert_allclose(stablemax(Tensor(np.array([1.0, -1.0])), 1).data, [0.8, 0.2])


def test_stablemax_not_shift_invariant():
    x = np.array([0.3, -0.2, 1.1])
    a = stablemax(Tensor(x), 1).data
    b = stablemax(Tensor(x + 2.0), 1).data
    assert not np.allclose(a, b)
    assert a.argmax() == b.argmax()


def test_stablemax_needs_two_classes():
    with pytest.raises(ValueError):
        stablemax(Tensor(np.zeros((3, 1))), 1)


@settings(max_examples=60, deadline=None)
@given(
    # grid-valued logits keep ties out of reach of rounding
    st.lists(st.integers(-3000, 3000), min_size=2, max_size=9, unique=True),
    st.sampled_from([1, 3, 5]),
)
def test_stablemax_properties(logits, k):
    x = np.array(logits) / 100.0
    p = stablemax(Tensor(x), k).data
    assert (p > 0).all()
    assert abs(p.sum() - 1) < 1e-12
    assert p.argmax() == x.argmax()
    bumped = x.copy()
    bumped[0] += 0.5
    assert stablemax(Tensor(bumped), k).data[0] > p[0]


def test_lm_loss_uniform():
    assert float(lm_loss(Tensor(np.zeros((2, 3, 4))), np.zeros((2, 3), int), 3).data) == pytest.approx(math.log(4), abs=1e-12)


def test_lm_loss_vanishes_monotonically():
    vals = []
    for m in (1, 10, 100, 1000):
        logits = np.array([[m, -m, -m]], float)
        vals.append(float(lm_loss(Tensor(logits), [0], 3).data))
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-6


@pytest.mark.parametrize("k", [1, 3, 5])
def test_lm_loss_fd(k, rng):
    x = Tensor(rng.normal(0, 2, (3, 4, 5)), requires_grad=True)
    tg = rng.integers(0, 5, (3, 4))
    assert ad.finite_diff_check(lambda: lm_loss(x, tg, k), x, h=1e-5) < 1e-4


def test_lm_loss_target_range():
    with pytest.raises(ValueError):
        lm_loss(Tensor(np.zeros((1, 2, 3))), [[0, 3]], 1)


def test_lm_loss_pad_positions_ignored(rng):
    x = rng.normal(size=(1, 3, 4))
    full = float(lm_loss(Tensor(x[:, :2]), [[1, 2]], 3).data)
    padded = float(lm_loss(Tensor(x), [[1, 2, 9]], 3, pad_token=9).data)
    assert padded == pytest.approx(full, abs=1e-12)


def test_bce_values():
    assert float(bce(Tensor(np.array([0.0])), [1]).data) == pytest.approx(math.log(2), abs=1e-12)
    assert float(bce(Tensor(np.array([0.0])), [0]).data) == pytest.approx(math.log(2), abs=1e-12)
    assert float(bce(Tensor(np.array([50.0])), [1]).data) < 1e-20
    assert float(bce(Tensor(np.array([1.0])), [1]).data) == pytest.approx(0.313262, abs=1e-6)
    assert np.isfinite(float(bce(Tensor(np.array([-1e4])), [1]).data))


def test_stablemax_large_negative_logit_finite_grad():
    x = Tensor(np.array([[-1e6, 0.0, 1.0]], dtype=np.float32), requires_grad=True)
    _, (g,) = ad.eval_and_backward(lambda x: lm_loss(x, [1], 5), [x])
    assert np.isfinite(g).all()
