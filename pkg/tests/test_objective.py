"""Loss, margin schedule, and prediction tests with exact worked values."""

import numpy as np
import pytest

from qcaps import autodiff as ad
from qcaps import objective as obj


# ---------------------------------------------------------------------------
# spread loss
# ---------------------------------------------------------------------------

def test_spread_loss_inactive_hinge():
    acts = np.array([1.0, 0.0, 0.0, 0.0, 0.0])
    assert obj.spread_loss(acts, 0, 0.9) == 0.0


def test_spread_loss_worked_example():
    acts = np.array([0.5, 0.2, 0.3])
    assert abs(obj.spread_loss(acts, 0, 0.5) - 0.13) <= 1e-12


def test_spread_loss_uniform_ten_classes():
    acts = np.full(10, 0.4)
    assert abs(obj.spread_loss(acts, 3, 0.2) - 9 * 0.04) <= 1e-12


def test_spread_loss_bad_target():
    with pytest.raises(obj.BadTarget):
        obj.spread_loss(np.array([0.1, 0.2]), 2, 0.5)
    with pytest.raises(obj.BadTarget):
        obj.spread_loss(np.array([0.1, 0.2]), -1, 0.5)


def test_spread_loss_nonnegative_and_zero_condition():
    rng = np.random.default_rng(0)
    for _ in range(200):
        c = int(rng.integers(2, 8))
        acts = rng.uniform(0, 1, size=c)
        t = int(rng.integers(0, c))
        m = float(rng.uniform(0.05, 0.95))
        loss = obj.spread_loss(acts, t, m)
        assert loss >= 0.0
        others = np.delete(acts, t)
        satisfied = np.all(acts[t] >= others + m)
        assert (loss == 0.0) == satisfied


def test_batched_node_version_matches_scalar_mean():
    rng = np.random.default_rng(1)
    acts = rng.uniform(0, 1, size=(6, 5))
    targets = rng.integers(0, 5, size=6)
    m = 0.43
    node = obj.spread_loss_nodes(ad.constant(acts), targets, m)
    expect = np.mean([obj.spread_loss(acts[i], targets[i], m) for i in range(6)])
    np.testing.assert_allclose(float(node.value), expect, atol=1e-12)


def test_spread_loss_gradient_away_from_kinks():
    rng = np.random.default_rng(2)
    while True:
        acts = rng.uniform(0, 1, size=(3, 4))
        targets = rng.integers(0, 4, size=3)
        m = 0.37
        gaps = m - (acts[np.arange(3), targets][:, None] - acts)
        gaps[np.arange(3), targets] = 1.0
        if np.all(np.abs(gaps) > 1e-3):
            break
    p = ad.Parameter(acts, name="acts")
    err = ad.finite_difference_check(lambda: obj.spread_loss_nodes(p, targets, m), [p])
    assert err <= 1e-6


# ---------------------------------------------------------------------------
# margin schedule
# ---------------------------------------------------------------------------

def test_margin_at_step_zero():
    assert abs(obj.margin_schedule(0) - 0.21421) <= 1e-5


def test_margin_at_200k():
    assert abs(obj.margin_schedule(200_000) - 0.595) <= 1e-5


def test_margin_clamped_at_ceiling():
    assert obj.margin_schedule(10_000_000) == 0.9
    raw = obj.margin_schedule(10_000_000, clamp=False)
    assert abs(raw - 0.98996) <= 1e-4


def test_margin_monotone_and_range():
    steps = np.linspace(0, 2_000_000, 300).astype(int)
    values = [obj.margin_schedule(int(s)) for s in steps]
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert min(values) >= 0.214
    assert max(values) <= 0.9


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

def test_predict_argmax():
    assert obj.predict(np.array([0.1, 0.9, 0.3])) == 1


def test_predict_tie_breaks_low():
    assert obj.predict(np.array([0.5, 0.5])) == 0
    assert obj.predict(np.full(7, 0.25)) == 0


def test_predict_affine_invariance():
    rng = np.random.default_rng(3)
    acts = rng.uniform(0, 1, size=9)
    base = obj.predict(acts)
    assert obj.predict(2.5 * acts + 0.3) == base


def test_predict_batched():
    acts = np.array([[0.1, 0.8], [0.9, 0.2]])
    np.testing.assert_array_equal(obj.predict(acts), [1, 0])
