import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fppeboot.errors import ValidationError
from fppeboot.market import MarketInstance, eval_empirical_objective, eval_item_objective
from fppeboot.resampling import (
    WEIGHTS,
    WeightScheme,
    draw_weights,
    rng_stream,
    scheme_c_squared,
    weighted_objective,
)

SCHEMES = [
    WeightScheme.multinomial(),
    WeightScheme.without_replacement(0.5),
    WeightScheme.iid("exponential"),
    WeightScheme.iid("poisson"),
]


def test_multinomial_support():
    w = draw_weights(WeightScheme.multinomial(), 4, rng_stream(0, WEIGHTS))
    assert w.sum() == 4
    assert np.all(w >= 0) and np.all(w == np.round(w))


def test_without_replacement_half():
    w = draw_weights(WeightScheme.without_replacement(0.5), 10, rng_stream(0, WEIGHTS))
    assert np.sum(w == 2.0) == 5 and np.sum(w == 0.0) == 5


def test_iid_normalized_sum():
    w = draw_weights(WeightScheme.iid(), 1000, rng_stream(0, WEIGHTS))
    assert w.sum() == pytest.approx(1000, abs=1e-9)


def test_unit_scheme():
    np.testing.assert_array_equal(draw_weights(WeightScheme("unit"), 5, rng_stream(0, WEIGHTS)), 1.0)
    assert scheme_c_squared(WeightScheme("unit")) == 0.0


@pytest.mark.parametrize("scheme,c2", [
    (WeightScheme.multinomial(), 1.0),
    (WeightScheme.without_replacement(0.5), 1.0),
    (WeightScheme.without_replacement(0.2), 0.25),
    (WeightScheme.iid(), 1.0),
])
def test_c_squared_values(scheme, c2):
    assert scheme_c_squared(scheme) == pytest.approx(c2)


@pytest.mark.parametrize("scheme", SCHEMES, ids=lambda s: s.kind + str(s.alpha or s.dist or ""))
def test_empirical_c_squared(scheme):
    t = 10_000
    est = np.mean([np.mean((draw_weights(scheme, t, rng_stream(3, WEIGHTS, k)) - 1) ** 2)
                   for k in range(20)])
    assert abs(est / scheme_c_squared(scheme) - 1) < 0.05


def test_invalid_schemes():
    with pytest.raises(ValidationError):
        WeightScheme.without_replacement(1.0)
    with pytest.raises(ValidationError):
        WeightScheme.iid("gamma")
    with pytest.raises(ValidationError):
        WeightScheme("bayesian")


def test_scheme_roundtrip():
    for s in SCHEMES:
        assert WeightScheme.from_dict(s.to_dict()) == s


def test_streams_independent_of_order():
    a = [draw_weights(WeightScheme.multinomial(), 50, rng_stream(1, WEIGHTS, k)) for k in range(5)]
    b = [draw_weights(WeightScheme.multinomial(), 50, rng_stream(1, WEIGHTS, k)) for k in reversed(range(5))]
    for x, y in zip(a, reversed(b)):
        np.testing.assert_array_equal(x, y)
    assert not np.array_equal(a[0], a[1])


def test_exchangeable_positions():
    # every position has the same weight distribution: compare first and second moments
    t, B = 20, 4000
    W = np.array([draw_weights(WeightScheme.multinomial(), t, rng_stream(2, WEIGHTS, k)) for k in range(B)])
    assert np.abs(W.mean(axis=0) - 1).max() < 4 * np.sqrt((1 - 1 / t) / B)
    var = W.var(axis=0)
    assert var.max() - var.min() < 0.15


class TestWeightedObjective:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.m = MarketInstance(np.array([0.3, 0.5]), rng.uniform(0, 1, (2, 2)))
        self.beta = np.array([0.7, 0.4])

    def test_unit_weights(self):
        assert weighted_objective(self.m, np.ones(2), self.beta) == pytest.approx(
            eval_empirical_objective(self.m, self.beta), rel=1e-15)

    def test_point_mass(self):
        want = eval_item_objective(self.m.values[0], self.beta, self.m.budgets)
        assert weighted_objective(self.m, np.array([2.0, 0.0]), self.beta) == pytest.approx(want, rel=1e-14)

    def test_wrong_length(self):
        with pytest.raises(ValidationError):
            weighted_objective(self.m, np.ones(3), self.beta)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_weighted_objective_linear(seed):
    rng = np.random.default_rng(seed)
    m = MarketInstance(rng.uniform(0.1, 1, 3), rng.uniform(0.01, 1, (6, 3)))
    beta = rng.uniform(0.1, 1, 3)
    w1, w2 = rng.uniform(0, 2, 6), rng.uniform(0, 2, 6)
    mid = weighted_objective(m, (w1 + w2) / 2, beta)
    avg = (weighted_objective(m, w1, beta) + weighted_objective(m, w2, beta)) / 2
    assert mid == pytest.approx(avg, rel=1e-12, abs=1e-12)
