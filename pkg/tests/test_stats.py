import numpy as np
import pytest
from hypothesis import given, strategies as st

from btwalk.stats import (RangeEmpty, TooFewSamples, chi_square_gof, chi_square_two_sample, hill,
                          ks_censored_bounds, ks_two_sample, loglog_fit, plateau_scan, survival_curve)


def pareto(alpha, n, seed):
    return np.random.default_rng(seed).pareto(alpha, n) + 1.0


def test_hill_pareto_two():
    est = hill(pareto(2.0, 100_000, 1), 1000)
    assert abs(est.index - 2) < 0.2
    assert est.se == pytest.approx(est.index / np.sqrt(1000))


def test_hill_exponential_no_plateau():
    x = np.random.default_rng(2).exponential(size=100_000)
    res, ks, est = plateau_scan(x)
    assert res.status == "NO_PLATEAU"
    assert abs(est[-1] - est[0]) > 0.3 * min(est[0], est[-1])


def test_hill_pareto_plateau():
    res, _, _ = plateau_scan(pareto(3.0, 100_000, 3))
    assert res.status == "OK" and abs(res.index - 3) < 0.3


def test_hill_constant_sample():
    with pytest.raises(TooFewSamples):
        hill(np.ones(10_000), 100)


def test_hill_too_few():
    with pytest.raises(TooFewSamples):
        hill(pareto(2, 500, 0), 100)


@given(st.floats(1e-3, 1e3))
def test_hill_scale_invariant(c):
    x = pareto(2.5, 5000, 4)
    assert hill(x * c, 200).index == pytest.approx(hill(x, 200).index, rel=1e-9)


def test_hill_censored_counts_only_events():
    x = pareto(2.0, 50_000, 5)
    cens = np.zeros(x.size, bool)
    top = np.argsort(-x)[:50]
    cens[top] = True
    a = hill(x, 1000).index
    b = hill(x, 1000, censored=cens).index
    assert b == pytest.approx(a * 950 / 1000, rel=1e-12)


def test_smoothed_hill_pareto():
    assert abs(hill(pareto(3.0, 100_000, 6), smooth=4).index - 3) < 0.3


@pytest.mark.parametrize("alpha,tol", [(1.5, 0.1), (3.0, 0.2)])
def test_loglog_pareto(alpha, tol):
    x = pareto(alpha, 200_000, 7)
    g = np.geomspace(1, 20, 15)
    S, cnt = survival_curve(x, g)
    slope, icpt, r2 = loglog_fit(g, S, cnt)
    assert abs(slope + alpha) < tol and r2 > 0.99


def test_loglog_range_empty():
    x = np.random.default_rng(0).random(1000)
    g = np.linspace(1.1, 3, 10)
    S, cnt = survival_curve(x, g)
    with pytest.raises(RangeEmpty):
        loglog_fit(g, S, cnt, fit_range=(1.0, 5.0))


def test_ks_identical():
    x = np.random.default_rng(0).random(100)
    assert ks_two_sample(x, x).value == 0.0


def test_chi_square_fair_die_p_uniform():
    rng = np.random.default_rng(3)
    ps = [chi_square_gof(np.bincount(rng.integers(0, 6, 600), minlength=6), np.ones(6)).p_value
          for _ in range(400)]
    ps = np.array(ps)
    assert ks_two_sample(ps, rng.random(4000)).p_value > 1e-3
    assert np.all((ps >= 0) & (ps <= 1))


def test_chi_two_sample_tuples():
    rng = np.random.default_rng(4)
    a = rng.integers(0, 3, (5000, 2))
    b = rng.integers(0, 3, (5000, 2))
    assert chi_square_two_sample(a, b).p_value > 1e-3
    c = np.column_stack([rng.integers(0, 3, 5000), np.zeros(5000, int)])
    assert chi_square_two_sample(a, c).p_value < 1e-6


def test_survival_at_grid_min():
    x = np.array([2.0, 3.0, 5.0])
    S, cnt = survival_curve(x, [1.0, 2.0, 2.5, 5.0, 6.0])
    assert S.tolist() == [1.0, 1.0, 2 / 3, 1 / 3, 0.0]


@given(st.lists(st.floats(0.1, 100), min_size=5, max_size=60), st.lists(st.booleans(), min_size=60, max_size=60))
def test_survival_monotone(xs, flags):
    x = np.array(xs)
    cens = np.array(flags[:x.size])
    g = np.linspace(0, 110, 30)
    S, _ = survival_curve(x, g, cens)
    assert np.all(np.diff(S) <= 1e-12) and S[0] == 1.0 and np.all(S >= 0)


def test_kaplan_meier_uncensored_equals_empirical():
    x = pareto(2, 1000, 9)
    g = np.geomspace(1, 30, 12)
    a, _ = survival_curve(x, g)
    b, _ = survival_curve(x, g, np.zeros(x.size, bool))
    assert a == pytest.approx(b)


def test_ks_censored_bounds_contain_truth():
    rng = np.random.default_rng(10)
    x = rng.exponential(size=2000)
    ref = rng.exponential(size=2000)
    cens = x > 3
    best, worst = ks_censored_bounds(np.minimum(x, 3), cens, ref)
    true = ks_two_sample(x, ref).value
    assert best <= true + 1e-12 and true <= worst + 1e-12


def test_empty_inputs():
    with pytest.raises(ValueError):
        ks_two_sample([], [1.0])
    with pytest.raises(ValueError):
        survival_curve([], [1.0])
