"""Acceptance battery: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are written past
pytest's capture so they show up in the log.  Criteria that do not hold at
desk scale are marked xfail (non-strict) but still run their real assertion.
"""
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from btwalk import cli
from btwalk.env import EnvTree, additive_martingale, default_barrier
from btwalk.law import load_reference, psi_exact, solve_kappa
from btwalk.ltgw import moment_ratios, offspring_batch, sample_trees
from btwalk.rng import substream
from btwalk.rw1d import change_of_measure_check, default_boxes, many_to_one_check, sample_paths, tilt
from btwalk.spine import PijTable, estimate_KA, exact_KA, first_spine_transitions, spine_increments
from btwalk.stats import (chi_square_gof, chi_square_two_sample, hill, ks_two_sample, pooled_categories,
                          survival_curve)
from btwalk.walk import run_excursions

LAWS = {k: load_reference(k) for k in "ABC"}
P_MIN = 1e-3
POLICY = {"freeze_eps": 1e-3, "eps_w": 1e-3, "window": 5, "max_depth": 400}
_cache = {}


@pytest.fixture
def report(capsys):
    t0 = time.perf_counter()

    def emit(num, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {num:>2}] {'PASS' if ok else 'FAIL'} ({time.perf_counter() - t0:.0f}s) {detail}")
        return ok
    return emit


def w_pairs(key, num, seed):
    """(W_inf, M_e) pairs with censored environments dropped; memoized per run."""
    if (key, num, seed) not in _cache:
        law = LAWS[key]
        d = cli._w_pairs((law.to_dict(), seed, 0, num, default_barrier(law), POLICY, 2_000_000))
        _cache[key, num, seed] = d[d[:, 2] == 0, :2]
    return _cache[key, num, seed]


def excursions(key, num=100_000, seed=9):
    if ("exc", key) not in _cache:
        law = LAWS[key]
        d = cli._excursions((law.to_dict(), seed, 0, num, 1, 10**7, 2_000_000))
        _cache["exc", key] = (d[:, 0], d[:, 5].astype(bool))
    return _cache["exc", key]


def tail_fit(key):
    mx, cens = excursions(key)
    grid = cli._log_grid(mx, 40)
    S, cnt = survival_curve(mx, grid, cens)
    return cli._tail_fit(grid, S, cnt)


# -- 1 -------------------------------------------------------------------------

def test_c01_exact_psi(report):
    law = LAWS["A"]
    ok = psi_exact(law, 1) == Fraction(1) and psi_exact(law, 3) == Fraction(1)
    k = solve_kappa(law).value
    ok &= abs(k - 3.0) < 1e-9
    assert report(1, ok, f"psi(1)={psi_exact(law, 1)} psi(3)={psi_exact(law, 3)} kappa={k!r}")


# -- 2 -------------------------------------------------------------------------

def test_c02_negative_multinomial(report):
    ps = []
    for si, w in enumerate(([1.0], [0.6, 0.4], [1.25])):
        for k in (1, 3):
            a = cli._walk_star_counts(w, k, 100_000, 20 + si)
            b = offspring_batch(k, w, 100_000, seed=(20 << 16) + 97 * si + k, method="nb")
            ps.append(chi_square_two_sample(a, b).p_value)
    ok = min(ps) > P_MIN
    assert report(2, ok, "p-values " + " ".join(f"{p:.3g}" for p in ps))


# -- 3 -------------------------------------------------------------------------

@pytest.mark.parametrize("key", ["A", "B"])
def test_c03_tree_equivalence(report, key):
    law = LAWS[key]
    w = cli._excursions((law.to_dict(), 31, 0, 100_000, 1, 10**7, 2_000_000))
    t = sample_trees(law, 1, 100_000, seed=32, full=False)
    r = chi_square_two_sample(np.column_stack([w[:, 4], w[:, 3]]), np.column_stack([t.root_children, t.Z[:, 1]]))
    assert report(3, r.p_value > P_MIN, f"ENV-{key} (children, Z1) chi2 p={r.p_value:.3g}")


# -- 4 -------------------------------------------------------------------------

@pytest.mark.parametrize("key", ["A", "B", "C"])
def test_c04_martingales(report, key):
    law = LAWS[key]
    zs = []
    for k in (1, 2, 5):
        tb = sample_trees(law, k, 100_000, seed=40 + k, max_gen=3, z_gens=3)
        for g in (1, 2, 3):
            z = tb.Z[:, g] / k
            zs.append(abs(z.mean() - 1) / (z.std(ddof=1) / math.sqrt(z.size)))
    env = EnvTree(law, 44, 0)
    W = np.zeros((100_000, 3))
    for s in range(W.shape[0]):
        env.reset(44, s)
        W[s] = [additive_martingale(env, n) for n in (1, 2, 3)]
    dev = np.abs(W.mean(0) - 1)
    se = W.std(0, ddof=1) / math.sqrt(W.shape[0])
    # ENV-C has W_n == 1 identically, so the SE is zero
    wz = np.where(se > 0, dev / np.where(se > 0, se, 1), np.where(dev < 1e-12, 0.0, np.inf))
    ok = max(zs) < 4 and wz.max() < 4
    assert report(4, ok, f"ENV-{key} max|z| Z_n/k={max(zs):.2f} W_n={wz.max():.2f}")


# -- 5 -------------------------------------------------------------------------

@pytest.mark.parametrize("key", ["A", "B", "C"])
def test_c05_tau_identity(report, key):
    env = EnvTree(LAWS[key], 50, 0)
    rng = substream(50, 5)
    good = total = cens = 0
    for s in range(10_000):
        env.reset(50, s)
        n = 1 + s % 3
        ex, _ = run_excursions(env, n, rng, max_steps=10**6)
        if ex.censored:
            cens += 1
            continue
        total += 1
        good += int(ex.tau[-1] == 2 * n + 2 * ex.local_sum)
    assert report(5, good == total, f"ENV-{key} identity on {good}/{total} uncensored runs ({cens} censored)")


# -- 6 -------------------------------------------------------------------------

@pytest.mark.parametrize("key", ["A", "B", "C"])
def test_c06_many_to_one(report, key):
    law = LAWS[key]
    zs = []
    for i, box in enumerate(default_boxes()):
        zs.append(many_to_one_check(law, box, 1_000_000, seed=60 + i).z)
        if math.isfinite(solve_kappa(law).value):
            zs.append(change_of_measure_check(law, box, 1_000_000, seed=65 + i).z)
    ok = max(zs) <= 4
    assert report(6, ok, f"ENV-{key} {len(zs)} identities, max z={max(zs):.2f}")


# -- 7 -------------------------------------------------------------------------

def test_c07_spine(report):
    law = LAWS["A"]
    tab = PijTable(law)
    sums = [float(tab.row(i)[0].sum()) for i in range(1, 11)]
    ok_a = max(abs(s - 1) for s in sums) < 1e-6
    ty, cens = first_spine_transitions(law, 100_000, seed=70, max_steps=10**6)
    ty = ty[~cens]
    probs, _ = tab.row(1)
    J = int(ty.max())
    obs = np.bincount(ty, minlength=J + 1)[1:]
    exp = np.zeros(J)
    m = min(J, probs.shape[0])
    exp[:m] = probs[:m]
    exp[-1] += max(0.0, 1.0 - exp.sum())
    cell = pooled_categories(exp * obs.sum())
    chi = chi_square_gof(np.bincount(cell, obs), np.bincount(cell, exp))
    inc = spine_increments(law, 100_000, 1, seed=71)
    ref = sample_paths(tilt(law, 1.0), 1, 100_000, substream(72))[:, 0]
    ks = ks_two_sample(inc, ref)
    ok = ok_a and chi.p_value > P_MIN and ks.p_value > P_MIN
    assert report(7, ok, f"(a) max|rowsum-1|={max(abs(s - 1) for s in sums):.1e} (b) chi2 p={chi.p_value:.3g} "
                         f"({int(cens.sum())} censored) (c) KS p={ks.p_value:.3g}")


# -- 8 -------------------------------------------------------------------------

def test_c08_w_m_tails(report):
    d = w_pairs("A", 200_000, 80)
    hw = hill(d[:, 0], smooth=4)
    hm = hill(d[:, 1], smooth=4)
    ok = abs(hw.index - 3) <= 0.3 and abs(hm.index - 3) <= 0.3
    assert report(8, ok, f"ENV-A Hill W_inf={hw.index:.3f}+-{hw.se:.3f} M_e={hm.index:.3f}+-{hm.se:.3f} "
                         f"(k={hw.k_order},{hm.k_order}; n={d.shape[0]})")


# -- 9 -------------------------------------------------------------------------

@pytest.mark.parametrize("key,target,tol", [("B", -1.0, 0.2), ("A", -1.5, 0.3)])
def test_c09_slopes(report, key, target, tol):
    fit = tail_fit(key)
    mx, cens = excursions(key)
    ok = fit is not None and abs(fit["slope"] - target) <= tol
    detail = "no fit" if fit is None else (f"slope={fit['slope']:.3f} over x in [{fit['fit_range'][0]:.0f}, "
                                           f"{fit['fit_range'][1]:.0f}] r2={fit['r2']:.3f}")
    assert report(9, ok, f"ENV-{key} {detail} target {target}+-{tol} ({int(cens.sum())} censored)")


def test_c09_moments_env_c(report):
    mx, cens = excursions("C")
    x = mx.astype(float)
    N = x.size
    rel = []
    for p in (1, 2, 3, 4):
        m = [np.mean(x[:n] ** p) for n in (N // 4, N // 2, N)]
        rel.append(max(abs(m[1] - m[0]) / m[1], abs(m[2] - m[1]) / m[2]))
    ok = all(np.isfinite(rel)) and max(rel) < 0.1
    assert report(9, ok, "ENV-C moment drift across N/4,N/2,N: " + " ".join(f"{r:.3f}" for r in rel)
                  + f" ({int(cens.sum())} censored lower bounds)")


# -- 10 ------------------------------------------------------------------------

def maxln_sample(key, n=500, num=5000, seed=100):
    t = sample_trees(LAWS[key], n, num, seed=seed, full=True, max_nodes=2_000_000)
    return t.Mstar / n, t.censored


@pytest.mark.xfail(strict=False, raises=AssertionError, reason="KS ~0.2 at n=500; the gap is nearly flat in n over 25..500")
def test_c10_env_a(report):
    x, cens = maxln_sample("A")
    M = w_pairs("A", 5000, 101)[:, 1]
    # worst case over the censored values: lower bound as recorded, or pushed to +inf
    ks = max(ks_two_sample(x, M).value, ks_two_sample(np.where(cens, np.inf, x), M).value)
    assert report(10, ks < 0.08, f"ENV-A KS(max/n, M_e)={ks:.3f} ({int(cens.sum())} censored)")


def test_c10_env_b(report):
    x, cens = maxln_sample("B")
    d = w_pairs("B", 5000, 102)
    W, M = d[:, 0], d[:, 1]
    grid = np.quantile(np.concatenate([x, M]), np.linspace(0.02, 0.98, 20))
    Fx = np.searchsorted(np.sort(x), grid, side="right") / x.size
    FM = np.searchsorted(np.sort(M), grid, side="right") / M.size
    gap = float((Fx - FM).max())
    c = tail_fit("B")["c_unit_slope"]

    def F(t, strict=False):
        below = (M < t) if strict else (M <= t)
        return np.mean(np.exp(-c * W / t) * below)

    # both CDFs jump (ties in max/n, atoms of M_e): compare right values and left limits on all jump points
    ks = 0.0
    for xs in (x, np.where(cens, np.inf, x)):
        s = np.sort(xs)
        ts = np.unique(np.concatenate([s[np.isfinite(s)], M]))
        right = np.array([abs(np.searchsorted(s, t, "right") / s.size - F(t)) for t in ts])
        left = np.array([abs(np.searchsorted(s, t, "left") / s.size - F(t, True)) for t in ts])
        # values pushed to +inf leave a gap of their mass as t -> inf, where F -> 1
        ks = max(ks, float(right.max()), float(left.max()), float(np.mean(~np.isfinite(s))))
    ok = gap <= 0.03 and ks < 0.1
    assert report(10, ok, f"ENV-B domination gap={gap:.3f} c*={c:.3f} KS(F, max/n)={ks:.3f} "
                          f"({int(cens.sum())} censored)")


# -- 11 ------------------------------------------------------------------------

@pytest.mark.xfail(strict=False, raises=AssertionError, reason="L1/M1 local slopes still steepening at 2e5 trees")
def test_c11_l1_m1_tails(report):
    tb = sample_trees(LAWS["A"], 1, 200_000, seed=110, full=False)
    hl = hill(tb.L1[tb.L1 > 0], censored=tb.censored[tb.L1 > 0])
    hm = hill(tb.M1[tb.M1 > 0], censored=tb.censored[tb.M1 > 0])
    ok = abs(hl.index - 3) <= 0.3 and abs(hm.index - 3) <= 0.4
    assert report(11, ok, f"ENV-A Hill L1={hl.index:.3f}+-{hl.se:.3f} M1={hm.index:.3f}+-{hm.se:.3f}")


# -- 12 ------------------------------------------------------------------------

@pytest.mark.parametrize("key", ["A", pytest.param("B", marks=pytest.mark.xfail(
    strict=False, raises=AssertionError, reason="estimator variance infinite: 2(1+alpha) = 2.5 exceeds kappa ~ 1.5"))])
def test_c12_moment_ratios(report, key):
    law = LAWS[key]
    alpha = (solve_kappa(law).value - 1) / 2
    r = moment_ratios(law, alpha, types=(1, 2, 4, 8), num=50_000, seed=120)
    ok = bool(np.all(r.L1 <= 3 * r.L1[0]) and np.all(r.M1 <= 3 * r.M1[0]))
    assert report(12, ok, f"ENV-{key} alpha={alpha:.3f} L1 ratios " + " ".join(f"{v:.3g}" for v in r.L1)
                  + " M1 ratios " + " ".join(f"{v:.3g}" for v in r.M1))


# -- 13 ------------------------------------------------------------------------

@pytest.mark.xfail(strict=False, raises=AssertionError, reason="K_A still doubles per doubling of A up to 32; the 20% gap is reached only near A=256")
def test_c13_ka(report):
    law = LAWS["A"]
    A = [4, 8, 16, 32]
    est = estimate_KA(law, A, 3.0, 200_000, seed=130)
    ex = [exact_KA(law, a, 3.0) for a in A]
    inc = bool(np.all(np.diff(est.K) > 0))
    rel = abs(est.K[-1] - est.K[-2]) / est.K[-1]
    assert report(13, inc and rel < 0.2, "K_A MC " + " ".join(f"{k:.1f}" for k in est.K) + " exact "
                  + " ".join(f"{k:.1f}" for k in ex) + f"; last-two relative gap {rel:.2f}")
