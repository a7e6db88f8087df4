"""Heavy-tail estimation, two-sample comparisons and censor-aware survival curves."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps


class TooFewSamples(ValueError):
    """Not enough (distinct, uncensored) observations for the requested fit."""


class RangeEmpty(ValueError):
    """No usable grid points in the requested fit range."""


@dataclass(frozen=True)
class TailEstimate:
    index: float
    se: float
    constant: float
    k_order: int
    censored_fraction: float
    fit_range: tuple[float, float]
    method: str = "hill"
    plateau: bool = True
    status: str = "OK"


@dataclass(frozen=True)
class TwoSampleResult:
    kind: str
    value: float
    p_value: float
    sizes: tuple[int, ...]


def _upper_order(samples, censored=None):
    x = np.asarray(samples, dtype=float)
    if censored is None:
        censored = np.zeros(x.shape[0], dtype=bool)
    censored = np.asarray(censored, dtype=bool)
    keep = np.isfinite(x) & (x > 0)
    x, censored = x[keep], censored[keep]
    order = np.argsort(-x, kind="stable")
    return x[order], censored[order]


def hill_path(samples) -> np.ndarray:
    """H_k = mean of log(x_(i) / x_(k+1)) over the top k, for k = 1..n-1."""
    x, _ = _upper_order(samples)
    lx = np.log(x)
    k = np.arange(1, x.shape[0])
    return np.cumsum(lx)[:-1] / k - lx[1:]


def hill(samples, k_order: int | None = None, censored=None, smooth: float | None = None) -> TailEstimate:
    """Hill estimate of the tail index from the top ``k_order`` order statistics.

    Right-censored values are lower bounds; they take part in the ranking, and
    the index counts only uncensored exceedances (the censored-Pareto MLE).
    ``smooth=u`` averages H over orders k/sqrt(u) .. k*sqrt(u), which irons out
    the log-periodic wobble of near-lattice data.  SE is index / sqrt(k).
    """
    x, cens = _upper_order(samples, censored)
    n = x.shape[0]
    if k_order is None:
        k_order = int(math.floor(n ** (2.0 / 3.0)))
    k = int(k_order)
    if k < 2 or n < 10 * k:
        raise TooFewSamples(f"need >= {10 * k} samples for k={k}, got {n}")
    if x[0] == x[-1] or np.unique(x[:k + 1]).shape[0] < 2:
        raise TooFewSamples("too few distinct order statistics")
    lx = np.log(x)
    if smooth is None:
        H = lx[:k].sum() / k - lx[k]
        hits = k - int(cens[:k].sum())
        if H <= 0:
            raise TooFewSamples("top order statistics are tied")
        alpha = hits / (k * H)
        lo_k, hi_k = k, k
        method = "hill"
    else:
        if censored is not None and cens.any():
            raise ValueError("smoothed Hill does not take censored samples")
        lo_k = max(2, int(k / math.sqrt(smooth)))
        hi_k = min(n - 2, int(k * math.sqrt(smooth)))
        Hs = (np.cumsum(lx)[:-1] / np.arange(1, n) - lx[1:])[lo_k - 1:hi_k]
        H = float(Hs.mean())
        alpha = 1.0 / H
        method = f"smoothed-hill(u={smooth:g})"
    thr = x[k]
    const = (k / n) * thr ** alpha
    return TailEstimate(float(alpha), float(alpha / math.sqrt(k)), float(const), k,
                        float(cens.mean()), (float(x[hi_k]), float(x[0])), method)


def plateau_scan(samples, grid: int = 20, window: int = 5, tol: float = 0.1, smooth: float | None = None):
    """Hill estimates over k in [n^(1/2), n^(4/5)]; returns (TailEstimate of the most
    stable window, ks, estimates).  Status NO_PLATEAU when no window is stable to ``tol``."""
    x, _ = _upper_order(samples)
    n = x.shape[0]
    lo, hi = math.sqrt(n), n ** 0.8
    ks = np.unique(np.geomspace(lo, hi, grid).astype(int))
    ks = ks[(ks >= 2) & (10 * ks <= n)]
    if ks.shape[0] < window:
        raise TooFewSamples(f"plateau scan needs more samples than {n}")
    est = np.array([hill(x, int(k), smooth=smooth).index for k in ks])
    best, best_i = math.inf, 0
    for i in range(ks.shape[0] - window + 1):
        w = est[i:i + window]
        spread = (w.max() - w.min()) / np.median(w)
        if spread < best:
            best, best_i = spread, i
    mid = int(ks[best_i + window // 2])
    centre = hill(x, mid, smooth=smooth)
    ok = best <= tol
    res = TailEstimate(centre.index, centre.se, centre.constant, mid, 0.0,
                       (float(ks[best_i]), float(ks[best_i + window - 1])), centre.method, ok,
                       "OK" if ok else "NO_PLATEAU")
    return res, ks, est


def loglog_fit(x, survival, counts=None, fit_range=None, min_points: int = 5, min_count: int = 100):
    """Least squares of ln S on ln x over ``fit_range``; returns (slope, intercept, r2).

    Points need S > 0 and, when ``counts`` is given, at least ``min_count`` exceedances.
    """
    x = np.asarray(x, float)
    s = np.asarray(survival, float)
    m = (x > 0) & (s > 0)
    if counts is not None:
        m &= np.asarray(counts) >= min_count
    if fit_range is not None:
        m &= (x >= fit_range[0]) & (x <= fit_range[1])
    if m.sum() < min_points:
        raise RangeEmpty(f"only {int(m.sum())} usable grid points (need {min_points})")
    lx, ls = np.log(x[m]), np.log(s[m])
    fit = sps.linregress(lx, ls)
    return float(fit.slope), float(fit.intercept), float(fit.rvalue ** 2)


def survival_curve(samples, grid, censored=None):
    """Kaplan-Meier estimate of P(X >= g) on ``grid``; censored values are lower bounds.

    Returns (S, at_risk counts) where counts give the number of observations >= g.
    """
    x = np.asarray(samples, float)
    if x.size == 0:
        raise ValueError("samples: empty")
    grid = np.asarray(grid, float)
    cens = np.zeros(x.shape[0], bool) if censored is None else np.asarray(censored, bool)
    if not cens.any():
        xs = np.sort(x)
        ge = x.shape[0] - np.searchsorted(xs, grid, side="left")
        return ge / x.shape[0], ge
    # product-limit over distinct event values
    ev = np.sort(np.unique(x[~cens]))
    xs = np.sort(x)
    risk = x.shape[0] - np.searchsorted(xs, ev, side="left")
    d = np.array([np.sum((x == v) & ~cens) for v in ev])
    factors = 1.0 - d / risk
    surv_after = np.cumprod(factors)
    # P(X >= g) = product over events strictly below g
    idx = np.searchsorted(ev, grid, side="left")
    S = np.where(idx > 0, surv_after[np.maximum(idx - 1, 0)], 1.0)
    ge = x.shape[0] - np.searchsorted(xs, grid, side="left")
    return S, ge


def ks_two_sample(a, b) -> TwoSampleResult:
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.size == 0 or b.size == 0:
        raise ValueError("ks_two_sample: empty sample")
    r = sps.ks_2samp(a, b)
    return TwoSampleResult("KS", float(r.statistic), float(r.pvalue), (a.size, b.size))


def ks_censored_bounds(x, censored, ref):
    """Sup-distance between the ECDF of ``ref`` and the set of ECDFs consistent with
    right-censored ``x``.  Returns (best case, worst case) KS distances."""
    x = np.asarray(x, float)
    cens = np.asarray(censored, bool)
    ref = np.sort(np.asarray(ref, float))
    pts = np.unique(np.concatenate([x, ref]))
    n = x.shape[0]
    xu = np.sort(x[~cens])
    xc = np.sort(x[cens])
    f_lo = np.searchsorted(xu, pts, side="right") / n
    f_hi = f_lo + np.searchsorted(xc, pts, side="right") / n
    g = np.searchsorted(ref, pts, side="right") / ref.shape[0]
    best = np.maximum(np.maximum(f_lo - g, g - f_hi), 0.0).max()
    worst = np.maximum(np.abs(f_lo - g), np.abs(f_hi - g)).max()
    return float(best), float(worst)


def chi_square_gof(observed, expected, ddof: int = 0) -> TwoSampleResult:
    """Pearson goodness of fit; ``expected`` is rescaled to the observed total."""
    o = np.asarray(observed, float)
    e = np.asarray(expected, float)
    if o.size == 0:
        raise ValueError("chi_square_gof: empty input")
    e = e * (o.sum() / e.sum())
    r = sps.chisquare(o, e, ddof=ddof)
    return TwoSampleResult("chi-square", float(r.statistic), float(r.pvalue), (int(o.sum()),))


def pooled_categories(expected, min_expected: float = 5.0) -> np.ndarray:
    """Map from category to pooled cell so each cell has expected count >= min_expected.

    Categories are merged in order; the tail cell absorbs any remainder.
    """
    e = np.asarray(expected, float)
    cell = np.zeros(e.shape[0], dtype=np.int64)
    c, acc = 0, 0.0
    for i, v in enumerate(e):
        cell[i] = c
        acc += v
        if acc >= min_expected:
            c += 1
            acc = 0.0
    if acc < min_expected and c > 0:
        cell[cell == c] = c - 1
    return cell


def chi_square_two_sample(a, b, min_expected: float = 5.0) -> TwoSampleResult:
    """Homogeneity test for two samples of hashable labels (ints or tuples).

    Labels are ordered by pooled frequency and rare ones merged into cells.
    """
    la = [tuple(np.atleast_1d(v)) for v in a] if np.ndim(a) > 1 else list(np.asarray(a).tolist())
    lb = [tuple(np.atleast_1d(v)) for v in b] if np.ndim(b) > 1 else list(np.asarray(b).tolist())
    if not la or not lb:
        raise ValueError("chi_square_two_sample: empty sample")
    labels = sorted(set(la) | set(lb))
    pos = {v: i for i, v in enumerate(labels)}
    ca = np.bincount([pos[v] for v in la], minlength=len(labels)).astype(float)
    cb = np.bincount([pos[v] for v in lb], minlength=len(labels)).astype(float)
    tot = ca + cb
    order = np.argsort(-tot, kind="stable")
    na, nb = ca.sum(), cb.sum()
    exp_min = np.minimum(tot * na, tot * nb) / (na + nb)
    cell = pooled_categories(exp_min[order], min_expected)
    k = cell.max() + 1
    A = np.bincount(cell, weights=ca[order], minlength=k)
    B = np.bincount(cell, weights=cb[order], minlength=k)
    if k < 2:
        return TwoSampleResult("chi-square", 0.0, 1.0, (int(na), int(nb)))
    stat, p, _, _ = sps.chi2_contingency(np.vstack([A, B]), correction=False)
    return TwoSampleResult("chi-square", float(stat), float(p), (int(na), int(nb)))


def mean_se(x):
    x = np.asarray(x, float)
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.shape[0]))
