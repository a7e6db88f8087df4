"""Tilted one-dimensional walks of the many-to-one formula and their ladder renewal functions.

The walk S has increments -ln A drawn with probability p_b * A**t summed over
child slots; t = 1 gives S (positive drift), t = kappa gives S^(kappa)
(negative drift).  Along a typical ray of the environment the potential V
moves like S.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .law import ReproductionLaw, psi, solve_kappa
from .rng import derive_u32, substream

NORM_TOL = 1e-9


class NotNormalized(ValueError):
    """psi(exponent) differs from 1, so p_b A^t is not a probability."""
    code = "NOT_NORMALIZED"


class EpochCapExceeded(RuntimeError):
    """A ladder epoch did not close within the step cap (drift too close to zero)."""
    code = "EPOCH_CAP"


class BoxOnAtom(ValueError):
    """A face of a path box sits on a reachable value of the walk."""


@dataclass(frozen=True)
class TiltedIncrementLaw:
    values: np.ndarray
    probs: np.ndarray
    exponent: float
    name: str = ""

    @property
    def mean(self) -> float:
        return float(self.values @ self.probs)

    @property
    def atoms(self):
        return list(zip(self.values.tolist(), self.probs.tolist()))

    def mgf(self, theta: float) -> float:
        return float(self.probs @ np.exp(theta * self.values))


def tilt(law: ReproductionLaw, exponent: float) -> TiltedIncrementLaw:
    """Increment law with atoms -ln A and masses p_b A**exponent (equal values merged)."""
    s = psi(law, exponent)
    if not math.isfinite(s) or abs(s - 1.0) > NORM_TOL:
        raise NotNormalized(f"psi({exponent}) = {s!r}, not 1")
    acc: dict[float, float] = {}
    for p, A in law.atoms():
        v = -math.log(A)
        acc[v] = acc.get(v, 0.0) + p * A ** exponent
    vals = np.array(sorted(acc))
    probs = np.array([acc[v] for v in vals])
    return TiltedIncrementLaw(vals, probs / probs.sum(), float(exponent), law.name)


def tilt_kappa(law: ReproductionLaw) -> TiltedIncrementLaw:
    kap = solve_kappa(law).value
    if not math.isfinite(kap):
        raise NotNormalized(f"{law.name or 'law'} has kappa = inf; no S^(kappa)")
    return tilt(law, kap)


def sample_path(tilted: TiltedIncrementLaw, n: int, rng) -> np.ndarray:
    """S_1..S_n (S_0 = 0 is implicit); n = 0 gives an empty array."""
    if n < 0:
        raise ValueError("n must be >= 0")
    return np.cumsum(rng.choice(tilted.values, size=int(n), p=tilted.probs))


def sample_paths(tilted: TiltedIncrementLaw, n: int, num: int, rng) -> np.ndarray:
    """(num, n) array of independent paths."""
    return np.cumsum(rng.choice(tilted.values, size=(int(num), int(n)), p=tilted.probs), axis=1)


# -- path boxes ---------------------------------------------------------------

@dataclass(frozen=True)
class PathBox:
    """g(s_1..s_n) = prod_k 1{lo_k < s_k <= hi_k}."""
    name: str
    lo: tuple
    hi: tuple

    @property
    def n(self) -> int:
        return len(self.lo)

    def __call__(self, paths) -> np.ndarray:
        p = np.atleast_2d(np.asarray(paths, float))
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        return np.all((p > lo) & (p <= hi), axis=1)

    @classmethod
    def make(cls, name, n, lo=-math.inf, hi=math.inf, last_lo=None, last_hi=None):
        lo_v, hi_v = [lo] * n, [hi] * n
        if last_lo is not None:
            lo_v[-1] = last_lo
        if last_hi is not None:
            hi_v[-1] = last_hi
        return cls(name, tuple(lo_v), tuple(hi_v))


def default_boxes() -> list[PathBox]:
    return [
        PathBox.make("one(n=1)", 1),
        PathBox.make("min>-0.1(n=3)", 3, lo=-0.1),
        PathBox.make("S2 in (0.05,2](n=2)", 2, last_lo=0.05, last_hi=2.0),
        PathBox.make("min>-0.5,S4<=3(n=4)", 4, lo=-0.5, last_hi=3.0),
        PathBox.make("max<=3,S5>-1(n=5)", 5, hi=3.0, last_lo=-1.0),
    ]


def reachable(tilted: TiltedIncrementLaw, n: int) -> list[np.ndarray]:
    """Support of S_k for k = 1..n."""
    out, cur = [], np.zeros(1)
    for _ in range(n):
        cur = np.unique(np.round((cur[:, None] + tilted.values[None, :]).ravel(), 12))
        out.append(cur)
    return out


def check_box(box: PathBox, tilted: TiltedIncrementLaw, gap: float = 1e-6):
    for k, sup in enumerate(reachable(tilted, box.n)):
        for face in (box.lo[k], box.hi[k]):
            if math.isfinite(face) and np.min(np.abs(sup - face)) < gap:
                raise BoxOnAtom(f"{box.name}: face {face} at step {k + 1} hits the walk's support")


# -- many-to-one ----------------------------------------------------------------

@njit(cache=True)
def _env_side(cdf, starts, disp, n, lo, hi, num, seed, out):
    np.random.seed(seed)
    stack_d = np.empty(4096, np.int64)
    stack_v = np.empty(4096, np.float64)
    for s in range(num):
        top = 0
        stack_d[0] = 0
        stack_v[0] = 0.0
        top = 1
        cnt = 0.0
        while top > 0:
            top -= 1
            d = stack_d[top]
            v = stack_v[top]
            if d == n:
                cnt += 1.0
                continue
            r = np.random.random()
            b = 0
            while b < cdf.shape[0] - 1 and r >= cdf[b]:
                b += 1
            for j in range(starts[b], starts[b + 1]):
                w = v + disp[j]
                if w > lo[d] and w <= hi[d]:
                    if top >= stack_d.shape[0]:
                        nd = np.empty(2 * top, np.int64)
                        nv = np.empty(2 * top, np.float64)
                        nd[:top] = stack_d[:top]
                        nv[:top] = stack_v[:top]
                        stack_d, stack_v = nd, nv
                    stack_d[top] = d + 1
                    stack_v[top] = w
                    top += 1
        out[s] = cnt


def environment_side(law: ReproductionLaw, box: PathBox, num: int, rng) -> np.ndarray:
    """Per-environment values of sum_{|z|=n} g(V(z_1), .., V(z_n))."""
    cdf, starts, _, disp = law.arrays
    out = np.empty(int(num))
    _env_side(cdf, starts, disp, box.n, np.asarray(box.lo, float), np.asarray(box.hi, float),
              int(num), derive_u32(rng), out)
    return out


@dataclass(frozen=True)
class IdentityCheck:
    name: str
    lhs: float
    lhs_se: float
    rhs: float
    rhs_se: float

    @property
    def z(self) -> float:
        se = math.hypot(self.lhs_se, self.rhs_se)
        return abs(self.lhs - self.rhs) / se if se > 0 else (0.0 if self.lhs == self.rhs else math.inf)

    def agrees(self, nsig: float = 4.0) -> bool:
        return self.z <= nsig


def _mse(x):
    x = np.asarray(x, float)
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.shape[0]))


def many_to_one_check(law: ReproductionLaw, box: PathBox, num_samples: int = 10**6, seed=0,
                      chunk: int = 200_000) -> IdentityCheck:
    """E[sum_{|z|=n} g(V(z_1..z_n))] against E[e^{S_n} g(S_1..S_n)]."""
    if box.n > 5:
        raise ValueError("many-to-one check is for n <= 5")
    tl = tilt(law, 1.0)
    check_box(box, tl)
    rng = substream(seed, 0x3170)
    env_vals, walk_vals = [], []
    left = int(num_samples)
    while left > 0:
        m = min(chunk, left)
        env_vals.append(environment_side(law, box, m, rng))
        p = sample_paths(tl, box.n, m, rng)
        walk_vals.append(np.exp(p[:, -1]) * box(p))
        left -= m
    a, sa = _mse(np.concatenate(env_vals))
    b, sb = _mse(np.concatenate(walk_vals))
    return IdentityCheck(box.name, a, sa, b, sb)


def change_of_measure_check(law: ReproductionLaw, box: PathBox, num_samples: int = 10**6,
                            seed=0) -> IdentityCheck:
    """E[g(S)] against E[e^{(kappa-1) S^(kappa)_n} g(S^(kappa))]."""
    s1 = tilt(law, 1.0)
    sk = tilt_kappa(law)
    check_box(box, s1)
    rng = substream(seed, 0x3171)
    p = sample_paths(s1, box.n, num_samples, rng)
    q = sample_paths(sk, box.n, num_samples, rng)
    a, sa = _mse(box(p).astype(float))
    b, sb = _mse(np.exp((sk.exponent - 1.0) * q[:, -1]) * box(q))
    return IdentityCheck(box.name, a, sa, b, sb)


def exact_one_step(law: ReproductionLaw) -> float:
    """E[number of children], the common value of both sides for g = 1, n = 1."""
    return float(sum(p * len(b.weights) for p, b in zip(law.probs, law.branches)))


# -- ladder renewal functions ---------------------------------------------------

KINDS = ("Rs+", "Rs-", "Uw+", "Uw-")


@njit(cache=True)
def _ladder(vals, cdf, kind, grid, num, seed, floor_margin, max_steps, out, epochs):
    """kind 0: R_s^+, k < inf{k>=1: S_k <= 0}, count S_k <= x.
    kind 1: R_s^-, k < inf{k>=1: S_k >= 0}, count -S_k <= x.
    kind 2: U_w^+, k < inf{k>=1: S_k < 0},  count S_k <= x.
    kind 3: U_w^-, k < inf{k>=1: S_k > 0},  count -S_k <= x.
    Descending counts stop once S drops below -(grid max) - floor_margin."""
    np.random.seed(seed)
    G = grid.shape[0]
    hist = np.zeros(G + 1)
    xmax = grid[G - 1]
    for s in range(num):
        for g in range(G + 1):
            hist[g] = 0.0
        S = 0.0
        k = 0
        ep = -1
        while True:
            y = S if kind == 0 or kind == 2 else -S
            # smallest grid index with y <= grid[g]
            lo, hi = 0, G
            while lo < hi:
                mid = (lo + hi) // 2
                if y <= grid[mid]:
                    hi = mid
                else:
                    lo = mid + 1
            hist[lo] += 1.0
            if k >= max_steps:
                return s
            r = np.random.random()
            b = 0
            while b < cdf.shape[0] - 1 and r >= cdf[b]:
                b += 1
            S += vals[b]
            k += 1
            if kind == 0 and S <= 0.0:
                ep = k
                break
            if kind == 1 and S >= 0.0:
                ep = k
                break
            if kind == 2 and S < 0.0:
                ep = k
                break
            if kind == 3 and S > 0.0:
                ep = k
                break
            if (kind == 1 or kind == 3) and S < -xmax - floor_margin:
                break
        c = 0.0
        for g in range(G):
            c += hist[g]
            out[s, g] = c
        epochs[s] = ep
    return -1


@dataclass(frozen=True)
class LadderEstimate:
    kind: str
    grid: np.ndarray
    values: np.ndarray
    se: np.ndarray
    epochs: np.ndarray = field(repr=False)
    num_samples: int = 0

    @property
    def defective_fraction(self) -> float:
        """Share of samples whose ladder epoch never came (censored below the floor)."""
        return float(np.mean(self.epochs < 0))

    def rows(self):
        return [(float(x), float(v), float(s), self.kind) for x, v, s in zip(self.grid, self.values, self.se)]


def ladder_renewal(tilted: TiltedIncrementLaw, grid, num_samples: int = 100_000, seed=0,
                   kinds=KINDS, eps_floor: float = 1e-6, max_steps: int = 10**7) -> dict[str, LadderEstimate]:
    """Monte Carlo renewal functions R_s^+/-, U_w^+/- of a negative-drift walk on ``grid``.

    The descending ones sum over a possibly infinite epoch; paths are cut once S
    falls h below -max(grid), where h = ln(1/eps_floor)/theta and theta > 0 solves
    E[e^{theta S_1}] = 1, so a cut path re-enters the counted window with chance <= eps_floor.
    """
    if tilted.mean >= 0:
        raise ValueError("ladder_renewal needs a walk with negative drift")
    grid = np.asarray(grid, float)
    if grid.ndim != 1 or grid.size == 0 or np.any(np.diff(grid) <= 0) or grid[0] < 0:
        raise ValueError("grid must be non-empty, increasing and >= 0")
    theta = _cramer_root(tilted)
    margin = math.log(1.0 / eps_floor) / theta
    cdf = np.cumsum(tilted.probs)
    cdf[-1] = 1.0
    rng = substream(seed, 0x1add)
    res = {}
    for kind in kinds:
        code = KINDS.index(kind)
        out = np.zeros((int(num_samples), grid.size))
        ep = np.zeros(int(num_samples), np.int64)
        bad = _ladder(tilted.values, cdf, code, grid, int(num_samples), derive_u32(rng), margin,
                      int(max_steps), out, ep)
        if bad >= 0:
            raise EpochCapExceeded(f"{kind}: sample {bad} ran past {max_steps} steps")
        res[kind] = LadderEstimate(kind, grid, out.mean(axis=0),
                                   out.std(axis=0, ddof=1) / math.sqrt(num_samples), ep, int(num_samples))
    return res


def _cramer_root(tilted: TiltedIncrementLaw) -> float:
    """theta > 0 with E[e^{theta S_1}] = 1 (for S^(kappa) this is kappa - 1)."""
    from scipy.optimize import brentq
    if tilted.values.max() <= 0:
        return math.inf
    hi = 1.0
    while tilted.mgf(hi) < 1.0:
        hi *= 2.0
    return brentq(lambda t: tilted.mgf(t) - 1.0, 1e-12 if tilted.mgf(1e-12) < 1 else hi / 2, hi)


def ladder_rows(estimates: dict[str, LadderEstimate]):
    rows = []
    for est in estimates.values():
        rows.extend(est.rows())
    return rows
