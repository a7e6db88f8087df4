"""Size-biased spine: the type chain p_{i,j}, Q* spined environments, killed-walk
reconstruction of the spined local-time tree, and spine hitting quantities.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.special import gammaln, logsumexp

from . import _kernels as K
from .env import EnvTree, NodeBudgetExceeded
from .law import ReproductionLaw
from .ltgw import BetaTree
from .rng import derive_u32, seed_numba, substream

TAIL_TOL = 1e-9


class OverflowGuard(ValueError):
    """i + j beyond the configured safe bound for p_{i,j}."""


class TailMassError(ValueError):
    """A table row's truncation tail exceeds the sampler tolerance."""


class SpineTooShort(RuntimeError):
    """The spine ended before the requested hitting event."""


def _atoms(law: ReproductionLaw):
    p = np.array([pa for pa, _ in law.atoms()])
    A = np.array([w for _, w in law.atoms()])
    return p, A


def _log_terms(p, A, i, j):
    """log of p_b * C(i+j-1, i) * A^j / (1+A)^(i+j), per atom, vectorised in j."""
    j = np.asarray(j, float)
    lc = gammaln(i + j) - gammaln(i + 1.0) - gammaln(j)
    return (lc[None, :] + np.log(p)[:, None] + np.outer(np.log(A), j)
            - np.outer(np.log1p(A), i + j))


def compute_pij(law: ReproductionLaw, i: int, j: int, guard: int = 10_000) -> float:
    """Spine chain kernel p_{i,j} = C(i+j-1, i) sum_b p_b sum_u A_u^j / (1+A_u)^(i+j)."""
    if i < 1 or j < 1:
        raise ValueError("i, j: types on the spine are >= 1")
    if i + j > guard:
        raise OverflowGuard(f"i + j = {i + j} exceeds guard {guard}")
    p, A = _atoms(law)
    return float(np.exp(logsumexp(_log_terms(p, A, i, [j]))))


@dataclass
class PijTable:
    """Rows p_{i,1..J} with J chosen so the geometric tail bound is below ``tail_tol``."""

    law: ReproductionLaw
    tail_tol: float = TAIL_TOL
    j_cap: int = 10_000
    _rows: dict = field(default_factory=dict, repr=False)

    def row(self, i: int):
        """(probabilities for j = 1..J, tail bound on sum_{j>J})."""
        if i not in self._rows:
            self._rows[i] = self._build(i)
        return self._rows[i]

    def _build(self, i):
        p, A = _atoms(self.law)
        x = A / (1 + A)
        J = 16
        while True:
            lt = _log_terms(p, A, i, np.arange(1, J + 1))
            terms = np.exp(lt)
            ratio = (i + J) / J * x
            last = terms[:, -1]
            if np.all(ratio < 1):
                tail = float(np.sum(last * ratio / (1 - ratio)))
                if tail < self.tail_tol or J >= self.j_cap:
                    return terms.sum(axis=0), tail
            elif J >= self.j_cap:
                return terms.sum(axis=0), math.inf
            J = min(2 * J, self.j_cap)

    def __getitem__(self, ij):
        i, j = ij
        probs, _ = self.row(i)
        return float(probs[j - 1]) if j <= probs.shape[0] else compute_pij(self.law, i, j)

    def dense(self, i_max: int):
        """CDF matrix for rows 1..i_max padded to a common width, plus row tail bounds."""
        rows = [self.row(i) for i in range(1, i_max + 1)]
        J = max(r[0].shape[0] for r in rows)
        cdf = np.ones((i_max + 1, J))
        for i, (probs, _) in enumerate(rows, start=1):
            c = np.cumsum(probs)
            cdf[i, :c.shape[0]] = c
            cdf[i, c.shape[0]:] = c[-1]
        return cdf, np.array([0.0] + [r[1] for r in rows])


def sample_spine_chain(table: PijTable, start: int, steps: int, rng: np.random.Generator,
                       tol: float = TAIL_TOL) -> np.ndarray:
    """Types beta(w_0..w_steps) of the spine chain started at ``start``."""
    out = np.empty(steps + 1, dtype=np.int64)
    out[0] = start
    i = start
    for k in range(1, steps + 1):
        probs, tail = table.row(i)
        if tail > tol:
            raise TailMassError(f"row {i}: tail bound {tail:.2e} > {tol:.0e}")
        c = np.cumsum(probs)
        j = int(np.searchsorted(c, rng.random() * c[-1], side="right")) + 1
        i = min(j, probs.shape[0])
        out[k] = i
    return out


# -- K_A from the chain -------------------------------------------------------

@njit(cache=True)
def _chain_hits(cdf, A_list, num, seed, max_steps, hit, overshoot, tau):
    np.random.seed(seed)
    imax = cdf.shape[0] - 1
    J = cdf.shape[1]
    amax = A_list.max()
    nA = A_list.shape[0]
    for s in range(num):
        for a in range(nA):
            hit[s, a] = False
            overshoot[s, a] = 0
        i = 1
        k = 0
        done = False
        while not done:
            k += 1
            if k > max_steps:
                tau[s] = -1
                break
            u = np.random.random() * cdf[i, J - 1]
            lo = 0
            hi = J - 1
            while lo < hi:
                m = (lo + hi) >> 1
                if cdf[i, m] > u:
                    hi = m
                else:
                    lo = m + 1
            j = lo + 1
            if j == 1:
                tau[s] = k
                done = True
                break
            for a in range(nA):
                if not hit[s, a] and j > A_list[a]:
                    hit[s, a] = True
                    overshoot[s, a] = j
            if j > amax:
                tau[s] = -2
                done = True
                break
            if j > imax:
                tau[s] = -1
                break
            i = j


@dataclass(frozen=True)
class KAEstimate:
    A: np.ndarray
    K: np.ndarray
    se: np.ndarray
    hit_fraction: np.ndarray
    num: int


def estimate_KA(law: ReproductionLaw, A_list, kappa: float, num: int, seed=0,
                table: PijTable | None = None) -> KAEstimate:
    """Monte Carlo K_A = E*_1[(beta(w_sigma_A) - 1)^(kappa-1); sigma_A < tau_hat_1]
    along the spine chain, for every A in ``A_list`` from the same paths."""
    A_arr = np.asarray(sorted(A_list), dtype=np.int64)
    table = table or PijTable(law)
    cdf, tails = table.dense(int(A_arr.max()))
    if tails.max() > TAIL_TOL:
        raise TailMassError(f"row tail bound {tails.max():.2e} too loose")
    hit = np.zeros((num, A_arr.shape[0]), dtype=np.bool_)
    over = np.zeros((num, A_arr.shape[0]), dtype=np.int64)
    tau = np.zeros(num, dtype=np.int64)
    _chain_hits(cdf, A_arr, int(num), derive_u32(substream(seed, 0x5B1)), 10**7, hit, over, tau)
    if np.any(tau == -1):
        raise SpineTooShort("chain path hit the step cap")
    vals = np.where(hit, np.maximum(over - 1, 0).astype(float) ** (kappa - 1.0), 0.0)
    return KAEstimate(A_arr, vals.mean(axis=0), vals.std(axis=0, ddof=1) / math.sqrt(num),
                      hit.mean(axis=0), int(num))


def exact_KA(law: ReproductionLaw, A: int, kappa: float, tol: float = 1e-14) -> float:
    """K_A by a linear solve over states 2..A of the chain killed at state 1."""
    p, Aw = _atoms(law)
    x = Aw / (1 + Aw)

    def row(i):
        # J must exceed A, and the tail is judged against the overshoot mass beyond A
        J = max(64, 2 * A)
        while True:
            terms = np.exp(_log_terms(p, Aw, i, np.arange(1, J + 1))).sum(axis=0)
            js = np.arange(1, J + 1)
            ratio = (i + J) / J * x.max() * (J / (J - 1.0)) ** max(kappa - 1, 0)
            w = terms * np.maximum(js - 1, 0).astype(float) ** (kappa - 1)
            if ratio < 1 and w[-1] * ratio / (1 - ratio) < tol * max(w[A:].sum(), 1e-300):
                return terms, w
            J *= 2

    n = A - 1
    P = np.zeros((n, n))
    r = np.zeros(n)
    for i in range(2, A + 1):
        probs, w = row(i)
        P[i - 2, :] = probs[1:A]
        r[i - 2] = w[A:].sum()
    h = np.linalg.solve(np.eye(n) - P, r) if n > 0 else np.zeros(0)
    probs, w = row(1)
    return float(w[A:].sum() + probs[1:A] @ h)


# -- Q* spined environments ------------------------------------------------------

@dataclass
class SpinedEnv:
    env: EnvTree
    spine: list
    increments: list
    rng: np.random.Generator = field(repr=False)

    @property
    def frontier(self) -> int:
        return self.spine[-1]

    def extend(self, depth: int):
        """Grow the spine (under the size-biased law) until it has ``depth`` + 1 vertices."""
        law = self.env.law
        probs = law.probs
        cdf, starts, weights, disp = law.arrays
        Wb = np.add.reduceat(weights, starts[:-1])
        pb = probs * Wb
        pb /= pb.sum()
        while len(self.spine) <= depth:
            u = self.spine[-1]
            b = int(self.rng.choice(pb.shape[0], p=pb))
            while K.expand_branch(law.arrays, self.env.arrays(), u, b) == K.FULL:
                self.env.grow()
            ws = weights[starts[b]:starts[b + 1]]
            c = int(self.rng.choice(ws.shape[0], p=ws / ws.sum()))
            child = int(self.env.first[u]) + c
            self.spine.append(child)
            self.increments.append(float(disp[starts[b] + c]))
        return self


def sample_qstar_env(law: ReproductionLaw, depth: int, seed=0, stream: int = 0,
                     max_nodes: int = 5_000_000, env: EnvTree | None = None) -> SpinedEnv:
    """Environment with a marked spine w_0..w_depth under Q*.

    Spine vertices reproduce by the W-size-biased law and pass the spine to a
    child chosen proportionally to its weight; off-spine vertices follow the
    plain law through the environment hash.
    """
    if env is None:
        env = EnvTree(law, seed, stream, max_nodes=max_nodes)
    else:
        env.reset(seed, stream)
    rng = substream(seed, stream, 0x5D1)
    return SpinedEnv(env, [0], [], rng).extend(depth)


@dataclass
class SpinedBetaTree:
    tree: BetaTree
    spine: np.ndarray
    spine_types: np.ndarray
    complete_depth: int
    tau_hat_1: int
    censored: bool = False


def _run_killed(sp: SpinedEnv, start: int, kill: int, max_steps: int):
    env = sp.env
    st = np.array([start, 0], dtype=np.int64)
    while True:
        status = K.killed_walk(env.law.arrays, env.arrays(), st, kill, sp.frontier, max_steps)
        if status == K.OK:
            return True
        if status == K.FRONTIER:
            sp.extend(len(sp.spine))
            continue
        if status == K.FULL:
            env.grow()
            continue
        return False


def killed_walk_beta(sp: SpinedEnv, generations: int | None = None, until_return: bool = True,
                     seed=0, max_steps: int = 10**8, max_spine: int = 100_000) -> SpinedBetaTree:
    """Types from two families of killed walks plus the spine indicator.

    The walk started at w_i is killed on reaching w_{i-1}; for i = 0 the kill
    site is the root's artificial parent.  Walks are added spine level by
    level: ``generations=g`` runs i = 0..g-1, which fixes every type down to
    generation g; ``until_return`` keeps going until the spine type returns to 1.
    """
    env = sp.env
    env.lt[:env.n_nodes] = 0
    seed_numba(derive_u32(substream(seed, 0x5D2)))
    censored = False
    tau_hat = -1
    i = 0
    target = generations if generations is not None else max_spine
    while i < target:
        if len(sp.spine) <= i + 1:
            sp.extend(i + 1)
        start = sp.spine[i]
        kill = sp.spine[i - 1] if i > 0 else -1
        try:
            ok = _run_killed(sp, start, kill, max_steps) and _run_killed(sp, start, kill, max_steps)
        except NodeBudgetExceeded:
            ok = False
        if not ok:
            censored = True
            break
        i += 1
        if tau_hat < 0 and int(env.lt[sp.spine[i]]) == 0:
            tau_hat = i
            if until_return and generations is None:
                break
    if generations is None and tau_hat < 0 and not censored:
        censored = True
    depth = i
    spine = np.asarray(sp.spine[:depth + 1], dtype=np.int64)
    m = env.n_nodes
    beta = env.lt[:m].astype(np.int64).copy()
    beta[np.asarray(sp.spine, dtype=np.int64)] += 1
    par = env.parent[:m]
    keep = np.zeros(m, dtype=bool)
    keep[0] = True
    keep[1:] = (beta[np.maximum(par[1:], 0)] > 0) & (env.depth[:m][1:] <= depth)
    idx = np.nonzero(keep)[0]
    remap = np.full(m, -1, dtype=np.int64)
    remap[idx] = np.arange(idx.shape[0])
    parent = np.where(par[idx] >= 0, remap[np.maximum(par[idx], 0)], -1)
    tree = BetaTree(parent, env.depth[idx].copy(), beta[idx], 1, censored, env.V[idx].copy(),
                    remap[spine])
    return SpinedBetaTree(tree, spine, beta[spine], depth, tau_hat, censored)


@dataclass(frozen=True)
class HitRecord:
    tau_hat_1: int
    sigma_A: int
    beta_sigma: int
    hit: bool


def spine_hitting(types, A: int) -> HitRecord:
    """tau_hat_1 = min{k>=1: type 1}, sigma_A = min{k>=0: type > A}, and beta(w_sigma) - 1."""
    t = np.asarray(types.spine_types if isinstance(types, SpinedBetaTree) else types)
    ones = np.nonzero(t[1:] == 1)[0]
    if ones.size == 0:
        raise SpineTooShort("spine ended before returning to type 1")
    tau = int(ones[0]) + 1
    over = np.nonzero(t > A)[0]
    sigma = int(over[0]) if over.size else -1
    hit = 0 <= sigma < tau
    return HitRecord(tau, sigma, int(t[sigma]) - 1 if hit else 0, bool(hit))


def qstar_first_generation(law: ReproductionLaw, num: int, seed=0):
    """(branch index, spine child slot) of the root under Q*, ``num`` draws."""
    rng = substream(seed, 0x5D3)
    cdf, starts, weights, _ = law.arrays
    Wb = np.add.reduceat(weights, starts[:-1])
    pb = law.probs * Wb
    b = rng.choice(pb.shape[0], size=num, p=pb / pb.sum())
    u = rng.random(num)
    slot = np.empty(num, dtype=np.int64)
    for bb in np.unique(b):
        ws = weights[starts[bb]:starts[bb + 1]]
        c = np.cumsum(ws / ws.sum())
        m = b == bb
        slot[m] = np.minimum(np.searchsorted(c, u[m], side="right"), ws.shape[0] - 1)
    return b, slot


def first_spine_transitions(law: ReproductionLaw, num: int, seed=0, max_steps: int = 10**7,
                            max_nodes: int = 5_000_000):
    """beta(w_1) for ``num`` independent Q* environments (the spine chain's step from type 1).

    Returns (types, censored); censored entries hit the step or node cap and hold -1.
    """
    out = np.full(int(num), -1, dtype=np.int64)
    cens = np.zeros(int(num), dtype=bool)
    env = EnvTree(law, seed, 0, max_nodes=max_nodes)
    for s in range(int(num)):
        sp = sample_qstar_env(law, 1, seed, s, env=env)
        r = killed_walk_beta(sp, generations=1, seed=(int(seed) << 20) ^ s, max_steps=max_steps)
        if r.censored:
            cens[s] = True
        else:
            out[s] = int(r.spine_types[1])
    return out, cens


def spine_increments(law: ReproductionLaw, num: int, depth: int = 1, seed=0) -> np.ndarray:
    """V(w_k) - V(w_{k-1}) read off ``num`` Q* environments, k = 1..depth, flattened."""
    out = []
    for s in range(num):
        sp = sample_qstar_env(law, depth, seed, s, max_nodes=10 * depth * law.max_children + 16)
        out.extend(sp.increments[:depth])
    return np.asarray(out)


def write_pij_csv(path, table: PijTable, i_max: int, j_max: int):
    from ._io import write_csv
    rows = []
    for i in range(1, i_max + 1):
        probs, tail = table.row(i)
        for j in range(1, j_max + 1):
            rows.append((i, j, table[i, j], tail))
    write_csv(path, ["i", "j", "p_ij", "row_tail_bound"], rows,
              notes=["p_ij: spine type-chain transition probability (dimensionless)",
                     "row_tail_bound: bound on the mass beyond the tabulated j of row i"])
