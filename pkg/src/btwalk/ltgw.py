"""Multi-type Galton-Watson trees of edge local times.

Under the annealed law with root type k, a vertex of type i draws an
environment branch and gives its children negative multinomial types with
parameters i and A_j / (1 + sum A).  The stopping line L1 collects the first
type-1 vertices below the root whose strict ancestors (root excluded) all have
type >= 2.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import _kernels as K
from .law import ReproductionLaw
from .rng import derive_u64, substream

NO_MAXGEN = 1 << 40


class DrawCapExceeded(RuntimeError):
    """Urn sampler needed more categorical draws than allowed."""


@dataclass
class BetaTree:
    """Arena of typed vertices; parents precede their children."""

    parent: np.ndarray
    depth: np.ndarray
    beta: np.ndarray
    root_type: int
    censored: bool = False
    V: np.ndarray | None = None
    spine: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return int(self.beta.shape[0])

    def Z(self, n: int) -> int:
        """Sum of types in generation n (exact only above the censoring frontier)."""
        return int(self.beta[self.depth == n].sum())

    def generation_sums(self) -> np.ndarray:
        return np.bincount(self.depth, weights=self.beta).astype(np.int64)

    def children(self, u: int) -> np.ndarray:
        return np.nonzero(self.parent == u)[0]


@dataclass(frozen=True)
class StoppingLineStats:
    L1: int
    M1: int
    Mstar: int
    line_members: np.ndarray = field(repr=False)
    censored: bool = False
    subtree_max: np.ndarray | None = field(default=None, repr=False)


# -- offspring -----------------------------------------------------------------

def offspring_counts(i: int, weights, rng: np.random.Generator, method: str = "urn",
                     draw_cap: int = 10**8) -> np.ndarray:
    """Children types of a type-i vertex on a fixed branch with relative weights ``weights``.

    ``urn`` replays the walk at the vertex: each visit exits (weight 1) or
    enters child j (weight A_j) until the i-th exit.  ``nb`` draws the total
    from NegBin(i, 1/(1+sum A)) and splits it multinomially.
    """
    a = np.asarray(weights, dtype=float)
    out = np.zeros(a.shape[0], dtype=np.int64)
    if i == 0:
        return out
    if method == "nb":
        s = a.sum()
        total = rng.negative_binomial(i, 1.0 / (1.0 + s))
        return rng.multinomial(total, a / s).astype(np.int64)
    if method != "urn":
        raise ValueError(f"method: unknown sampler {method!r}")
    p = np.concatenate(([1.0], a))
    p /= p.sum()
    exits = draws = 0
    while exits < i:
        batch = rng.choice(p.shape[0], size=max(16, 2 * (i - exits)), p=p)
        for x in batch:
            draws += 1
            if x == 0:
                exits += 1
                if exits == i:
                    break
            else:
                out[x - 1] += 1
        if draws > draw_cap:
            raise DrawCapExceeded(f"more than {draw_cap} urn draws for type {i}")
    return out


def sample_offspring(i: int, law: ReproductionLaw, rng: np.random.Generator, method: str = "urn"):
    """(branch index, children types) for a vertex of type i under the annealed law."""
    cdf, starts, weights, _ = law.arrays
    b = int(np.searchsorted(cdf, rng.random(), side="right"))
    b = min(b, cdf.shape[0] - 1)
    return b, offspring_counts(i, weights[starts[b]:starts[b + 1]], rng, method)


@njit(cache=True)
def _urn(i, a, f, k, asum, out, draw_cap):
    for j in range(k):
        out[j] = 0
    exits = 0
    draws = 0
    while exits < i:
        r = np.random.random() * (1.0 + asum)
        draws += 1
        if r < 1.0:
            exits += 1
        else:
            r -= 1.0
            j = 0
            while j < k - 1 and r >= a[f + j]:
                r -= a[f + j]
                j += 1
            out[j] += 1
        if draws > draw_cap:
            return -1
    return draws


@njit(cache=True)
def _offspring_batch(i, a, num, seed, use_urn, draw_cap, out):
    np.random.seed(seed)
    k = a.shape[0]
    asum = a.sum()
    buf = np.zeros(k, dtype=np.int64)
    for s in range(num):
        if use_urn:
            if _urn(i, a, 0, k, asum, buf, draw_cap) < 0:
                return False
        else:
            K.nb_split(i, a, 0, k, asum, buf)
        for j in range(k):
            out[s, j] = buf[j]
    return True


def offspring_batch(i: int, weights, num: int, seed=0, method: str = "urn",
                    draw_cap: int = 10**8) -> np.ndarray:
    """``num`` i.i.d. offspring vectors on one fixed branch; shape (num, len(weights))."""
    a = np.asarray(weights, dtype=float)
    out = np.zeros((num, a.shape[0]), dtype=np.int64)
    if not _offspring_batch(int(i), a, int(num), _seed32(seed, 0x0FF5), method == "urn",
                            draw_cap, out):
        raise DrawCapExceeded(f"more than {draw_cap} urn draws for type {i}")
    return out


def _seed32(seed, *keys) -> int:
    return int(derive_u64(seed, *keys) >> np.uint64(32))


# -- tree growth ---------------------------------------------------------------

@njit(cache=True)
def _enlarge(x, size):
    y = np.zeros(size, dtype=x.dtype)
    y[:x.shape[0]] = x
    return y


@njit(cache=True)
def _grow_tree(Lw, k, parent, depth, beta, cond, maxgen, max_nodes, stop_line, buf):
    """Breadth-first growth; returns (status, n, deep, arrays...).

    status FULL means the node cap stopped growth (statistics are lower bounds);
    ``deep`` reports that some positive vertex sat at generation maxgen.
    """
    cdf, starts, weights, disp = Lw
    parent[0] = -1
    depth[0] = 0
    beta[0] = k
    cond[0] = 1
    n = 1
    head = 0
    deep = False
    while head < n:
        u = head
        head += 1
        t = beta[u]
        if t == 0:
            continue
        if stop_line and u != 0 and t == 1:
            continue
        if depth[u] >= maxgen:
            deep = True
            continue
        b = K.pick_branch(cdf, np.random.random())
        s = starts[b]
        c = starts[b + 1] - s
        if n + c > parent.shape[0]:
            size = min(2 * parent.shape[0], max_nodes)
            if n + c > size:
                return K.FULL, n, deep, parent, depth, beta, cond
            parent = _enlarge(parent, size)
            depth = _enlarge(depth, size)
            beta = _enlarge(beta, size)
            cond = _enlarge(cond, size)
        asum = 0.0
        for j in range(c):
            asum += weights[s + j]
        K.nb_split(t, weights, s, c, asum, buf)
        cu = 1 if (cond[u] == 1 and (u == 0 or t >= 2)) else 0
        for j in range(c):
            v = n + j
            parent[v] = u
            depth[v] = depth[u] + 1
            beta[v] = buf[j]
            cond[v] = cu
        n += c
    return K.OK, n, deep, parent, depth, beta, cond


@njit(cache=True)
def _cond_pass(parent, beta, n, cond):
    cond[0] = 1
    for v in range(1, n):
        p = parent[v]
        cond[v] = 1 if (cond[p] == 1 and (p == 0 or beta[p] >= 2)) else 0


@njit(cache=True)
def _line_stats(parent, beta, cond, n, sub):
    L1 = 0
    M1 = 0
    Mstar = 0
    for v in range(n):
        b = beta[v]
        sub[v] = b
        if b > Mstar:
            Mstar = b
        if cond[v] == 1:
            if b > M1:
                M1 = b
            if v != 0 and b == 1:
                L1 += 1
    for v in range(n - 1, 0, -1):
        p = parent[v]
        if sub[v] > sub[p]:
            sub[p] = sub[v]
    return L1, M1, Mstar


@njit(cache=True)
def _tree_batch(Lw, k, num, seed, maxgen, max_nodes, stop_line, G,
                L1o, M1o, Mso, Zo, nro, nodeso, censo, deepo, argo):
    np.random.seed(seed)
    cap = 1024
    parent = np.zeros(cap, dtype=np.int64)
    depth = np.zeros(cap, dtype=np.int64)
    beta = np.zeros(cap, dtype=np.int64)
    cond = np.zeros(cap, dtype=np.int8)
    buf = np.zeros(Lw[1].shape[0] + Lw[2].shape[0], dtype=np.int64)
    for s in range(num):
        st, n, deep, parent, depth, beta, cond = _grow_tree(Lw, k, parent, depth, beta, cond,
                                                            maxgen, max_nodes, stop_line, buf)
        L1 = 0
        M1 = 0
        Ms = 0
        nr = 0
        for g in range(G + 1):
            Zo[s, g] = 0
        am = 0
        for v in range(n):
            b = beta[v]
            if b > Ms:
                Ms = b
                am = v
            if cond[v] == 1:
                if b > M1:
                    M1 = b
                if v != 0 and b == 1:
                    L1 += 1
            if depth[v] <= G:
                Zo[s, depth[v]] += b
            if parent[v] == 0:
                nr += 1
        L1o[s] = L1
        M1o[s] = M1
        Mso[s] = Ms
        nro[s] = nr
        nodeso[s] = n
        censo[s] = st == K.FULL
        deepo[s] = deep
        argo[s] = am


@dataclass(frozen=True)
class TreeBatch:
    """Per-tree statistics of a batch.  ``Mstar`` is only meaningful with ``full=True``;
    censored rows hold lower bounds."""
    k: int
    L1: np.ndarray
    M1: np.ndarray
    Mstar: np.ndarray
    Z: np.ndarray
    root_children: np.ndarray
    nodes: np.ndarray
    censored: np.ndarray
    truncated: np.ndarray
    argmax_index: np.ndarray

    def __len__(self):
        return self.L1.shape[0]


def sample_trees(law: ReproductionLaw, k: int, num: int, seed=0, replica: int = 0, full: bool = True,
                 max_gen: int | None = None, max_nodes: int = 2_000_000, z_gens: int = 3) -> TreeBatch:
    """Batch of annealed trees with root type k.

    ``full=False`` stops growth at the stopping line, which is enough for L1
    and M1.  ``max_gen`` truncates generations (for Z_n only).
    """
    if k < 1:
        raise ValueError("k: root type must be >= 1")
    num = int(num)
    L1 = np.zeros(num, np.int64)
    M1 = np.zeros(num, np.int64)
    Ms = np.zeros(num, np.int64)
    Z = np.zeros((num, z_gens + 1), np.int64)
    nr = np.zeros(num, np.int64)
    nodes = np.zeros(num, np.int64)
    cens = np.zeros(num, np.bool_)
    deep = np.zeros(num, np.bool_)
    arg = np.zeros(num, np.int64)
    mg = NO_MAXGEN if max_gen is None else int(max_gen)
    _tree_batch(law.arrays, int(k), num, _seed32(seed, replica, 0x7BEE), mg, int(max_nodes),
                not full, int(z_gens), L1, M1, Ms, Z, nr, nodes, cens, deep, arg)
    if not full:
        Ms[:] = -1
    return TreeBatch(int(k), L1, M1, Ms, Z, nr, nodes, cens, deep, arg)


def sample_tree(k: int, law: ReproductionLaw, seed=0, max_nodes: int = 2_000_000,
                max_gen: int | None = None, stop_at_line: bool = False) -> BetaTree:
    """One annealed tree with root type k, materialized breadth-first."""
    if k < 1:
        raise ValueError("k: root type must be >= 1")
    np_seed = _seed32(seed, 0x51E)
    _seed_numba(np_seed)
    cap = 1024
    arrs = (np.zeros(cap, np.int64), np.zeros(cap, np.int64), np.zeros(cap, np.int64),
            np.zeros(cap, np.int8))
    buf = np.zeros(law.max_children, np.int64)
    mg = NO_MAXGEN if max_gen is None else int(max_gen)
    st, n, deep, parent, depth, beta, _ = _grow_tree(law.arrays, int(k), *arrs, mg, int(max_nodes),
                                                     stop_at_line, buf)
    return BetaTree(parent[:n].copy(), depth[:n].copy(), beta[:n].copy(), int(k),
                    censored=bool(st == K.FULL))


@njit(cache=True)
def _seed_numba(s):
    np.random.seed(s)


def stopping_line(tree: BetaTree) -> StoppingLineStats:
    """L1, M1 and M* in one forward and one backward pass."""
    n = tree.n_nodes
    cond = np.zeros(n, np.int8)
    sub = np.zeros(n, np.int64)
    _cond_pass(tree.parent, tree.beta, n, cond)
    L1, M1, Ms = _line_stats(tree.parent, tree.beta, cond, n, sub)
    members = np.nonzero((cond == 1) & (tree.beta == 1))[0]
    members = members[members != 0]
    return StoppingLineStats(int(L1), int(M1), int(Ms), members, tree.censored, sub)


# -- checks --------------------------------------------------------------------

@dataclass(frozen=True)
class RecursionReport:
    ks: float
    p_value: float
    n_direct: int
    n_composed: int
    cap: float
    censored_fraction: float


def recursion_check(law: ReproductionLaw, num_samples: int, seed=0, max_nodes: int = 2_000_000,
                    k: int = 1) -> RecursionReport:
    """Compare direct M* draws with max(M1, max of L1 independent M* draws).

    Censored values are lower bounds; every value is capped at the smallest
    censored lower bound, which makes the capped comparison exact.
    """
    from .stats import ks_two_sample

    direct = sample_trees(law, k, num_samples, seed, 0, full=True, max_nodes=max_nodes)
    pool = sample_trees(law, 1, num_samples, seed, 1, full=True, max_nodes=max_nodes)
    line = sample_trees(law, k, num_samples, seed, 2, full=False, max_nodes=max_nodes)
    rng = substream(seed, 3)
    composed = line.M1.astype(np.float64).copy()
    comp_cens = line.censored.copy()
    for s in np.nonzero(line.L1 > 0)[0]:
        idx = rng.integers(0, num_samples, size=int(line.L1[s]))
        composed[s] = max(composed[s], pool.Mstar[idx].max())
        comp_cens[s] |= bool(pool.censored[idx].any())
    lows = np.concatenate([direct.Mstar[direct.censored], pool.Mstar[pool.censored],
                           line.M1[line.censored]]).astype(float)
    cap = float(lows.min()) if lows.size else math.inf
    a = np.minimum(direct.Mstar.astype(float), cap)
    b = np.minimum(composed, cap)
    res = ks_two_sample(a, b)
    cf = float((direct.censored.sum() + comp_cens.sum()) / (2 * num_samples))
    return RecursionReport(res.value, res.p_value, num_samples, num_samples, cap, cf)


@dataclass(frozen=True)
class NbmProbe:
    lhs: float
    lhs_se: float
    rhs_shape: float
    ratio: float
    n: int
    alpha: float


def nbm_rhs_shape(A, z, n: int, alpha: float) -> float:
    """Right side of the negative multinomial moment inequality without its constant."""
    A = np.asarray(A, float)
    z = np.asarray(z, float)
    s = float(A @ z)
    tot = sum(s ** kk * float(A @ z ** (alpha - kk)) for kk in range(int(math.floor(alpha - 1)) + 1))
    return n ** max(alpha / 2, 1.0) * (tot + s ** alpha)


def nbm_moment_probe(A, z, n: int, alpha: float, num_samples: int, rng: np.random.Generator) -> NbmProbe:
    """Monte Carlo E|sum z_i zeta_i - n sum A_i z_i|^alpha for zeta ~ NM(n, A/(1+sum A))."""
    if not 1.0 <= alpha <= 4.0:
        raise ValueError("alpha: must lie in [1, 4]")
    A = np.asarray(A, float)
    z = np.asarray(z, float)
    s = A.sum()
    tot = rng.negative_binomial(n, 1.0 / (1.0 + s), size=num_samples)
    zeta = rng.multinomial(tot, A / s)
    x = np.abs(zeta @ z - n * float(A @ z)) ** alpha
    lhs = float(x.mean())
    se = float(x.std(ddof=1) / math.sqrt(num_samples))
    rhs = nbm_rhs_shape(A, z, n, alpha)
    return NbmProbe(lhs, se, rhs, lhs / rhs, int(n), float(alpha))


@dataclass(frozen=True)
class MomentRatios:
    types: tuple
    alpha: float
    L1: np.ndarray
    M1: np.ndarray
    L1_se: np.ndarray
    M1_se: np.ndarray
    censored_fraction: float


def moment_ratios(law: ReproductionLaw, alpha: float, types=(1, 2, 4, 8), num: int = 50_000,
                  seed=0, max_nodes: int = 2_000_000) -> MomentRatios:
    """E_i[L1^(1+alpha)] / i^(1+alpha) and the same for M1, per root type i."""
    p = 1.0 + alpha
    rl, rm, sl, sm = [], [], [], []
    cens = 0
    for r, i in enumerate(types):
        tb = sample_trees(law, i, num, seed, 100 + r, full=False, max_nodes=max_nodes)
        cens += int(tb.censored.sum())
        for arr, out, se in ((tb.L1, rl, sl), (tb.M1, rm, sm)):
            x = (arr.astype(float) / i) ** p
            out.append(x.mean())
            se.append(x.std(ddof=1) / math.sqrt(num))
    return MomentRatios(tuple(types), float(alpha), np.array(rl), np.array(rm), np.array(sl),
                        np.array(sm), cens / (num * len(types)))
