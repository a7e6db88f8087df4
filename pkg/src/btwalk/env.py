"""Branching-random-walk environments: lazy arena, additive martingale, minimum, (W, M_e) pairs."""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .law import ReproductionLaw, solve_kappa
from .rng import derive_u64

ROOT = 0
PARENT_OF_ROOT = -1


class NodeBudgetExceeded(RuntimeError):
    """The environment arena hit its node cap."""


class TExceedsDepth(ValueError):
    """Truncation level t is not below |u*|."""


class EnvTree:
    """Arena of environment vertices for one BRW realization.

    Children of a vertex are drawn from a counter-based hash of its key, so the
    realization is a function of ``seed`` alone; expansion order never matters.
    """

    _fields = (("parent", np.int64), ("depth", np.int64), ("V", np.float64), ("a", np.float64),
               ("key", np.uint64), ("first", np.int64), ("nch", np.int64), ("asum", np.float64),
               ("lt", np.int64))

    def __init__(self, law: ReproductionLaw, seed=0, stream: int = 0, max_nodes: int = 5_000_000,
                 capacity: int = 4096):
        self.law = law
        self.max_nodes = int(max_nodes)
        cap = min(int(capacity), self.max_nodes)
        for name, dt in self._fields:
            setattr(self, name, np.zeros(cap, dtype=dt))
        self.meta = np.zeros(2, dtype=np.int64)
        self._scratch = {}
        self.reset(seed, stream)

    def reset(self, seed, stream: int = 0):
        """Start a fresh realization, keeping the buffers."""
        self.seed = int(seed)
        self.stream = int(stream)
        self.root_key = derive_u64(seed, stream)
        self.meta[0] = 1
        self.parent[0] = PARENT_OF_ROOT
        self.depth[0] = 0
        self.V[0] = 0.0
        self.a[0] = 1.0
        self.key[0] = self.root_key
        self.first[0] = -1
        self.nch[0] = 0
        self.asum[0] = 0.0
        self.lt[0] = 0
        return self

    @classmethod
    def fixed(cls, parents, weights, law: ReproductionLaw | None = None):
        """Finite, fully expanded tree: ``parents[v]`` (root is -1) and relative weights.

        Nodes must be listed so that each node's children are contiguous and come
        after it (breadth-first order works).
        """
        parents = list(parents)
        n = len(parents)
        if law is None:
            law = ReproductionLaw.simple((1, [1]))
        env = cls(law, seed=0, capacity=max(n, 2), max_nodes=max(n, 2))
        env.meta[0] = n
        env.parent[:n] = parents
        env.a[:n] = weights
        env.a[0] = 1.0
        env.first[:n] = 0
        env.nch[:n] = 0
        env.asum[:n] = 0.0
        env.lt[:n] = 0
        for v in range(1, n):
            p = parents[v]
            if p >= v:
                raise ValueError("children must come after their parent")
            if env.nch[p] == 0:
                env.first[p] = v
            elif env.first[p] + env.nch[p] != v:
                raise ValueError("children of a node must be contiguous")
            env.nch[p] += 1
            env.asum[p] += env.a[v]
            env.depth[v] = env.depth[p] + 1
            env.V[v] = env.V[p] - math.log(env.a[v])
        return env

    @classmethod
    def star(cls, weights):
        """Root with leaf children of the given weights."""
        return cls.fixed([-1] + [0] * len(weights), [1.0] + list(weights))

    # -- arena plumbing -------------------------------------------------
    @property
    def n_nodes(self) -> int:
        return int(self.meta[0])

    @property
    def capacity(self) -> int:
        return self.parent.shape[0]

    def arrays(self):
        return (self.parent, self.depth, self.V, self.a, self.key, self.first, self.nch,
                self.asum, self.lt, self.meta)

    def grow(self):
        cap = self.capacity
        if cap >= self.max_nodes:
            raise NodeBudgetExceeded(f"environment arena at its cap of {self.max_nodes} nodes")
        new = min(cap * 2, self.max_nodes)
        for name, dt in self._fields:
            old = getattr(self, name)
            arr = np.zeros(new, dtype=dt)
            arr[:cap] = old
            setattr(self, name, arr)
        self._scratch.clear()

    def scratch(self, name, dtype=np.int64):
        buf = self._scratch.get(name)
        if buf is None or buf.shape[0] != self.capacity:
            buf = np.zeros(self.capacity, dtype=dtype)
            self._scratch[name] = buf
        return buf

    def run(self, kernel, *args, scratch=()):
        """Call ``kernel(Lw, E, *args, *scratch buffers)``, growing on FULL."""
        while True:
            bufs = tuple(self.scratch(n, dt) for n, dt in scratch)
            out = kernel(self.law.arrays, self.arrays(), *args, *bufs)
            status = out[0] if isinstance(out, tuple) else out
            if status != K.FULL:
                return out
            self.grow()

    # -- node access ------------------------------------------------------
    def expand(self, node: int) -> list[int]:
        """Children of ``node``, materializing them on first call."""
        if not 0 <= node < self.n_nodes:
            raise IndexError(f"node {node} not in arena")
        self.run(K.expand, node)
        f, c = int(self.first[node]), int(self.nch[node])
        return list(range(f, f + c))

    def children(self, node: int) -> list[int] | None:
        if self.first[node] < 0:
            return None
        f, c = int(self.first[node]), int(self.nch[node])
        return list(range(f, f + c))

    def siblings(self, node: int) -> list[int]:
        """Omega(z): the other children of z's parent."""
        p = int(self.parent[node])
        if p < 0:
            return []
        return [v for v in self.children(p) if v != node]

    def ancestry(self, node: int) -> list[int]:
        """Path root .. node."""
        path = [node]
        while path[-1] != ROOT:
            path.append(int(self.parent[path[-1]]))
        return path[::-1]


def additive_martingale(env: EnvTree, n: int) -> float:
    """W_n = sum_{|u|=n} exp(-V(u)), expanding every vertex down to depth n."""
    if n == 0:
        return float(math.exp(-env.V[0]))
    _, s = env.run(K.level_sum, int(n), scratch=(("front", np.int64), ("nxt", np.int64)))
    return float(s)


@dataclass(frozen=True)
class MinRecord:
    M: float
    M_e: float
    ustar: int
    ustar_depth: int
    barrier: float
    converged: bool
    n_minimizers: int = 1
    explored: int = 0


@functools.lru_cache(maxsize=64)
def _kappa(law: ReproductionLaw, t_max: float) -> float:
    return solve_kappa(law, t_max=t_max).value


def default_barrier(law: ReproductionLaw, eps_trunc: float = 1e-6, kappa=None, t_max=50.0) -> float:
    """ln(1/eps)/kappa; laws with kappa = inf use t_max in place of kappa."""
    if kappa is None:
        kappa = _kappa(law, float(t_max))
    k = kappa if math.isfinite(kappa) else t_max
    return math.log(1.0 / eps_trunc) / k


def brw_minimum(env: EnvTree, barrier: float, strict: bool = True) -> MinRecord:
    """Minimum of V with barrier pruning; u* uniform among the deepest minimizers.

    On budget exhaustion raises NodeBudgetExceeded, or with ``strict=False``
    returns the running minimum flagged ``converged=False``.
    """
    if barrier <= 0:
        raise ValueError("barrier must be positive")
    tie_key = derive_u64(env.seed, env.stream, 0x7133)
    scratch = (("hp", np.float64), ("hid", np.int64), ("seen", np.int64))
    while True:
        bufs = tuple(env.scratch(n, dt) for n, dt in scratch)
        st, M, ustar, d, count, nseen = K.brw_min(env.law.arrays, env.arrays(), float(barrier),
                                                  tie_key, *bufs)
        if st != K.FULL:
            break
        try:
            env.grow()
        except NodeBudgetExceeded:
            if strict:
                raise
            return MinRecord(M, math.exp(-M), -1, -1, barrier, False, 0, nseen)
    return MinRecord(float(M), math.exp(-M), int(ustar), int(d), float(barrier), True, int(count),
                     int(nseen))


@dataclass(frozen=True)
class DepthPolicy:
    """Truncation of W_infinity: freeze vertices with V > ln(1/freeze_eps), then
    stop once |W_{n+window} - W_n| < eps_w * max(1, W_n)."""
    freeze_eps: float = 1e-3
    eps_w: float = 1e-3
    window: int = 5
    max_depth: int = 400


@dataclass(frozen=True)
class LineEstimate:
    W: float
    depth: int
    line: np.ndarray


def martingale_line(env: EnvTree, policy: DepthPolicy = DepthPolicy(), min_depth: int = 0) -> LineEstimate:
    h = math.log(1.0 / policy.freeze_eps)
    hist = np.zeros(policy.max_depth + 1)
    _, W, depth, nline = _run_line(env, h, policy, min_depth, hist)
    return LineEstimate(float(W), int(depth), env.scratch("line")[:nline].copy())


def _run_line(env, h, policy, min_depth, hist):
    while True:
        front, nxt, line = env.scratch("front"), env.scratch("nxt"), env.scratch("line")
        out = K.w_line(env.law.arrays, env.arrays(), h, policy.eps_w, policy.window,
                       policy.max_depth, int(min_depth), front, nxt, line, hist)
        if out[0] != K.FULL:
            return out
        env.grow()


@dataclass(frozen=True)
class WPair:
    W_inf: float
    M_e: float
    W_M: float
    depth_used: int
    M: float = 0.0
    ustar_depth: int = 0
    censored: bool = False


def sample_w_pair(law: ReproductionLaw, seed=0, stream: int = 0, barrier: float | None = None,
                  policy: DepthPolicy = DepthPolicy(), env: EnvTree | None = None,
                  max_nodes: int = 5_000_000):
    """One joint sample of (W_inf, M_e, W^M) from a single environment.

    Returns (WPair, env, MinRecord, LineEstimate).  Budget exhaustion yields a
    pair flagged censored.
    """
    if env is None:
        env = EnvTree(law, seed, stream, max_nodes=max_nodes)
    else:
        env.reset(seed, stream)
    if barrier is None:
        barrier = default_barrier(law)
    try:
        mrec = brw_minimum(env, barrier)
        line = martingale_line(env, policy, min_depth=mrec.ustar_depth + 1)
    except NodeBudgetExceeded:
        return WPair(float("nan"), float("nan"), float("nan"), -1, censored=True), env, None, None
    W = line.W
    return (WPair(W, mrec.M_e, W * math.exp(mrec.M), line.depth, mrec.M, mrec.ustar_depth),
            env, mrec, line)


def truncated_wm(env: EnvTree, mrec: MinRecord, t: int, line: LineEstimate | None = None,
                 policy: DepthPolicy = DepthPolicy(), strict: bool = False):
    """Truncated W^M: siblings along the last t+1 spine generations above u*, plus u*'s subtree.

    Returns (value, flagged).  ``flagged`` is True when t >= |u*| (then the
    full sum is returned; with ``strict=True`` TExceedsDepth is raised).
    """
    d = mrec.ustar_depth
    flagged = t >= d
    if flagged and strict:
        raise TExceedsDepth(f"t={t} >= |u*|={d}")
    if line is None:
        line = martingale_line(env, policy, min_depth=d + 1)
    sums = np.zeros(env.n_nodes)
    K.subtree_line_sums(env.arrays(), line.line, line.line.shape[0], sums)
    path = env.ancestry(mrec.ustar)
    M = mrec.M
    total = sums[mrec.ustar] * math.exp(M)
    lo = max(1, d - t)
    for k in range(lo, d + 1):
        for z in env.siblings(path[k]):
            total += sums[z] * math.exp(M)
    return float(total), flagged
