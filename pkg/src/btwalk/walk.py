"""Quenched randomly biased walk on an environment, excursions and edge local times.

The walk starts at the root.  The root's artificial parent is encoded as -1;
from there the walk returns to the root with probability one, and each such
return closes an excursion.  ``lt[0]`` counts those returns, so at tau_n the
root edge carries local time n.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .env import (DepthPolicy, EnvTree, NodeBudgetExceeded, PARENT_OF_ROOT, default_barrier,
                  sample_w_pair)
from .law import ReproductionLaw
from .ltgw import BetaTree
from .rng import derive_u32, seed_numba, substream

DEFAULT_MAX_STEPS = 10**7


class NotAtBoundary(RuntimeError):
    """Local-time export requested away from an excursion boundary."""


class WalkTrace:
    """Walk state on one environment; local times live in ``env.lt``."""

    def __init__(self, env: EnvTree, max_steps: int = DEFAULT_MAX_STEPS, fresh: bool = True):
        self.env = env
        self.max_steps = int(max_steps)
        self.state = np.zeros(6, dtype=np.int64)
        self.censored = False
        self.taus: list[int] = []
        if fresh:
            env.lt[:env.n_nodes] = 0

    current = property(lambda self: int(self.state[K.S_CUR]))
    step_count = property(lambda self: int(self.state[K.S_STEPS]))
    excursions_done = property(lambda self: int(self.state[K.S_EXC]))

    @property
    def at_boundary(self) -> bool:
        return self.current == 0 and (not self.taus or self.taus[-1] == self.step_count)

    @property
    def local_times(self) -> dict[int, int]:
        """Edge local times of visited non-root vertices."""
        n = self.env.n_nodes
        lt = self.env.lt[:n]
        idx = np.nonzero(lt[1:] > 0)[0] + 1
        return {int(i): int(lt[i]) for i in idx}


def step(env: EnvTree, trace: WalkTrace, rng: np.random.Generator) -> int:
    """One transition of the walk, drawn with ``rng``; returns the new position."""
    if trace.censored:
        raise RuntimeError("trace is censored")
    st = trace.state
    cur = int(st[K.S_CUR])
    if cur == PARENT_OF_ROOT:
        new = 0
        env.lt[0] += 1
        st[K.S_EXC] += 1
        st[K.S_STEPS] += 1
        trace.taus.append(int(st[K.S_STEPS]))
        st[K.S_MAX] = max(st[K.S_MAX], env.lt[0])
        st[K.S_CUR] = new
        return new
    try:
        kids = env.expand(cur)
    except NodeBudgetExceeded:
        trace.censored = True
        raise
    w = np.concatenate(([1.0], env.a[kids])) if kids else np.ones(1)
    r = rng.random() * w.sum()
    j = int(np.searchsorted(np.cumsum(w), r, side="right"))
    j = min(j, len(w) - 1)
    if j == 0:
        new = int(env.parent[cur])
    else:
        new = kids[j - 1]
        if env.lt[new] == 0:
            st[K.S_TOUCHED] += 1
        env.lt[new] += 1
        st[K.S_MAX] = max(st[K.S_MAX], env.lt[new])
        st[K.S_MAXNR] = max(st[K.S_MAXNR], env.lt[new])
    st[K.S_STEPS] += 1
    st[K.S_CUR] = new
    return new


@dataclass(frozen=True)
class ExcursionStats:
    n: int
    tau: np.ndarray
    max_edge_lt: int
    max_nonroot: int
    argmax_depth: int
    nodes_touched: int
    steps: int
    censored: bool
    local_sum: int


def _seed_walk(seed):
    rng = seed if isinstance(seed, np.random.Generator) else substream(seed, 0x3A1C)
    seed_numba(derive_u32(rng))


def continue_excursions(trace: WalkTrace, n: int) -> ExcursionStats:
    """Drive ``trace`` (numba engine) until n excursions are complete or a cap hits."""
    env = trace.env
    taus = np.zeros(n, dtype=np.int64)
    taus[:len(trace.taus)] = trace.taus[:n]
    while True:
        status = K.walk(env.law.arrays, env.arrays(), trace.state, n, trace.max_steps, taus)
        if status == K.FULL:
            try:
                env.grow()
            except NodeBudgetExceeded:
                trace.censored = True
                break
            continue
        if status == K.STEP_CAP:
            trace.censored = True
        break
    done = trace.excursions_done
    trace.taus = [int(t) for t in taus[:done]]
    return _stats(trace, n)


def _stats(trace: WalkTrace, n: int) -> ExcursionStats:
    env = trace.env
    m = env.n_nodes
    lt = env.lt[:m]
    st = trace.state
    if m > 1 and st[K.S_MAXNR] > 0:
        arg = int(np.argmax(lt[1:])) + 1
        adepth = int(env.depth[arg])
    else:
        adepth = 0
    return ExcursionStats(n=n, tau=np.asarray(trace.taus, dtype=np.int64), max_edge_lt=int(st[K.S_MAX]),
                          max_nonroot=int(st[K.S_MAXNR]), argmax_depth=adepth,
                          nodes_touched=int(st[K.S_TOUCHED]), steps=int(st[K.S_STEPS]),
                          censored=trace.censored, local_sum=int(lt[1:].sum()))


def run_excursions(env: EnvTree, n: int, seed=0, max_steps: int = DEFAULT_MAX_STEPS):
    """Run the walk from the root until the n-th return from the artificial parent.

    Returns (ExcursionStats, WalkTrace).  Censored runs keep their running
    maxima, which are then lower bounds.
    """
    if n < 1:
        raise ValueError("n: need at least one excursion")
    trace = WalkTrace(env, max_steps)
    _seed_walk(seed)
    return continue_excursions(trace, n), trace


def tree_local_times(env: EnvTree, n: int, seed=0, max_steps: int = DEFAULT_MAX_STEPS):
    """Edge local times at tau_n drawn by conditional negative multinomial branching
    on the fixed environment; equal in law to the walk's, at a cost proportional
    to the number of visited vertices instead of steps.

    Returns ExcursionStats with ``tau`` holding only tau_n.
    """
    if n < 1:
        raise ValueError("n: need at least one excursion")
    _seed_walk(seed)
    max_total = max(0, (max_steps - 2 * n) // 2)
    while True:
        env.lt[:env.n_nodes] = 0
        queue = env.scratch("queue")
        buf = np.zeros(env.law.max_children, dtype=np.int64)
        st, mx, mxnr, npos, total = K.lt_tree(env.law.arrays, env.arrays(), int(n), queue,
                                              max_total, buf)
        if st != K.FULL:
            break
        try:
            env.grow()
        except NodeBudgetExceeded:
            break
        _seed_walk(seed)
    censored = st != K.OK
    m = env.n_nodes
    lt = env.lt[:m]
    adepth = int(env.depth[int(np.argmax(lt[1:])) + 1]) if (m > 1 and mxnr > 0) else 0
    tau = np.array([2 * n + 2 * int(total)], dtype=np.int64)
    return ExcursionStats(n=n, tau=tau, max_edge_lt=int(mx), max_nonroot=int(mxnr), argmax_depth=adepth,
                          nodes_touched=int(npos) - 1, steps=int(tau[0]), censored=bool(censored),
                          local_sum=int(total))


def local_time_tree(trace: WalkTrace) -> BetaTree:
    """Typed tree of edge local times at the current excursion boundary.

    Vertices of type 0 are kept only when their parent has positive type.
    """
    if not trace.at_boundary or trace.excursions_done == 0:
        raise NotAtBoundary("trace is not at an excursion boundary")
    env = trace.env
    m = env.n_nodes
    lt = env.lt[:m]
    par = env.parent[:m]
    keep = np.zeros(m, dtype=bool)
    keep[0] = True
    keep[1:] = lt[par[1:]] > 0
    idx = np.nonzero(keep)[0]
    remap = np.full(m, -1, dtype=np.int64)
    remap[idx] = np.arange(idx.shape[0])
    parent = np.where(par[idx] >= 0, remap[np.maximum(par[idx], 0)], -1)
    return BetaTree(parent, env.depth[idx].copy(), lt[idx].astype(np.int64), int(lt[0]),
                    censored=trace.censored, V=env.V[idx].copy())


@dataclass(frozen=True)
class MaxPair:
    max_lt: int
    max_nonroot: int
    W_inf: float
    M_e: float
    tau_n: int
    censored: bool


def max_over_excursions(law: ReproductionLaw, n: int, seed=0, stream: int = 0, engine: str = "tree",
                        barrier: float | None = None, policy: DepthPolicy = DepthPolicy(),
                        max_steps: int = DEFAULT_MAX_STEPS, env: EnvTree | None = None,
                        max_nodes: int = 5_000_000) -> MaxPair:
    """max edge local time at tau_n paired with the same environment's (W_inf, M_e)."""
    if barrier is None:
        barrier = default_barrier(law)
    pair, env, _, _ = sample_w_pair(law, seed, stream, barrier, policy, env, max_nodes)
    wseed = substream(seed, stream, 0x3A1D)
    if engine == "walk":
        ex, _ = run_excursions(env, n, wseed, max_steps)
    elif engine == "tree":
        ex = tree_local_times(env, n, wseed, max_steps)
    else:
        raise ValueError(f"engine: unknown engine {engine!r}")
    return MaxPair(ex.max_edge_lt, ex.max_nonroot, pair.W_inf, pair.M_e, int(ex.tau[-1]) if ex.tau.size else -1,
                   ex.censored or pair.censored)


@dataclass(frozen=True)
class ExcursionBatch:
    n: int
    tau_n: np.ndarray
    max_lt: np.ndarray
    max_nonroot: np.ndarray
    nodes_touched: np.ndarray
    Z1: np.ndarray
    root_children: np.ndarray
    censored: np.ndarray


def annealed_excursions(law: ReproductionLaw, n: int, num: int, seed=0, replica: int = 0,
                        engine: str = "walk", max_steps: int = DEFAULT_MAX_STEPS,
                        max_nodes: int = 5_000_000) -> ExcursionBatch:
    """``num`` runs of n excursions, each on a fresh environment (annealed law)."""
    env = EnvTree(law, seed, 0, max_nodes=max_nodes)
    cols = {k: np.zeros(num, dtype=np.int64) for k in
            ("tau_n", "max_lt", "max_nonroot", "nodes_touched", "Z1", "root_children")}
    cens = np.zeros(num, dtype=bool)
    rng = substream(seed, replica, 0x3A1E)
    for s in range(num):
        env.reset(seed, (replica << 32) | s)
        if engine == "walk":
            ex, _ = run_excursions(env, n, rng, max_steps)
        else:
            ex = tree_local_times(env, n, rng, max_steps)
        cols["tau_n"][s] = ex.tau[-1] if (ex.tau.size == n or engine != "walk") else -1
        cols["max_lt"][s] = ex.max_edge_lt
        cols["max_nonroot"][s] = ex.max_nonroot
        cols["nodes_touched"][s] = ex.nodes_touched
        f, c = int(env.first[0]), int(env.nch[0])
        cols["root_children"][s] = c
        cols["Z1"][s] = int(env.lt[f:f + c].sum()) if f >= 0 else 0
        cens[s] = ex.censored
    return ExcursionBatch(n=n, censored=cens, **cols)


def quenched_maxima(env: EnvTree, n: int, reps: int, seed=0, engine: str = "walk",
                    max_steps: int = DEFAULT_MAX_STEPS):
    """Repeated runs on one fixed environment; returns (max_nonroot, censored) arrays."""
    mx = np.zeros(reps, dtype=np.int64)
    cens = np.zeros(reps, dtype=bool)
    rng = substream(seed, 0x3A1F)
    for r in range(reps):
        ex = run_excursions(env, n, rng, max_steps)[0] if engine == "walk" else \
            tree_local_times(env, n, rng, max_steps)
        mx[r] = ex.max_nonroot
        cens[r] = ex.censored
    return mx, cens


def empty_trace_max_probability(env: EnvTree) -> float:
    """Quenched P(no non-root edge crossed before tau_1) = 1 / (1 + W_1)."""
    env.expand(0)
    return 1.0 / (1.0 + float(env.asum[0]))


__all__ = ["WalkTrace", "ExcursionStats", "ExcursionBatch", "MaxPair", "NotAtBoundary", "step",
           "run_excursions", "continue_excursions", "tree_local_times", "local_time_tree",
           "max_over_excursions", "annealed_excursions", "quenched_maxima",
           "empty_trace_max_probability", "DEFAULT_MAX_STEPS"]
