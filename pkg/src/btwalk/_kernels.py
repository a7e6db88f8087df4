"""Numba kernels over the environment arena.

Arena tuple ``E = (parent, depth, V, a, key, first, nch, asum, lt, meta)``:
``a[v]`` is the relative conductance exp(-(V(v) - V(parent))), ``asum[u]`` the sum
of ``a`` over the children of ``u``, ``first[u] == -1`` marks an unexpanded node,
``meta[0]`` is the live node count.  Kernels return status ``FULL`` when the
arena has no room; callers grow the arrays and retry.
"""
import numpy as np
from numba import njit

from .rng import branch_uniform, child_key, tie_uniform

OK = 0
FULL = 1
STEP_CAP = 2


@njit(cache=True)
def pick_branch(cdf, r):
    b = 0
    nb = cdf.shape[0]
    while b < nb - 1 and r >= cdf[b]:
        b += 1
    return b


@njit(cache=True)
def expand_branch(Lw, E, u, b):
    cdf, starts, weights, disp = Lw
    parent, depth, V, a, key, first, nch, asum, lt, meta = E
    if first[u] >= 0:
        return OK
    s = starts[b]
    c = starts[b + 1] - s
    n = meta[0]
    if n + c > parent.shape[0]:
        return FULL
    tot = 0.0
    for j in range(c):
        v = n + j
        parent[v] = u
        depth[v] = depth[u] + 1
        a[v] = weights[s + j]
        V[v] = V[u] + disp[s + j]
        key[v] = child_key(key[u], j)
        first[v] = -1
        nch[v] = 0
        asum[v] = 0.0
        lt[v] = 0
        tot += weights[s + j]
    first[u] = n
    nch[u] = c
    asum[u] = tot
    meta[0] = n + c
    return OK


@njit(cache=True)
def expand(Lw, E, u):
    first = E[5]
    if first[u] >= 0:
        return OK
    b = pick_branch(Lw[0], branch_uniform(E[4][u]))
    return expand_branch(Lw, E, u, b)


@njit(cache=True)
def level_sum(Lw, E, n, front, nxt):
    """W_n = sum over generation n of exp(-V); full expansion, no pruning."""
    V = E[2]
    first = E[5]
    nch = E[6]
    front[0] = 0
    nf = 1
    for g in range(n):
        nn = 0
        for i in range(nf):
            u = front[i]
            if expand(Lw, E, u) != OK:
                return FULL, 0.0
            f = first[u]
            for j in range(nch[u]):
                nxt[nn] = f + j
                nn += 1
        front, nxt = nxt, front
        nf = nn
    s = 0.0
    for i in range(nf):
        s += np.exp(-V[front[i]])
    return OK, s


@njit(cache=True)
def w_line(Lw, E, h, eps_w, window, max_depth, min_depth, front, nxt, line, hist):
    """Additive martingale on a stopping line.

    Generation-wise exploration; a child with V > h is frozen (kept on the line
    with its current weight, which is the conditional mean of its contribution).
    Stops when |W_n - W_{n-window}| < eps_w * max(1, W_{n-window}) once
    n >= min_depth, when nothing is active, or at max_depth.  The surviving
    frontier joins the line.  Returns (status, W, depth, line count).
    """
    V = E[2]
    first = E[5]
    nch = E[6]
    frozen = 0.0
    front[0] = 0
    nf = 1
    nline = 0
    for n in range(max_depth + 1):
        s = frozen
        for i in range(nf):
            s += np.exp(-V[front[i]])
        hist[n] = s
        stop = nf == 0 or n == max_depth
        if n >= window and n >= min_depth:
            prev = hist[n - window]
            if abs(s - prev) < eps_w * max(1.0, prev):
                stop = True
        if stop:
            for i in range(nf):
                line[nline] = front[i]
                nline += 1
            return OK, s, n, nline
        nn = 0
        for i in range(nf):
            u = front[i]
            if expand(Lw, E, u) != OK:
                return FULL, 0.0, n, 0
            f = first[u]
            for j in range(nch[u]):
                c = f + j
                if V[c] > h:
                    frozen += np.exp(-V[c])
                    line[nline] = c
                    nline += 1
                else:
                    nxt[nn] = c
                    nn += 1
        front, nxt = nxt, front
        nf = nn
    return OK, frozen, max_depth, nline


@njit(cache=True)
def subtree_line_sums(E, line, nline, out):
    """out[u] = sum of exp(-V) over line members in the subtree of u."""
    parent = E[0]
    V = E[2]
    n = E[9][0]
    for i in range(n):
        out[i] = 0.0
    for i in range(nline):
        out[line[i]] += np.exp(-V[line[i]])
    for v in range(n - 1, 0, -1):
        out[parent[v]] += out[v]


@njit(cache=True)
def _heap_push(hp, hid, size, v, u):
    i = size
    hp[i] = v
    hid[i] = u
    while i > 0:
        p = (i - 1) >> 1
        if hp[p] <= hp[i]:
            break
        hp[p], hp[i] = hp[i], hp[p]
        hid[p], hid[i] = hid[i], hid[p]
        i = p
    return size + 1


@njit(cache=True)
def _heap_pop(hp, hid, size):
    v = hp[0]
    u = hid[0]
    size -= 1
    hp[0] = hp[size]
    hid[0] = hid[size]
    i = 0
    while True:
        l = 2 * i + 1
        if l >= size:
            break
        r = l + 1
        m = l
        if r < size and hp[r] < hp[l]:
            m = r
        if hp[i] <= hp[m]:
            break
        hp[m], hp[i] = hp[i], hp[m]
        hid[m], hid[i] = hid[i], hid[m]
        i = m
    return v, u, size


@njit(cache=True)
def brw_min(Lw, E, barrier, tie_key, hp, hid, seen):
    """Best-first search for inf V with barrier pruning.

    A node is expanded only while V(u) < current_min + barrier.  Returns
    (status, M, ustar, ustar_depth, n_minimizers, n_seen).
    """
    depth = E[1]
    V = E[2]
    first = E[5]
    nch = E[6]
    size = _heap_push(hp, hid, 0, V[0], 0)
    seen[0] = 0
    nseen = 1
    cur = V[0]
    while size > 0:
        v, u, size = _heap_pop(hp, hid, size)
        if v >= cur + barrier:
            break
        if expand(Lw, E, u) != OK:
            return FULL, cur, -1, -1, 0, nseen
        f = first[u]
        for j in range(nch[u]):
            c = f + j
            vc = V[c]
            if vc < cur:
                cur = vc
            if vc < cur + barrier:
                size = _heap_push(hp, hid, size, vc, c)
                seen[nseen] = c
                nseen += 1
    tol = 1e-12 * (1.0 + abs(cur))
    best = -1
    count = 0
    for i in range(nseen):
        u = seen[i]
        if V[u] <= cur + tol:
            if depth[u] > best:
                best = depth[u]
                count = 1
            elif depth[u] == best:
                count += 1
    pick = int(tie_uniform(tie_key) * count)
    k = 0
    ustar = -1
    for i in range(nseen):
        u = seen[i]
        if V[u] <= cur + tol and depth[u] == best:
            if k == pick:
                ustar = u
                break
            k += 1
    return OK, cur, ustar, best, count, nseen


# walk state slots
S_CUR, S_STEPS, S_EXC, S_MAX, S_MAXNR, S_TOUCHED = 0, 1, 2, 3, 4, 5


@njit(cache=True)
def walk(Lw, E, st, n_exc, max_steps, taus):
    """Biased walk until the n_exc-th crossing from the root's parent (-1) to the root.

    Root edge crossings are kept in lt[0]; ``st`` carries the resumable state.
    """
    parent = E[0]
    a = E[3]
    first = E[5]
    nch = E[6]
    asum = E[7]
    lt = E[8]
    cur = st[S_CUR]
    steps = st[S_STEPS]
    exc = st[S_EXC]
    mx = st[S_MAX]
    mxnr = st[S_MAXNR]
    touched = st[S_TOUCHED]
    status = OK
    while exc < n_exc:
        if steps >= max_steps:
            status = STEP_CAP
            break
        if cur == -1:
            cur = 0
            steps += 1
            exc += 1
            lt[0] += 1
            if lt[0] > mx:
                mx = lt[0]
            taus[exc - 1] = steps
            continue
        if first[cur] < 0:
            if expand(Lw, E, cur) != OK:
                status = FULL
                break
        r = np.random.random() * (1.0 + asum[cur])
        if r < 1.0:
            cur = parent[cur]
        else:
            r -= 1.0
            f = first[cur]
            k = nch[cur]
            j = 0
            while j < k - 1 and r >= a[f + j]:
                r -= a[f + j]
                j += 1
            c = f + j
            if lt[c] == 0:
                touched += 1
            lt[c] += 1
            if lt[c] > mx:
                mx = lt[c]
            if lt[c] > mxnr:
                mxnr = lt[c]
            cur = c
        steps += 1
    st[S_CUR] = cur
    st[S_STEPS] = steps
    st[S_EXC] = exc
    st[S_MAX] = mx
    st[S_MAXNR] = mxnr
    st[S_TOUCHED] = touched
    return status


FRONTIER = 3


@njit(cache=True)
def killed_walk(Lw, E, st, kill, frontier, max_steps):
    """Walk from ``st[0]`` until it steps onto ``kill`` (-1 is the root's parent).

    Down-crossings are added to lt.  Resumable through ``st = [cur, steps]``;
    returns FRONTIER on reaching ``frontier`` while it is still unexpanded, so
    the caller can grow it with a different law.
    """
    parent = E[0]
    a = E[3]
    first = E[5]
    nch = E[6]
    asum = E[7]
    lt = E[8]
    cur = st[0]
    steps = st[1]
    status = OK
    while True:
        if cur == kill:
            break
        if steps >= max_steps:
            status = STEP_CAP
            break
        if first[cur] < 0:
            if cur == frontier:
                status = FRONTIER
                break
            if expand(Lw, E, cur) != OK:
                status = FULL
                break
        r = np.random.random() * (1.0 + asum[cur])
        if r < 1.0:
            cur = parent[cur]
        else:
            r -= 1.0
            f = first[cur]
            k = nch[cur]
            j = 0
            while j < k - 1 and r >= a[f + j]:
                r -= a[f + j]
                j += 1
            cur = f + j
            lt[cur] += 1
        steps += 1
        if cur == -1:
            break
    st[0] = cur
    st[1] = steps
    return status


@njit(cache=True)
def nb_split(t, a, f, k, asum, out):
    """Negative multinomial counts for k children given t exits; writes out[0:k]."""
    total = np.random.negative_binomial(t, 1.0 / (1.0 + asum))
    rem = total
    remw = asum
    for j in range(k):
        if j == k - 1 or rem == 0:
            x = rem
        else:
            p = a[f + j] / remw
            if p >= 1.0:
                x = rem
            else:
                x = np.random.binomial(rem, p)
        out[j] = x
        rem -= x
        remw -= a[f + j]
    return total


@njit(cache=True)
def lt_tree(Lw, E, n_root, queue, max_total, buf):
    """Edge local times at tau_n on a fixed environment via conditional
    negative multinomial branching.  Types are written to lt (lt[0] = n_root).

    Returns (status, max type, max non-root type, positive nodes, total crossings).
    """
    a = E[3]
    first = E[5]
    nch = E[6]
    asum = E[7]
    lt = E[8]
    lt[0] = n_root
    queue[0] = 0
    head = 0
    tail = 1
    mx = n_root
    mxnr = 0
    total = 0
    while head < tail:
        u = queue[head]
        head += 1
        if expand(Lw, E, u) != OK:
            return FULL, mx, mxnr, tail, total
        k = nch[u]
        f = first[u]
        nb_split(lt[u], a, f, k, asum[u], buf)
        for j in range(k):
            c = f + j
            x = buf[j]
            lt[c] = x
            if x > 0:
                queue[tail] = c
                tail += 1
                total += x
                if x > mx:
                    mx = x
                if x > mxnr:
                    mxnr = x
        if total > max_total:
            return STEP_CAP, mx, mxnr, tail, total
    return OK, mx, mxnr, tail, total
