"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and ``SIGMA_MATCH_NUMBA``
is not set to ``0``. Both paths compute the same quantities; the numpy path is
the reference the numba kernels are tested against.

``SIGMA_MATCH_THREADS`` caps numba's thread pool (``0`` or unset = auto).
"""

import os

import numpy as np

try:
    import numba
    from numba import njit, prange

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("SIGMA_MATCH_NUMBA", "1") != "0"


def _apply_thread_cap():
    raw = os.environ.get("SIGMA_MATCH_THREADS", "0").strip() or "0"
    try:
        cap = int(raw)
    except ValueError:
        return
    if USE_NUMBA and cap > 0:
        numba.set_num_threads(min(cap, numba.config.NUMBA_NUM_THREADS))


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------


def _lse(x, axis):
    mx = x.max(axis=axis, keepdims=True)
    return mx + np.log(np.exp(x - mx).sum(axis=axis, keepdims=True))


def sinkhorn_forward_np(logits, iterations):
    """Log-domain Sinkhorn: each round normalizes columns, then rows.

    Returns the output matrix and the log-matrix after every half step,
    which the backward pass needs.
    """
    l = np.array(logits, dtype=np.float64)
    ns, nt = l.shape
    hist = np.empty((2 * iterations, ns, nt))
    for k in range(iterations):
        l = l - _lse(l, 0)
        hist[2 * k] = l
        l = l - _lse(l, 1)
        hist[2 * k + 1] = l
    return np.exp(l), hist


def sinkhorn_backward_np(grad_out, out, hist):
    g = grad_out * out
    for s in range(hist.shape[0] - 1, -1, -1):
        axis = 1 if s % 2 == 1 else 0
        g = g - np.exp(hist[s]) * g.sum(axis=axis, keepdims=True)
    return g


def pairwise_mlp_forward_np(a, b, w, c):
    """out[i, j] = sum_h relu(a[i, h] + b[j, h]) * w[h] + c."""
    h = np.maximum(a[:, None, :] + b[None, :, :], 0.0)
    return h @ w + c


def pairwise_mlp_backward_np(g, a, b, w):
    pre = a[:, None, :] + b[None, :, :]
    act = pre > 0.0
    gh = g[:, :, None] * w[None, None, :] * act
    ga = gh.sum(axis=1)
    gb = gh.sum(axis=0)
    gw = np.einsum("ij,ijh->h", g, np.where(act, pre, 0.0))
    gc = g.sum()
    return ga, gb, gw, gc


def hungarian_np(cost):
    """Minimum-cost perfect assignment via shortest augmenting paths.

    Returns ``assign`` with ``assign[i]`` the column matched to row ``i``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    assign = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        assign[p[j] - 1] = j - 1
    return assign


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(cache=True)
    def sinkhorn_forward_nb(logits, iterations):
        ns, nt = logits.shape
        l = logits.copy()
        hist = np.empty((2 * iterations, ns, nt))
        for k in range(iterations):
            for j in range(nt):
                mx = -np.inf
                for i in range(ns):
                    if l[i, j] > mx:
                        mx = l[i, j]
                acc = 0.0
                for i in range(ns):
                    acc += np.exp(l[i, j] - mx)
                z = mx + np.log(acc)
                for i in range(ns):
                    l[i, j] -= z
            hist[2 * k] = l
            for i in range(ns):
                mx = -np.inf
                for j in range(nt):
                    if l[i, j] > mx:
                        mx = l[i, j]
                acc = 0.0
                for j in range(nt):
                    acc += np.exp(l[i, j] - mx)
                z = mx + np.log(acc)
                for j in range(nt):
                    l[i, j] -= z
            hist[2 * k + 1] = l
        return np.exp(l), hist

    @njit(cache=True)
    def sinkhorn_backward_nb(grad_out, out, hist):
        ns, nt = out.shape
        g = grad_out * out
        for s in range(hist.shape[0] - 1, -1, -1):
            y = hist[s]
            if s % 2 == 1:
                for i in range(ns):
                    acc = 0.0
                    for j in range(nt):
                        acc += g[i, j]
                    for j in range(nt):
                        g[i, j] -= np.exp(y[i, j]) * acc
            else:
                for j in range(nt):
                    acc = 0.0
                    for i in range(ns):
                        acc += g[i, j]
                    for i in range(ns):
                        g[i, j] -= np.exp(y[i, j]) * acc
        return g

    @njit(cache=True, parallel=True)
    def pairwise_mlp_forward_nb(a, b, w, c):
        ns, hd = a.shape
        nt = b.shape[0]
        out = np.empty((ns, nt))
        for i in prange(ns):
            for j in range(nt):
                acc = c
                for h in range(hd):
                    z = a[i, h] + b[j, h]
                    if z > 0.0:
                        acc += z * w[h]
                out[i, j] = acc
        return out

    @njit(cache=True, parallel=True)
    def _pairwise_rows_nb(g, a, b, w):
        # per-row partials; the column side is handled by a transposed call
        ns, hd = a.shape
        nt = b.shape[0]
        ga = np.zeros((ns, hd))
        gw_rows = np.zeros((ns, hd))
        for i in prange(ns):
            for j in range(nt):
                gij = g[i, j]
                for h in range(hd):
                    z = a[i, h] + b[j, h]
                    if z > 0.0:
                        ga[i, h] += gij * w[h]
                        gw_rows[i, h] += gij * z
        return ga, gw_rows

    def pairwise_mlp_backward_nb(g, a, b, w):
        ga, gw_rows = _pairwise_rows_nb(g, a, b, w)
        gb, _ = _pairwise_rows_nb(np.ascontiguousarray(g.T), b, a, w)
        return ga, gb, gw_rows.sum(axis=0), g.sum()

    @njit(cache=True)
    def hungarian_nb(cost):
        n = cost.shape[0]
        u = np.zeros(n + 1)
        v = np.zeros(n + 1)
        p = np.zeros(n + 1, dtype=np.int64)
        way = np.zeros(n + 1, dtype=np.int64)
        for i in range(1, n + 1):
            p[0] = i
            j0 = 0
            minv = np.full(n + 1, np.inf)
            used = np.zeros(n + 1, dtype=np.bool_)
            while True:
                used[j0] = True
                i0 = p[j0]
                delta = np.inf
                j1 = 0
                for j in range(1, n + 1):
                    if not used[j]:
                        cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                        if cur < minv[j]:
                            minv[j] = cur
                            way[j] = j0
                        if minv[j] < delta:
                            delta = minv[j]
                            j1 = j
                for j in range(n + 1):
                    if used[j]:
                        u[p[j]] += delta
                        v[j] -= delta
                    else:
                        minv[j] -= delta
                j0 = j1
                if p[j0] == 0:
                    break
            while True:
                j1 = way[j0]
                p[j0] = p[j1]
                j0 = j1
                if j0 == 0:
                    break
        assign = np.empty(n, dtype=np.int64)
        for j in range(1, n + 1):
            assign[p[j] - 1] = j - 1
        return assign


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def backend_name():
    return "numba" if USE_NUMBA else "numpy"


def sinkhorn_forward(logits, iterations):
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    if USE_NUMBA:
        return sinkhorn_forward_nb(logits, int(iterations))
    return sinkhorn_forward_np(logits, int(iterations))


def sinkhorn_backward(grad_out, out, hist):
    grad_out = np.ascontiguousarray(grad_out, dtype=np.float64)
    if USE_NUMBA:
        return sinkhorn_backward_nb(grad_out, out, hist)
    return sinkhorn_backward_np(grad_out, out, hist)


def pairwise_mlp_forward(a, b, w, c):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    if USE_NUMBA:
        return pairwise_mlp_forward_nb(a, b, w, float(c))
    return pairwise_mlp_forward_np(a, b, w, float(c))


def pairwise_mlp_backward(g, a, b, w):
    g = np.ascontiguousarray(g, dtype=np.float64)
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    if USE_NUMBA:
        return pairwise_mlp_backward_nb(g, a, b, w)
    return pairwise_mlp_backward_np(g, a, b, w)


def hungarian(cost):
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if USE_NUMBA:
        return hungarian_nb(cost)
    return hungarian_np(cost)


_apply_thread_cap()
