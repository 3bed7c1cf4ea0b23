"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The backend is chosen once at import time: numba is used when it imports
cleanly, unless the environment variable ``GLOT_NUMBA`` is set to ``0``
(force numpy) or ``1`` (require numba, raise if unavailable).  Both paths
implement identical math; ``benchmarks/bench_backends.py`` compares them.

All kernels use fixed summation orders so repeated runs are bit-identical
within a backend.
"""

import os

import numpy as np

_flag = os.environ.get("GLOT_NUMBA", "").strip()
if _flag == "0":
    _HAVE_NUMBA = False
else:
    try:
        from numba import njit

        _HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        if _flag == "1":
            raise
        _HAVE_NUMBA = False

if not _HAVE_NUMBA:
    def njit(*args, **kwargs):
        """No-op decorator standing in for numba.njit."""
        if args and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn

        return wrap


def active_backend():
    return "numba" if _HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# pairwise squared distances

def _pairwise_sq_dists_np(x, y):
    diff = x[:, None, :] - y[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


@njit(cache=True)
def _pairwise_sq_dists_nb(x, y):
    n, d = x.shape
    m = y.shape[0]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for k in range(d):
                t = x[i, k] - y[j, k]
                s += t * t
            out[i, j] = s
    return out


def pairwise_sq_dists(x, y):
    """Squared Euclidean distance matrix between rows of x (n,d) and y (m,d)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if _HAVE_NUMBA:
        return _pairwise_sq_dists_nb(x, y)
    return _pairwise_sq_dists_np(x, y)


# ---------------------------------------------------------------------------
# SVGD kernelized direction, batched over independent particle sets

def _svgd_directions_np(parts, scores, sigmas):
    B, n, d = parts.shape
    sq = np.einsum("bik,bjk->bij", parts, parts)
    nrm = np.einsum("bik,bik->bi", parts, parts)
    sqd = nrm[:, :, None] + nrm[:, None, :] - 2.0 * sq
    K = np.exp(-sqd / (2.0 * sigmas**2)[:, None, None])
    drive = np.einsum("bji,bjk->bik", K, scores)
    ksum = K.sum(axis=1)
    repulse = (ksum[:, :, None] * parts - np.einsum("bji,bjk->bik", K, parts))
    repulse /= (sigmas**2)[:, None, None]
    return (drive + repulse) / n


@njit(cache=True)
def _svgd_directions_nb(parts, scores, sigmas):
    B, n, d = parts.shape
    out = np.zeros((B, n, d))
    for b in range(B):
        inv2s2 = 1.0 / (2.0 * sigmas[b] * sigmas[b])
        invs2 = 1.0 / (sigmas[b] * sigmas[b])
        for i in range(n):
            for j in range(n):
                sqd = 0.0
                for k in range(d):
                    t = parts[b, j, k] - parts[b, i, k]
                    sqd += t * t
                kij = np.exp(-sqd * inv2s2)
                for k in range(d):
                    out[b, i, k] += kij * scores[b, j, k]
                    out[b, i, k] += kij * (parts[b, i, k] - parts[b, j, k]) * invs2
            for k in range(d):
                out[b, i, k] /= n
    return out


def svgd_directions(parts, scores, sigmas):
    """Kernelized Stein directions for a batch of independent particle sets.

    parts, scores: (B, n, d); sigmas: (B,) RBF bandwidths.  Returns (B, n, d)
    with entry (b, i) = (1/n) sum_j [k(x_bj, x_bi) score_bj
    + grad_{x_bj} k(x_bj, x_bi)].
    """
    parts = np.ascontiguousarray(parts, dtype=np.float64)
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    sigmas = np.ascontiguousarray(sigmas, dtype=np.float64)
    if _HAVE_NUMBA:
        return _svgd_directions_nb(parts, scores, sigmas)
    return _svgd_directions_np(parts, scores, sigmas)


# ---------------------------------------------------------------------------
# log-domain Sinkhorn potential iterations

def _logsumexp_rows_np(t):
    m = t.max(axis=1)
    return m + np.log(np.exp(t - m[:, None]).sum(axis=1))


def _sinkhorn_potentials_np(loga, logb, C, eps, tol, max_iter):
    f = np.zeros(loga.shape[0])
    g = np.zeros(logb.shape[0])
    violation = np.inf
    it = 0
    while it < max_iter:
        f = -eps * _logsumexp_rows_np(logb[None, :] + (g[None, :] - C) / eps)
        g = -eps * _logsumexp_rows_np(loga[None, :] + (f[None, :] - C.T) / eps)
        # columns are exact after the g-update; rows carry the violation
        logpi = loga[:, None] + logb[None, :] + (f[:, None] + g[None, :] - C) / eps
        rows = np.exp(_logsumexp_rows_np(logpi))
        violation = np.abs(rows - np.exp(loga)).max()
        it += 1
        if violation <= tol:
            break
    return f, g, it, violation


@njit(cache=True)
def _sinkhorn_potentials_nb(loga, logb, C, eps, tol, max_iter):
    n = loga.shape[0]
    m = logb.shape[0]
    f = np.zeros(n)
    g = np.zeros(m)
    violation = np.inf
    it = 0
    while it < max_iter:
        for i in range(n):
            hi = -np.inf
            for j in range(m):
                t = logb[j] + (g[j] - C[i, j]) / eps
                if t > hi:
                    hi = t
            s = 0.0
            for j in range(m):
                s += np.exp(logb[j] + (g[j] - C[i, j]) / eps - hi)
            f[i] = -eps * (hi + np.log(s))
        for j in range(m):
            hj = -np.inf
            for i in range(n):
                t = loga[i] + (f[i] - C[i, j]) / eps
                if t > hj:
                    hj = t
            s = 0.0
            for i in range(n):
                s += np.exp(loga[i] + (f[i] - C[i, j]) / eps - hj)
            g[j] = -eps * (hj + np.log(s))
        violation = 0.0
        for i in range(n):
            hi = -np.inf
            for j in range(m):
                t = loga[i] + logb[j] + (f[i] + g[j] - C[i, j]) / eps
                if t > hi:
                    hi = t
            s = 0.0
            for j in range(m):
                s += np.exp(loga[i] + logb[j] + (f[i] + g[j] - C[i, j]) / eps - hi)
            r = np.exp(hi + np.log(s))
            v = abs(r - np.exp(loga[i]))
            if v > violation:
                violation = v
        it += 1
        if violation <= tol:
            break
    return f, g, it, violation


def sinkhorn_potentials(loga, logb, C, eps, tol, max_iter):
    """Run log-domain Sinkhorn updates until the row-marginal violation of the
    implied plan drops to tol.  Returns (f, g, iterations, violation)."""
    loga = np.ascontiguousarray(loga, dtype=np.float64)
    logb = np.ascontiguousarray(logb, dtype=np.float64)
    C = np.ascontiguousarray(C, dtype=np.float64)
    if _HAVE_NUMBA:
        return _sinkhorn_potentials_nb(loga, logb, C, float(eps), float(tol),
                                       int(max_iter))
    return _sinkhorn_potentials_np(loga, logb, C, float(eps), float(tol),
                                   int(max_iter))


# ---------------------------------------------------------------------------
# projected gradient ascent of  sum(w*r) + H(w)/lam  over the simplex

@njit(cache=True)
def _project_simplex_nb(v):
    n = v.shape[0]
    u = np.sort(v)[::-1]
    css = 0.0
    rho = -1
    theta = 0.0
    for j in range(n):
        css += u[j]
        t = (css - 1.0) / (j + 1.0)
        if u[j] - t > 0.0:
            rho = j
            theta = t
    out = np.empty(n)
    for i in range(n):
        w = v[i] - theta
        out[i] = w if w > 0.0 else 0.0
    return out


def _project_simplex_np(v):
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    idx = np.arange(1, v.shape[0] + 1)
    cond = u - (css - 1.0) / idx > 0.0
    rho = np.nonzero(cond)[0][-1]
    theta = (css[rho] - 1.0) / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def project_simplex(v):
    """Euclidean projection of a vector onto the probability simplex."""
    v = np.ascontiguousarray(v, dtype=np.float64)
    if _HAVE_NUMBA:
        return _project_simplex_nb(v)
    return _project_simplex_np(v)


@njit(cache=True)
def _entropy_gain_nb(w, cand, r, lam):
    # objective difference (lam-scaled): lam*sum((cand-w)*r) + H(cand) - H(w),
    # summed per coordinate so tiny gains are not lost to |F|*eps rounding
    gain = 0.0
    for i in range(w.shape[0]):
        gain += lam * (cand[i] - w[i]) * r[i]
        if cand[i] > 0.0:
            gain -= cand[i] * np.log(cand[i])
        if w[i] > 0.0:
            gain += w[i] * np.log(w[i])
    return gain


@njit(cache=True)
def _scaled_simplex_step_nb(w, grad, eta, floor):
    # one metric-projected ascent step: x_i = max(0, a_i - tau*b_i) with
    # a_i = w_i + eta*max(w_i,floor)*g_i, b_i = eta*max(w_i,floor), tau
    # chosen so the masses sum to 1.  Scaling by the current mass keeps all
    # coordinate scales progressing at once; projecting in the same scaled
    # metric keeps the fixed point at grad = const on the active set.
    n = w.shape[0]
    a = np.empty(n)
    b = np.empty(n)
    for i in range(n):
        wf = w[i] if w[i] > floor else floor
        b[i] = eta * wf
        a[i] = w[i] + b[i] * grad[i]
    ratios = a / b
    order = np.argsort(ratios)[::-1]
    sa = 0.0
    sb = 0.0
    tau = 0.0
    for k in range(n):
        i = order[k]
        sa += a[i]
        sb += b[i]
        t = (sa - 1.0) / sb
        if t < ratios[i] and (k == n - 1 or t >= ratios[order[k + 1]]):
            tau = t
            break
    out = np.empty(n)
    for i in range(n):
        v = a[i] - tau * b[i]
        out[i] = v if v > 0.0 else 0.0
    s = out.sum()
    return out / s


@njit(cache=True)
def _simplex_entropy_ascent_nb(r, lam, eta0, max_iter, stop_tol):
    # floor 1e-12 keeps the boundary KKT-consistent: coordinates whose
    # optimal mass is below the floor rest at exactly 0 (TV error < n*1e-12)
    # instead of dragging every step through destructive re-injections
    n = r.shape[0]
    w = np.full(n, 1.0 / n)
    floor = 1e-12
    for it in range(max_iter):
        grad = np.empty(n)
        for i in range(n):
            wi = w[i] if w[i] > floor else floor
            grad[i] = lam * r[i] - (np.log(wi) + 1.0)
        eta = eta0
        accepted = False
        w_new = w
        for _ in range(60):
            cand = _scaled_simplex_step_nb(w, grad, eta, floor)
            if _entropy_gain_nb(w, cand, r, lam) >= 0.0:
                w_new = cand
                accepted = True
                break
            eta *= 0.5
        if not accepted:
            break
        delta = 0.0
        for i in range(n):
            d = abs(w_new[i] - w[i])
            if d > delta:
                delta = d
        w = w_new
        if delta < stop_tol:
            break
    return w


def _entropy_gain_np(w, cand, r, lam):
    # per-coordinate objective difference; see the numba twin for rationale
    gain = lam * np.dot(cand - w, r)
    pos = cand > 0.0
    gain -= float(np.sum(cand[pos] * np.log(cand[pos])))
    pos = w > 0.0
    gain += float(np.sum(w[pos] * np.log(w[pos])))
    return gain


def _scaled_simplex_step_np(w, grad, eta, floor):
    # numpy twin of _scaled_simplex_step_nb
    b = eta * np.maximum(w, floor)
    a = w + b * grad
    ratios = a / b
    order = np.argsort(ratios)[::-1]
    sa = np.cumsum(a[order])
    sb = np.cumsum(b[order])
    taus = (sa - 1.0) / sb
    sorted_ratios = ratios[order]
    ok = taus < sorted_ratios
    nxt = np.empty_like(taus)
    nxt[:-1] = sorted_ratios[1:]
    nxt[-1] = -np.inf
    ok &= taus >= nxt
    tau = taus[np.nonzero(ok)[0][0]]
    out = np.maximum(a - tau * b, 0.0)
    return out / out.sum()


def _simplex_entropy_ascent_np(r, lam, eta0, max_iter, stop_tol):
    n = r.shape[0]
    w = np.full(n, 1.0 / n)
    floor = 1e-12
    for _ in range(max_iter):
        grad = lam * r - (np.log(np.maximum(w, floor)) + 1.0)
        eta = eta0
        accepted = False
        w_new = w
        for _ in range(60):
            cand = _scaled_simplex_step_np(w, grad, eta, floor)
            if _entropy_gain_np(w, cand, r, lam) >= 0.0:
                w_new, accepted = cand, True
                break
            eta *= 0.5
        if not accepted:
            break
        delta = np.abs(w_new - w).max()
        w = w_new
        if delta < stop_tol:
            break
    return w


def simplex_entropy_ascent(r, lam, eta0=1.0, max_iter=200_000, stop_tol=1e-14):
    """Maximize sum(w*r) + H(w)/lam over the simplex by projected gradient
    ascent (per-coordinate step scaling, monotone backtracking).  Iterative
    and independent of the closed-form solution; used as the brute-force
    side of the Gibbs-conditional cross-check."""
    r = np.ascontiguousarray(r, dtype=np.float64)
    if _HAVE_NUMBA:
        return _simplex_entropy_ascent_nb(r, float(lam), float(eta0),
                                          int(max_iter), float(stop_tol))
    return _simplex_entropy_ascent_np(r, float(lam), float(eta0),
                                      int(max_iter), float(stop_tol))
