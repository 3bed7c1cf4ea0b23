"""Discrete optimal transport: exact small-instance solver, log-domain
Sinkhorn for the entropy-regularized primal, the stabilized semi-dual, and a
trainable scalar-potential estimator.

Conventions: cost matrices are indexed C[i, j] with i over the first
measure's support (P) and j over the second (Q).  The entropic objective is
E_plan[C] + eps * KL(plan || P x Q), so the reported value includes the KL
term and agrees with the semi-dual at its maximum.
"""

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog, minimize
from scipy.special import logsumexp

from . import backend, diffcore


@dataclass
class DiscreteMeasure:
    points: np.ndarray   # (n, d) support, or (n,) opaque indices
    weights: np.ndarray  # (n,) nonnegative, summing to 1

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 1 or self.weights.shape[0] == 0:
            raise ValueError("need at least one weighted point")
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")
        if abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")

    @property
    def size(self):
        return self.weights.shape[0]


def uniform_measure(points):
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    return DiscreteMeasure(points, np.full(n, 1.0 / n))


@dataclass
class TransportPlan:
    matrix: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    converged: bool = True
    iterations: int = 0
    violation: float = 0.0

    def marginal_violation(self):
        r = np.abs(self.matrix.sum(axis=1) - self.row_marginal).max()
        c = np.abs(self.matrix.sum(axis=0) - self.col_marginal).max()
        return float(max(r, c))


@dataclass
class SinkhornConfig:
    eps_ot: float = 0.01
    tol: float = 1e-9
    max_iter: int = 20000

    def __post_init__(self):
        if not self.eps_ot > 0:
            raise ValueError("eps_ot must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")


def _weights_of(x):
    return x.weights if isinstance(x, DiscreteMeasure) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# exact solver (test oracle)

def exact_ot_small(a, b, C):
    """Globally optimal plan and cost for instances with n, m <= 8.

    Uniform equal-size inputs are solved by enumerating all permutations
    (independent of any LP machinery); general marginals go through the
    HiGHS LP solver, which returns an optimal vertex of the transport
    polytope.
    """
    wa = _weights_of(a)
    wb = _weights_of(b)
    C = np.asarray(C, dtype=np.float64)
    n, m = C.shape
    if n > 8 or m > 8:
        raise ValueError("exact solver is capped at 8x8 instances")
    if wa.shape[0] != n or wb.shape[0] != m:
        raise ValueError("marginal sizes do not match the cost matrix")

    uniform = (
        n == m
        and np.allclose(wa, 1.0 / n, atol=1e-12)
        and np.allclose(wb, 1.0 / m, atol=1e-12)
    )
    if uniform:
        best_perm, best_cost = None, np.inf
        for perm in itertools.permutations(range(n)):
            cost = sum(C[i, perm[i]] for i in range(n)) / n
            if cost < best_cost:
                best_cost, best_perm = cost, perm
        plan = np.zeros((n, m))
        for i, j in enumerate(best_perm):
            plan[i, j] = 1.0 / n
        return TransportPlan(plan, wa, wb), float(best_cost)

    res = linprog(
        C.ravel(),
        A_eq=_marginal_constraints(n, m),
        b_eq=np.concatenate([wa, wb]),
        bounds=(0, None),
        method="highs",
    )
    if not res.success:  # pragma: no cover - tiny feasible LPs always solve
        raise RuntimeError(f"exact transport LP failed: {res.message}")
    plan = res.x.reshape(n, m)
    return TransportPlan(plan, wa, wb), float(res.fun)


def _marginal_constraints(n, m):
    A = np.zeros((n + m, n * m))
    for i in range(n):
        A[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        A[n + j, j::m] = 1.0
    return A


# ---------------------------------------------------------------------------
# Sinkhorn

def sinkhorn(a, b, C, cfg=None):
    """Entropy-regularized transport in the log domain.

    Iterates until the plan's worst marginal violation is <= cfg.tol or
    max_iter is hit (then the plan is flagged non-converged).  Returns
    (TransportPlan, entropic_value) where the value is E[C] + eps*KL against
    the product of the marginals.
    """
    cfg = cfg or SinkhornConfig()
    wa = _weights_of(a)
    wb = _weights_of(b)
    C = np.asarray(C, dtype=np.float64)
    if np.any(wa <= 0) or np.any(wb <= 0):
        raise ValueError("sinkhorn needs strictly positive weights")
    loga = np.log(wa)
    logb = np.log(wb)
    f, g, iters, violation = backend.sinkhorn_potentials(
        loga, logb, C, cfg.eps_ot, cfg.tol, cfg.max_iter)
    logpi = loga[:, None] + logb[None, :] + (f[:, None] + g[None, :] - C) / cfg.eps_ot
    pi = np.exp(logpi)
    cost_term = float(np.sum(pi * C))
    kl_term = float(np.sum(pi * (f[:, None] + g[None, :] - C)) / cfg.eps_ot)
    value = cost_term + cfg.eps_ot * kl_term
    plan = TransportPlan(pi, wa, wb, converged=violation <= cfg.tol,
                         iterations=int(iters), violation=float(violation))
    return plan, value


def sinkhorn_value_trace(a, b, C, cfg, n_iters):
    """Entropic objective after each full Sinkhorn sweep (diagnostic)."""
    out = []
    for t in range(1, n_iters + 1):
        c = SinkhornConfig(eps_ot=cfg.eps_ot, tol=1e-300, max_iter=t)
        out.append(sinkhorn(a, b, C, c)[1])
    return out


# ---------------------------------------------------------------------------
# semi-dual

def semidual_value(phi, a, b, C, eps_ot):
    """Smoothed-conjugate dual objective for a potential on P's support.

    value = sum_j b_j * phi_c(j) + sum_i a_i * phi_i with
    phi_c(j) = -eps * log sum_i a_i exp((phi_i - C_ij) / eps), stabilized by
    log-sum-exp.  For any phi this lower-bounds the entropic primal optimum.
    """
    phi = np.asarray(phi, dtype=np.float64)
    wa = _weights_of(a)
    wb = _weights_of(b)
    C = np.asarray(C, dtype=np.float64)
    t = np.log(wa)[:, None] + (phi[:, None] - C) / eps_ot
    phic = -eps_ot * logsumexp(t, axis=0)
    return float(np.dot(wb, phic) + np.dot(wa, phi))


def semidual_grad(phi, a, b, C, eps_ot):
    """Gradient of semidual_value in phi: a_i - sum_j b_j w_ij with w the
    softmax weights inside the conjugate."""
    phi = np.asarray(phi, dtype=np.float64)
    wa = _weights_of(a)
    wb = _weights_of(b)
    C = np.asarray(C, dtype=np.float64)
    t = np.log(wa)[:, None] + (phi[:, None] - C) / eps_ot
    t -= t.max(axis=0, keepdims=True)
    w = np.exp(t)
    w /= w.sum(axis=0, keepdims=True)
    return wa - w @ wb


def maximize_semidual(a, b, C, eps_ot, tol=1e-12):
    """Best semi-dual value over phi, via L-BFGS on the concave objective.
    Serves as the cross-estimator check against the Sinkhorn primal value."""
    wa = _weights_of(a)

    def neg(phi):
        return -semidual_value(phi, a, b, C, eps_ot)

    def neg_grad(phi):
        return -semidual_grad(phi, a, b, C, eps_ot)

    res = minimize(neg, np.zeros_like(wa), jac=neg_grad, method="L-BFGS-B",
                   options={"maxiter": 5000, "ftol": tol, "gtol": 1e-12})
    return float(-res.fun), res.x


# ---------------------------------------------------------------------------
# trainable potential estimator

def init_potential_net(input_dim, rng, hidden=64):
    """Two dense layers with a ReLU between, emitting one scalar."""
    return diffcore.init_dense_net([input_dim, hidden, 1], 0, rng)


def sq_euclid_cost(xq, yp):
    """Squared-Euclidean cost block and its gradients.

    Returns (C, dC_dxq, dC_dyp) with C[q, i] = ||xq_q - yp_i||^2,
    dC_dxq[q, i] = 2 (xq_q - yp_i), dC_dyp[q, i] = -2 (xq_q - yp_i).
    """
    xq = np.asarray(xq, dtype=np.float64)
    yp = np.asarray(yp, dtype=np.float64)
    diff = xq[:, None, :] - yp[None, :, :]
    C = np.einsum("qik,qik->qi", diff, diff)
    return C, 2.0 * diff, -2.0 * diff


def dual_potential_estimate(pot, sample_p, sample_q, eps_ot, cost_fn=None):
    """Batch semi-dual value with a network potential, plus exact gradients.

    The potential is evaluated on sample_p; the smoothed conjugate averages
    over sample_q.  cost_fn(sample_q, sample_p) must return (C, dC_dq, dC_dp)
    as in sq_euclid_cost (the default).  Returns
    (value, pot_grads, d_sample_p, d_sample_q); ascending pot_grads trains
    the potential, and the sample gradients treat the potential as fixed.
    """
    sample_p = np.asarray(sample_p, dtype=np.float64)
    sample_q = np.asarray(sample_q, dtype=np.float64)
    if sample_p.size == 0 or sample_q.size == 0:
        raise ValueError("both sample batches must be nonempty")
    cost_fn = cost_fn or sq_euclid_cost
    np_, nq = sample_p.shape[0], sample_q.shape[0]

    cache = diffcore.forward_cache(pot, sample_p)
    phi = cache.logits[:, 0]
    C, dC_dq, dC_dp = cost_fn(sample_q, sample_p)

    t = (phi[None, :] - C) / eps_ot - np.log(np_)
    lse = logsumexp(t, axis=1)
    phic = -eps_ot * lse
    value = float(phic.mean() + phi.mean())

    w = np.exp(t - lse[:, None])           # (nq, np) softmax over p
    dphi = 1.0 / np_ - w.sum(axis=0) / nq  # d value / d phi_i
    pot_grads, dp_net = diffcore.backprop(pot, cache, dlogits=dphi[:, None])

    dq = np.einsum("qi,qik->qk", w, dC_dq) / nq
    dp = dp_net + np.einsum("qi,qik->ik", w, dC_dp) / nq
    return value, pot_grads, dp, dq
