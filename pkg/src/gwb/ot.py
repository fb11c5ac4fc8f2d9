"""Pairwise quadratic-cost optimal transport.

Three backends: an exact dense transportation LP (HiGHS dual simplex, so
the optimum is a vertex of the transportation polytope and comes with dual
potentials), a Sinkhorn solver with automatic log-domain stabilization,
and the closed form for Gaussians. Solvers are reentrant and keep no
global state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog
from scipy.special import logsumexp

from .errors import DimensionMismatchError, GwbError
from .linalg import psd_sqrt
from .measures import DiscreteMeasure, GaussianMeasure

MARGINAL_TOL = 1e-9
# Above this cost/epsilon ratio plain Sinkhorn scaling underflows; switch
# to log-domain updates.
LOG_DOMAIN_RATIO = 500.0


@dataclass(eq=False)
class TransportPlan:
    """Sparse coupling between two point clouds.

    ``entries`` holds ``(i, j, mass)`` triples; ``cost`` is the transport
    cost of the plan under squared Euclidean distance. Exact solves attach
    dual ``potentials`` ``(u, v)`` with ``max_slackness`` the largest
    complementary-slackness residual on the support. Entropic solves set
    ``epsilon``, ``entropic_cost`` and possibly ``converged=False``.
    """

    rows: int
    cols: int
    entries: list
    cost: float
    source: DiscreteMeasure | None = None
    target: DiscreteMeasure | None = None
    potentials: tuple | None = None
    max_slackness: float | None = None
    epsilon: float | None = None
    entropic_cost: float | None = None
    converged: bool = True
    iterations: int = 0

    def matrix(self):
        P = np.zeros((self.rows, self.cols))
        for i, j, m in self.entries:
            P[i, j] += m
        return P

    def validate(self, source_weights, target_weights, tol=MARGINAL_TOL):
        P = self.matrix()
        if np.any(P < 0):
            raise GwbError("transport plan has negative mass")
        row_err = np.abs(P.sum(axis=1) - source_weights).max()
        col_err = np.abs(P.sum(axis=0) - target_weights).max()
        if max(row_err, col_err) > tol:
            raise GwbError(
                f"transport plan marginals off by {max(row_err, col_err):.3e} (tol {tol:.1e})"
            )


def _cost_matrix(mu: DiscreteMeasure, nu: DiscreteMeasure):
    if mu.dim != nu.dim:
        raise DimensionMismatchError("measures live in different dimensions",
                                     expected=mu.dim, got=nu.dim)
    diff = mu.points[:, None, :] - nu.points[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def solve_transport(C, a, b):
    """Exact transportation LP ``min <C, P>`` with marginals ``a`` and ``b``.

    Returns ``(P, (u, v), max_slackness)`` where ``u, v`` are optimal dual
    potentials taken from the LP's equality multipliers.
    """
    C = np.asarray(C, dtype=float)
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    m, n = C.shape
    A_eq = sp.vstack(
        [
            sp.kron(sp.eye(m, format="csr"), np.ones((1, n)), format="csr"),
            sp.kron(np.ones((1, m)), sp.eye(n, format="csr"), format="csr"),
        ],
        format="csr",
    )
    b_eq = np.concatenate([a, b])
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs-ds")
    if res.status != 0:
        raise GwbError(f"transportation LP failed: {res.message}")
    P = np.clip(res.x.reshape(m, n), 0.0, None)
    u = np.asarray(res.eqlin.marginals[:m])
    v = np.asarray(res.eqlin.marginals[m:])
    support = P > 0
    slack = np.abs(C - u[:, None] - v[None, :])[support].max(initial=0.0)
    return P, (u, v), float(slack)


def _plan_from_matrix(P, threshold=0.0):
    entries = [
        (int(i), int(j), float(P[i, j]))
        for i, j in zip(*np.nonzero(P > threshold))
    ]
    return entries


def w2_discrete_exact(mu: DiscreteMeasure, nu: DiscreteMeasure) -> TransportPlan:
    """Optimal coupling for squared Euclidean cost via an exact LP."""
    C = _cost_matrix(mu, nu)
    P, (u, v), slack = solve_transport(C, mu.weights, nu.weights)
    entries = _plan_from_matrix(P, threshold=1e-15)
    cost = float(sum(m * C[i, j] for i, j, m in entries))
    plan = TransportPlan(
        rows=mu.n_atoms,
        cols=nu.n_atoms,
        entries=entries,
        cost=cost,
        source=mu,
        target=nu,
        potentials=(u, v),
        max_slackness=slack,
    )
    plan.validate(mu.weights, nu.weights)
    return plan


def _sinkhorn_scaling(C, a, b, eps, max_iter, tol):
    K = np.exp(-C / eps)
    u = np.ones_like(a)
    v = np.ones_like(b)
    for it in range(1, max_iter + 1):
        Kv = K @ v
        if not np.all(np.isfinite(Kv)) or np.any(Kv == 0):
            return None, it, False  # underflow: caller retries in log domain
        u = a / Kv
        KTu = K.T @ u
        if not np.all(np.isfinite(KTu)) or np.any(KTu == 0):
            return None, it, False
        v = b / KTu
        row_violation = np.abs(u * (K @ v) - a).sum()
        if row_violation <= tol:
            return (u[:, None] * K) * v[None, :], it, True
    return (u[:, None] * K) * v[None, :], max_iter, False


def _sinkhorn_log(C, a, b, eps, max_iter, tol):
    log_a = np.log(a)
    log_b = np.log(b)
    f = np.zeros_like(a)
    g = np.zeros_like(b)
    for it in range(1, max_iter + 1):
        f = eps * (log_a - logsumexp((g[None, :] - C) / eps, axis=1))
        g = eps * (log_b - logsumexp((f[:, None] - C) / eps, axis=0))
        P = np.exp((f[:, None] + g[None, :] - C) / eps)
        row_violation = np.abs(P.sum(axis=1) - a).sum()
        if row_violation <= tol:
            return P, it, True
    return P, max_iter, False


def w2_discrete_entropic(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    epsilon: float,
    max_iter: int = 10000,
    tol: float = 1e-9,
) -> TransportPlan:
    """Entropy-regularized coupling via Sinkhorn iterations.

    The returned plan is dense; ``cost`` is its unregularized transport
    cost while ``entropic_cost`` additionally carries the
    ``eps * KL(P | a x b)`` penalty. Non-convergence within ``max_iter``
    returns the best iterate flagged ``converged=False``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    C = _cost_matrix(mu, nu)
    a, b = mu.weights, nu.weights
    use_log = C.max(initial=0.0) / epsilon > LOG_DOMAIN_RATIO
    P, iters, ok = (None, 0, False)
    if not use_log:
        P, iters, ok = _sinkhorn_scaling(C, a, b, epsilon, max_iter, tol)
    if P is None:
        P, iters, ok = _sinkhorn_log(C, a, b, epsilon, max_iter, tol)
    cost = float((P * C).sum())
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = P / np.outer(a, b)
        kl = float(np.sum(np.where(P > 0, P * np.log(ratio), 0.0)))
    plan = TransportPlan(
        rows=mu.n_atoms,
        cols=nu.n_atoms,
        entries=_plan_from_matrix(P),
        cost=cost,
        source=mu,
        target=nu,
        epsilon=float(epsilon),
        entropic_cost=cost + epsilon * kl,
        converged=ok,
        iterations=iters,
    )
    plan.validate(a, b, tol=max(tol, MARGINAL_TOL))
    return plan


def w2_gaussian(nu1: GaussianMeasure, nu2: GaussianMeasure) -> float:
    """Squared Bures-Wasserstein distance between two Gaussians.

    ``|m1-m2|^2 + tr(S1) + tr(S2) - 2 tr((S1^{1/2} S2 S1^{1/2})^{1/2})``;
    covariances may be singular.
    """
    if nu1.dim != nu2.dim:
        raise DimensionMismatchError("Gaussians live in different dimensions",
                                     expected=nu1.dim, got=nu2.dim)
    root1 = psd_sqrt(nu1.cov).sqrt
    inner = root1 @ nu2.cov @ root1
    cross = np.trace(psd_sqrt((inner + inner.T) / 2.0).sqrt)
    mean_term = float(np.sum((nu1.mean - nu2.mean) ** 2))
    val = mean_term + float(np.trace(nu1.cov) + np.trace(nu2.cov) - 2.0 * cross)
    if val < -1e-8 * max(1.0, abs(val)):
        raise GwbError(f"Bures-Wasserstein distance came out negative: {val!r}")
    return max(val, 0.0)
