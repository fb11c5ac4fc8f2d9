"""Multimarginal formulation of the projection-consensus problem.

The problem couples all marginals at once with the cost
``c(x_1..x_p) = sum_i w_i |x_i - P_i(bary(x))|^2`` where ``bary`` is the
weighted least-squares point reconstructed from the tuple. An optimal
coupling pushed through ``bary`` is an optimal consensus measure, and the
two optimal values coincide, which is what the exact solver exploits.

Solvers materialize the dense cost tensor, so the tuple count is gated by
a cap (``GWB_TENSOR_CAP`` environment variable or the ``cap`` argument).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog
from scipy.special import logsumexp

from .errors import CapExceededError, DimensionMismatchError, GwbError, SingularMatrixError
from .linalg import ProjectionFamily, assemble_A, psd_sqrt
from .measures import (
    DiscreteMeasure,
    ProblemSpec,
    objective as _objective,
    per_marginal_terms,
    reduce_spec,
)
from .ot import LOG_DOMAIN_RATIO, w2_discrete_exact

DEFAULT_TENSOR_CAP = 2_000_000
# Entropic plans keep entries above this fraction of the uniform tuple
# mass when converted to sparse form for recovery.
ENTROPIC_KEEP_FRACTION = 1e-3


def _effective_cap(cap):
    if cap is not None:
        return int(cap)
    env = os.environ.get("GWB_TENSOR_CAP")
    if env is not None:
        return int(env)
    return DEFAULT_TENSOR_CAP


def _check_family_invertible(family):
    A = assemble_A(family)
    lam = np.linalg.eigvalsh(A)
    if lam[0] <= 1e-10 * max(lam[-1], np.finfo(float).tiny):
        raise SingularMatrixError(
            "normal matrix A is singular; apply kernel_reduction to the family first"
        )
    return A


def euclidean_barycenter(xs, family: ProjectionFamily) -> np.ndarray:
    """Point minimizing ``sum_i w_i |x_i - P_i y|^2``: ``A^{-1} sum_i w_i P_i^T x_i``."""
    A = _check_family_invertible(family)
    if len(xs) != family.p:
        raise DimensionMismatchError("one point per map", expected=family.p, got=len(xs))
    rhs = np.zeros(family.d)
    for w, P, x in zip(family.weights, family.maps, xs):
        x = np.asarray(x, dtype=float).ravel()
        if x.shape[0] != P.shape[0]:
            raise DimensionMismatchError("tuple point dimension", expected=P.shape[0], got=x.shape[0])
        rhs += w * (P.T @ x)
    return np.linalg.solve(A, rhs)


def mm_cost(xs, family: ProjectionFamily) -> float:
    """Tuple cost ``sum_i w_i |x_i - P_i(bary(x))|^2``; zero iff consistent."""
    y = euclidean_barycenter(xs, family)
    total = 0.0
    for w, P, x in zip(family.weights, family.maps, xs):
        total += w * float(np.sum((np.asarray(x, dtype=float).ravel() - P @ y) ** 2))
    return total


@dataclass(eq=False)
class MultiMarginalPlan:
    """Coupling over tuples of support indices.

    ``entries`` is a list of ``(index_tuple, mass)``; all one-dimensional
    marginals of the plan match the input weights (exact plans to 1e-9,
    entropic plans to the solver tolerance recorded in ``marginal_tol``).
    """

    shape: tuple
    entries: list
    cost: float
    epsilon: float | None = None
    converged: bool = True
    iterations: int = 0
    marginal_tol: float = 1e-9

    def marginal(self, i):
        out = np.zeros(self.shape[i])
        for idx, m in self.entries:
            out[idx[i]] += m
        return out

    def validate(self, weight_vectors, tol=None):
        tol = self.marginal_tol if tol is None else tol
        for i, w in enumerate(weight_vectors):
            err = np.abs(self.marginal(i) - w).max()
            if err > tol:
                raise GwbError(f"plan marginal {i} off by {err:.3e} (tol {tol:.1e})")


@dataclass(eq=False)
class BarycenterResult:
    """A consensus measure with its objective and per-marginal terms."""

    measure: DiscreteMeasure
    objective: float
    route: str
    diagnostics: dict = field(default_factory=dict)


class _TupleGeometry:
    """Dense tuple-space geometry for a discrete, reduced spec.

    Holds the flattened barycenter image ``Y`` (one row per tuple) and the
    flattened cost vector, plus the index arrays mapping flat positions to
    per-marginal support indices.
    """

    def __init__(self, spec: ProblemSpec, cap):
        if spec.kind != "discrete":
            raise TypeError("multimarginal solvers need discrete marginals")
        family = spec.family
        self.A = _check_family_invertible(family)
        self.shape = tuple(m.n_atoms for m in spec.marginals)
        n_tuples = int(np.prod(self.shape, dtype=np.int64))
        if n_tuples > cap:
            raise CapExceededError(
                f"{n_tuples} tuples exceed the cap of {cap}; use the entropic or "
                "free-support route, or raise GWB_TENSOR_CAP"
            )
        self.n_tuples = n_tuples
        self.index_arrays = np.unravel_index(np.arange(n_tuples), self.shape)
        # Right-hand sides w_i P_i^T x_i summed over the tuple, then solved
        # against A once for every tuple.
        d = family.d
        rhs = np.zeros((n_tuples, d))
        for i, (w, P, m) in enumerate(zip(family.weights, family.maps, spec.marginals)):
            Z = w * (m.points @ P)  # (m_i, d)
            rhs += Z[self.index_arrays[i]]
        self.Y = np.linalg.solve(self.A, rhs.T).T
        cost = np.zeros(n_tuples)
        for i, (w, P, m) in enumerate(zip(family.weights, family.maps, spec.marginals)):
            proj = self.Y @ P.T
            diff = m.points[self.index_arrays[i]] - proj
            cost += w * np.einsum("ij,ij->i", diff, diff)
        self.cost = cost

    def cost_tensor(self):
        return self.cost.reshape(self.shape)


def _entries_from_flat(x, shape, threshold=1e-15):
    keep = np.nonzero(x > threshold)[0]
    idx = np.unravel_index(keep, shape)
    return [
        (tuple(int(idx[i][k]) for i in range(len(shape))), float(x[keep[k]]))
        for k in range(len(keep))
    ]


def solve_mm_exact(spec: ProblemSpec, cap: int | None = None) -> MultiMarginalPlan:
    """Exact LP over the full tuple tensor.

    The family is kernel-reduced internally; the optimal value equals the
    optimal consensus objective.
    """
    spec_red, _ = reduce_spec(spec)
    geom = _TupleGeometry(spec_red, _effective_cap(cap))
    n = geom.n_tuples
    blocks = []
    for i, mi in enumerate(geom.shape):
        rows = geom.index_arrays[i]
        blocks.append(sp.csr_matrix((np.ones(n), (rows, np.arange(n))), shape=(mi, n)))
    A_eq = sp.vstack(blocks, format="csr")
    b_eq = np.concatenate([m.weights for m in spec_red.marginals])
    res = linprog(geom.cost, A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise GwbError(f"multimarginal LP failed: {res.message}")
    x = np.clip(res.x, 0.0, None)
    entries = _entries_from_flat(x, geom.shape)
    cost = float(sum(m * geom.cost[np.ravel_multi_index(idx, geom.shape)] for idx, m in entries))
    plan = MultiMarginalPlan(shape=geom.shape, entries=entries, cost=cost)
    plan.validate([m.weights for m in spec_red.marginals])
    return plan


def solve_mm_entropic(
    spec: ProblemSpec,
    epsilon: float,
    max_iter: int = 10000,
    tol: float = 1e-9,
    cap: int | None = None,
) -> MultiMarginalPlan:
    """Entropy-regularized multimarginal coupling.

    One scaling potential per marginal, updated round-robin; switches to
    log-domain updates when ``max(cost)/epsilon`` is large. Returns a dense
    plan (all positive entries kept); ``cost`` is the plan's unregularized
    tuple cost.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    spec_red, _ = reduce_spec(spec)
    geom = _TupleGeometry(spec_red, _effective_cap(cap))
    C = geom.cost_tensor()
    weights = [m.weights for m in spec_red.marginals]
    p = len(weights)
    axes = list(range(p))
    use_log = C.max(initial=0.0) / epsilon > LOG_DOMAIN_RATIO

    P, iters, ok = None, 0, False
    if not use_log:
        K = np.exp(-C / epsilon)
        us = [np.ones_like(w) for w in weights]
        for it in range(1, max_iter + 1):
            for i in range(p):
                scaled = K
                for k in range(p):
                    if k != i:
                        scaled = scaled * _bcast(us[k], k, p)
                marg = scaled.sum(axis=tuple(a for a in axes if a != i))
                if not np.all(np.isfinite(marg)) or np.any(marg == 0):
                    P = None
                    break
                us[i] = weights[i] / marg
            else:
                P = K
                for k in range(p):
                    P = P * _bcast(us[k], k, p)
                viol = max(
                    np.abs(P.sum(axis=tuple(a for a in axes if a != i)) - weights[i]).sum()
                    for i in range(p)
                )
                iters = it
                if viol <= tol:
                    ok = True
                    break
                continue
            break  # underflow: fall through to log domain

    if P is None or (not ok and use_log is False and iters == 0):
        use_log = True
    if use_log:
        base = -C / epsilon
        fs = [np.zeros_like(w) for w in weights]
        log_w = [np.log(w) for w in weights]
        for it in range(1, max_iter + 1):
            for i in range(p):
                L = base.copy()
                for k in range(p):
                    if k != i:
                        L = L + _bcast(fs[k] / epsilon, k, p)
                M = logsumexp(L, axis=tuple(a for a in axes if a != i))
                fs[i] = epsilon * (log_w[i] - M)
            L = base.copy()
            for k in range(p):
                L = L + _bcast(fs[k] / epsilon, k, p)
            P = np.exp(L)
            viol = max(
                np.abs(P.sum(axis=tuple(a for a in axes if a != i)) - weights[i]).sum()
                for i in range(p)
            )
            iters = it
            if viol <= tol:
                ok = True
                break

    flat = P.ravel()
    entries = _entries_from_flat(flat, geom.shape, threshold=0.0)
    cost = float(flat @ geom.cost)
    plan = MultiMarginalPlan(
        shape=geom.shape,
        entries=entries,
        cost=cost,
        epsilon=float(epsilon),
        converged=ok,
        iterations=iters,
        marginal_tol=max(tol, 1e-9),
    )
    plan.validate(weights)
    return plan


def _bcast(vec, axis, p):
    shape = [1] * p
    shape[axis] = len(vec)
    return vec.reshape(shape)


def _merge_atoms(points, weights):
    seen = {}
    out_points = []
    out_weights = []
    for row, w in zip(points, weights):
        key = row.tobytes()
        if key in seen:
            out_weights[seen[key]] += w
        else:
            seen[key] = len(out_points)
            out_points.append(row)
            out_weights.append(w)
    return np.array(out_points), np.array(out_weights)


def recover_barycenter(
    plan: MultiMarginalPlan,
    spec: ProblemSpec,
    route: str | None = None,
    threshold: float | None = None,
) -> BarycenterResult:
    """Push a coupling through the tuple barycenter map.

    Entropic (dense) plans are first sparsified: entries below
    ``threshold`` (default ``1e-3 / n_tuples`` of total mass) are dropped
    and the rest renormalized. The objective is evaluated with exact
    pairwise transport against the original marginals.
    """
    spec_red, Q = reduce_spec(spec)
    family = spec_red.family
    A = _check_family_invertible(family)
    entries = plan.entries
    if plan.epsilon is not None:
        if threshold is None:
            threshold = ENTROPIC_KEEP_FRACTION / float(np.prod(plan.shape, dtype=np.int64))
        kept = [(idx, m) for idx, m in entries if m > threshold]
        if not kept:
            raise GwbError("thresholding removed every plan entry")
        total = sum(m for _, m in kept)
        entries = [(idx, m / total) for idx, m in kept]
    if tuple(plan.shape) != tuple(m.n_atoms for m in spec.marginals):
        raise DimensionMismatchError(
            "plan shape does not match spec supports",
            expected=tuple(m.n_atoms for m in spec.marginals),
            got=tuple(plan.shape),
        )
    supports = [m.points for m in spec_red.marginals]
    rhs = np.zeros((len(entries), family.d))
    masses = np.zeros(len(entries))
    for k, (idx, m) in enumerate(entries):
        acc = np.zeros(family.d)
        for i, (w, P) in enumerate(zip(family.weights, family.maps)):
            acc += w * (P.T @ supports[i][idx[i]])
        rhs[k] = acc
        masses[k] = m
    points_red = np.linalg.solve(A, rhs.T).T
    points = points_red @ Q.T
    merged_points, merged_weights = _merge_atoms(points, masses)
    gamma = DiscreteMeasure(merged_points, merged_weights / merged_weights.sum())
    terms = per_marginal_terms(gamma, spec, lambda nu, proj: w2_discrete_exact(nu, proj).cost)
    obj = float(np.dot(spec.family.weights, terms))
    if route is None:
        route = "exact-mm" if plan.epsilon is None else "entropic-mm"
    return BarycenterResult(
        measure=gamma,
        objective=obj,
        route=route,
        diagnostics={
            "per_marginal_w2": terms,
            "plan_cost": plan.cost,
            "plan_converged": plan.converged,
        },
    )


def solve_via_classical_mm(spec: ProblemSpec, cap: int | None = None) -> BarycenterResult:
    """Solve through the lifted marginals and the classical multimarginal cost.

    The marginals are pushed into the common space by ``A^{-1/2} P_i^T``,
    the classical problem (identity maps) is solved exactly there, and the
    weighted-mean pushforward is mapped back by ``A^{-1/2}``.
    """
    spec_red, Q = reduce_spec(spec)
    family = spec_red.family
    A = _check_family_invertible(family)
    roots = psd_sqrt(A)
    from .measures import lifted_marginals, pushforward_discrete

    lifted = lifted_marginals(spec_red)
    d = family.d
    identity_family = ProjectionFamily(
        d=d, maps=[np.eye(d)] * family.p, weights=family.weights
    )
    lifted_spec = ProblemSpec(identity_family, lifted)
    plan = solve_mm_exact(lifted_spec, cap=cap)
    inner = recover_barycenter(plan, lifted_spec, route="classical-mm")
    back = pushforward_discrete(inner.measure, Q @ roots.inv_sqrt_on_image)
    terms = per_marginal_terms(back, spec, lambda nu, proj: w2_discrete_exact(nu, proj).cost)
    obj = float(np.dot(spec.family.weights, terms))
    return BarycenterResult(
        measure=back,
        objective=obj,
        route="classical-mm",
        diagnostics={
            "per_marginal_w2": terms,
            "plan_cost": plan.cost,
            "lifted_objective": inner.objective,
        },
    )


def free_support_barycenter(
    spec: ProblemSpec,
    n_atoms: int,
    init: np.ndarray | None = None,
    max_iter: int = 500,
    tol: float = 1e-8,
    rng=0,
) -> BarycenterResult:
    """Fixed-point scheme on atom locations with uniform weights.

    Works on the lifted marginals: alternate exact pairwise couplings from
    the current uniform cloud to each lifted marginal with relocation of
    every atom to the weighted average of its barycentric targets. The
    lifted objective is non-increasing along iterations; a violation
    beyond 1e-12 is reported in ``diagnostics['monotonicity_violated']``.
    """
    if n_atoms < 1:
        raise ValueError("n_atoms must be at least 1")
    if spec.kind != "discrete":
        raise TypeError("free-support solver needs discrete marginals")
    rng = np.random.default_rng(rng)
    spec_red, Q = reduce_spec(spec)
    family = spec_red.family
    A = _check_family_invertible(family)
    roots = psd_sqrt(A)
    lifts = [roots.inv_sqrt_on_image @ P.T for P in family.maps]
    lifted_points = [m.points @ lift.T for m, lift in zip(spec_red.marginals, lifts)]
    weights = [m.weights for m in spec_red.marginals]
    lam = family.weights

    if init is not None:
        init = np.atleast_2d(np.asarray(init, dtype=float))
        if init.shape != (n_atoms, spec.d):
            raise DimensionMismatchError(
                "init cloud shape", expected=(n_atoms, spec.d), got=init.shape
            )
        X = (init @ Q) @ roots.sqrt  # to reduced coords, then lift
    else:
        X = np.zeros((n_atoms, family.d))
        for i in range(family.p):
            picks = rng.choice(len(weights[i]), size=n_atoms, p=weights[i])
            X += lam[i] * lifted_points[i][picks]

    uniform = np.full(n_atoms, 1.0 / n_atoms)
    history = []
    monotone_broken = False
    converged = False
    iterations = 0
    for it in range(1, max_iter + 1):
        iterations = it
        targets = np.zeros_like(X)
        value = 0.0
        mu = DiscreteMeasure(X, uniform)
        for i in range(family.p):
            nu_i = DiscreteMeasure(lifted_points[i], weights[i])
            plan = w2_discrete_exact(mu, nu_i)
            value += lam[i] * plan.cost
            P = plan.matrix()
            targets += lam[i] * (P @ lifted_points[i]) * n_atoms
        if history and value > history[-1] + 1e-12:
            monotone_broken = True
        history.append(value)
        shift = np.sqrt(np.sum((targets - X) ** 2, axis=1)).max()
        X = targets
        if shift < tol:
            converged = True
            break

    final_points = (X @ roots.inv_sqrt_on_image) @ Q.T
    gamma = DiscreteMeasure(final_points, uniform)
    terms = per_marginal_terms(gamma, spec, lambda nu, proj: w2_discrete_exact(nu, proj).cost)
    obj = float(np.dot(spec.family.weights, terms))
    return BarycenterResult(
        measure=gamma,
        objective=obj,
        route="free-support",
        diagnostics={
            "per_marginal_w2": terms,
            "iterations": iterations,
            "converged": converged,
            "monotonicity_violated": monotone_broken,
            "lifted_objective_history": history,
        },
    )


def displacement_interpolation(plan, t: float) -> DiscreteMeasure:
    """Measure at time ``t`` along an optimal coupling of two clouds.

    Pushes the plan through ``(x, y) -> (1-t) x + t y``; the endpoints
    reproduce the coupled measures exactly.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t!r}")
    if plan.source is None or plan.target is None:
        raise GwbError("plan does not carry its coupled measures")
    xs = plan.source.points
    ys = plan.target.points
    points = np.array([(1.0 - t) * xs[i] + t * ys[j] for i, j, _ in plan.entries])
    masses = np.array([m for _, _, m in plan.entries])
    merged_points, merged_weights = _merge_atoms(points, masses)
    return DiscreteMeasure(merged_points, merged_weights)


def plan_support_coordinates(plan: MultiMarginalPlan, spec: ProblemSpec) -> np.ndarray:
    """Concatenated tuple coordinates of the plan's support, one row per entry."""
    supports = [m.points for m in spec.marginals]
    rows = []
    for idx, _ in plan.entries:
        rows.append(np.concatenate([supports[i][idx[i]] for i in range(len(idx))]))
    return np.array(rows)
