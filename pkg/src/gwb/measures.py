"""Measure representations, pushforwards, and the consensus objective.

Three measure families are supported: weighted point clouds, Gaussians
(possibly singular), and finite Gaussian mixtures. A :class:`ProblemSpec`
bundles a projection family with one marginal per map; specs mixing
discrete and Gaussian-type marginals are rejected so the provenance of a
result is never ambiguous.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, NotPositiveDefiniteError, SingularMatrixError
from .linalg import ProjectionFamily, assemble_A

WEIGHT_TOL = 1e-12
COV_SYM_TOL = 1e-10


def _normalized_weights(weights, count, what):
    w = np.asarray(weights, dtype=float).ravel()
    if len(w) != count:
        raise DimensionMismatchError(f"{what}: one weight per atom", expected=count, got=len(w))
    if np.any(w < 0):
        raise ValueError(f"{what}: negative weight")
    if abs(w.sum() - 1.0) > WEIGHT_TOL:
        raise ValueError(f"{what}: weights must sum to 1 within {WEIGHT_TOL}, got {w.sum()!r}")
    return w


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Weighted point cloud in R^n. Zero-weight atoms are dropped."""

    points: np.ndarray
    weights: np.ndarray

    def __init__(self, points, weights):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        w = _normalized_weights(weights, points.shape[0], "discrete measure")
        keep = w > 0
        if not np.any(keep):
            raise ValueError("discrete measure has no positive-weight atom")
        object.__setattr__(self, "points", points[keep])
        object.__setattr__(self, "weights", w[keep])

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def n_atoms(self):
        return self.points.shape[0]

    def mean(self):
        return self.weights @ self.points

    def second_moment(self):
        return (self.points.T * self.weights) @ self.points


@dataclass(frozen=True, eq=False)
class GaussianMeasure:
    """Gaussian with mean vector and symmetric PSD covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __init__(self, mean, cov):
        mean = np.asarray(mean, dtype=float).ravel()
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        n = mean.shape[0]
        if cov.shape != (n, n):
            raise DimensionMismatchError("covariance shape", expected=(n, n), got=cov.shape)
        scale = max(1.0, np.max(np.abs(cov)))
        if np.max(np.abs(cov - cov.T)) > COV_SYM_TOL * scale:
            raise NotPositiveDefiniteError("covariance is not symmetric")
        lam_min = np.linalg.eigvalsh((cov + cov.T) / 2.0)[0]
        if lam_min < -COV_SYM_TOL * scale:
            raise NotPositiveDefiniteError(f"covariance has negative eigenvalue {lam_min:.3e}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", (cov + cov.T) / 2.0)

    @property
    def dim(self):
        return self.mean.shape[0]

    def second_moment(self):
        return self.cov + np.outer(self.mean, self.mean)


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Finite mixture of Gaussians with positive weights summing to one."""

    components: tuple
    weights: np.ndarray

    def __init__(self, components, weights):
        components = tuple(components)
        if not components:
            raise ValueError("mixture needs at least one component")
        if not all(isinstance(c, GaussianMeasure) for c in components):
            raise TypeError("mixture components must be GaussianMeasure")
        dims = {c.dim for c in components}
        if len(dims) != 1:
            raise DimensionMismatchError("mixture components disagree on dimension", got=dims)
        w = _normalized_weights(weights, len(components), "mixture")
        if np.any(w <= 0):
            raise ValueError("mixture weights must be strictly positive")
        object.__setattr__(self, "components", components)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self):
        return self.components[0].dim

    @property
    def n_components(self):
        return len(self.components)

    def mean(self):
        return sum(w * c.mean for w, c in zip(self.weights, self.components))

    def second_moment(self):
        return sum(w * c.second_moment() for w, c in zip(self.weights, self.components))


def as_mixture(measure):
    """View a Gaussian as a one-component mixture; mixtures pass through."""
    if isinstance(measure, GaussianMixture):
        return measure
    if isinstance(measure, GaussianMeasure):
        return GaussianMixture([measure], [1.0])
    raise TypeError(f"cannot view {type(measure).__name__} as a Gaussian mixture")


def measure_mean(measure):
    if isinstance(measure, GaussianMeasure):
        return measure.mean
    return measure.mean()


def pushforward_discrete(mu: DiscreteMeasure, T) -> DiscreteMeasure:
    """Image of a point cloud under the linear map ``T``.

    Atoms whose images coincide exactly (bitwise, after mapping) are
    merged, first occurrence keeping its slot.
    """
    T = np.asarray(T, dtype=float)
    if T.ndim != 2 or T.shape[1] != mu.dim:
        raise DimensionMismatchError("map columns", expected=mu.dim, got=T.shape)
    mapped = mu.points @ T.T
    seen = {}
    order = []
    weights = []
    for row, w in zip(mapped, mu.weights):
        key = row.tobytes()
        if key in seen:
            weights[seen[key]] += w
        else:
            seen[key] = len(order)
            order.append(row)
            weights.append(w)
    return DiscreteMeasure(np.array(order), np.array(weights))


def pushforward_gaussian(nu: GaussianMeasure, T) -> GaussianMeasure:
    """Image of a Gaussian under the linear map ``T``."""
    T = np.asarray(T, dtype=float)
    if T.ndim != 2 or T.shape[1] != nu.dim:
        raise DimensionMismatchError("map columns", expected=nu.dim, got=T.shape)
    cov = T @ nu.cov @ T.T
    return GaussianMeasure(T @ nu.mean, (cov + cov.T) / 2.0)


def pushforward_mixture(g: GaussianMixture, T) -> GaussianMixture:
    """Componentwise image of a mixture under the linear map ``T``."""
    return GaussianMixture([pushforward_gaussian(c, T) for c in g.components], g.weights)


def pushforward(measure, T):
    if isinstance(measure, DiscreteMeasure):
        return pushforward_discrete(measure, T)
    if isinstance(measure, GaussianMeasure):
        return pushforward_gaussian(measure, T)
    if isinstance(measure, GaussianMixture):
        return pushforward_mixture(measure, T)
    raise TypeError(f"cannot push forward {type(measure).__name__}")


_KINDS = {DiscreteMeasure: "discrete", GaussianMeasure: "gaussian", GaussianMixture: "gmm"}


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """A projection family together with one marginal per map."""

    family: ProjectionFamily
    marginals: tuple

    def __init__(self, family, marginals):
        marginals = tuple(marginals)
        if len(marginals) != family.p:
            raise DimensionMismatchError(
                "one marginal per projection map", expected=family.p, got=len(marginals)
            )
        kinds = {_KINDS.get(type(m)) for m in marginals}
        if None in kinds:
            raise TypeError("marginals must be DiscreteMeasure, GaussianMeasure or GaussianMixture")
        if len(kinds) != 1:
            raise TypeError(
                f"mixed marginal kinds {sorted(kinds)} in one spec are not supported; "
                "convert explicitly first"
            )
        for i, (m, di) in enumerate(zip(marginals, family.dims)):
            if m.dim != di:
                raise DimensionMismatchError(
                    f"marginals[{i}] dimension must match maps[{i}] rows", expected=di, got=m.dim
                )
        object.__setattr__(self, "family", family)
        object.__setattr__(self, "marginals", marginals)

    @property
    def d(self):
        return self.family.d

    @property
    def p(self):
        return self.family.p

    @property
    def kind(self):
        return _KINDS[type(self.marginals[0])]

    def marginal_means(self):
        return [measure_mean(m) for m in self.marginals]


def barycenter_mean(spec: ProblemSpec) -> np.ndarray:
    """Mean of any optimal consensus measure: ``A^{-1} sum_i w_i P_i^T m_i``."""
    A = assemble_A(spec.family)
    lam = np.linalg.eigvalsh(A)
    if lam[0] <= 1e-10 * max(lam[-1], np.finfo(float).tiny):
        raise SingularMatrixError(
            "normal matrix A is singular; apply kernel_reduction to the family first"
        )
    rhs = np.zeros(spec.d)
    for w, P, m in zip(spec.family.weights, spec.family.maps, spec.marginal_means()):
        rhs += w * (P.T @ m)
    return np.linalg.solve(A, rhs)


def _default_backend(gamma, spec):
    """Pick the squared-W2 backend matching the instance kind."""
    from . import gmm as _gmm  # local import: ot/gmm depend on this module
    from . import ot as _ot

    kind = spec.kind
    if kind == "discrete":
        if not isinstance(gamma, DiscreteMeasure):
            raise TypeError("discrete marginals require a discrete candidate measure")
        return lambda nu, proj: _ot.w2_discrete_exact(nu, proj).cost
    if kind == "gaussian":
        if not isinstance(gamma, GaussianMeasure):
            raise TypeError("Gaussian marginals require a Gaussian candidate measure")
        return _ot.w2_gaussian
    if not isinstance(gamma, (GaussianMixture, GaussianMeasure)):
        raise TypeError("mixture marginals require a Gaussian-mixture candidate measure")
    return lambda nu, proj: _gmm.mw2(as_mixture(nu), as_mixture(proj)).cost


def objective(gamma, spec: ProblemSpec, w2_backend=None):
    """Weighted sum of squared transport costs between marginals and projections.

    ``w2_backend(nu_i, P_i # gamma)`` must return the squared distance; when
    omitted it is resolved from the instance kind (exact LP for point
    clouds, closed form for Gaussians, mixture coupling for mixtures).
    """
    if gamma.dim != spec.d:
        raise DimensionMismatchError("candidate dimension", expected=spec.d, got=gamma.dim)
    if w2_backend is None:
        w2_backend = _default_backend(gamma, spec)
    total = 0.0
    for w, P, nu in zip(spec.family.weights, spec.family.maps, spec.marginals):
        total += w * w2_backend(nu, pushforward(gamma, P))
    return float(total)


def per_marginal_terms(gamma, spec: ProblemSpec, w2_backend=None):
    """Individual squared distances ``W2^2(nu_i, P_i # gamma)``, unweighted."""
    if w2_backend is None:
        w2_backend = _default_backend(gamma, spec)
    return [
        float(w2_backend(nu, pushforward(gamma, P)))
        for P, nu in zip(spec.family.maps, spec.marginals)
    ]


def lifted_marginals(spec: ProblemSpec):
    """Marginals pushed into the common space by ``A^{-1/2} P_i^T``.

    Requires the family's normal matrix to be invertible.
    """
    from .linalg import lift_map

    return [pushforward(nu, lift_map(spec.family, i)) for i, nu in enumerate(spec.marginals)]


def reduce_spec(spec: ProblemSpec):
    """Kernel-reduce the family, keeping marginals. Returns ``(spec', Q)``."""
    from .linalg import kernel_reduction

    red = kernel_reduction(spec.family)
    if red.d_reduced == spec.d:
        return spec, red.Q
    return ProblemSpec(red.reduced_family, spec.marginals), red.Q


def second_moments(spec: ProblemSpec):
    """Uncentered second-moment matrices of all marginals."""
    return [m.second_moment() for m in spec.marginals]
