"""Matrix machinery for the projection-consensus reformulation.

Everything downstream rests on a handful of dense, symmetric-eigen based
primitives: assembling the weighted normal matrix ``A`` of a projection
family, positive semidefinite square roots, reduction to the orthogonal
complement of the family's common kernel, and the lifting maps that embed
each marginal space into the common space.

All functions are pure; rank decisions use a relative singular-value
cutoff of 1e-10.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateInstanceError,
    DimensionMismatchError,
    NotPositiveDefiniteError,
    SingularMatrixError,
)

RANK_RTOL = 1e-10
SYM_ATOL = 1e-10
WEIGHT_TOL = 1e-12


def _as_matrix(M, name="matrix"):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise DimensionMismatchError(f"{name} must be 2-dimensional", expected=2, got=M.ndim)
    return M


@dataclass(frozen=True, eq=False)
class ProjectionFamily:
    """A weighted family of linear maps P_i : R^d -> R^{d_i}.

    Parameters
    ----------
    d : int
        Ambient dimension.
    maps : list of ndarray
        The matrices ``P_i`` with shape ``(d_i, d)``.
    weights : ndarray
        Positive weights summing to one.
    """

    d: int
    maps: tuple
    weights: np.ndarray

    def __init__(self, d, maps, weights):
        maps = tuple(_as_matrix(P, f"maps[{i}]") for i, P in enumerate(maps))
        weights = np.asarray(weights, dtype=float).ravel()
        if len(maps) < 1:
            raise DimensionMismatchError("a family needs at least one map")
        if len(weights) != len(maps):
            raise DimensionMismatchError(
                "one weight per map required", expected=len(maps), got=len(weights)
            )
        if np.any(weights <= 0):
            raise ValueError("weights must be strictly positive")
        if abs(weights.sum() - 1.0) > WEIGHT_TOL:
            raise ValueError(f"weights must sum to 1 within {WEIGHT_TOL}, got {weights.sum()!r}")
        for i, P in enumerate(maps):
            if P.shape[1] != d:
                raise DimensionMismatchError(
                    f"maps[{i}] must have {d} columns", expected=d, got=P.shape[1]
                )
        object.__setattr__(self, "d", int(d))
        object.__setattr__(self, "maps", maps)
        object.__setattr__(self, "weights", weights)

    @property
    def p(self):
        return len(self.maps)

    @property
    def dims(self):
        """Per-marginal dimensions d_i."""
        return tuple(P.shape[0] for P in self.maps)


@dataclass(frozen=True, eq=False)
class SpectralSqrt:
    """Square root of a PSD matrix together with its pseudo-inverse root.

    ``inv_sqrt_on_image`` acts as ``sqrt^{-1}`` on the image of the input
    and as zero on its kernel, so ``inv_sqrt_on_image @ sqrt`` is the
    orthogonal projector onto the image.
    """

    sqrt: np.ndarray
    inv_sqrt_on_image: np.ndarray
    rank: int


def psd_sqrt(M, *, sym_tol=SYM_ATOL, neg_tol=SYM_ATOL):
    """Spectral square root of a symmetric positive semidefinite matrix.

    Eigenvalues in ``[-neg_tol*max(1, lam_max), 0)`` are clamped to zero
    (symmetric round-off); anything more negative raises.

    Raises
    ------
    NotPositiveDefiniteError
        If ``M`` is not symmetric within ``sym_tol`` or has a genuinely
        negative eigenvalue.
    """
    M = _as_matrix(M)
    n, m = M.shape
    if n != m:
        raise DimensionMismatchError("square matrix required", expected=n, got=m)
    asym = np.max(np.abs(M - M.T)) if n else 0.0
    if asym > sym_tol * max(1.0, np.max(np.abs(M)) if n else 1.0):
        raise NotPositiveDefiniteError(f"matrix is not symmetric (asymmetry {asym:.3e})")
    lam, V = np.linalg.eigh((M + M.T) / 2.0)
    lam_max = max(lam[-1], 0.0) if n else 0.0
    floor = -neg_tol * max(1.0, lam_max)
    if np.any(lam < floor):
        raise NotPositiveDefiniteError(
            f"matrix has negative eigenvalue {lam.min():.6e} below tolerance"
        )
    lam = np.clip(lam, 0.0, None)
    keep = lam > RANK_RTOL * max(lam_max, np.finfo(float).tiny)
    root = np.sqrt(lam)
    sqrt = (V * root) @ V.T
    inv_root = np.zeros_like(root)
    inv_root[keep] = 1.0 / root[keep]
    inv_sqrt = (V * inv_root) @ V.T
    sqrt = (sqrt + sqrt.T) / 2.0
    inv_sqrt = (inv_sqrt + inv_sqrt.T) / 2.0
    return SpectralSqrt(sqrt=sqrt, inv_sqrt_on_image=inv_sqrt, rank=int(keep.sum()))


def assemble_A(family: ProjectionFamily) -> np.ndarray:
    """Weighted normal matrix ``A = sum_i w_i P_i^T P_i``, symmetrized."""
    d = family.d
    A = np.zeros((d, d))
    for w, P in zip(family.weights, family.maps):
        A += w * (P.T @ P)
    return (A + A.T) / 2.0


@dataclass(frozen=True, eq=False)
class ReductionResult:
    """Restriction of a family to the orthogonal complement of its kernel.

    ``Q`` has orthonormal columns spanning the complement of
    ``K = inter_i Ker(P_i)``; the reduced family uses maps ``P_i Q`` and is
    guaranteed to have an invertible normal matrix.
    """

    Q: np.ndarray
    reduced_family: ProjectionFamily
    d_reduced: int


def kernel_reduction(family: ProjectionFamily) -> ReductionResult:
    """Factor out the common kernel of the projection maps.

    The kernel is computed from an SVD of the stacked maps with relative
    cutoff 1e-10. When the kernel is trivial the original family is
    returned with ``Q = I``.

    Raises
    ------
    DegenerateInstanceError
        If every map is zero, leaving nothing to reduce onto.
    """
    stacked = np.vstack(family.maps)
    # SVD of the stack: right-singular vectors with nonzero singular value
    # span the orthogonal complement of the common kernel.
    _, svals, Vt = np.linalg.svd(stacked, full_matrices=True)
    smax = svals[0] if svals.size else 0.0
    rank = int(np.sum(svals > RANK_RTOL * smax)) if smax > 0 else 0
    if rank == 0:
        raise DegenerateInstanceError("all projection maps are zero")
    if rank == family.d:
        return ReductionResult(Q=np.eye(family.d), reduced_family=family, d_reduced=family.d)
    Q = Vt[:rank].T
    reduced = ProjectionFamily(
        d=rank, maps=[P @ Q for P in family.maps], weights=family.weights
    )
    A_red = assemble_A(reduced)
    lam = np.linalg.eigvalsh(A_red)
    if lam[0] <= RANK_RTOL * max(lam[-1], np.finfo(float).tiny):
        raise SingularMatrixError(
            "reduced normal matrix is numerically singular; rank decision failed"
        )
    return ReductionResult(Q=Q, reduced_family=reduced, d_reduced=rank)


def _check_invertible(A, lam=None):
    if lam is None:
        lam = np.linalg.eigvalsh(A)
    if lam[0] <= RANK_RTOL * max(lam[-1], np.finfo(float).tiny):
        raise SingularMatrixError(
            "normal matrix A is singular; apply kernel_reduction to the family first"
        )


def lift_map(family: ProjectionFamily, i: int) -> np.ndarray:
    """Matrix ``A^{-1/2} P_i^T`` embedding marginal space i into R^d.

    Pushing marginal i forward by this map produces the lifted marginal of
    the classical-barycenter reformulation. Requires an invertible ``A``.
    """
    A = assemble_A(family)
    lam = np.linalg.eigvalsh(A)
    _check_invertible(A, lam)
    roots = psd_sqrt(A)
    return roots.inv_sqrt_on_image @ family.maps[i].T


def objective_offset(family: ProjectionFamily, second_moments) -> float:
    """Constant difference between the raw and lifted objectives.

    ``second_moments[i]`` is the uncentered second-moment matrix
    ``E[x x^T]`` of marginal i. For every candidate measure the raw
    objective equals the lifted objective plus this constant:
    ``sum_i w_i (tr(M_i) - tr(P_i A^{-1} P_i^T M_i))``.
    """
    A = assemble_A(family)
    _check_invertible(A)
    total = 0.0
    for w, P, M in zip(family.weights, family.maps, second_moments):
        M = _as_matrix(M, "second moment")
        if M.shape != (P.shape[0], P.shape[0]):
            raise DimensionMismatchError(
                "second-moment matrix shape mismatch",
                expected=(P.shape[0], P.shape[0]),
                got=M.shape,
            )
        G = P @ np.linalg.solve(A, P.T)
        total += w * (np.trace(M) - np.trace(G @ M))
    return float(total)
