"""Univariate B-spline bases, roughness penalties, and exact Gram matrices.

Everything downstream is built from the objects here: the design matrices
B_t / B_s, the penalty matrices P_t / P_s (derivative or difference form),
the Gram matrices Q_t / Q_s of integrated basis products, and the weighted
Grams used by the spatially adaptive temporal penalty.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline


class BasisError(ValueError):
    """Invalid basis specification or evaluation request."""


class DomainError(BasisError):
    """Evaluation points outside the basis domain."""


@dataclass(frozen=True)
class BasisSpec:
    """Specification of a univariate B-spline basis.

    Knots are equally spaced in the interior with the boundary knot
    repeated ``degree + 1`` times, so the basis is a partition of unity
    on ``[domain_lo, domain_hi]``.
    """

    domain_lo: float
    domain_hi: float
    dimension: int
    degree: int = 3

    def __post_init__(self):
        if not self.domain_lo < self.domain_hi:
            raise BasisError(
                f"domain_lo ({self.domain_lo}) must be < domain_hi ({self.domain_hi})"
            )
        if self.degree < 0:
            raise BasisError(f"degree must be nonnegative, got {self.degree}")
        if self.dimension < self.degree + 1:
            raise BasisError(
                f"dimension K={self.dimension} must be >= degree+1={self.degree + 1}"
            )

    @property
    def knots(self) -> np.ndarray:
        """Full knot vector: repeated boundary knots, equally spaced interior."""
        n_interior = self.dimension - self.degree - 1
        interior = np.linspace(self.domain_lo, self.domain_hi, n_interior + 2)[1:-1]
        return np.concatenate(
            [
                np.full(self.degree + 1, self.domain_lo),
                interior,
                np.full(self.degree + 1, self.domain_hi),
            ]
        )

    @property
    def breakpoints(self) -> np.ndarray:
        """Unique knot spans covering the domain."""
        n_interior = self.dimension - self.degree - 1
        return np.linspace(self.domain_lo, self.domain_hi, n_interior + 2)

    def design_matrix(self, points: np.ndarray) -> np.ndarray:
        """Evaluate all basis functions at ``points`` (Cox-de Boor recursion)."""
        pts = np.asarray(points, dtype=float)
        lo, hi = self.domain_lo, self.domain_hi
        if pts.size and (pts.min() < lo or pts.max() > hi):
            bad = pts[(pts < lo) | (pts > hi)][0]
            raise DomainError(f"point {bad} outside basis domain [{lo}, {hi}]")
        return BSpline.design_matrix(pts, self.knots, self.degree).toarray()

    def deriv_matrix(self, points: np.ndarray, order: int) -> np.ndarray:
        """Order-th derivative of every basis function at ``points``."""
        if order > self.degree:
            raise BasisError(
                f"derivative order {order} exceeds spline degree {self.degree}"
            )
        if order == 0:
            return self.design_matrix(points)
        pts = np.asarray(points, dtype=float)
        spl = BSpline(self.knots, np.eye(self.dimension), self.degree)
        return spl.derivative(order)(pts)


@dataclass
class EvaluatedBasis:
    """A basis evaluated on a point grid, with its Gram and penalty matrices."""

    spec: BasisSpec
    design: np.ndarray
    gram: np.ndarray
    penalty: np.ndarray
    penalty_kind: str  # "derivative" or "difference"
    penalty_order: int
    eval_points: np.ndarray = field(repr=False, default=None)

    @property
    def dimension(self) -> int:
        return self.spec.dimension


def _gauss_legendre_cells(breaks: np.ndarray, n_nodes: int):
    """Gauss-Legendre nodes/weights replicated over each knot span."""
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    a = breaks[:-1][:, None]
    b = breaks[1:][:, None]
    nodes = 0.5 * (b - a) * (x[None, :] + 1.0) + a
    weights = 0.5 * (b - a) * w[None, :]
    return nodes.ravel(), weights.ravel()


def derivative_penalty(spec: BasisSpec, order: int) -> np.ndarray:
    """Penalty matrix P with P_ij = integral of b_i^(m) b_j^(m).

    Integrated exactly per knot span: the integrand is a polynomial of
    degree 2(degree - order), so fixed-order Gauss-Legendre suffices.
    """
    if order > spec.degree:
        raise BasisError(f"penalty order {order} exceeds degree {spec.degree}")
    n_nodes = (2 * (spec.degree - order) + 1 + 1) // 2 + 1
    nodes, weights = _gauss_legendre_cells(spec.breakpoints, n_nodes)
    D = spec.deriv_matrix(nodes, order)
    P = (D * weights[:, None]).T @ D
    return 0.5 * (P + P.T)


def difference_penalty(K: int, order: int) -> np.ndarray:
    """P = D'D for the order-th difference operator on K coefficients."""
    if order >= K:
        raise BasisError(f"difference order {order} must be < K={K}")
    D = np.diff(np.eye(K), n=order, axis=0)
    return D.T @ D


def exact_gram(spec: BasisSpec) -> np.ndarray:
    """Gram matrix Q with Q_ij = integral of b_i b_j over the domain."""
    n_nodes = spec.degree + 1
    nodes, weights = _gauss_legendre_cells(spec.breakpoints, n_nodes)
    B = spec.design_matrix(nodes)
    Q = (B * weights[:, None]).T @ B
    return 0.5 * (Q + Q.T)


def weighted_gram(spec: BasisSpec, weight_spec: BasisSpec, k: int) -> np.ndarray:
    """Gram weighted by the k-th coarse basis function: ∫ b*_k b_i b_j.

    Needed for the adaptive temporal penalty, whose blocks are
    Q^{b*_k} ⊗ P_t with b*_1..b*_{K*} a coarse basis on the same domain.
    """
    if (weight_spec.domain_lo, weight_spec.domain_hi) != (
        spec.domain_lo,
        spec.domain_hi,
    ):
        raise BasisError("weight basis must share the domain of the main basis")
    if not 1 <= k <= weight_spec.dimension:
        raise BasisError(f"weight index k={k} outside 1..{weight_spec.dimension}")
    # integrand degree: 2*degree + weight degree
    total_deg = 2 * spec.degree + weight_spec.degree
    n_nodes = (total_deg + 1 + 1) // 2 + 1
    breaks = np.unique(np.concatenate([spec.breakpoints, weight_spec.breakpoints]))
    nodes, weights = _gauss_legendre_cells(breaks, n_nodes)
    B = spec.design_matrix(nodes)
    wk = weight_spec.design_matrix(nodes)[:, k - 1]
    Q = (B * (weights * wk)[:, None]).T @ B
    return 0.5 * (Q + Q.T)


def build_basis(
    spec: BasisSpec,
    points: np.ndarray,
    penalty_kind: str = "derivative",
    penalty_order: int = 2,
) -> EvaluatedBasis:
    """Construct an EvaluatedBasis: design, Gram and penalty matrices.

    Parameters
    ----------
    spec : BasisSpec
    points : array
        Evaluation grid (the t_i or s_l values), inside the domain.
    penalty_kind : {"derivative", "difference"}
    penalty_order : int
        Derivative or difference order of the roughness penalty.
    """
    pts = np.atleast_1d(np.asarray(points, dtype=float))
    design = spec.design_matrix(pts)
    gram = exact_gram(spec)
    if penalty_kind == "derivative":
        penalty = derivative_penalty(spec, penalty_order)
    elif penalty_kind == "difference":
        penalty = difference_penalty(spec.dimension, penalty_order)
    else:
        raise BasisError(f"unknown penalty kind {penalty_kind!r}")
    return EvaluatedBasis(
        spec=spec,
        design=design,
        gram=gram,
        penalty=penalty,
        penalty_kind=penalty_kind,
        penalty_order=penalty_order,
        eval_points=pts,
    )


def eval_basis_deriv(
    basis: EvaluatedBasis, points: np.ndarray, order: int
) -> np.ndarray:
    """Matrix of order-th derivatives of every basis function at ``points``."""
    return basis.spec.deriv_matrix(np.asarray(points, dtype=float), order)
