"""Single-penalty penalized least squares and fast many-column smoothing.

The workhorse is the Demmler-Reinsch orthogonalization of (design, penalty):
with A = B R^{-1} U and shrinkage factors 1/(1 + lambda * tau_k), a penalized
spline refit at a new lambda costs O(K) once A'Y is cached, which makes
per-column REML selection over hundreds of columns cheap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize

from .basis import EvaluatedBasis

LAMBDA_LO = 1e-12
LAMBDA_HI = 1e12
SEARCH_LO = 1e-8
SEARCH_HI = 1e8
_NULL_TOL = 1e-8


class ConditioningError(np.linalg.LinAlgError):
    """Design or normal matrix too ill-conditioned to factor."""


@dataclass
class DrDecomposition:
    """Demmler-Reinsch factors of a penalized spline smoother.

    A has orthonormal columns spanning col(design); tau holds the
    eigenvalues of R^{-T} P R^{-1} in ascending order; null_dim counts
    the (numerically) zero ones, i.e. the penalty null-space dimension.
    """

    A: np.ndarray
    R: np.ndarray
    U: np.ndarray
    tau: np.ndarray
    null_dim: int

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def K(self) -> int:
        return self.A.shape[1]

    def coef_transform(self) -> np.ndarray:
        """R^{-1} U: maps DR coordinates to basis coefficients."""
        return linalg.solve_triangular(self.R, self.U)


@dataclass
class ColumnSmoothResult:
    """Result of smoothing every column of Y with per-column lambdas."""

    fitted: np.ndarray
    lambdas: np.ndarray
    shrink: np.ndarray  # K x L matrix M, M_{kl} = 1/(1 + lambda_l tau_k)
    dr: DrDecomposition

    def coef(self) -> np.ndarray:
        """K x L spline coefficient matrix of the fitted columns."""
        return self.dr.coef_transform() @ (self.shrink * (self.dr.A.T @ self._y))

    # set by smooth_columns so coef() can be reconstructed
    _y: np.ndarray = None


def demmler_reinsch(basis: EvaluatedBasis) -> DrDecomposition:
    """Simultaneously diagonalize B'B and the penalty of ``basis``."""
    B = basis.design
    svals = np.linalg.svd(B, compute_uv=False)
    if svals[-1] <= 1e-10 * svals[0]:
        raise ConditioningError(
            f"design matrix rank-deficient: smallest singular value {svals[-1]:.3e}"
        )
    BtB = B.T @ B
    R = linalg.cholesky(BtB, lower=False)
    Rinv = linalg.solve_triangular(R, np.eye(R.shape[0]))
    S = Rinv.T @ basis.penalty @ Rinv
    tau, U = linalg.eigh(0.5 * (S + S.T))
    tau = np.maximum(tau, 0.0)
    A = B @ (Rinv @ U)
    tol = _NULL_TOL * max(tau[-1], 1.0) if tau.size else 0.0
    # roundoff-level eigenvalues are exact zeros of the penalty null space;
    # leaving them nonzero corrupts the large-lambda limit
    tau[tau < tol] = 0.0
    null_dim = int(np.sum(tau == 0.0))
    return DrDecomposition(A=A, R=R, U=U, tau=tau, null_dim=null_dim)


def _score_from_z(dr: DrDecomposition, z: np.ndarray, yss: float, log_lambda: float) -> float:
    """REML score in DR coordinates; z = A'y and yss = ||y||^2."""
    lam = float(np.clip(np.exp(log_lambda), LAMBDA_LO, LAMBDA_HI))
    tau = dr.tau
    q = dr.null_dim
    c = 1.0 / (1.0 + lam * tau)
    prss = yss - z @ z + np.sum((1.0 - c) * z**2)
    # relative floor: below roundoff of the quadratic forms the PRSS carries
    # no information and would otherwise inject noise into the score
    prss = max(prss, 1e-14 * yss, 1e-300)
    pos = tau > 0.0
    logdet_pen = np.sum(np.log1p(lam * tau[pos]))
    return (dr.n - q) * np.log(prss) + logdet_pen - (dr.K - q) * np.log(lam)


def reml_score(dr: DrDecomposition, y: np.ndarray, log_lambda: float) -> float:
    """-2 restricted log-likelihood (up to a constant) of the penalized smooth."""
    y = np.asarray(y, dtype=float)
    z = dr.A.T @ y
    return _score_from_z(dr, z, float(y @ y), log_lambda)


def _select_from_z(dr: DrDecomposition, z: np.ndarray, yss: float) -> float:
    grid = np.linspace(np.log(SEARCH_LO), np.log(SEARCH_HI), 25)
    scores = [_score_from_z(dr, z, yss, g) for g in grid]
    i = int(np.argmin(scores))
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, len(grid) - 1)]
    if lo == hi:
        return float(np.exp(grid[i]))
    res = optimize.minimize_scalar(
        lambda g: _score_from_z(dr, z, yss, g),
        bounds=(lo, hi),
        method="bounded",
        options={"xatol": 1e-4},
    )
    return float(np.clip(np.exp(res.x), SEARCH_LO, SEARCH_HI))


def select_lambda_reml(dr: DrDecomposition, y: np.ndarray) -> float:
    """Lambda minimizing the REML score: coarse log-grid, then refinement."""
    y = np.asarray(y, dtype=float)
    return _select_from_z(dr, dr.A.T @ y, float(y @ y))


def smooth_columns(
    dr: DrDecomposition, Y: np.ndarray, lambdas="auto"
) -> ColumnSmoothResult:
    """Smooth every column of Y: fitted = A [M o (A'Y)].

    ``lambdas`` is either a length-L positive vector or "auto", in which
    case each column's lambda is selected by REML. A'Y is computed once.
    """
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2 or Y.shape[0] != dr.n:
        raise ValueError(f"Y must be {dr.n} x L, got shape {Y.shape}")
    L = Y.shape[1]
    Z = dr.A.T @ Y
    if isinstance(lambdas, str) and lambdas == "auto":
        yss = np.einsum("il,il->l", Y, Y)
        col_var = Y.var(axis=0)
        lams = np.empty(L)
        for l in range(L):
            if col_var[l] <= 1e-14 * max(1.0, yss[l] / dr.n):
                # constant column: lambda is immaterial, fitted stays constant
                lams[l] = SEARCH_HI
            else:
                lams[l] = _select_from_z(dr, Z[:, l], yss[l])
    else:
        lams = np.broadcast_to(np.asarray(lambdas, dtype=float), (L,)).copy()
        if np.any(lams < 0):
            raise ValueError("lambdas must be positive")
    M = 1.0 / (1.0 + np.outer(dr.tau, lams))
    fitted = dr.A @ (M * Z)
    out = ColumnSmoothResult(fitted=fitted, lambdas=lams, shrink=M, dr=dr)
    out._y = Y
    return out


def penalized_lstsq(
    design: np.ndarray,
    penalty: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray | None = None,
) -> np.ndarray:
    """Solve argmin (y - Xb)'W(y - Xb) + b'Pb by Cholesky of X'WX + P."""
    X = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    if weights is None:
        G = X.T @ X
        rhs = X.T @ y
    else:
        WX = weights @ X
        G = X.T @ WX
        rhs = WX.T @ y
    G = G + penalty
    try:
        c, low = linalg.cho_factor(0.5 * (G + G.T))
    except np.linalg.LinAlgError as e:
        raise ConditioningError(f"normal matrix not positive definite: {e}") from e
    return linalg.cho_solve((c, low), rhs)
