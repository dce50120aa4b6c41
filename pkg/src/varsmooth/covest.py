"""Banded modified-Cholesky precision estimation for prewhitening.

The precision estimate has the form Sigma^{-1} = T'DT with T unit lower
triangular and k-banded (each location regressed on its k predecessors)
and D the inverse innovation variances. The band count is chosen by
minimizing the magnitude of the Ledoit-Wolf sphericity statistic of the
whitened residuals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg


class CovarianceError(ValueError):
    """Degenerate input to a covariance/precision estimator."""


@dataclass
class PrecisionEstimate:
    """Banded modified-Cholesky precision factors and derived matrices."""

    T: np.ndarray
    D: np.ndarray
    k: int
    prec: np.ndarray
    prec_sqrt: np.ndarray
    lw_stat: float | None = None


def _sym_sqrt(mat: np.ndarray, inverse: bool = False) -> np.ndarray:
    w, V = linalg.eigh(0.5 * (mat + mat.T))
    w = np.maximum(w, 1e-10 * max(w[-1], 0.0) if w[-1] > 0 else 0.0)
    root = np.sqrt(w) if not inverse else 1.0 / np.sqrt(np.maximum(w, 1e-300))
    out = (V * root) @ V.T
    return 0.5 * (out + out.T)


def banded_precision(residuals: np.ndarray, k: int, ridge: float = 1e-8) -> PrecisionEstimate:
    """k-banded modified-Cholesky precision estimate from residual rows.

    Column j is regressed on columns max(0, j-k)..j-1 with a small ridge
    for stability; T row j holds 1 and the negated coefficients, and
    D_j is the inverse residual variance of that regression.
    """
    X = np.asarray(residuals, dtype=float)
    n, L = X.shape
    if n <= k + 1:
        raise CovarianceError(f"need n > k+1 rows, got n={n}, k={k}")
    X = X - X.mean(axis=0)
    T = np.eye(L)
    D = np.empty(L)
    for j in range(L):
        lo = max(0, j - k)
        m = j - lo
        if m == 0:
            resid = X[:, j]
        else:
            Z = X[:, lo:j]
            G = Z.T @ Z
            G_r = G + ridge * (np.trace(G) / m + 1e-300) * np.eye(m)
            phi = linalg.solve(G_r, Z.T @ X[:, j], assume_a="pos")
            T[j, lo:j] = -phi
            resid = X[:, j] - Z @ phi
        var = (resid @ resid) / max(n - m - 1, 1)
        D[j] = 1.0 / max(var, 1e-12)
    prec = T.T @ (D[:, None] * T)
    prec = 0.5 * (prec + prec.T)
    prec_sqrt = _sym_sqrt(prec)
    return PrecisionEstimate(T=T, D=D, k=k, prec=prec, prec_sqrt=prec_sqrt)


def lw_statistic(X: np.ndarray) -> float:
    """Ledoit-Wolf sphericity statistic (approximately N(0,1) under the null).

    Uses the sample covariance with divisor n, matching the asymptotic
    convention of the underlying result.
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if n < 2 or p < 1:
        raise CovarianceError(f"need n >= 2 and p >= 1, got {X.shape}")
    Xc = X - X.mean(axis=0)
    S = (Xc.T @ Xc) / n
    tr_S = np.trace(S)
    if tr_S <= 0:
        raise CovarianceError("degenerate input: sample covariance has zero trace")
    tr_S2 = np.sum(S * S)
    return 0.5 * (n * p * tr_S2 / tr_S**2 - n - p - 1)


def select_bandwidth(residuals: np.ndarray, k_range=None) -> PrecisionEstimate:
    """Pick the band count whose whitened residuals look most spherical.

    For each candidate k the residuals are whitened by Sigma_k^{-1/2} and
    the |Ledoit-Wolf statistic| computed; the smallest magnitude wins,
    ties going to the smaller k.
    """
    X = np.asarray(residuals, dtype=float)
    n = X.shape[0]
    if k_range is None:
        k_range = [k for k in range(11) if k < n - 2]
    k_range = sorted(set(int(k) for k in k_range))
    if not k_range:
        raise CovarianceError("empty band-count range")
    best = None
    for k in k_range:
        est = banded_precision(X, k)
        stat = lw_statistic(X @ est.prec_sqrt)
        est.lw_stat = stat
        if best is None or abs(stat) < abs(best.lw_stat):
            best = est
    return best
