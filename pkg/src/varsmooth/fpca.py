"""Functional PCA of the response matrix and the smoothed-FPC-scores fit.

Rows of Y are curves over the common grid s_grid. FPCA presmooths the
rows onto a spline basis, extracts principal component functions that
are orthonormal in the basis Gram metric, and the smoothed-scores
estimator then smooths each score sequence over t with its own
REML-selected penalty.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .basis import BasisSpec, EvaluatedBasis, build_basis
from .smoothcore import (
    ColumnSmoothResult,
    ConditioningError,
    demmler_reinsch,
    smooth_columns,
)
from .tensorfit import VsFit


class RankError(ValueError):
    """Requested more components than the data support."""


@dataclass
class FpcaModel:
    """Functional principal components of presmoothed curves.

    Columns of V give PC functions phi_a(s) = b_s(s)' v_a, orthonormal
    in the Gram metric (V' Q_s V = I). scores holds the centered PC
    scores, one row per curve.
    """

    mu: np.ndarray
    V: np.ndarray
    scores: np.ndarray
    eigenvalues: np.ndarray
    basis_s: EvaluatedBasis
    mean_coef: np.ndarray

    @property
    def A(self) -> int:
        return self.V.shape[1]

    def component_values(self, s_points=None) -> np.ndarray:
        """PC functions evaluated at s_points (default: the fit grid)."""
        if s_points is None:
            return self.basis_s.design @ self.V
        B = self.basis_s.spec.design_matrix(np.asarray(s_points, dtype=float))
        return B @ self.V


@dataclass
class FpcScoresFit(VsFit):
    """Smoothed-FPC-scores fit: mu(s) + sum_a g_a(t) phi_a(s)."""

    G: np.ndarray | None = None
    score_lambdas: np.ndarray | None = None
    Mstar: np.ndarray | None = None


def presmooth_project(Y, basis_s: EvaluatedBasis) -> np.ndarray:
    """Project each row of Y onto span(B_s): Y B_s (B_s'B_s)^{-1} B_s'."""
    Y = np.asarray(Y, dtype=float)
    B = basis_s.design
    coef = _row_coefficients(Y, B)
    return coef @ B.T


def _row_coefficients(Y, B) -> np.ndarray:
    """Least-squares spline coefficients of each row of Y."""
    svals = np.linalg.svd(B, compute_uv=False)
    if svals[-1] <= 1e-10 * svals[0]:
        raise ConditioningError(
            f"spatial design rank-deficient: smallest singular value "
            f"{svals[-1]:.3e}"
        )
    c, low = linalg.cho_factor(B.T @ B)
    return linalg.cho_solve((c, low), B.T @ Y.T).T


def fpca_decompose(Y, basis_s: EvaluatedBasis, A: int) -> FpcaModel:
    """Functional PCA of the rows of Y after presmoothing.

    The PC directions are the leading eigenvectors of

        n^{-1} Q^{1/2} (B'B)^{-1} B'Y'(I - J)YB (B'B)^{-1} Q^{1/2}

    mapped back through Q^{-1/2}, which makes the resulting functions
    orthonormal under the L2 inner product on the s domain.
    """
    Y = np.asarray(Y, dtype=float)
    n = Y.shape[0]
    if not 1 <= A <= min(n - 1, basis_s.dimension):
        raise ValueError(
            f"A must be in [1, {min(n - 1, basis_s.dimension)}], got {A}"
        )
    B = basis_s.design
    Q = basis_s.gram
    C = _row_coefficients(Y, B)
    mean_coef = C.mean(axis=0)
    Cc = C - mean_coef
    w, E = linalg.eigh(0.5 * (Q + Q.T))
    w = np.maximum(w, 1e-12 * w[-1])
    Q_half = (E * np.sqrt(w)) @ E.T
    Q_half_inv = (E / np.sqrt(w)) @ E.T
    M = Q_half @ (Cc.T @ Cc / n) @ Q_half
    evals, U = linalg.eigh(0.5 * (M + M.T))
    evals, U = evals[::-1], U[:, ::-1]
    rank = int(np.sum(evals > 1e-10 * max(evals[0], 1e-300)))
    if A > rank:
        raise RankError(
            f"requested {A} components but the centered curves have "
            f"numerical rank {rank}"
        )
    V = Q_half_inv @ U[:, :A]
    # deterministic sign: largest-magnitude grid value of each PC positive
    vals = B @ V
    for a in range(A):
        j = int(np.argmax(np.abs(vals[:, a])))
        if vals[j, a] < 0:
            V[:, a] = -V[:, a]
    scores = Cc @ Q @ V
    return FpcaModel(
        mu=B @ mean_coef,
        V=V,
        scores=scores,
        eigenvalues=evals[:A],
        basis_s=basis_s,
        mean_coef=mean_coef,
    )


def _assemble_fpc_fit(model: FpcaModel, G: np.ndarray) -> np.ndarray:
    """Eq-of-model assembly: row-replicated mean plus score expansion."""
    n = G.shape[0]
    return np.tile(model.mu, (n, 1)) + G @ model.component_values().T


def fit_fpc_scores(
    Y,
    t,
    s_grid,
    A="auto",
    K_t: int = 15,
    K_s: int = 25,
    degree: int = 3,
    penalty_order: int = 2,
    domain_t=None,
    domain_s=None,
    cv_folds: int = 5,
    cv_seed: int = 0,
) -> FpcScoresFit:
    """Fit mu(s) + sum_a g_a(t) phi_a(s) by smoothing FPC scores over t.

    With A="auto" the component count is chosen by five-fold
    cross-validation over rows, scoring squared prediction error on the
    held-out raw curves.
    """
    Y = np.asarray(Y, dtype=float)
    t = np.asarray(t, dtype=float)
    s_grid = np.asarray(s_grid, dtype=float)
    if domain_t is None:
        domain_t = (float(t.min()), float(t.max()))
    if domain_s is None:
        domain_s = (float(s_grid.min()), float(s_grid.max()))
    bt = build_basis(
        BasisSpec(*domain_t, dimension=K_t, degree=degree), t,
        penalty_order=penalty_order,
    )
    bs = build_basis(
        BasisSpec(*domain_s, dimension=K_s, degree=degree), s_grid,
        penalty_order=penalty_order,
    )
    if isinstance(A, str) and A == "auto":
        A = _select_A_cv(Y, t, bt.spec, bs, cv_folds, cv_seed)
    A = int(A)
    dr = demmler_reinsch(bt)
    if A == 0:
        mean_coef = _row_coefficients(Y, bs.design).mean(axis=0)
        return FpcScoresFit(
            method="fpc-scores",
            fitted=np.tile(bs.design @ mean_coef, (Y.shape[0], 1)),
            basis_t=bt,
            basis_s=bs,
            theta=np.outer(np.ones(bt.dimension), mean_coef),
            tuning={"A": 0, "score_lambdas": []},
        )
    model = fpca_decompose(Y, bs, A)
    cs = smooth_columns(dr, model.scores)
    G = cs.fitted
    fitted = _assemble_fpc_fit(model, G)
    # constants lie in the span of the t basis, so the mean term folds
    # into a coefficient matrix too
    theta = (
        np.outer(np.ones(bt.dimension), model.mean_coef)
        + cs.coef() @ model.V.T
    )
    return FpcScoresFit(
        method="fpc-scores",
        fitted=fitted,
        basis_t=bt,
        basis_s=bs,
        theta=theta,
        tuning={"A": A, "score_lambdas": cs.lambdas.tolist()},
        fpca=model,
        colsmooth=cs,
        G=G,
        score_lambdas=cs.lambdas,
        Mstar=cs.shrink,
    )


def _select_A_cv(Y, t, spec_t: BasisSpec, bs: EvaluatedBasis,
                 folds: int, seed: int) -> int:
    """Five-fold row CV for the component count, smaller A wins ties."""
    n = Y.shape[0]
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    fold_ids = np.array_split(perm, folds)
    cap = min(10, min(n - n // folds - 1, bs.dimension))
    candidates = list(range(1, cap + 1))
    errors = np.zeros(len(candidates))
    counts = np.zeros(len(candidates))
    for held in fold_ids:
        train = np.setdiff1d(np.arange(n), held)
        if train.size < 3:
            continue
        # a fold can leave a knot span empty; shrink the basis until the
        # training design has full rank
        dim = spec_t.dimension
        while True:
            spec_tr = BasisSpec(spec_t.domain_lo, spec_t.domain_hi, dim,
                                spec_t.degree)
            try:
                dr_tr = demmler_reinsch(build_basis(spec_tr, t[train]))
                break
            except ConditioningError:
                if dim <= spec_t.degree + 2:
                    raise
                dim -= 1
        B_held = spec_tr.design_matrix(t[held])
        coef_map = linalg.solve_triangular(dr_tr.R, dr_tr.U)
        for i, a in enumerate(candidates):
            try:
                model = fpca_decompose(Y[train], bs, a)
            except (RankError, ValueError):
                errors[i] = np.inf
                counts[i] = 1
                continue
            cs = smooth_columns(dr_tr, model.scores)
            G_held = B_held @ (coef_map @ (cs.shrink * (dr_tr.A.T @ model.scores)))
            pred = np.tile(model.mu, (held.size, 1)) \
                + G_held @ model.component_values().T
            errors[i] += float(np.sum((Y[held] - pred) ** 2))
            counts[i] += held.size
    mse = errors / np.maximum(counts, 1)
    # the CV curve is nearly flat past the true rank; take the smallest
    # candidate within a small relative margin of the minimum
    ok = mse <= (1.0 + 1e-3) * mse.min()
    return candidates[int(np.argmax(ok))]
