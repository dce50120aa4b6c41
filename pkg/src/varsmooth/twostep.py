"""Two-step estimation: per-location curve smooths, then spatial postprocessing.

Step 1 smooths each column of Y over t with its own REML-selected
penalty. Step 2 borrows strength across locations, either with a
penalized spline smoother in s, a projection onto leading FPC functions
of the raw data, or a penalized hybrid of the two. Tuning for step 2 is
chosen by cross-validation over whole curves (rows).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .basis import BasisSpec, EvaluatedBasis, build_basis
from .fpca import FpcaModel, fpca_decompose
from .smoothcore import (
    ColumnSmoothResult,
    ConditioningError,
    demmler_reinsch,
    smooth_columns,
)
from .tensorfit import VsFit


class FoldError(ValueError):
    """Cross-validation fold too small to fit on."""


@dataclass
class TwoStepFit(VsFit):
    """A two-step fit; variant is pen, fpc, or penfpc."""

    variant: str = ""
    Hs: np.ndarray | None = None
    lambda_s: float | None = None
    A: int | None = None


def step1(Y, t, basis_t: EvaluatedBasis) -> ColumnSmoothResult:
    """Per-column REML smooths of Y over t (the first step)."""
    del t  # the design inside basis_t is already evaluated at t
    dr = demmler_reinsch(basis_t)
    return smooth_columns(dr, np.asarray(Y, dtype=float))


def hs_matrix(basis_s: EvaluatedBasis, lambda_s: float) -> np.ndarray:
    """Spatial smoother H_s = B_s (B_s'B_s + lambda_s P_s)^{-1} B_s'."""
    B = basis_s.design
    G = B.T @ B + lambda_s * basis_s.penalty
    c, low = linalg.cho_factor(0.5 * (G + G.T))
    return B @ linalg.cho_solve((c, low), B.T)


def cross_validate(fitter, Y, t, grid, folds: int = 5, repeats: int = 1,
                   seed: int = 0):
    """Row-fold cross-validation of a tuning parameter.

    ``fitter(Y_train, t_train)`` must return a ``predict(t_new, value)``
    closure giving predicted curves at new t for a tuning value; per-fold
    training work is therefore shared across the grid. Returns the
    selected value and the CV error curve. Ties go to the earliest grid
    entry, so order the grid from least to most complex.
    """
    Y = np.asarray(Y, dtype=float)
    t = np.asarray(t, dtype=float)
    n = Y.shape[0]
    if n < folds:
        raise FoldError(f"cannot split {n} rows into {folds} folds")
    errors = np.zeros(len(grid))
    total = 0
    for r in range(repeats):
        rng = np.random.default_rng([seed, r])
        perm = rng.permutation(n)
        for held in np.array_split(perm, folds):
            train = np.setdiff1d(np.arange(n), held)
            if train.size < 2:
                raise FoldError(
                    f"training fold has {train.size} rows; need at least 2"
                )
            predict = fitter(Y[train], t[train])
            for i, g in enumerate(grid):
                pred = predict(t[held], g)
                errors[i] += float(np.sum((Y[held] - pred) ** 2))
            total += held.size * Y.shape[1]
    curve = errors / total
    # near-ties (within 0.1% of the minimum) resolve to the earliest grid
    # entry, so callers should order grids from least to most complex
    best = int(np.argmax(curve <= (1.0 + 1e-3) * curve.min()))
    return grid[best], curve


def _lambda_grid(lo=1e-6, hi=1e6, num=25):
    # descending so CV ties resolve to the smoother fit
    return np.geomspace(hi, lo, num)


def _cv_refine(fitter, Y, t, grid, folds, seed):
    """CV over a log grid, then one refinement pass around the minimizer."""
    best, curve = cross_validate(fitter, Y, t, grid, folds=folds, seed=seed)
    i = int(np.argmin(curve))
    hi = grid[max(i - 1, 0)]
    lo = grid[min(i + 1, len(grid) - 1)]
    if lo == hi:
        return float(best), curve
    fine = np.geomspace(hi, lo, 25)
    best2, curve2 = cross_validate(fitter, Y, t, fine, folds=folds, seed=seed)
    return float(best2), curve2


def _fold_smooth(spec_t: BasisSpec, t_tr, Y_tr):
    """Step-1 smooth on a training fold, shrinking the temporal basis
    when the fold leaves a knot span empty (rank-deficient design)."""
    dim = spec_t.dimension
    while True:
        spec = BasisSpec(spec_t.domain_lo, spec_t.domain_hi, dim,
                         spec_t.degree)
        try:
            bt = build_basis(spec, t_tr)
            return spec, smooth_columns(demmler_reinsch(bt), Y_tr)
        except ConditioningError:
            if dim <= spec_t.degree + 2:
                raise
            dim -= 1


def _pen_fitter(spec_t: BasisSpec, basis_s: EvaluatedBasis):
    hs_cache = {}

    def fitter(Y_tr, t_tr):
        spec, cs = _fold_smooth(spec_t, t_tr, Y_tr)
        coef = cs.coef()

        def predict(t_new, lam):
            if lam not in hs_cache:
                hs_cache[lam] = hs_matrix(basis_s, lam)
            return spec.design_matrix(t_new) @ coef @ hs_cache[lam].T

        return predict

    return fitter


def step2_penalized(
    cs: ColumnSmoothResult,
    basis_s: EvaluatedBasis,
    lambda_s="auto",
    t=None,
    spec_t: BasisSpec | None = None,
    folds: int = 5,
    seed: int = 0,
    basis_t: EvaluatedBasis | None = None,
) -> TwoStepFit:
    """Smooth each step-1 curve across s: Y-hat = Y-tilde H_s'.

    With lambda_s="auto" the penalty is chosen by row-fold CV, which
    refits step 1 within each training fold; this requires ``t`` and
    ``spec_t``.
    """
    Y_raw = cs._y
    curve = None
    if isinstance(lambda_s, str) and lambda_s == "auto":
        if t is None or spec_t is None:
            raise ValueError("auto lambda_s needs t and spec_t for CV")
        fitter = _pen_fitter(spec_t, basis_s)
        lambda_s, curve = _cv_refine(fitter, Y_raw, t, _lambda_grid(),
                                     folds, seed)
    lambda_s = float(lambda_s)
    Hs = hs_matrix(basis_s, lambda_s)
    fitted = cs.fitted @ Hs.T
    B = basis_s.design
    G = B.T @ B + lambda_s * basis_s.penalty
    c, low = linalg.cho_factor(0.5 * (G + G.T))
    theta = cs.coef() @ linalg.cho_solve((c, low), B.T).T
    return TwoStepFit(
        method="2s-pen",
        fitted=fitted,
        basis_t=basis_t,
        basis_s=basis_s,
        theta=theta,
        tuning={"lambda_t": cs.lambdas.tolist(), "lambda_s": lambda_s,
                "cv_curve": None if curve is None else curve.tolist()},
        colsmooth=cs,
        variant="pen",
        Hs=Hs,
        lambda_s=lambda_s,
    )


def _fpc_pieces(Y_raw, basis_s, model, lambda_s):
    """Shared assembly for the fpc and penfpc variants.

    Returns (mean_term_row, spatial_map) with fitted =
    1 mean' + (Y_tilde - 1 ybar') @ spatial_map.
    """
    B = basis_s.design
    ybar = Y_raw.mean(axis=0)
    c, low = linalg.cho_factor(B.T @ B)
    mean_coef = linalg.cho_solve((c, low), B.T @ ybar)
    V = model.V
    N = V.T @ (B.T @ B + lambda_s * basis_s.penalty) @ V
    cN, lowN = linalg.cho_factor(0.5 * (N + N.T))
    spatial = B @ V @ linalg.cho_solve((cN, lowN), V.T @ B.T)
    return mean_coef, spatial


def _assemble_fpc_variant(cs, Y_raw, basis_s, model, lambda_s, variant,
                          extra_tuning, basis_t=None):
    B = basis_s.design
    mean_coef, spatial = _fpc_pieces(Y_raw, basis_s, model, lambda_s)
    ybar = Y_raw.mean(axis=0)
    n = Y_raw.shape[0]
    fitted = np.tile(B @ mean_coef, (n, 1)) \
        + (cs.fitted - ybar) @ spatial.T
    coef = cs.coef()
    V = model.V
    N = V.T @ (B.T @ B + lambda_s * basis_s.penalty) @ V
    cN, lowN = linalg.cho_factor(0.5 * (N + N.T))
    # centered step-1 fit: Y_tilde - 1 ybar' = B_t (coef - 1 ybar'), using
    # that the ones vector is in the span of the t basis
    theta = np.outer(np.ones(coef.shape[0]), mean_coef) \
        + (coef - np.outer(np.ones(coef.shape[0]), ybar)) \
        @ B @ V @ linalg.cho_solve((cN, lowN), V.T)
    return TwoStepFit(
        method=f"2s-{variant}",
        fitted=fitted,
        basis_t=basis_t,
        basis_s=basis_s,
        theta=theta,
        tuning={"lambda_t": cs.lambdas.tolist(), **extra_tuning},
        colsmooth=cs,
        fpca=model,
        variant=variant,
        lambda_s=lambda_s if variant == "penfpc" else None,
        A=model.A,
    )


def _fpc_fitter(spec_t: BasisSpec, basis_s: EvaluatedBasis,
                lambda_s: float = 0.0, A_fixed: int | None = None):
    """Fitter closure over A (if A_fixed is None) or lambda_s."""

    def fitter(Y_tr, t_tr):
        spec, cs = _fold_smooth(spec_t, t_tr, Y_tr)
        coef = cs.coef()
        B = basis_s.design
        ybar = Y_tr.mean(axis=0)
        cy = linalg.cho_solve(linalg.cho_factor(B.T @ B), B.T @ ybar)
        coef_c = coef - np.outer(np.ones(coef.shape[0]), ybar)
        models = {}

        def predict(t_new, g):
            A, lam = (g, lambda_s) if A_fixed is None else (A_fixed, g)
            if A not in models:
                models[A] = fpca_decompose(Y_tr, basis_s, A)
            V = models[A].V
            N = V.T @ (B.T @ B + lam * basis_s.penalty) @ V
            cN = linalg.cho_factor(0.5 * (N + N.T))
            Bt_new = spec.design_matrix(t_new)
            theta = np.outer(np.ones(coef.shape[0]), cy) \
                + coef_c @ B @ V @ linalg.cho_solve(cN, V.T)
            return Bt_new @ theta @ B.T

        return predict

    return fitter


def step2_fpc(
    cs: ColumnSmoothResult,
    Y_raw,
    fpca_A="auto",
    basis_s: EvaluatedBasis = None,
    t=None,
    spec_t: BasisSpec | None = None,
    folds: int = 5,
    seed: int = 0,
    basis_t: EvaluatedBasis | None = None,
) -> TwoStepFit:
    """Project centered step-1 curves onto leading FPCs of the raw data."""
    Y_raw = np.asarray(Y_raw, dtype=float)
    curve = None
    if isinstance(fpca_A, str) and fpca_A == "auto":
        if t is None or spec_t is None:
            raise ValueError("auto A needs t and spec_t for CV")
        cap = min(10, Y_raw.shape[0] - Y_raw.shape[0] // folds - 1,
                  basis_s.dimension)
        grid = list(range(1, cap + 1))
        fitter = _fpc_fitter(spec_t, basis_s, lambda_s=0.0)
        fpca_A, curve = cross_validate(fitter, Y_raw, t, grid, folds=folds,
                                       seed=seed)
    model = fpca_decompose(Y_raw, basis_s, int(fpca_A))
    extra = {"A": int(fpca_A),
             "cv_curve": None if curve is None else list(curve)}
    return _assemble_fpc_variant(cs, Y_raw, basis_s, model, 0.0, "fpc",
                                 extra, basis_t=basis_t)


def step2_penfpc(
    cs: ColumnSmoothResult,
    Y_raw,
    A="auto",
    lambda_s="auto",
    basis_s: EvaluatedBasis = None,
    t=None,
    spec_t: BasisSpec | None = None,
    folds: int = 5,
    seed: int = 0,
    basis_t: EvaluatedBasis | None = None,
) -> TwoStepFit:
    """FPC projection with a roughness penalty inside the inner matrix.

    A defaults to the component count explaining 99% of the raw-data
    variance; lambda_s is chosen by row-fold CV.
    """
    Y_raw = np.asarray(Y_raw, dtype=float)
    if isinstance(A, str) and A == "auto":
        full = fpca_decompose(
            Y_raw, basis_s,
            A=min(Y_raw.shape[0] - 1, basis_s.dimension),
        )
        frac = np.cumsum(full.eigenvalues) / full.eigenvalues.sum()
        A = int(np.searchsorted(frac, 0.99) + 1)
    A = int(A)
    curve = None
    if isinstance(lambda_s, str) and lambda_s == "auto":
        if t is None or spec_t is None:
            raise ValueError("auto lambda_s needs t and spec_t for CV")
        fitter = _fpc_fitter(spec_t, basis_s, A_fixed=A)
        lambda_s, curve = _cv_refine(fitter, Y_raw, t, _lambda_grid(),
                                     folds, seed)
    lambda_s = float(lambda_s)
    model = fpca_decompose(Y_raw, basis_s, A)
    extra = {"A": A, "lambda_s": lambda_s,
             "cv_curve": None if curve is None else list(curve)}
    return _assemble_fpc_variant(cs, Y_raw, basis_s, model, lambda_s,
                                 "penfpc", extra, basis_t=basis_t)
