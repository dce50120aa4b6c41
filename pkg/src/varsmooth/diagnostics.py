"""Pointwise degrees of freedom, leverage, fit metrics, and confidence bands.

Pointwise df at location l is the sum over observations i and locations
l* of the sensitivities d yhat_{il} / d y_{il*}: the trace of the l-th
block row of the big hat matrix restricted to matching observation
indices. Closed forms exist for every fit method here; the dense hat
matrix is also constructible at small sizes as an oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .basis import EvaluatedBasis
from .covest import _sym_sqrt
from .fpca import FpcScoresFit
from .tensorfit import VsFit
from .twostep import TwoStepFit

HAT_SIZE_CAP = 6000


class SizeGuardError(MemoryError):
    """Dense nL x nL assembly refused above the size cap."""


@dataclass
class DfReport:
    """Pointwise degrees of freedom for a fitted model."""

    method: str
    d: np.ndarray
    d_step1: np.ndarray | None = None
    leverage: np.ndarray | None = None


@dataclass
class CiSurface:
    """Pointwise variance estimates of f-hat on an evaluation grid."""

    var_grid: np.ndarray
    eval_t: np.ndarray
    eval_s: np.ndarray
    T_shape: tuple


def pointwise_df_tp(fit: VsFit) -> DfReport:
    """Pointwise df of a tensor-product fit without forming the hat matrix."""
    Bt = fit.basis_t.design
    Bs = fit.basis_s.design
    P = fit.penalty.matrix(fit.penalty.lambdas)
    gls = fit.method.startswith("tp-gls")
    if gls:
        if fit.precision is None:
            raise ValueError("GLS fit carries no precision estimate")
        W = fit.precision.prec
        G = np.kron(Bs.T @ W @ Bs, Bt.T @ Bt) + P
        w_row = np.ones(Bs.shape[0]) @ W @ Bs
    else:
        G = np.kron(Bs.T @ Bs, Bt.T @ Bt) + P
        w_row = Bs.sum(axis=0)
    # M = [(1' W Bs) kron Bt] G^{-1}, one n x KsKt matrix
    M = np.linalg.solve(G.T, np.kron(w_row, Bt).T).T
    n, K_t = Bt.shape
    K_s = Bs.shape[1]
    Mr = M.reshape(n, K_s, K_t)
    E = np.einsum("ik,ijk->jk", Bt, Mr)
    d = Bs @ E.sum(axis=1)
    return DfReport(method=fit.method, d=d)


def pointwise_df_fpc(fit: FpcScoresFit) -> DfReport:
    """Pointwise df of the smoothed-FPC-scores fit."""
    L = fit.basis_s.design.shape[0]
    if fit.fpca is None or fit.fpca.A == 0:
        return DfReport(method=fit.method, d=np.ones(L))
    dr = fit.colsmooth.dr
    At = dr.A
    Atc = At - At.mean(axis=0)
    w = np.einsum("ik,ik->k", At, Atc)
    Bs = fit.basis_s.design
    Q = fit.basis_s.gram
    V = fit.fpca.V
    r = V.T @ Q @ np.ones(Q.shape[0])
    d = 1.0 + ((Bs @ V) * r[None, :]) @ (fit.Mstar.T @ w)
    return DfReport(method=fit.method, d=d)


def pointwise_df_twostep(fit: TwoStepFit) -> DfReport:
    """Pointwise df of a two-step fit, plus the step-1 ordinary df."""
    d1 = fit.colsmooth.shrink.sum(axis=0)
    if fit.variant == "pen":
        d = fit.Hs @ d1
    else:
        Bs = fit.basis_s.design
        V = fit.fpca.V
        lam = fit.lambda_s if fit.variant == "penfpc" else 0.0
        N = V.T @ (Bs.T @ Bs + lam * fit.basis_s.penalty) @ V
        d = 1.0 + Bs @ V @ np.linalg.solve(N, V.T @ Bs.T @ (d1 - 1.0))
    return DfReport(method=fit.method, d=d, d_step1=d1)


def pointwise_df_vc(X, basis_s: EvaluatedBasis, lambdas, precision=None) \
        -> DfReport:
    """Pointwise df of a varying-coefficient fit via dense trace extraction.

    Model: Y = X Theta B_s' with a P_s-by-diag(lambdas) penalty. Serves
    as the validation harness for the d = p result.
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if np.linalg.matrix_rank(X) < p:
        raise ValueError("design matrix X is rank deficient")
    lambdas = np.asarray(lambdas, dtype=float)
    Bs = basis_s.design
    L, K_s = Bs.shape
    if n * L > HAT_SIZE_CAP:
        raise SizeGuardError(f"nL = {n * L} exceeds cap {HAT_SIZE_CAP}")
    W = np.eye(L) if precision is None else np.asarray(precision, dtype=float)
    P = np.kron(basis_s.penalty, np.diag(lambdas))
    G = np.kron(Bs.T @ W @ Bs, X.T @ X) + P
    Xk = np.kron(Bs, X)
    H = Xk @ np.linalg.solve(G, np.kron(Bs.T @ W, X.T))
    Hb = H.reshape(L, n, L, n)
    d = Hb.diagonal(axis1=1, axis2=3).sum(axis=(1, 2))
    return DfReport(method="vc", d=d)


def build_hat_matrix(fit) -> np.ndarray:
    """Dense nL x nL hat matrix of a fit at frozen tuning (oracle scale).

    Columns and rows are ordered location-major: index = l*n + i.
    """
    _guard(*fit.fitted.shape)
    if isinstance(fit, TwoStepFit):
        return _hat_twostep(fit)
    if isinstance(fit, FpcScoresFit):
        return _hat_fpc_scores(fit)
    return _hat_tp(fit)


def _guard(n, L):
    if n * L > HAT_SIZE_CAP:
        raise SizeGuardError(f"nL = {n * L} exceeds cap {HAT_SIZE_CAP}")


def _hat_tp(fit: VsFit) -> np.ndarray:
    Bt = fit.basis_t.design
    Bs = fit.basis_s.design
    _guard(Bt.shape[0], Bs.shape[0])
    P = fit.penalty.matrix(fit.penalty.lambdas)
    if fit.method.startswith("tp-gls"):
        W = fit.precision.prec
        G = np.kron(Bs.T @ W @ Bs, Bt.T @ Bt) + P
        Xt = np.kron(Bs.T @ W, Bt.T)
    else:
        G = np.kron(Bs.T @ Bs, Bt.T @ Bt) + P
        Xt = np.kron(Bs.T, Bt.T)
    return np.kron(Bs, Bt) @ np.linalg.solve(G, Xt)


def _hat_step1(cs) -> np.ndarray:
    """(I_L kron A) D_M (I_L kron A') for the per-column smooths."""
    At = cs.dr.A
    n = At.shape[0]
    L = cs.shrink.shape[1]
    _guard(n, L)
    blocks = [At @ (cs.shrink[:, l][:, None] * At.T) for l in range(L)]
    H = np.zeros((n * L, n * L))
    for l, B in enumerate(blocks):
        H[l * n:(l + 1) * n, l * n:(l + 1) * n] = B
    return H


def _hat_twostep(fit: TwoStepFit) -> np.ndarray:
    cs = fit.colsmooth
    n = cs.dr.A.shape[0]
    L = cs.shrink.shape[1]
    _guard(n, L)
    Ht = _hat_step1(cs)
    if fit.variant == "pen":
        return np.kron(fit.Hs, np.eye(n)) @ Ht
    Bs = fit.basis_s.design
    V = fit.fpca.V
    lam = fit.lambda_s if fit.variant == "penfpc" else 0.0
    N = V.T @ (Bs.T @ Bs + lam * fit.basis_s.penalty) @ V
    S = Bs @ V @ np.linalg.solve(N, V.T @ Bs.T)
    proj = Bs @ np.linalg.solve(Bs.T @ Bs, Bs.T)
    J = np.full((n, n), 1.0 / n)
    mean_part = np.kron(proj, J)
    centered = Ht - np.kron(np.eye(L), J)
    return mean_part + np.kron(S, np.eye(n)) @ centered


def _hat_fpc_scores(fit: FpcScoresFit) -> np.ndarray:
    Bs = fit.basis_s.design
    n = fit.fitted.shape[0]
    L = Bs.shape[0]
    _guard(n, L)
    proj = Bs @ np.linalg.solve(Bs.T @ Bs, Bs.T)
    J = np.full((n, n), 1.0 / n)
    H1 = np.kron(proj, J)
    if fit.fpca is None or fit.fpca.A == 0:
        return H1
    At = fit.colsmooth.dr.A
    Atc = At - At.mean(axis=0)
    V = fit.fpca.V
    Q = fit.basis_s.gram
    DM = np.diag(fit.Mstar.ravel(order="F"))
    left = np.kron(Bs @ V, At)
    right = np.kron(
        V.T @ Q @ np.linalg.solve(Bs.T @ Bs, Bs.T), Atc.T
    )
    return H1 + left @ DM @ right


def pointwise_leverage(fit) -> np.ndarray:
    """n x L matrix of pointwise leverages (row sums of diagonal entries)."""
    H = build_hat_matrix(fit)
    L = fit.fitted.shape[1]
    n = fit.fitted.shape[0]
    Hb = H.reshape(L, n, L, n)
    # lev[i, l] = sum over l* of H[(l, i), (l*, i)]
    return np.einsum("limi->il", Hb)


def functional_r2(Y, fitted, s_grid) -> float:
    """Functional coefficient of determination via the trapezoid rule."""
    Y = np.asarray(Y, dtype=float)
    fitted = np.asarray(fitted, dtype=float)
    s_grid = np.asarray(s_grid, dtype=float)
    resid = np.trapezoid((Y - fitted) ** 2, s_grid, axis=1).sum()
    total = np.trapezoid((Y - Y.mean(axis=0)) ** 2, s_grid, axis=1).sum()
    if total <= 0:
        raise ValueError("zero total variation: R^2 undefined")
    return 1.0 - resid / total


def _panel_gl(lo, hi, panels=20, nodes=5):
    x, w = np.polynomial.legendre.leggauss(nodes)
    edges = np.linspace(lo, hi, panels + 1)
    pts, wts = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        pts.append(0.5 * (b - a) * x + 0.5 * (a + b))
        wts.append(0.5 * (b - a) * w)
    return np.concatenate(pts), np.concatenate(wts)


def ise_metrics(fit: VsFit, f_true, dfdt_true) -> tuple[float, float]:
    """Integrated squared errors of f-hat and its t-derivative.

    f_true and dfdt_true are callables f(t, s) accepting broadcastable
    arrays. Quadrature: composite Gauss-Legendre, 20 panels per axis.
    """
    spec_t = fit.basis_t.spec
    spec_s = fit.basis_s.spec
    tq, tw = _panel_gl(spec_t.domain_lo, spec_t.domain_hi)
    sq, sw = _panel_gl(spec_s.domain_lo, spec_s.domain_hi)
    F_hat = fit.evaluate(tq, sq)
    D_hat = fit.evaluate_deriv_t(tq, sq)
    T, S = np.meshgrid(tq, sq, indexing="ij")
    err_f = (F_hat - f_true(T, S)) ** 2
    err_d = (D_hat - dfdt_true(T, S)) ** 2
    return float(tw @ err_f @ sw), float(tw @ err_d @ sw)


def residual_covariance(Y, fitted, diag_weight: float = 0.1) -> np.ndarray:
    """Sample covariance of residual curves, shrunk toward its diagonal."""
    R = np.asarray(Y, dtype=float) - np.asarray(fitted, dtype=float)
    S = np.cov(R, rowvar=False, bias=False)
    S = np.atleast_2d(S)
    return (1.0 - diag_weight) * S + diag_weight * np.diag(np.diag(S))


def ci_twostep(fit: TwoStepFit, sigma_hat, eval_t, eval_s,
               z: float = 2.0) -> CiSurface:
    """Pointwise variance surface for the penalized two-step fit.

    Returns var_grid over eval_t x eval_s; the caller forms intervals as
    fitted +- z sqrt(var). Assumes independence between curves and
    treats the smoothing parameters as fixed.
    """
    if fit.variant != "pen":
        raise ValueError("confidence surface implemented for pen variant only")
    sigma_hat = np.asarray(sigma_hat, dtype=float)
    w = np.linalg.eigvalsh(0.5 * (sigma_hat + sigma_hat.T))
    if w.min() < -1e-8 * max(w.max(), 1.0):
        raise ValueError("sigma_hat is not positive semidefinite")
    eval_t = np.asarray(eval_t, dtype=float)
    eval_s = np.asarray(eval_s, dtype=float)
    dr = fit.colsmooth.dr
    Bs = fit.basis_s.design
    G = Bs.T @ Bs + fit.lambda_s * fit.basis_s.penalty
    left_s = np.linalg.solve(G.T, Bs.T).T            # Bs (Bs'Bs + lam Ps)^-1
    right_t = linalg.solve_triangular(dr.R, dr.U).T  # Ut' Rt^-T = (Rt^-1 Ut)'
    DM = fit.colsmooth.shrink.ravel(order="F")
    sig_half = _sym_sqrt(0.5 * (sigma_hat + sigma_hat.T))
    K_t = dr.K
    # T = (Sigma^{1/2} kron I_Kt) D_M [left_s kron right_t]
    T = np.kron(sig_half, np.eye(K_t)) @ (DM[:, None]
                                          * np.kron(left_s, right_t))
    Bt_star = fit.basis_t.spec.design_matrix(eval_t) if fit.basis_t is not None \
        else None
    if Bt_star is None:
        raise ValueError("fit carries no t basis; refit with basis_t set")
    Bs_star = fit.basis_s.spec.design_matrix(eval_s)
    E = T @ np.kron(Bs_star.T, Bt_star.T)
    v = np.sum(E * E, axis=0)
    var_grid = v.reshape(len(eval_t), len(eval_s), order="F")
    var_grid = np.maximum(var_grid, 0.0)
    return CiSurface(var_grid=var_grid, eval_t=eval_t, eval_s=eval_s,
                     T_shape=T.shape)
