"""Tensor-product penalized OLS/GLS fits with exact Wood-style penalties.

The bivariate surface is f(t,s) = b_t(t)' Theta b_s(s). The roughness
penalty is the exact quadratic form lambda_s (P_s x Q_t) + lambda_t
(Q_s x P_t), or its spatially adaptive generalization where the temporal
block splits into Q_s^{b*_k} x P_t pieces weighted by a coarse basis.
Smoothing parameters are chosen by a multi-penalty Gaussian REML score
optimized with restarted Nelder-Mead on the log scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from .basis import BasisSpec, EvaluatedBasis, build_basis, weighted_gram
from .covest import PrecisionEstimate
from .smoothcore import ConditioningError

LOG_LAM_LO = np.log(1e-8)
LOG_LAM_HI = np.log(1e8)
DEFAULT_DIM_CAP = 2000


class PenaltyTooLargeError(MemoryError):
    """Materializing the Kronecker penalty would exceed the configured cap."""


@dataclass
class TpPenalty:
    """Unweighted penalty blocks [P_s x Q_t, (Q_s or Q_s^{b*_k}) x P_t]."""

    blocks: list[np.ndarray]
    adaptive: bool = False
    lambdas: np.ndarray | None = None

    @property
    def n_lambdas(self) -> int:
        return len(self.blocks)

    def matrix(self, lambdas) -> np.ndarray:
        lams = np.asarray(lambdas, dtype=float)
        if lams.shape != (len(self.blocks),):
            raise ValueError(
                f"need {len(self.blocks)} lambdas, got shape {lams.shape}"
            )
        return sum(l * S for l, S in zip(lams, self.blocks))


@dataclass
class VsFit:
    """A fitted varying-smoother model."""

    method: str
    fitted: np.ndarray
    basis_t: EvaluatedBasis
    basis_s: EvaluatedBasis
    theta: np.ndarray | None = None
    tuning: dict = field(default_factory=dict)
    penalty: TpPenalty | None = None
    precision: PrecisionEstimate | None = None
    fpca: object | None = None
    colsmooth: object | None = None
    warnings: list[str] = field(default_factory=list)

    def evaluate(self, t_points, s_points) -> np.ndarray:
        """Evaluate f-hat on the grid t_points x s_points (requires theta)."""
        if self.theta is None:
            raise ValueError(f"method {self.method} has no coefficient matrix")
        Bt = self.basis_t.spec.design_matrix(np.asarray(t_points, dtype=float))
        Bs = self.basis_s.spec.design_matrix(np.asarray(s_points, dtype=float))
        return Bt @ self.theta @ Bs.T

    def evaluate_deriv_t(self, t_points, s_points) -> np.ndarray:
        """Evaluate the t-derivative of f-hat on a grid."""
        if self.theta is None:
            raise ValueError(f"method {self.method} has no coefficient matrix")
        Dt = self.basis_t.spec.deriv_matrix(np.asarray(t_points, dtype=float), 1)
        Bs = self.basis_s.spec.design_matrix(np.asarray(s_points, dtype=float))
        return Dt @ self.theta @ Bs.T


def assemble_penalty(
    bt: EvaluatedBasis,
    bs: EvaluatedBasis,
    adaptive: BasisSpec | None = None,
    dim_cap: int = DEFAULT_DIM_CAP,
) -> TpPenalty:
    """Build the unweighted Kronecker penalty blocks for a tensor-product fit."""
    dim = bt.dimension * bs.dimension
    if dim > dim_cap:
        raise PenaltyTooLargeError(
            f"K_s*K_t = {dim} exceeds the cap {dim_cap} for dense penalties"
        )
    blocks = [np.kron(bs.penalty, bt.gram)]
    if adaptive is None:
        blocks.append(np.kron(bs.gram, bt.penalty))
        return TpPenalty(blocks=blocks, adaptive=False)
    for k in range(1, adaptive.dimension + 1):
        Qk = weighted_gram(bs.spec, adaptive, k)
        blocks.append(np.kron(Qk, bt.penalty))
    return TpPenalty(blocks=blocks, adaptive=True)


class MultiRemlProblem:
    """Penalized least squares with several penalty blocks, REML-scored.

    Works in whitened coordinates, so GLS reduces to OLS on transformed
    responses. All per-lambda operations are Cholesky factorizations of
    K_sK_t-sized matrices; nothing of size nL is ever formed.
    """

    def __init__(self, design_t: np.ndarray, design_s: np.ndarray,
                 blocks: list[np.ndarray], Y: np.ndarray):
        Bt = np.asarray(design_t, dtype=float)
        Bs = np.asarray(design_s, dtype=float)
        Y = np.asarray(Y, dtype=float)
        self.n_obs = Y.size
        self.K = Bt.shape[1] * Bs.shape[1]
        G0 = np.kron(Bs.T @ Bs, Bt.T @ Bt)
        try:
            C0 = linalg.cholesky(0.5 * (G0 + G0.T), lower=False)
        except np.linalg.LinAlgError as e:
            raise ConditioningError(f"X'WX not positive definite: {e}") from e
        self._C0 = C0
        self.logdet_G0 = 2.0 * np.sum(np.log(np.diag(C0)))
        rhs = (Bt.T @ Y @ Bs).ravel(order="F")
        self._rhs_t = linalg.solve_triangular(C0, rhs, trans="T")  # C0^{-T} rhs
        self.yss = float(np.sum(Y * Y))
        # whitened blocks C0^{-T} S C0^{-1}
        self._St = []
        for S in blocks:
            tmp = linalg.solve_triangular(C0, S, trans="T")
            self._St.append(linalg.solve_triangular(C0, tmp.T, trans="T").T)
        # fixed range space of the total penalty (lambda-independent)
        Ssum = sum(blocks)
        w, V = linalg.eigh(0.5 * (Ssum + Ssum.T))
        tol = 1e-10 * max(w[-1], 1.0)
        keep = w > tol
        self.null_dim = int(np.sum(~keep))
        Z = V[:, keep]
        self._Sr = [Z.T @ S @ Z for S in blocks]
        self.n_lambdas = len(blocks)

    def _factor(self, lams):
        St = sum(l * S for l, S in zip(lams, self._St))
        A = np.eye(self.K) + St
        return linalg.cholesky(0.5 * (A + A.T), lower=False)

    def solve(self, lambdas) -> np.ndarray:
        """Penalized solution theta (flat, column-major) at fixed lambdas."""
        lams = np.asarray(lambdas, dtype=float)
        C = self._factor(lams)
        beta = linalg.cho_solve((C, False), self._rhs_t)
        return linalg.solve_triangular(self._C0, beta)

    def score(self, log_lambdas) -> float:
        """-2 restricted log-likelihood (up to constants) at log lambdas."""
        ll = np.clip(np.asarray(log_lambdas, dtype=float), LOG_LAM_LO, LOG_LAM_HI)
        lams = np.exp(ll)
        try:
            C = self._factor(lams)
        except np.linalg.LinAlgError:
            return np.inf
        beta = linalg.cho_solve((C, False), self._rhs_t)
        prss = self.yss - float(self._rhs_t @ beta)
        prss = max(prss, 1e-14 * self.yss, 1e-300)
        logdet_normal = self.logdet_G0 + 2.0 * np.sum(np.log(np.diag(C)))
        Sr = sum(l * S for l, S in zip(lams, self._Sr))
        try:
            Cr = linalg.cholesky(0.5 * (Sr + Sr.T), lower=False)
        except np.linalg.LinAlgError:
            return np.inf
        logdet_pen = 2.0 * np.sum(np.log(np.diag(Cr)))
        return (
            (self.n_obs - self.null_dim) * np.log(prss)
            + logdet_normal
            - logdet_pen
        )

    def prss(self, lambdas) -> float:
        lams = np.asarray(lambdas, dtype=float)
        C = self._factor(lams)
        beta = linalg.cho_solve((C, False), self._rhs_t)
        return self.yss - float(self._rhs_t @ beta)


def select_lambdas(
    design_t: np.ndarray,
    design_s: np.ndarray,
    blocks: list[np.ndarray],
    Y: np.ndarray,
    restarts: int = 5,
    seed: int = 0,
    problem: MultiRemlProblem | None = None,
) -> np.ndarray:
    """Minimize the multi-penalty REML score by restarted Nelder-Mead."""
    if problem is None:
        problem = MultiRemlProblem(design_t, design_s, blocks, Y)
    ndim = problem.n_lambdas
    rng = np.random.default_rng(seed)
    starts = [np.zeros(ndim)]
    starts += [rng.uniform(-4.0, 4.0, size=ndim) for _ in range(restarts - 1)]
    best_x, best_f = None, np.inf
    for x0 in starts:
        res = optimize.minimize(
            problem.score,
            x0,
            method="Nelder-Mead",
            options={
                "xatol": 1e-4,
                "fatol": 1e-8,
                "maxfev": 400 * ndim,
                "adaptive": ndim > 3,
            },
        )
        if not np.isfinite(res.fun):
            raise ConditioningError(
                f"REML score non-finite at log-lambda {res.x}"
            )
        if res.fun < best_f:
            best_f, best_x = res.fun, res.x
    return np.clip(np.exp(best_x), 1e-8, 1e8)


def _make_bases(Y, t, s_grid, K_t, K_s, degree, penalty_order, domain_t, domain_s):
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
    return bt, bs


def _coarse_spec(bs: EvaluatedBasis, adaptive) -> BasisSpec | None:
    if adaptive is None:
        return None
    if isinstance(adaptive, BasisSpec):
        return adaptive
    K_star = int(adaptive)
    degree = min(3, K_star - 1)
    return BasisSpec(
        bs.spec.domain_lo, bs.spec.domain_hi, dimension=K_star, degree=degree
    )


def _fit_tp(Y, bt, bs, pen, lambdas, restarts, seed, design_s_eff, Y_eff,
            method, precision):
    problem = MultiRemlProblem(bt.design, design_s_eff, pen.blocks, Y_eff)
    warnings = []
    if isinstance(lambdas, str) and lambdas == "auto":
        lams = select_lambdas(None, None, None, None, restarts=restarts,
                              seed=seed, problem=problem)
        if np.any(lams <= 1e-8 * (1 + 1e-6)):
            lams = np.maximum(lams, 1e-8)
            warnings.append("lambda hit the lower floor (near-interpolation)")
    else:
        lams = np.asarray(lambdas, dtype=float)
    theta_flat = problem.solve(lams)
    Theta = theta_flat.reshape(bt.dimension, bs.dimension, order="F")
    fitted = bt.design @ Theta @ bs.design.T
    pen = TpPenalty(blocks=pen.blocks, adaptive=pen.adaptive, lambdas=lams)
    return VsFit(
        method=method,
        fitted=fitted,
        basis_t=bt,
        basis_s=bs,
        theta=Theta,
        tuning={"lambdas": lams.tolist(), "reml_score": problem.score(np.log(lams))},
        penalty=pen,
        precision=precision,
        warnings=warnings,
    )


def fit_tp_ols(
    Y,
    t,
    s_grid,
    K_t: int = 15,
    K_s: int = 25,
    degree: int = 3,
    penalty_order: int = 2,
    adaptive=None,
    lambdas="auto",
    restarts: int = 5,
    seed: int = 0,
    domain_t=None,
    domain_s=None,
) -> VsFit:
    """Penalized OLS tensor-product fit of the mean surface.

    ``adaptive`` may be None, a coarse-basis dimension, or a BasisSpec;
    when set, the temporal penalty becomes spatially varying.
    """
    Y = np.asarray(Y, dtype=float)
    bt, bs = _make_bases(Y, t, s_grid, K_t, K_s, degree, penalty_order,
                         domain_t, domain_s)
    coarse = _coarse_spec(bs, adaptive)
    pen = assemble_penalty(bt, bs, adaptive=coarse)
    method = "tp-ols-adapt" if coarse is not None else "tp-ols"
    return _fit_tp(Y, bt, bs, pen, lambdas, restarts, seed,
                   design_s_eff=bs.design, Y_eff=Y, method=method,
                   precision=None)


def fit_tp_gls(
    Y,
    t,
    s_grid,
    precision: PrecisionEstimate,
    K_t: int = 15,
    K_s: int = 25,
    degree: int = 3,
    penalty_order: int = 2,
    adaptive=None,
    lambdas="auto",
    restarts: int = 5,
    seed: int = 0,
    domain_t=None,
    domain_s=None,
) -> VsFit:
    """Penalized GLS fit: penalized OLS on row-prewhitened responses."""
    Y = np.asarray(Y, dtype=float)
    if precision.prec.shape[0] != Y.shape[1]:
        raise ValueError(
            f"precision is {precision.prec.shape[0]}x..., Y has L={Y.shape[1]}"
        )
    w = np.linalg.eigvalsh(precision.prec)
    if w.min() < -1e-8 * max(w.max(), 1.0):
        raise ValueError("precision estimate is not positive semidefinite")
    bt, bs = _make_bases(Y, t, s_grid, K_t, K_s, degree, penalty_order,
                         domain_t, domain_s)
    coarse = _coarse_spec(bs, adaptive)
    pen = assemble_penalty(bt, bs, adaptive=coarse)
    method = "tp-gls-adapt" if coarse is not None else "tp-gls"
    W_half = precision.prec_sqrt
    return _fit_tp(Y, bt, bs, pen, lambdas, restarts, seed,
                   design_s_eff=W_half @ bs.design, Y_eff=Y @ W_half,
                   method=method, precision=precision)
