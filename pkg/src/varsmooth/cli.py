"""Batch command-line front door.

Commands: fit, predict, df, simulate, study, ci. Exit codes: 0 on
success, 2 for validation problems (bad data, bad config, out-of-domain
requests), 3 for numerical failures. Outputs are computed fully before
anything is written, so failures leave no partial files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from .basis import BasisError, BasisSpec, build_basis
from .covest import CovarianceError, select_bandwidth
from .dataio import (
    ConfigError,
    DataError,
    Dataset,
    RunConfig,
    atomic_write,
    emit,
    fmt,
    ingest,
    load_config,
    write_csv,
    write_json,
)
from .diagnostics import (
    SizeGuardError,
    ci_twostep,
    functional_r2,
    pointwise_df_fpc,
    pointwise_df_tp,
    pointwise_df_twostep,
    residual_covariance,
)
from .fpca import FpcScoresFit, RankError, fit_fpc_scores
from .simlab import (
    METHOD_TAGS,
    CalibrationError,
    Scenario,
    run_study,
    simulate,
)
from .smoothcore import ConditioningError
from .tensorfit import PenaltyTooLargeError, fit_tp_gls, fit_tp_ols
from .twostep import TwoStepFit, step1, step2_fpc, step2_penalized, step2_penfpc

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3

NUMERIC_ERRORS = (
    ConditioningError,
    RankError,
    CalibrationError,
    CovarianceError,
    PenaltyTooLargeError,
    SizeGuardError,
    MemoryError,
    np.linalg.LinAlgError,
    FloatingPointError,
)

FIT_METHODS = tuple(m for m in METHOD_TAGS if m != "step1-only")


def _n_jobs(requested=None):
    cap = os.environ.get("THREADS")
    jobs = 1 if requested is None else int(requested)
    if cap is not None:
        jobs = min(jobs, max(1, int(cap)))
    return jobs


def _domains(cfg: RunConfig, ds: Dataset):
    dt = cfg.domain_t or [float(ds.t.min()), float(ds.t.max())]
    dm = cfg.domain_s or [float(ds.s_grid.min()), float(ds.s_grid.max())]
    return (float(dt[0]), float(dt[1])), (float(dm[0]), float(dm[1]))


def _build_fit(cfg: RunConfig, ds: Dataset):
    """Dispatch on the method tag; returns (fit, extras-for-tuning.json)."""
    method = cfg.method
    if method not in FIT_METHODS:
        raise ConfigError(
            f"unknown method {method!r}; choose from {sorted(FIT_METHODS)}"
        )
    dom_t, dom_s = _domains(cfg, ds)
    t, Y, s = ds.t, ds.Y, ds.s_grid
    extras = {}
    if method.startswith("tp-"):
        adaptive = cfg.K_s_coarse if method.endswith("-adapt") else None
        kw = dict(K_t=cfg.K_t, K_s=cfg.K_s, degree=cfg.degree_t,
                  penalty_order=cfg.penalty_order_t, adaptive=adaptive,
                  lambdas=cfg.lambdas, seed=cfg.seed,
                  domain_t=dom_t, domain_s=dom_s)
        if "gls" in method:
            bt = build_basis(
                BasisSpec(*dom_t, cfg.K_t, cfg.degree_t), t,
                penalty_kind=cfg.penalty_kind_t,
                penalty_order=cfg.penalty_order_t,
            )
            resid = Y - step1(Y, t, bt).fitted
            prec = select_bandwidth(resid, cfg.k_range)
            extras["precision_k"] = prec.k
            extras["lw_stat"] = prec.lw_stat
            return fit_tp_gls(Y, t, s, prec, **kw), extras
        return fit_tp_ols(Y, t, s, **kw), extras
    if method == "fpc-scores":
        fit = fit_fpc_scores(
            Y, t, s, A=cfg.A, K_t=cfg.K_t, K_s=cfg.K_s,
            degree=cfg.degree_t, penalty_order=cfg.penalty_order_t,
            domain_t=dom_t, domain_s=dom_s,
            cv_folds=cfg.cv_folds, cv_seed=cfg.cv_seed,
        )
        return fit, extras
    spec_t = BasisSpec(*dom_t, cfg.K_t, cfg.degree_t)
    bt = build_basis(spec_t, t, penalty_kind=cfg.penalty_kind_t,
                     penalty_order=cfg.penalty_order_t)
    bs = build_basis(BasisSpec(*dom_s, cfg.K_s, cfg.degree_s), s,
                     penalty_kind=cfg.penalty_kind_s,
                     penalty_order=cfg.penalty_order_s)
    cs = step1(Y, t, bt)
    if method == "2s-pen":
        fit = step2_penalized(cs, bs, lambda_s=cfg.lambda_s, t=t,
                              spec_t=spec_t, folds=cfg.cv_folds,
                              seed=cfg.cv_seed, basis_t=bt)
    elif method == "2s-fpc":
        fit = step2_fpc(cs, Y, fpca_A=cfg.A, basis_s=bs, t=t,
                        spec_t=spec_t, folds=cfg.cv_folds,
                        seed=cfg.cv_seed, basis_t=bt)
    else:
        fit = step2_penfpc(cs, Y, A=cfg.A, lambda_s=cfg.lambda_s,
                           basis_s=bs, t=t, spec_t=spec_t,
                           folds=cfg.cv_folds, seed=cfg.cv_seed,
                           basis_t=bt)
    return fit, extras


def _pointwise_df(fit):
    if isinstance(fit, TwoStepFit):
        return pointwise_df_twostep(fit).d
    if isinstance(fit, FpcScoresFit):
        return pointwise_df_fpc(fit).d
    return pointwise_df_tp(fit).d


def _basis_manifest(fit):
    out = {}
    for name, b in (("t", fit.basis_t), ("s", fit.basis_s)):
        out[name] = {
            "domain": [b.spec.domain_lo, b.spec.domain_hi],
            "dimension": b.spec.dimension,
            "degree": b.spec.degree,
        }
    return out


def _eval_grid(spec, setting, allow_extrapolation):
    """Resolve an evaluation grid: point count or explicit values."""
    if isinstance(setting, (int, np.integer)):
        return np.linspace(spec.domain_lo, spec.domain_hi, int(setting))
    pts = np.asarray(list(setting), dtype=float)
    lo, hi = spec.domain_lo, spec.domain_hi
    if pts.size and (pts.min() < lo or pts.max() > hi):
        if not allow_extrapolation:
            raise DataError(
                f"evaluation points outside basis domain [{lo}, {hi}]; "
                "pass --allow-extrapolation to clamp"
            )
        pts = np.clip(pts, lo, hi)
    return pts


def _df_rows(s_grid, d):
    return [[fmt(s), fmt(v)] for s, v in zip(s_grid, d)]


def _config_from_args(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for key in ("method", "K_t", "K_s", "seed", "cv_seed", "out_dir"):
        val = getattr(args, key.lower().replace("-", "_"), None)
        if val is not None:
            overrides[key] = val
    d = cfg.to_dict()
    d.update(overrides)
    return RunConfig.from_dict(d)


def _ci_outputs(fit, ds, cfg):
    """CI surface rows for a 2s-pen fit on its evaluation grids."""
    sigma = residual_covariance(ds.Y, fit.fitted)
    eval_t = _eval_grid(fit.basis_t.spec, cfg.eval_t,
                        cfg.allow_extrapolation)
    eval_s = _eval_grid(fit.basis_s.spec, cfg.eval_s,
                        cfg.allow_extrapolation)
    surf = ci_twostep(fit, sigma, eval_t, eval_s, z=cfg.z)
    fhat = fit.evaluate(eval_t, eval_s)
    se = np.sqrt(surf.var_grid)
    rows = []
    for g, tv in enumerate(eval_t):
        for h, sv in enumerate(eval_s):
            rows.append([
                fmt(tv), fmt(sv), fmt(fhat[g, h]), fmt(surf.var_grid[g, h]),
                fmt(fhat[g, h] - cfg.z * se[g, h]),
                fmt(fhat[g, h] + cfg.z * se[g, h]),
            ])
    return ["t", "s", "fhat", "var", "lo", "hi"], rows


def cmd_fit(args) -> int:
    cfg = _config_from_args(args)
    ds = ingest(args.data, args.grid)
    start = time.perf_counter()
    fit, extras = _build_fit(cfg, ds)
    d = _pointwise_df(fit)
    seconds = time.perf_counter() - start
    tuning = {
        "method": fit.method,
        "tuning": fit.tuning,
        "r2": functional_r2(ds.Y, fit.fitted, ds.s_grid),
        "seconds": seconds,
        "warnings": list(fit.warnings),
        "basis": _basis_manifest(fit),
        **extras,
    }
    if cfg.ci:
        if fit.method != "2s-pen":
            raise ConfigError(
                f"confidence surfaces are only available for 2s-pen, "
                f"not {fit.method}"
            )
        ci_header, ci_rows = _ci_outputs(fit, ds, cfg)
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    K_t, K_s = fit.theta.shape
    write_csv(os.path.join(out, "theta.csv"),
              [f"c{j}" for j in range(K_s)],
              [[fmt(v) for v in row] for row in fit.theta])
    write_csv(os.path.join(out, "fitted.csv"),
              ["t"] + [f"s={fmt(s)}" for s in ds.s_grid],
              [[fmt(ti)] + [fmt(v) for v in row]
               for ti, row in zip(ds.t, fit.fitted)])
    write_csv(os.path.join(out, "df.csv"), ["s", "df"],
              _df_rows(ds.s_grid, d))
    write_json(os.path.join(out, "tuning.json"), tuning)
    if cfg.ci:
        write_csv(os.path.join(out, "ci.csv"), ci_header, ci_rows)
    return EXIT_OK


def _load_fit_artifacts(fit_dir):
    theta_path = os.path.join(fit_dir, "theta.csv")
    with open(theta_path, newline="") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln]
    theta = np.array([[float(c) for c in ln.split(",")]
                      for ln in lines[1:]])
    with open(os.path.join(fit_dir, "tuning.json")) as fh:
        manifest = json.load(fh)
    b = manifest["basis"]
    spec_t = BasisSpec(*b["t"]["domain"], b["t"]["dimension"],
                       b["t"]["degree"])
    spec_s = BasisSpec(*b["s"]["domain"], b["s"]["dimension"],
                       b["s"]["degree"])
    if theta.shape != (spec_t.dimension, spec_s.dimension):
        raise DataError(
            f"theta.csv is {theta.shape}, basis manifest expects "
            f"({spec_t.dimension}, {spec_s.dimension})"
        )
    return theta, spec_t, spec_s


def cmd_predict(args) -> int:
    theta, spec_t, spec_s = _load_fit_artifacts(args.fit_dir)
    t_setting = _parse_points(args.t_values, args.num_t)
    s_setting = _parse_points(args.s_values, args.num_s)
    tq = _eval_grid(spec_t, t_setting, args.allow_extrapolation)
    sq = _eval_grid(spec_s, s_setting, args.allow_extrapolation)
    F = spec_t.design_matrix(tq) @ theta @ spec_s.design_matrix(sq).T
    header = ["t", "s", "fhat"]
    D = None
    if args.deriv:
        D = spec_t.deriv_matrix(tq, 1) @ theta @ spec_s.design_matrix(sq).T
        header.append("dfdt")
    rows = []
    for g, tv in enumerate(tq):
        for h, sv in enumerate(sq):
            row = [fmt(tv), fmt(sv), fmt(F[g, h])]
            if D is not None:
                row.append(fmt(D[g, h]))
            rows.append(row)
    write_csv(args.out, header, rows)
    return EXIT_OK


def _parse_points(values, num):
    if values is not None:
        return [float(v) for v in values.split(",")]
    return int(num)


def cmd_df(args) -> int:
    cfg = _config_from_args(args)
    ds = ingest(args.data, args.grid)
    fit, _ = _build_fit(cfg, ds)
    d = _pointwise_df(fit)
    write_csv(args.out, ["s", "df"], _df_rows(ds.s_grid, d))
    return EXIT_OK


def cmd_ci(args) -> int:
    cfg = _config_from_args(args)
    d = cfg.to_dict()
    d["method"] = "2s-pen"
    cfg = RunConfig.from_dict(d)
    ds = ingest(args.data, args.grid)
    fit, _ = _build_fit(cfg, ds)
    header, rows = _ci_outputs(fit, ds, cfg)
    write_csv(args.out, header, rows)
    return EXIT_OK


def cmd_simulate(args) -> int:
    sc = Scenario(args.surface, target_r2=args.r2, gamma=args.gamma,
                  n=args.n, seed=args.seed)
    dset = simulate(sc, args.rep)
    manifest = {
        "surface": sc.surface,
        "target_r2": sc.target_r2,
        "gamma": sc.gamma,
        "n": sc.n,
        "seed": sc.seed,
        "replication": args.rep,
        "realized_r2": dset.realized_r2,
        "sigma2_effective": dset.sigma2_effective,
        "kappas": list(dset.kappas),
    }
    emit(Dataset(t=dset.t, s_grid=dset.s_grid, Y=dset.Y), args.out)
    write_json(args.manifest or args.out + ".manifest.json", manifest)
    return EXIT_OK


def _study_frames_to_rows(df):
    header = list(df.columns)
    rows = []
    for rec in df.itertuples(index=False):
        row = []
        for v in rec:
            if isinstance(v, float):
                row.append("" if np.isnan(v) else fmt(v))
            else:
                row.append(str(v))
        rows.append(row)
    return header, rows


def cmd_study(args) -> int:
    with open(args.config) as fh:
        try:
            conf = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad JSON in {args.config}: {exc}") from None
    known = {"scenarios", "methods", "replications", "seed", "n_jobs"}
    unknown = set(conf) - known
    if unknown:
        raise ConfigError(f"unknown study config keys: {sorted(unknown)}")
    if "scenarios" not in conf:
        raise ConfigError("study config needs a 'scenarios' list")
    scenarios = [Scenario(**sc) for sc in conf["scenarios"]]
    results, df_table = run_study(
        scenarios,
        methods=conf.get("methods"),
        replications=conf.get("replications"),
        seed=conf.get("seed"),
        n_jobs=_n_jobs(conf.get("n_jobs", 1)),
    )
    os.makedirs(args.out_dir, exist_ok=True)
    header, rows = _study_frames_to_rows(results)
    write_csv(os.path.join(args.out_dir, "results.csv"), header, rows)
    if len(df_table):
        header, rows = _study_frames_to_rows(df_table)
        write_csv(os.path.join(args.out_dir, "df.csv"), header, rows)
    if args.svg:
        groups = {
            m: results.loc[
                (results["method"] == m) & results["rel_ise_f"].notna(),
                "rel_ise_f",
            ].to_numpy()
            for m in dict.fromkeys(results["method"])
        }
        atomic_write(os.path.join(args.out_dir, "rel_ise_f.svg"),
                     _boxplot_svg(groups, "relative ISE_f"))
    failed = (results["error"] != "").any()
    return EXIT_NUMERIC if failed else EXIT_OK


def _boxplot_svg(groups: dict, title: str) -> str:
    """Minimal static SVG boxplots, one box per labelled group."""
    W, H, pad = 640, 360, 50
    vals = np.concatenate([v for v in groups.values() if len(v)])
    lo, hi = float(vals.min()), float(vals.max())
    if hi <= lo:
        hi = lo + 1.0
    span = hi - lo

    def y(v):
        return H - pad - (v - lo) / span * (H - 2 * pad)

    n = max(len(groups), 1)
    slot = (W - 2 * pad) / n
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">',
        f'<text x="{W / 2}" y="20" text-anchor="middle" '
        f'font-size="14">{title}</text>',
        f'<line x1="{pad}" y1="{H - pad}" x2="{W - pad}" y2="{H - pad}" '
        'stroke="black"/>',
    ]
    for i, (label, v) in enumerate(groups.items()):
        cx = pad + slot * (i + 0.5)
        if len(v):
            q1, q2, q3 = np.percentile(v, [25, 50, 75])
            w = slot * 0.3
            parts += [
                f'<line x1="{cx}" y1="{y(v.min())}" x2="{cx}" '
                f'y2="{y(v.max())}" stroke="black"/>',
                f'<rect x="{cx - w}" y="{y(q3)}" width="{2 * w}" '
                f'height="{max(y(q1) - y(q3), 1e-6)}" fill="lightsteelblue" '
                'stroke="black"/>',
                f'<line x1="{cx - w}" y1="{y(q2)}" x2="{cx + w}" '
                f'y2="{y(q2)}" stroke="black" stroke-width="2"/>',
            ]
        parts.append(
            f'<text x="{cx}" y="{H - pad + 18}" text-anchor="middle" '
            f'font-size="11">{label}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _add_fit_flags(p):
    p.add_argument("data", help="response CSV (t column plus s=... columns)")
    p.add_argument("--grid", help="optional one-column s-grid CSV")
    p.add_argument("--config", help="RunConfig JSON; flags override it")
    p.add_argument("--method", choices=sorted(FIT_METHODS))
    p.add_argument("--k-t", dest="k_t", type=int)
    p.add_argument("--k-s", dest="k_s", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--cv-seed", dest="cv_seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="varsmooth",
        description="Varying-smoother models for functional responses",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model and write artifacts")
    _add_fit_flags(p)
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="evaluate a fitted surface")
    p.add_argument("fit_dir", help="directory with theta.csv + tuning.json")
    p.add_argument("--out", required=True)
    p.add_argument("--num-t", type=int, default=25)
    p.add_argument("--num-s", type=int, default=25)
    p.add_argument("--t-values", help="comma-separated explicit t points")
    p.add_argument("--s-values", help="comma-separated explicit s points")
    p.add_argument("--deriv", action="store_true",
                   help="also emit the t-derivative")
    p.add_argument("--allow-extrapolation", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("df", help="pointwise degrees of freedom only")
    _add_fit_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_df)

    p = sub.add_parser("ci", help="confidence surface for 2s-pen")
    _add_fit_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ci)

    p = sub.add_parser("simulate", help="generate one calibrated dataset")
    p.add_argument("--surface", choices=["f1", "f2"], required=True)
    p.add_argument("--r2", type=float, default=0.05)
    p.add_argument("--gamma", type=float, default=4.0)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rep", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("study", help="replicated method comparison")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--svg", action="store_true",
                   help="also render a relative-ISE boxplot SVG")
    p.set_defaults(func=cmd_study)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NUMERIC_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ConfigError, BasisError, ValueError, KeyError,
            OSError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
