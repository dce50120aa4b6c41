"""End-to-end tests of the command line interface (in-process)."""

import json
import os

import numpy as np
import pytest

from varsmooth.cli import _n_jobs, main
from varsmooth.dataio import Dataset, emit


@pytest.fixture
def sim_data(tmp_path):
    """A small calibrated dataset written to disk once per test."""
    path = tmp_path / "data.csv"
    rc = main(["simulate", "--surface", "f2", "--r2", "0.3", "--gamma",
               "0.25", "--n", "30", "--seed", "3", "--out", str(path)])
    assert rc == 0
    return path


def read_rows(path):
    lines = path.read_text().strip().split("\n")
    header = lines[0].split(",")
    rows = [ln.split(",") for ln in lines[1:]]
    return header, rows


# -------------------------------------------------------------- simulate


def test_simulate_deterministic_and_manifest(tmp_path):
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    for p in (a, b):
        rc = main(["simulate", "--surface", "f1", "--r2", "0.05", "--gamma",
                   "4", "--n", "100", "--seed", "9", "--out", str(p)])
        assert rc == 0
    assert a.read_bytes() == b.read_bytes()
    man = json.loads((tmp_path / "a.csv.manifest.json").read_text())
    assert abs(man["realized_r2"] - 0.05) < 1e-4
    assert man["sigma2_effective"] == pytest.approx(
        np.prod(np.square(man["kappas"])), rel=1e-12
    )
    _, rows = read_rows(a)
    t = [float(r[0]) for r in rows]
    assert len(t) == 100 and 0.0 in t and 1.0 in t


# ------------------------------------------------------------------- fit


def test_fit_artifacts_and_predict_roundtrip(sim_data, tmp_path):
    out = tmp_path / "fit"
    rc = main(["fit", str(sim_data), "--method", "2s-pen", "--k-t", "8",
               "--k-s", "10", "--out-dir", str(out)])
    assert rc == 0
    assert {p.name for p in out.iterdir()} == {
        "theta.csv", "fitted.csv", "df.csv", "tuning.json"
    }
    man = json.loads((out / "tuning.json").read_text())
    assert man["method"] == "2s-pen"
    assert 0.0 < man["r2"] < 1.0
    # predicting on the training grid reproduces fitted.csv
    header, rows = read_rows(out / "fitted.csv")
    t_train = [r[0] for r in rows]
    s_train = [c[2:] for c in header[1:]]
    pred = tmp_path / "pred.csv"
    rc = main(["predict", str(out), "--out", str(pred),
               "--t-values", ",".join(t_train),
               "--s-values", ",".join(s_train)])
    assert rc == 0
    _, prows = read_rows(pred)
    fitted = np.array([[float(c) for c in r[1:]] for r in rows])
    surf = np.array([float(r[2]) for r in prows]).reshape(fitted.shape)
    assert np.max(np.abs(surf - fitted)) < 1e-8


def test_fit_gls_records_band_selection(sim_data, tmp_path):
    out = tmp_path / "fit"
    rc = main(["fit", str(sim_data), "--method", "tp-gls", "--k-t", "6",
               "--k-s", "8", "--out-dir", str(out)])
    assert rc == 0
    man = json.loads((out / "tuning.json").read_text())
    assert isinstance(man["precision_k"], int)
    assert np.isfinite(man["lw_stat"])


def test_fit_ci_requires_2s_pen(sim_data, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "method": "tp-ols", "K_t": 6, "K_s": 8, "ci": True,
        "out_dir": str(tmp_path / "o"),
    }))
    rc = main(["fit", str(sim_data), "--config", str(cfg)])
    assert rc == 2
    assert not (tmp_path / "o").exists()


def test_fit_with_ci_writes_surface(sim_data, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "method": "2s-pen", "K_t": 8, "K_s": 10, "ci": True,
        "eval_t": 6, "eval_s": 7, "out_dir": str(tmp_path / "o"),
    }))
    rc = main(["fit", str(sim_data), "--config", str(cfg)])
    assert rc == 0
    header, rows = read_rows(tmp_path / "o" / "ci.csv")
    assert header == ["t", "s", "fhat", "var", "lo", "hi"]
    assert len(rows) == 42
    for r in rows:
        var, lo, f, hi = float(r[3]), float(r[4]), float(r[2]), float(r[5])
        assert var >= 0 and lo <= f <= hi


def test_fit_rejects_unknown_method(sim_data, tmp_path):
    rc = main(["df", str(sim_data), "--method", "2s-pen", "--k-t", "24",
               "--k-s", "200", "--out", str(tmp_path / "x.csv")])
    # degenerate basis sizes produce a validation or numeric exit, not a crash
    assert rc in (2, 3)


# --------------------------------------------------------------- predict


def test_predict_deriv_matches_finite_difference(sim_data, tmp_path):
    out = tmp_path / "fit"
    assert main(["fit", str(sim_data), "--method", "2s-pen", "--k-t", "8",
                 "--k-s", "10", "--out-dir", str(out)]) == 0
    h = 1e-5
    t0 = [0.4, 0.5, 0.6]
    grid = sorted(t0 + [v - h for v in t0] + [v + h for v in t0])
    pred = tmp_path / "p.csv"
    assert main(["predict", str(out), "--out", str(pred), "--deriv",
                 "--t-values", ",".join(map(str, grid)),
                 "--s-values", "0.3,0.7"]) == 0
    _, rows = read_rows(pred)
    by_pt = {(float(r[0]), float(r[1])): (float(r[2]), float(r[3]))
             for r in rows}
    for tv in t0:
        for sv in (0.3, 0.7):
            fd = (by_pt[(tv + h, sv)][0] - by_pt[(tv - h, sv)][0]) / (2 * h)
            assert abs(fd - by_pt[(tv, sv)][1]) < 1e-4


def test_predict_out_of_domain(sim_data, tmp_path):
    out = tmp_path / "fit"
    assert main(["fit", str(sim_data), "--method", "2s-pen", "--k-t", "8",
                 "--k-s", "10", "--out-dir", str(out)]) == 0
    pred = tmp_path / "p.csv"
    rc = main(["predict", str(out), "--out", str(pred),
               "--t-values", "0.5,1.7", "--s-values", "0.5"])
    assert rc == 2
    assert not pred.exists()
    rc = main(["predict", str(out), "--out", str(pred),
               "--t-values", "0.5,1.7", "--s-values", "0.5",
               "--allow-extrapolation"])
    assert rc == 0 and pred.exists()


# -------------------------------------------------------------- df and ci


def test_df_command(sim_data, tmp_path):
    out = tmp_path / "d.csv"
    rc = main(["df", str(sim_data), "--method", "fpc-scores", "--k-t", "8",
               "--k-s", "10", "--out", str(out)])
    assert rc == 0
    header, rows = read_rows(out)
    assert header == ["s", "df"] and len(rows) == 201


def test_ci_command(sim_data, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"K_t": 8, "K_s": 10, "eval_t": 4,
                               "eval_s": 5}))
    out = tmp_path / "ci.csv"
    rc = main(["ci", str(sim_data), "--config", str(cfg), "--out", str(out)])
    assert rc == 0
    header, rows = read_rows(out)
    assert header[0] == "t" and len(rows) == 20


# ----------------------------------------------------------------- study


def study_config(tmp_path, **extra):
    conf = {
        "scenarios": [{
            "surface": "f1", "target_r2": 0.3, "gamma": 0.25, "n": 24,
            "s_grid": list(np.linspace(0, 1, 41)), "seed": 6,
            "replications": 2,
        }],
        "methods": ["2s-pen", "step1-only"],
    }
    conf.update(extra)
    p = tmp_path / "study.json"
    p.write_text(json.dumps(conf))
    return p


def test_study_outputs_and_relative_ise(tmp_path):
    cfg = study_config(tmp_path)
    out = tmp_path / "study"
    rc = main(["study", "--config", str(cfg), "--out-dir", str(out),
               "--svg"])
    assert rc == 0
    header, rows = read_rows(out / "results.csv")
    assert len(rows) == 4
    rel = header.index("rel_ise_f")
    meth = header.index("method")
    by_rep = {}
    for r in rows:
        by_rep.setdefault(r[header.index("replication")], []).append(r)
    for group in by_rep.values():
        non_base = [float(r[rel]) for r in group if r[meth] != "step1-only"]
        assert min(non_base) == pytest.approx(1.0, abs=1e-12)
    assert (out / "df.csv").exists()
    svg = (out / "rel_ise_f.svg").read_text()
    assert svg.startswith("<svg") and "rect" in svg


def test_study_rerun_deterministic(tmp_path):
    cfg = study_config(tmp_path)
    outs = []
    for name in ("s1", "s2"):
        out = tmp_path / name
        assert main(["study", "--config", str(cfg),
                     "--out-dir", str(out)]) == 0
        header, rows = read_rows(out / "results.csv")
        sec = header.index("seconds")
        outs.append([[c for i, c in enumerate(r) if i != sec]
                     for r in rows])
    assert outs[0] == outs[1]


def test_study_method_subset_stable(tmp_path):
    # per-replication seeding: dropping a method leaves others unchanged
    out1 = tmp_path / "s1"
    out2 = tmp_path / "s2"
    cfg1 = study_config(tmp_path)
    assert main(["study", "--config", str(cfg1), "--out-dir",
                 str(out1)]) == 0
    cfg2 = study_config(tmp_path, methods=["2s-pen"])
    assert main(["study", "--config", str(cfg2), "--out-dir",
                 str(out2)]) == 0
    h1, r1 = read_rows(out1 / "results.csv")
    h2, r2 = read_rows(out2 / "results.csv")
    i1, i2 = h1.index("ise_f"), h2.index("ise_f")
    pen1 = [r[i1] for r in r1 if r[h1.index("method")] == "2s-pen"]
    pen2 = [r[i2] for r in r2 if r[h2.index("method")] == "2s-pen"]
    assert pen1 == pen2


def test_study_bad_config(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"scenarios": [], "bogus": 1}))
    assert main(["study", "--config", str(p), "--out-dir",
                 str(tmp_path / "o")]) == 2
    p.write_text(json.dumps({"methods": ["2s-pen"]}))
    assert main(["study", "--config", str(p), "--out-dir",
                 str(tmp_path / "o")]) == 2


def test_study_cell_failure_exit_code(tmp_path, monkeypatch):
    import varsmooth.simlab as sl

    def boom(tag, ds, cv_seed=0):
        raise RuntimeError("boom")

    monkeypatch.setattr(sl, "_fit_and_score", boom)
    cfg = study_config(tmp_path, methods=["2s-pen"])
    out = tmp_path / "s"
    rc = main(["study", "--config", str(cfg), "--out-dir", str(out)])
    assert rc == 3
    header, rows = read_rows(out / "results.csv")
    assert "boom" in rows[0][header.index("error")]


# ------------------------------------------------------------- plumbing


def test_threads_cap(monkeypatch):
    monkeypatch.delenv("THREADS", raising=False)
    assert _n_jobs(4) == 4
    monkeypatch.setenv("THREADS", "2")
    assert _n_jobs(8) == 2
    assert _n_jobs() == 1


def test_missing_data_file(tmp_path):
    rc = main(["fit", str(tmp_path / "nope.csv"), "--method", "2s-pen",
               "--out-dir", str(tmp_path / "o")])
    assert rc == 2


def test_fit_rerun_byte_identical_except_timing(sim_data, tmp_path):
    outs = []
    for name in ("f1", "f2"):
        out = tmp_path / name
        assert main(["fit", str(sim_data), "--method", "2s-pen", "--k-t",
                     "8", "--k-s", "10", "--out-dir", str(out)]) == 0
        outs.append(out)
    for fname in ("theta.csv", "fitted.csv", "df.csv"):
        assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()
    m1 = json.loads((outs[0] / "tuning.json").read_text())
    m2 = json.loads((outs[1] / "tuning.json").read_text())
    m1.pop("seconds"), m2.pop("seconds")
    assert m1 == m2
