"""Tests for dataset ingestion, emission, and config handling."""

import json

import numpy as np
import pytest

from varsmooth.dataio import (
    ConfigError,
    DataError,
    Dataset,
    RunConfig,
    emit,
    fmt,
    ingest,
    load_config,
    write_json,
)


def toy_dataset():
    rng = np.random.default_rng(0)
    return Dataset(
        t=rng.uniform(size=5),
        s_grid=np.array([0.0, 0.25, 0.5, 1.0]),
        Y=rng.normal(size=(5, 4)),
    )


def test_fmt_round_trips_exactly():
    rng = np.random.default_rng(1)
    for x in rng.normal(scale=1e6, size=200):
        assert float(fmt(x)) == x
    for x in (0.1, 1e-300, 1e300, -0.0, 3.0):
        assert float(fmt(x)) == x


def test_emit_ingest_bitwise(tmp_path):
    ds = toy_dataset()
    p = tmp_path / "a.csv"
    emit(ds, p)
    back = ingest(p)
    assert np.array_equal(back.t, ds.t)
    assert np.array_equal(back.s_grid, ds.s_grid)
    assert np.array_equal(back.Y, ds.Y)
    # second emission is byte-for-byte identical
    p2 = tmp_path / "b.csv"
    emit(back, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_header_grid_parsing(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text(
        "t,s=0,s=0.5,s=1.0,s=2\n"
        "0.1,1,2,3,4\n0.2,1,2,3,4\n0.3,1,2,3,4\n0.4,1,2,3,4\n"
    )
    ds = ingest(p)
    assert np.array_equal(ds.s_grid, [0.0, 0.5, 1.0, 2.0])


def test_separate_grid_file(tmp_path):
    p = tmp_path / "y.csv"
    p.write_text(
        "t,y1,y2,y3,y4\n"
        "0.1,1,2,3,4\n0.2,1,2,3,4\n0.3,1,2,3,4\n0.4,1,2,3,4\n"
    )
    g = tmp_path / "g.csv"
    g.write_text("s\n0\n0.25\n0.5\n1\n")
    ds = ingest(p, g)
    assert np.array_equal(ds.s_grid, [0.0, 0.25, 0.5, 1.0])
    g.write_text("0\n0.25\n0.5\n")
    with pytest.raises(DataError, match="grid file has 3 values"):
        ingest(p, g)


def test_nan_cell_names_location(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text(
        "t,s=0,s=0.5,s=0.75,s=1\n"
        "0.1,1,2,3,4\n0.2,1,NaN,3,4\n0.3,1,2,3,4\n0.4,1,2,3,4\n"
    )
    with pytest.raises(DataError, match="row 2, column 2"):
        ingest(p)


def test_non_numeric_cell(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text(
        "t,s=0,s=0.5,s=0.75,s=1\n"
        "0.1,1,2,3,4\n0.2,1,x,3,4\n0.3,1,2,3,4\n0.4,1,2,3,4\n"
    )
    with pytest.raises(DataError, match="non-numeric"):
        ingest(p)


def test_bad_header_and_shapes(tmp_path):
    p = tmp_path / "f.csv"
    p.write_text("t,yval\n1,2\n")
    with pytest.raises(DataError, match="expected 's=<value>'"):
        ingest(p)
    p.write_text("t,s=0,s=1\n1,2\n")
    with pytest.raises(DataError, match="row 1 has 2 cells"):
        ingest(p)
    p.write_text("")
    with pytest.raises(DataError, match="empty"):
        ingest(p)


def test_dataset_validation():
    with pytest.raises(DataError, match="strictly increasing"):
        Dataset(t=np.arange(4.0), s_grid=np.array([0.0, 0.5, 0.5, 1.0]),
                Y=np.zeros((4, 4)))
    with pytest.raises(DataError, match="n >= 4"):
        Dataset(t=np.arange(3.0), s_grid=np.linspace(0, 1, 4),
                Y=np.zeros((3, 4)))
    with pytest.raises(DataError, match="shape"):
        Dataset(t=np.arange(4.0), s_grid=np.linspace(0, 1, 4),
                Y=np.zeros((4, 5)))
    with pytest.raises(DataError, match="non-finite"):
        Y = np.zeros((4, 4))
        Y[1, 1] = np.inf
        Dataset(t=np.arange(4.0), s_grid=np.linspace(0, 1, 4), Y=Y)


def test_duplicate_t_warns():
    with pytest.warns(UserWarning, match="duplicate t"):
        Dataset(t=np.array([0.0, 0.0, 1.0, 2.0]),
                s_grid=np.linspace(0, 1, 4), Y=np.zeros((4, 4)))


def test_runconfig_unknown_keys():
    with pytest.raises(ConfigError, match="unknown config keys.*K_q"):
        RunConfig.from_dict({"K_q": 3})
    cfg = RunConfig.from_dict({"method": "2s-pen", "K_t": 9})
    assert cfg.method == "2s-pen" and cfg.K_t == 9 and cfg.K_s == 25


def test_load_config(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text('{"method": "tp-gls", "cv_folds": 3}')
    cfg = load_config(p)
    assert cfg.method == "tp-gls" and cfg.cv_folds == 3
    p.write_text("not json")
    with pytest.raises(ConfigError, match="bad JSON"):
        load_config(p)
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError, match="JSON object"):
        load_config(p)


def test_write_json_numpy_types(tmp_path):
    p = tmp_path / "m.json"
    write_json(p, {"a": np.float64(1.5), "b": np.arange(3)})
    assert json.loads(p.read_text()) == {"a": 1.5, "b": [0, 1, 2]}
