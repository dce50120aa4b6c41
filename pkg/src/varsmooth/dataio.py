"""Dataset and configuration plumbing for the command-line front door.

CSV is the single data format, with floats written in canonical
17-significant-digit form so that emit/ingest round-trips are bit exact.
Config and manifest files are JSON. All writes are atomic (temp file in
the target directory, then rename).
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
import warnings
from dataclasses import dataclass, field, fields

import numpy as np

__all__ = [
    "DataError",
    "ConfigError",
    "Dataset",
    "RunConfig",
    "fmt",
    "ingest",
    "emit",
    "atomic_write",
    "write_json",
    "write_csv",
]


class DataError(ValueError):
    """Malformed or invalid input data."""


class ConfigError(ValueError):
    """Malformed run configuration."""


def fmt(x) -> str:
    """Canonical float formatting: 17 significant digits, round-trip exact."""
    return format(float(x), ".17g")


def atomic_write(path, text: str):
    """Write text to path via a temp file in the same directory."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, header, rows):
    """Atomic CSV write; all cells already stringified by the caller."""
    lines = [",".join(header)]
    lines.extend(",".join(r) for r in rows)
    atomic_write(path, "\n".join(lines) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_json(path, obj):
    text = json.dumps(obj, indent=2, sort_keys=True, default=_json_default)
    atomic_write(path, text + "\n")


@dataclass
class Dataset:
    """Functional responses on a common grid: t (n), s_grid (L), Y (n, L)."""

    t: np.ndarray
    s_grid: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.s_grid = np.asarray(self.s_grid, dtype=float)
        self.Y = np.asarray(self.Y, dtype=float)
        n, L = self.t.size, self.s_grid.size
        if self.Y.shape != (n, L):
            raise DataError(
                f"Y has shape {self.Y.shape}, expected ({n}, {L})"
            )
        if n < 4 or L < 4:
            raise DataError(f"need n >= 4 and L >= 4, got n={n}, L={L}")
        if not np.all(np.isfinite(self.t)) or not np.all(np.isfinite(self.Y)):
            raise DataError("dataset contains non-finite values")
        if np.any(np.diff(self.s_grid) <= 0):
            raise DataError("s grid must be strictly increasing")
        if np.unique(self.t).size < n:
            warnings.warn("duplicate t values in dataset", stacklevel=2)


def _parse_cell(text, row, col):
    try:
        v = float(text)
    except ValueError:
        raise DataError(
            f"non-numeric cell {text!r} at row {row}, column {col}"
        ) from None
    if not np.isfinite(v):
        raise DataError(f"missing value at row {row}, column {col}")
    return v


def ingest(path, grid_path=None) -> Dataset:
    """Read a response CSV: first column t, remaining columns y(s_l).

    The header labels the response columns "s=<value>"; alternatively a
    separate one-column grid file supplies the s values.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        rows = [r for r in reader if r]
    if len(header) < 2:
        raise DataError("response file needs a t column plus s columns")
    if grid_path is not None:
        with open(grid_path, newline="") as fh:
            cells = [c for line in csv.reader(fh) for c in line if c.strip()]
        if cells and not cells[0].replace("s", "").strip():
            cells = cells[1:]
        s_grid = [_parse_cell(c, i, 0) for i, c in enumerate(cells)]
        if len(s_grid) != len(header) - 1:
            raise DataError(
                f"grid file has {len(s_grid)} values for "
                f"{len(header) - 1} response columns"
            )
    else:
        s_grid = []
        for j, name in enumerate(header[1:], start=1):
            if not name.startswith("s="):
                raise DataError(
                    f"header column {j} is {name!r}, expected 's=<value>'"
                )
            s_grid.append(_parse_cell(name[2:], 0, j))
    t, Y = [], []
    for i, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise DataError(
                f"row {i} has {len(row)} cells, expected {len(header)}"
            )
        t.append(_parse_cell(row[0], i, 0))
        Y.append([_parse_cell(c, i, j) for j, c in enumerate(row[1:], 1)])
    return Dataset(t=np.array(t), s_grid=np.array(s_grid), Y=np.array(Y))


def emit(dataset: Dataset, path):
    """Write a Dataset in the canonical format read by ingest."""
    header = ["t"] + [f"s={fmt(s)}" for s in dataset.s_grid]
    rows = [
        [fmt(ti)] + [fmt(v) for v in yi]
        for ti, yi in zip(dataset.t, dataset.Y)
    ]
    write_csv(path, header, rows)


@dataclass
class RunConfig:
    """Everything a fit/predict/df command needs, with schema defaults."""

    method: str = "tp-ols"
    K_t: int = 15
    K_s: int = 25
    K_s_coarse: int = 5
    degree_t: int = 3
    degree_s: int = 3
    penalty_kind_t: str = "derivative"
    penalty_kind_s: str = "derivative"
    penalty_order_t: int = 2
    penalty_order_s: int = 2
    domain_t: list | None = None
    domain_s: list | None = None
    lambdas: object = "auto"
    lambda_s: object = "auto"
    A: object = "auto"
    cv_folds: int = 5
    cv_repeats: int = 1
    cv_seed: int = 0
    k_range: list | None = None
    seed: int = 0
    eval_t: object = 25
    eval_s: object = 25
    z: float = 2.0
    ci: bool = False
    allow_extrapolation: bool = False
    out_dir: str = "."

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def load_config(path) -> RunConfig:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad JSON in {path}: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return RunConfig.from_dict(d)
