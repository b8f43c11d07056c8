"""Value types shared by every stage: datasets, empirical measures, couplings.

A dataset row is the concatenated vector ``z = (x, y)`` with ``d`` covariates
followed by the outcome.  Arrays held by the value types are made read-only on
construction so they can be shared between workers without copying.
"""

from __future__ import annotations

import csv
import enum
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist


class Role(str, enum.Enum):
    SOURCE_CONTROL = "source-control"
    SOURCE_TREATMENT = "source-treatment"
    TARGET_CONTROL = "target-control"
    TARGET_TREATMENT_ORACLE = "target-treatment-oracle"
    SYNTHETIC = "synthetic"


class DatasetFormatError(ValueError):
    """Raised when a dataset file cannot be parsed."""


class OracleLeakError(RuntimeError):
    """Raised when the withheld oracle arm reaches a fitting code path."""


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Observation:
    x: np.ndarray
    y: float

    def __post_init__(self):
        x = _frozen(np.atleast_1d(self.x))
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", float(self.y))
        if not (np.all(np.isfinite(x)) and np.isfinite(self.y)):
            raise ValueError("observation entries must be finite")

    @property
    def z(self) -> np.ndarray:
        return np.append(self.x, self.y)


@dataclass(frozen=True)
class Dataset:
    """Ordered sample of observations stored as an ``(n, d+1)`` array."""

    values: np.ndarray
    role: Role = Role.SOURCE_CONTROL

    def __post_init__(self):
        v = _frozen(self.values)
        if v.ndim != 2 or v.shape[0] == 0 or v.shape[1] < 2:
            raise ValueError(f"dataset must be a nonempty (n, d+1) array with d >= 1, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            bad = np.argwhere(~np.isfinite(v))[0]
            raise ValueError(f"non-finite value at row {bad[0]}, column {bad[1]}")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "role", Role(self.role))

    @classmethod
    def from_observations(cls, observations, role=Role.SOURCE_CONTROL) -> "Dataset":
        rows = [obs.z for obs in observations]
        if rows and len({len(r) for r in rows}) != 1:
            raise ValueError("observations must share the same dimension d")
        return cls(np.array(rows, dtype=float), role)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1] - 1

    @property
    def X(self) -> np.ndarray:
        return self.values[:, :-1]

    @property
    def y(self) -> np.ndarray:
        return self.values[:, -1]

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> Observation:
        row = self.values[i]
        return Observation(row[:-1], row[-1])

    def with_role(self, role: Role) -> "Dataset":
        return Dataset(self.values, role)

    def equals(self, other: "Dataset") -> bool:
        return self.values.shape == other.values.shape and bool(np.array_equal(self.values, other.values))


def ensure_not_oracle(*datasets: Dataset) -> None:
    for ds in datasets:
        if isinstance(ds, Dataset) and ds.role is Role.TARGET_TREATMENT_ORACLE:
            raise OracleLeakError("the target-treatment oracle arm may not be passed to a fitting method")


def load_dataset(path, role=Role.SOURCE_CONTROL) -> Dataset:
    """Read a CSV file with header ``x1,...,xd,y``."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset file not found: {path}")
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError(f"{path}: empty file") from None
        width = len(header)
        expected = [f"x{k}" for k in range(1, width)] + ["y"]
        if [h.strip() for h in header] != expected:
            raise DatasetFormatError(f"{path}: header must be {','.join(expected)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DatasetFormatError(f"ragged row at line {lineno}")
            vals = []
            for col, cell in enumerate(row):
                try:
                    v = float(cell)
                except ValueError:
                    raise DatasetFormatError(
                        f"non-numeric cell at line {lineno}, column {col + 1}: {cell!r}"
                    ) from None
                if not np.isfinite(v):
                    raise DatasetFormatError(f"non-finite cell at line {lineno}, column {col + 1}")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise DatasetFormatError(f"{path}: no data rows")
    return Dataset(np.array(rows), role)


def save_dataset(data: Dataset, path) -> None:
    path = os.fspath(path)
    header = [f"x{k}" for k in range(1, data.d + 1)] + ["y"]
    try:
        with open(path, "w", newline="") as fh:
            fh.write(",".join(header) + "\n")
            for row in data.values:
                fh.write(",".join(format(float(v), ".17g") for v in row) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc.strerror}") from exc


def euclidean_distances(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise Euclidean distances between rows of ``A`` and ``B``."""
    return cdist(np.asarray(A, dtype=float), np.asarray(B, dtype=float))


def pairwise_distances(data, bounded: bool = False) -> np.ndarray:
    """Symmetric distance matrix of a dataset (``tanh``-squashed if ``bounded``)."""
    Z = data.values if isinstance(data, Dataset) else np.asarray(data, dtype=float)
    D = cdist(Z, Z)
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    if bounded:
        D = np.tanh(D)
    return D


@dataclass(frozen=True)
class EmpiricalMeasure:
    data: Dataset
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", _frozen(self.weights))


def empirical_measure(data: Dataset, weights=None) -> EmpiricalMeasure:
    if weights is None:
        return EmpiricalMeasure(data, np.full(data.n, 1.0 / data.n))
    w = np.asarray(weights, dtype=float)
    if w.shape != (data.n,):
        raise ValueError(f"weights length {w.size} does not match dataset size {data.n}")
    neg = np.flatnonzero(w < 0)
    if neg.size:
        raise ValueError(f"negative weight at index {neg[0]}")
    total = w.sum()
    if total <= 0:
        raise ValueError("weights have zero total")
    return EmpiricalMeasure(data, w / total)


def uniform_weights(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


@dataclass(frozen=True)
class Coupling:
    plan: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("plan", "row_marginal", "col_marginal"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if self.plan.shape != (self.row_marginal.size, self.col_marginal.size):
            raise ValueError("plan shape does not match marginals")

    def marginal_residuals(self) -> tuple[float, float]:
        r = np.abs(self.plan.sum(1) - self.row_marginal).max()
        c = np.abs(self.plan.sum(0) - self.col_marginal).max()
        return float(r), float(c)

    def check(self, tol: float = 1e-6) -> None:
        if self.plan.min() < 0:
            raise ValueError(f"coupling has negative entry {self.plan.min()}")
        r, c = self.marginal_residuals()
        if max(r, c) > tol:
            raise ValueError(f"coupling marginal residuals {r:.3g}/{c:.3g} exceed {tol}")

    @classmethod
    def product(cls, p, q) -> "Coupling":
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        return cls(np.outer(p, q), p, q)
