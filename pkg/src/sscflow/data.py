"""Tabular ingestion, min-max scaling, MCAR corruption and stratified folds."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

UNLABELED = -1
DEFAULT_SENTINELS = ("", "?")


class DataError(ValueError):
    """Malformed or degenerate input data."""


@dataclass
class IncompleteDataset:
    """Features with an observation mask and partially observed labels.

    ``X`` holds 0.0 wherever ``M`` is 0.  ``y`` uses ``UNLABELED`` (-1) for
    hidden labels.  ``classes`` maps label index -> original label string.
    """

    X: np.ndarray
    M: np.ndarray
    y: np.ndarray
    classes: list[str]
    columns: list[str]

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.M = np.asarray(self.M, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.intp)
        if self.X.ndim != 2 or self.X.shape != self.M.shape:
            raise DataError(f"feature matrix {self.X.shape} and mask {self.M.shape} disagree")
        if not np.all((self.M == 0) | (self.M == 1)):
            raise DataError("mask must be binary")
        if self.y.shape != (self.X.shape[0],):
            raise DataError("one label per row required")
        if np.any(self.y >= len(self.classes)) or np.any(self.y < UNLABELED):
            raise DataError("label index out of range")
        self.X = np.where(self.M == 1, self.X, 0.0)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def hide_labels(self, rows) -> "IncompleteDataset":
        y = self.y.copy()
        y[np.asarray(rows, dtype=np.intp)] = UNLABELED
        return replace(self, y=y)

    def subset(self, rows) -> "IncompleteDataset":
        rows = np.asarray(rows, dtype=np.intp)
        return replace(self, X=self.X[rows], M=self.M[rows], y=self.y[rows])


def load_csv(path, label_column: str, sentinels=DEFAULT_SENTINELS) -> IncompleteDataset:
    """Read a headed CSV; empty or sentinel cells become missing features.

    Class labels are sorted as strings (numerically when they all parse as
    numbers) to fix the label index order.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        body = [row for row in reader if any(c.strip() for c in row)]
    if label_column not in header:
        raise DataError(f"{path}: no label column {label_column!r} in header {header}")
    if not body:
        raise DataError(f"{path}: header only, no data rows")
    li = header.index(label_column)
    feat_idx = [j for j in range(len(header)) if j != li]
    sentinels = set(sentinels)
    n, d = len(body), len(feat_idx)
    X = np.zeros((n, d))
    M = np.ones((n, d))
    raw_labels = []
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise DataError(f"{path}: row {i + 2} has {len(row)} fields, expected {len(header)}")
        lab = row[li].strip()
        if lab in sentinels:
            raise DataError(f"{path}: row {i + 2} has no label")
        raw_labels.append(lab)
        for j, c in enumerate(feat_idx):
            cell = row[c].strip()
            if cell in sentinels:
                M[i, j] = 0.0
                continue
            try:
                X[i, j] = float(cell)
            except ValueError:
                raise DataError(
                    f"{path}: row {i + 2}, column {header[c]!r}: non-numeric value {cell!r}"
                ) from None
    uniq = sorted(set(raw_labels))
    try:
        uniq = sorted(uniq, key=float)
    except ValueError:
        pass
    index = {lab: k for k, lab in enumerate(uniq)}
    y = np.array([index[lab] for lab in raw_labels], dtype=np.intp)
    return IncompleteDataset(X, M, y, classes=uniq, columns=[header[c] for c in feat_idx])


def write_csv(ds: IncompleteDataset, path, label_column: str = "class",
              sentinel: str = "") -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ds.columns + [label_column])
        for i in range(ds.n):
            cells = [repr(float(v)) if m else sentinel for v, m in zip(ds.X[i], ds.M[i])]
            lab = ds.classes[ds.y[i]] if ds.y[i] >= 0 else sentinel
            w.writerow(cells + [lab])


@dataclass(frozen=True)
class NormStats:
    lo: np.ndarray
    hi: np.ndarray
    kept: np.ndarray  # indices of retained columns

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (X[:, self.kept] - self.lo) / (self.hi - self.lo)

    def invert(self, Xn: np.ndarray) -> np.ndarray:
        return Xn * (self.hi - self.lo) + self.lo


def normalize(ds: IncompleteDataset, fit_rows=None) -> tuple[IncompleteDataset, NormStats]:
    """Min-max scale each column using the observed cells of ``fit_rows``.

    Columns that are constant (or unobserved) on the fit rows are dropped with
    a warning.  Rows outside ``fit_rows`` may land outside [0, 1].
    """
    rows = np.arange(ds.n) if fit_rows is None else np.asarray(fit_rows, dtype=np.intp)
    if rows.size == 0:
        raise DataError("normalize needs at least one fit row")
    Xf, Mf = ds.X[rows], ds.M[rows] == 1
    lo = np.where(Mf, Xf, np.inf).min(axis=0)
    hi = np.where(Mf, Xf, -np.inf).max(axis=0)
    kept = np.flatnonzero(np.isfinite(lo) & np.isfinite(hi) & (hi > lo))
    for j in np.setdiff1d(np.arange(ds.d), kept):
        log.warning("dropping column %r: constant or unobserved on fit rows", ds.columns[j])
    if kept.size == 0:
        raise DataError("no usable feature columns")
    stats = NormStats(lo[kept], hi[kept], kept)
    X = stats.apply(ds.X)
    M = ds.M[:, kept]
    out = replace(ds, X=np.where(M == 1, X, 0.0), M=M, columns=[ds.columns[j] for j in kept])
    return out, stats


@dataclass
class GroundTruth:
    """Values removed by MCAR injection; ``injected`` marks the removed cells."""

    values: np.ndarray
    injected: np.ndarray

    def normalized(self, stats: NormStats) -> "GroundTruth":
        vals = stats.apply(self.values)
        return GroundTruth(np.where(self.injected[:, stats.kept], vals, 0.0),
                           self.injected[:, stats.kept])


def inject_mcar(ds: IncompleteDataset, p: float, seed) -> tuple[IncompleteDataset, GroundTruth]:
    """Hide each observed feature cell independently with probability ``p``."""
    if not 0.0 <= p < 1.0:
        raise DataError(f"missing fraction must lie in [0, 1), got {p}")
    rng = np.random.default_rng(seed)
    drop = (rng.random(ds.X.shape) < p) & (ds.M == 1)
    truth = GroundTruth(np.where(drop, ds.X, 0.0), drop)
    M = np.where(drop, 0.0, ds.M)
    return replace(ds, X=np.where(M == 1, ds.X, 0.0), M=M), truth


@dataclass
class FoldPlan:
    assignment: np.ndarray  # fold index per row
    k: int
    seed: int | None = None

    def test_rows(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == fold)

    def train_rows(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != fold)


def make_folds(labels, k: int, seed=None) -> FoldPlan:
    """Stratified k-fold assignment.

    Rows of each class are shuffled and dealt round-robin, continuing the
    rotation across classes so fold sizes stay balanced.
    """
    labels = np.asarray(labels)
    n = labels.size
    if k < 2:
        raise DataError(f"need k >= 2 folds, got {k}")
    if k > n:
        raise DataError(f"cannot make {k} folds from {n} rows")
    rng = np.random.default_rng(seed)
    assignment = np.empty(n, dtype=np.intp)
    offset = 0
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if idx.size < k:
            log.warning("class %s has %d rows < %d folds; some folds will lack it", cls, idx.size, k)
        idx = rng.permutation(idx)
        assignment[idx] = (np.arange(idx.size) + offset) % k
        offset = (offset + idx.size) % k
    return FoldPlan(assignment, k, seed)


def export_truth_csv(truth: GroundTruth, columns: list[str], path) -> None:
    """Audit dump: one line per injected cell (row, column, true value)."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "column", "value"])
        for i, j in zip(*np.nonzero(truth.injected)):
            w.writerow([int(i), columns[j], repr(float(truth.values[i, j]))])


def export_mask_csv(M: np.ndarray, columns: list[str], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        w.writerows(M.astype(int).tolist())
