"""Imputation/classification scores, fold aggregation and the mean-imputation baseline."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import latent as lt
from .data import FoldPlan, GroundTruth, IncompleteDataset, normalize


class MetricError(ValueError):
    pass


def rmse_missing(imputed, truth, injected) -> float:
    """Root mean squared error over the injected-missing cells only."""
    imputed = np.asarray(imputed, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    injected = np.asarray(injected, dtype=bool)
    if not imputed.shape == truth.shape == injected.shape:
        raise MetricError(f"shape mismatch: {imputed.shape}, {truth.shape}, {injected.shape}")
    if not injected.any():
        raise MetricError("no injected cells: RMSE undefined")
    diff = imputed[injected] - truth[injected]
    return float(np.sqrt(np.mean(diff * diff)))


def accuracy(predicted, true) -> float:
    predicted = np.asarray(predicted)
    true = np.asarray(true)
    if predicted.shape != true.shape:
        raise MetricError(f"length mismatch: {predicted.shape} vs {true.shape}")
    if true.size == 0:
        raise MetricError("empty fold: accuracy undefined")
    return float(np.mean(predicted == true))


def confusion_matrix(predicted, true, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(true), np.asarray(predicted)), 1)
    return cm


@dataclass
class FoldResult:
    fold: int
    rmse: float
    acc: float
    n_test: int
    n_injected: int
    history: list[dict] = field(default_factory=list)


@dataclass
class RunResult:
    seed: int
    folds: list[FoldResult]

    @property
    def rmse(self) -> np.ndarray:
        return np.array([f.rmse for f in self.folds])

    @property
    def acc(self) -> np.ndarray:
        return np.array([f.acc for f in self.folds])

    def summary(self) -> dict:
        # population std over the folds
        return {"rmse_mean": float(self.rmse.mean()), "rmse_std": float(self.rmse.std()),
                "acc_mean": float(self.acc.mean()), "acc_std": float(self.acc.std())}


@dataclass
class ExperimentReport:
    dataset: str
    method: str
    config: dict
    runs: list[RunResult]
    version: int = 1

    @property
    def rmse_mean(self) -> float:
        return float(np.mean([r.rmse.mean() for r in self.runs]))

    @property
    def acc_mean(self) -> float:
        return float(np.mean([r.acc.mean() for r in self.runs]))

    @property
    def rmse_std(self) -> float:
        """Std over all folds of all runs."""
        return float(np.concatenate([r.rmse for r in self.runs]).std())

    @property
    def acc_std(self) -> float:
        return float(np.concatenate([r.acc for r in self.runs]).std())

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "dataset": self.dataset,
            "method": self.method,
            "config": self.config,
            "summary": {"rmse_mean": self.rmse_mean, "rmse_std": self.rmse_std,
                        "acc_mean": self.acc_mean, "acc_std": self.acc_std},
            "runs": [{"seed": r.seed, "summary": r.summary(),
                      "folds": [asdict(f) for f in r.folds]} for r in self.runs],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        runs = [RunResult(r["seed"], [FoldResult(**f) for f in r["folds"]]) for r in d["runs"]]
        return cls(d["dataset"], d["method"], d["config"], runs, version=d.get("version", 1))

    @classmethod
    def from_json(cls, text: str) -> "ExperimentReport":
        return cls.from_dict(json.loads(text))

    def table(self) -> str:
        lines = [f"dataset: {self.dataset}   method: {self.method}",
                 f"{'run':>4} {'fold':>4} {'RMSE':>8} {'ACC':>8}"]
        for r in self.runs:
            for f in r.folds:
                lines.append(f"{r.seed:>4} {f.fold:>4} {f.rmse:8.4f} {f.acc:8.4f}")
        lines.append(f"RMSE {self.rmse_mean:.4f} +- {self.rmse_std:.4f}   "
                     f"ACC {self.acc_mean:.4f} +- {self.acc_std:.4f}")
        return "\n".join(lines) + "\n"


def mean_impute(ds: IncompleteDataset) -> np.ndarray:
    """Replace missing cells by the observed column mean (0 for unobserved columns)."""
    counts = ds.M.sum(axis=0)
    means = np.divide((ds.X * ds.M).sum(axis=0), counts, out=np.zeros(ds.d), where=counts > 0)
    return np.where(ds.M == 1, ds.X, means)


def gaussian_classifier(x: np.ndarray, labels: np.ndarray, n_classes: int) -> lt.LatentPrior:
    """Identity-covariance class Gaussians fitted on labelled rows (label >= 0)."""
    priors = lt.empirical_priors(labels, n_classes)
    return lt.update_means(x, labels, lt.LatentPrior(np.zeros((n_classes, x.shape[1])), priors))


def baseline_fold(ds: IncompleteDataset, truth: GroundTruth, test_rows) -> tuple[FoldResult, np.ndarray]:
    """Mean imputation + Gaussian classifier on one (already normalised) fold."""
    test_rows = np.asarray(test_rows, dtype=np.intp)
    y_true = ds.y[test_rows]
    hidden = ds.hide_labels(test_rows)
    imputed = mean_impute(hidden)
    clf = gaussian_classifier(imputed, hidden.y, ds.n_classes)
    pred, _ = lt.classify(imputed[test_rows], clf)
    res = FoldResult(fold=-1, rmse=rmse_missing(imputed, truth.values, truth.injected),
                     acc=accuracy(pred, y_true), n_test=int(test_rows.size),
                     n_injected=int(truth.injected.sum()))
    return res, imputed


def baseline_mean_impute_gmm(ds: IncompleteDataset, folds: FoldPlan, truth: GroundTruth,
                             name: str = "dataset", seed: int = 0) -> ExperimentReport:
    """Run the baseline over every fold of ``folds`` (raw, unnormalised ``ds``)."""
    results = []
    for f in range(folds.k):
        dsn, stats = normalize(ds, fit_rows=folds.train_rows(f))
        res, _ = baseline_fold(dsn, truth.normalized(stats), folds.test_rows(f))
        res.fold = f
        results.append(res)
    return ExperimentReport(name, "baseline", {"k": folds.k}, [RunResult(seed, results)])


def export_latent_csv(path, latents: np.ndarray, labels: np.ndarray, is_test: np.ndarray,
                      class_names: list[str]) -> None:
    """First two latent coordinates per row with its class, for external plotting."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "z0", "z1", "label", "is_test"])
        for i in range(latents.shape[0]):
            z1 = latents[i, 1] if latents.shape[1] > 1 else 0.0
            w.writerow([i, repr(float(latents[i, 0])), repr(float(z1)),
                        class_names[labels[i]], int(is_test[i])])
