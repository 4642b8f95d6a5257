"""Cross-validated experiment runner: corrupt, train, impute, classify, report."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import snapshot
from .data import DataError, IncompleteDataset, export_mask_csv, export_truth_csv, inject_mcar, load_csv, make_folds, normalize
from .metrics import (ExperimentReport, FoldResult, RunResult, accuracy, baseline_fold,
                      export_latent_csv, rmse_missing)
from .model import TrainConfig, latent_codes, predict_batch, train

log = logging.getLogger(__name__)

OUTPUT_ENV = "SSCFLOW_OUTPUT_DIR"

# ablation name -> (enable_idm, enable_conditional_transform, enable_conditional_latent)
ABLATIONS = {
    "full": (True, True, True),
    "idm_only": (True, False, False),
    "it_only": (False, True, False),
    "ls_only": (False, False, True),
    "baseline": None,
}


class ExperimentError(RuntimeError):
    pass


@dataclass
class RunSpec:
    dataset: str = ""
    label_column: str = "class"
    p: float = 0.5
    k: int = 5
    seed: int = 0
    repeats: int = 1
    ablation: str = "full"
    output_dir: str | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    jobs: int = 1
    snapshots: bool = True

    def resolved_output(self) -> Path:
        out = self.output_dir or os.environ.get(OUTPUT_ENV) or "sscflow-out"
        return Path(out)

    def train_config(self) -> TrainConfig:
        flags = ABLATIONS[self.ablation]
        if flags is None:
            return self.train
        idm, it, ls = flags
        return replace(self.train, enable_idm=idm, enable_conditional_transform=it,
                       enable_conditional_latent=ls)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("output_dir")
        d.pop("jobs")
        d.pop("snapshots")
        d["train"] = asdict(self.train_config())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunSpec":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "train" in d and not isinstance(d["train"], TrainConfig):
            d["train"] = TrainConfig.from_dict(d["train"])
        return cls(**d)


def validate_config(spec: RunSpec) -> list[str]:
    """Static checks; returns human-readable problems (empty list when valid)."""
    issues = []
    if not spec.dataset:
        issues.append("dataset: no path given")
    elif not Path(spec.dataset).is_file():
        issues.append(f"dataset: {spec.dataset} does not exist")
    if not spec.label_column:
        issues.append("label_column: empty")
    if not (0.0 <= spec.p < 1.0):
        issues.append(f"p: {spec.p} outside [0, 1)")
    if spec.k < 2:
        issues.append(f"k: need at least 2 folds, got {spec.k}")
    if spec.repeats < 1:
        issues.append(f"repeats: must be >= 1, got {spec.repeats}")
    if spec.jobs < 1:
        issues.append(f"jobs: must be >= 1, got {spec.jobs}")
    if spec.ablation not in ABLATIONS:
        issues.append(f"ablation: {spec.ablation!r} not in {sorted(ABLATIONS)}")
    t = spec.train
    if t.n_iterations < 1:
        issues.append("train.n_iterations: must be >= 1")
    if t.n_epochs is not None and t.n_epochs < 0:
        issues.append("train.n_epochs: must be >= 0")
    if t.max_epochs is not None and t.max_epochs < 0:
        issues.append("train.max_epochs: must be >= 0")
    if t.lr <= 0:
        issues.append("train.lr: must be positive")
    if t.n_coupling < 2 or t.n_coupling % 2:
        issues.append("train.n_coupling: must be an even number >= 2")
    if not 0.0 <= t.label_mask_rate <= 1.0:
        issues.append("train.label_mask_rate: outside [0, 1]")
    return issues


def _seed_int(*words: int) -> int:
    return int(np.random.SeedSequence(list(words)).generate_state(1)[0])


@dataclass
class _FoldJob:
    ds: IncompleteDataset   # raw corrupted data, all labels
    truth: object
    test_rows: np.ndarray
    train_rows: np.ndarray
    fold: int
    config: TrainConfig
    baseline: bool
    out_dir: Path | None
    tag: str


def _run_fold(job: _FoldJob) -> FoldResult:
    dsn, stats = normalize(job.ds, fit_rows=job.train_rows)
    truth = job.truth.normalized(stats)
    if job.baseline:
        res, _ = baseline_fold(dsn, truth, job.test_rows)
        res.fold = job.fold
        return res
    hidden = dsn.hide_labels(job.test_rows)
    result = train(hidden, job.config)
    imputed = result.state.x_dot
    t = job.test_rows
    pred = predict_batch(result.model, dsn.X[t], dsn.M[t], init=imputed[t])
    history = [{"iteration": h["iteration"], "epochs": h["epochs"],
                "last": h["epoch_losses"][-1] if h["epoch_losses"] else None}
               for h in result.history]
    if job.out_dir is not None:
        snapshot.save(job.out_dir / f"model-{job.tag}.json", result.model, stats,
                      dsn.columns, dsn.classes)
        is_test = np.zeros(dsn.n, dtype=bool)
        is_test[t] = True
        export_latent_csv(job.out_dir / f"latent-{job.tag}.csv",
                          latent_codes(result.model, result.state), dsn.y, is_test, dsn.classes)
    return FoldResult(fold=job.fold, rmse=rmse_missing(imputed, truth.values, truth.injected),
                      acc=accuracy(pred.labels, dsn.y[t]), n_test=int(t.size),
                      n_injected=int(truth.injected.sum()), history=history)


def _guarded(job: _FoldJob) -> FoldResult:
    try:
        return _run_fold(job)
    except Exception as exc:  # add fold context
        raise ExperimentError(f"fold {job.tag}: {type(exc).__name__}: {exc}") from exc


def run_experiment(spec: RunSpec, ds: IncompleteDataset | None = None,
                   write: bool = True) -> ExperimentReport:
    """Run ``repeats`` x ``k``-fold CV; writes report, summary and artifacts when ``write``."""
    if ds is None:
        issues = validate_config(spec)
        if issues:
            raise ExperimentError("invalid spec: " + "; ".join(issues))
        ds = load_csv(spec.dataset, spec.label_column)
    if spec.ablation not in ABLATIONS:
        raise ExperimentError(f"unknown ablation {spec.ablation!r}")
    out = spec.resolved_output() if write else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    cfg = spec.train_config()
    baseline = ABLATIONS[spec.ablation] is None
    started = time.perf_counter()
    runs = []
    for r in range(spec.repeats):
        run_seed = spec.seed + r
        corrupted, truth = inject_mcar(ds, spec.p, _seed_int(run_seed, 1))
        plan = make_folds(ds.y, spec.k, _seed_int(run_seed, 2))
        if out is not None:
            export_mask_csv(corrupted.M, corrupted.columns, out / f"mask-r{run_seed}.csv")
            export_truth_csv(truth, corrupted.columns, out / f"truth-r{run_seed}.csv")
        jobs = [_FoldJob(corrupted, truth, plan.test_rows(f), plan.train_rows(f), f,
                         replace(cfg, seed=_seed_int(run_seed, 3, f)), baseline,
                         out if spec.snapshots else None, f"r{run_seed}-f{f}")
                for f in range(spec.k)]
        if spec.jobs > 1:
            with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
                folds = list(pool.map(_guarded, jobs))
        else:
            folds = [_guarded(j) for j in jobs]
        runs.append(RunResult(run_seed, folds))
    name = Path(spec.dataset).stem if spec.dataset else "dataset"
    report = ExperimentReport(name, spec.ablation, spec.to_dict(), runs)
    if out is not None:
        # runtime lives outside the report so identical specs give identical bytes
        (out / "timing.json").write_text(json.dumps(
            {"seconds": time.perf_counter() - started}) + "\n")
        (out / "summary.txt").write_text(report.table())
        (out / "report.json").write_text(report.to_json())
    return report


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sscflow", description=__doc__)
    ap.add_argument("--config", help="JSON file with RunSpec fields (flags override it)")
    ap.add_argument("--dataset", help="CSV file with a header row")
    ap.add_argument("--label-column")
    ap.add_argument("--p", type=float, help="MCAR missing fraction")
    ap.add_argument("--k", type=int, help="number of folds")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--repeats", type=int, help="independent runs with seeds seed, seed+1, ...")
    ap.add_argument("--ablation", choices=sorted(ABLATIONS))
    ap.add_argument("--iterations", type=int, help="override n_iterations")
    ap.add_argument("--epochs", type=int, help="fixed epochs per iteration")
    ap.add_argument("--max-epochs", type=int, help="cap on the doubling epoch schedule")
    ap.add_argument("--output-dir", help=f"defaults to ${OUTPUT_ENV} or ./sscflow-out")
    ap.add_argument("--jobs", type=int, help="run folds in parallel processes")
    ap.add_argument("--no-snapshots", action="store_true")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def spec_from_args(args: argparse.Namespace) -> RunSpec:
    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text())
    spec = RunSpec.from_dict(base)
    for attr, key in [("dataset", "dataset"), ("label_column", "label_column"), ("p", "p"),
                      ("k", "k"), ("seed", "seed"), ("repeats", "repeats"),
                      ("ablation", "ablation"), ("output_dir", "output_dir"), ("jobs", "jobs")]:
        v = getattr(args, attr)
        if v is not None:
            setattr(spec, key, v)
    overrides = {}
    if args.iterations is not None:
        overrides["n_iterations"] = args.iterations
    if args.epochs is not None:
        overrides["n_epochs"] = args.epochs
    if args.max_epochs is not None:
        overrides["max_epochs"] = args.max_epochs
    if overrides:
        spec.train = replace(spec.train, **overrides)
    if args.no_snapshots:
        spec.snapshots = False
    return spec


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = spec_from_args(args)
    except (OSError, ValueError, TypeError) as exc:
        print(f"error: bad configuration: {exc}", file=sys.stderr)
        return 2
    issues = validate_config(spec)
    if issues:
        for msg in issues:
            print(f"error: {msg}", file=sys.stderr)
        return 2
    try:
        report = run_experiment(spec)
    except (ExperimentError, DataError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write(report.table())
    print(f"report written to {spec.resolved_output() / 'report.json'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
