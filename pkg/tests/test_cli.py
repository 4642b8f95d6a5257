import json

import numpy as np
import pytest

from sscflow import snapshot
from sscflow.cli import RunSpec, main, run_experiment, validate_config
from sscflow.data import load_csv, normalize
from sscflow.metrics import ExperimentReport
from sscflow.model import TrainConfig, predict_batch, train

TINY = TrainConfig(n_iterations=2, n_epochs=2, batch_size=32)


@pytest.fixture
def csv_path(tmp_path):
    r = np.random.default_rng(0)
    y = np.repeat([0, 1, 2], 20)
    X = r.normal(size=(60, 3)) * 0.5 + y[:, None] * 1.5
    lines = ["a,b,c,kind"] + [",".join(repr(float(v)) for v in x) + f",k{t}" for x, t in zip(X, y)]
    path = tmp_path / "toy.csv"
    path.write_text("\n".join(lines) + "\n")
    return path


def spec_for(path, out, **kw):
    return RunSpec(dataset=str(path), label_column="kind", k=3, output_dir=str(out), train=TINY, **kw)


def test_validate_config(csv_path, tmp_path):
    assert validate_config(spec_for(csv_path, tmp_path)) == []
    issues = validate_config(RunSpec(dataset=str(tmp_path / "nope.csv"), p=1.0))
    assert any("does not exist" in m for m in issues)
    assert any(m.startswith("p:") for m in issues)
    assert any("no path" in m for m in validate_config(RunSpec()))
    assert validate_config(spec_for(csv_path, tmp_path, ablation="weird"))


def test_run_writes_report_and_artifacts(csv_path, tmp_path):
    out = tmp_path / "out"
    report = run_experiment(spec_for(csv_path, out))
    assert (out / "report.json").is_file() and (out / "summary.txt").is_file()
    assert (out / "timing.json").is_file()
    assert sorted(p.name for p in out.glob("model-*.json")) == [f"model-r0-f{f}.json" for f in range(3)]
    assert len(list(out.glob("latent-*.csv"))) == 3
    assert (out / "mask-r0.csv").is_file() and (out / "truth-r0.csv").is_file()
    back = ExperimentReport.from_json((out / "report.json").read_text())
    assert back.to_json() == report.to_json()
    assert "seconds" not in (out / "report.json").read_text()
    fold = report.runs[0].folds[0]
    assert 0 <= fold.acc <= 1 and fold.rmse >= 0
    assert report.config["train"]["n_iterations"] == 2


def test_same_seed_gives_identical_bytes(csv_path, tmp_path):
    run_experiment(spec_for(csv_path, tmp_path / "a"))
    run_experiment(spec_for(csv_path, tmp_path / "b"))
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()


def test_parallel_folds_match_sequential(csv_path, tmp_path):
    a = run_experiment(spec_for(csv_path, tmp_path / "a", snapshots=False))
    b = run_experiment(spec_for(csv_path, tmp_path / "b", snapshots=False, jobs=2))
    assert a.to_json() == b.to_json()


def test_baseline_ablation_skips_training(csv_path, tmp_path):
    rep = run_experiment(spec_for(csv_path, tmp_path, ablation="baseline"))
    assert rep.method == "baseline"
    assert not list(tmp_path.glob("model-*.json"))
    assert all(f.history == [] for f in rep.runs[0].folds)


def test_ablation_flags_reach_training_config():
    spec = RunSpec(ablation="it_only")
    cfg = spec.train_config()
    assert (cfg.enable_idm, cfg.enable_conditional_transform, cfg.enable_conditional_latent) == (False, True, False)
    assert RunSpec(ablation="idm_only").train_config().enable_idm


def test_main_with_config_file_and_overrides(csv_path, tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"dataset": str(csv_path), "label_column": "kind", "k": 2,
                               "train": {"n_iterations": 1, "n_epochs": 1}}))
    monkeypatch.setenv("SSCFLOW_OUTPUT_DIR", str(tmp_path / "envout"))
    assert main(["--config", str(cfg), "--k", "3", "--no-snapshots"]) == 0
    rep = json.loads((tmp_path / "envout" / "report.json").read_text())
    assert rep["config"]["k"] == 3 and rep["config"]["train"]["n_iterations"] == 1
    assert "ACC" in capsys.readouterr().out


def test_main_reports_invalid_spec(tmp_path, capsys):
    code = main(["--dataset", str(tmp_path / "missing.csv"), "--p", "1.0",
                 "--output-dir", str(tmp_path / "o")])
    assert code != 0
    assert not (tmp_path / "o" / "report.json").exists()
    assert "does not exist" in capsys.readouterr().err


def test_main_surfaces_fold_errors(tmp_path, capsys):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,kind\n1,2,x\n2,3,x\n3,4,y\n")
    code = main(["--dataset", str(path), "--label-column", "kind", "--k", "3", "--iterations", "1",
                 "--epochs", "1", "--output-dir", str(tmp_path / "o")])
    assert code == 1
    assert "fold" in capsys.readouterr().err
    assert not (tmp_path / "o" / "report.json").exists()


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"dataset": "x.csv", "bogus": 1}))
    assert main(["--config", str(cfg)]) == 2


def test_snapshot_round_trip(csv_path, tmp_path):
    ds, stats = normalize(load_csv(csv_path, "kind"))
    res = train(ds.hide_labels([0, 25, 50]), TINY)
    path = tmp_path / "m.json"
    snapshot.save(path, res.model, stats, ds.columns, ds.classes)
    model, stats2, schema = snapshot.load(path)
    np.testing.assert_array_equal(stats2.lo, stats.lo)
    assert schema["classes"] == ds.classes
    a = predict_batch(res.model, ds.X, ds.M, seed=0)
    b = predict_batch(model, ds.X, ds.M, seed=0)
    assert a.imputed.tobytes() == b.imputed.tobytes()
    assert a.posterior.tobytes() == b.posterior.tobytes()


def test_snapshot_version_check(tmp_path):
    path = tmp_path / "m.json"
    path.write_text(json.dumps({"format": "sscflow-snapshot", "version": 99}))
    with pytest.raises(snapshot.SnapshotError):
        snapshot.load(path)
