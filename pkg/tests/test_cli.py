import csv
import json

import numpy as np
import pytest
import yaml

from sparsemarkov.cli import main
from sparsemarkov.config import load_config, parse_config
from sparsemarkov.errors import ConfigError

BASE = {
    "schema_version": 1,
    "kernel": {"type": "matern52", "variance": 1.0, "lengthscale": 0.3},
    "likelihood": {"type": "bernoulli"},
    "data": {"generator": "binary-sign", "n": 120, "seed": 1},
    "inducing": {"M": 15},
    "algorithm": {"name": "cvi", "sweeps": 3},
    "train": {"iterations": 2},
    "folds": 3,
}


def write_config(tmp_path, overrides=None, name="c.yaml"):
    cfg = json.loads(json.dumps(BASE))
    for key, value in (overrides or {}).items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict) and key != "data":
            cfg[key].update(value)
        else:
            cfg[key] = value
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_defaults_fill_in(tmp_path):
    cfg = load_config(write_config(tmp_path))
    assert cfg.train.learning_rate == 0.01
    assert cfg.train.fd_epsilon == 1e-4
    assert cfg.sweep.M == [4, 8, 16, 32]
    assert parse_config({**BASE, "folds": 10}).folds == 10


@pytest.mark.parametrize("bad", [
    {"extra": 1},
    {"schema_version": 2},
    {"data": {"generator": "binary-sign", "n": 10}},
    {"data": {"path": "missing.csv"}},
    {"kernel": {"type": "rbf"}},
    {"likelihood": {"type": "gaussian", "scale": 1.0}},
    {"algorithm": {"name": "cvi", "rho": 1.5}},
    {"train": {"objective": "loo"}},
])
def test_invalid_configs(tmp_path, bad):
    data = {**BASE, **bad}
    with pytest.raises(ConfigError):
        parse_config(data, tmp_path)


def test_evaluate_outputs_and_recomputable_metrics(tmp_path):
    out = tmp_path / "out"
    assert main(["evaluate", "--config", str(write_config(tmp_path)), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    rows = read_rows(out / "predictions.csv")
    assert len(rows) == 120
    assert sorted(int(r["row"]) for r in rows) == list(range(120))
    for k, fold in enumerate(summary["per_fold"]):
        mine = [r for r in rows if int(r["fold"]) == k]
        log_pred = np.array([float(r["log_pred"]) for r in mine])
        y = np.array([float(r["y"]) for r in mine])
        y_mean = np.array([float(r["y_mean"]) for r in mine])
        assert fold["nlpd"] == pytest.approx(-log_pred.mean(), rel=1e-12)
        assert fold["rmse"] == pytest.approx(np.sqrt(np.mean((y - y_mean) ** 2)), rel=1e-12)
        assert fold["error"] == pytest.approx(np.mean((y_mean > 0.5) != (y > 0.5)))
    assert set(summary["metrics"]) == {"nlpd", "rmse", "error", "nlml"}
    traces = read_rows(out / "traces.csv")
    assert len(traces) == 3 * 2
    assert {"fold", "iteration", "objective", "skips", "kernel.lengthscale"} <= set(traces[0])


def test_rerun_is_byte_identical(tmp_path):
    path = write_config(tmp_path)
    for name in ("a", "b"):
        assert main(["evaluate", "--config", str(path), "--out", str(tmp_path / name), "--seed", "4"]) == 0
    for f in ("summary.json", "predictions.csv", "traces.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_compare_table(tmp_path):
    out = tmp_path / "out"
    assert main(["compare", "--config", str(write_config(tmp_path)), "--out", str(out)]) == 0
    rows = read_rows(out / "compare.csv")
    assert [r["variant"] for r in rows] == ["cvi", "pep@1", "pep@0.01", "pl", "eks"]
    assert all(np.isfinite(float(r["nlpd_mean"])) for r in rows)


def test_sweep_rows(tmp_path):
    out = tmp_path / "out"
    path = write_config(tmp_path, {"sweep": {"M": [4, 8]}})
    assert main(["sweep-m", "--config", str(path), "--out", str(out)]) == 0
    rows = read_rows(out / "sweep.csv")
    assert [int(r["M"]) for r in rows] == [4, 8]
    assert set(rows[0]) == {"M", "nlml", "nlpd", "error"}


def test_fit_then_predict(tmp_path):
    path = write_config(tmp_path)
    fit_out = tmp_path / "fit"
    assert main(["fit", "--config", str(path), "--out", str(fit_out), "--algorithm", "pep", "--alpha", "0.5"]) == 0
    summary = json.loads((fit_out / "summary.json").read_text())
    assert summary["algorithm"]["name"] == "pep" and summary["algorithm"]["alpha"] == 0.5
    assert len(read_rows(fit_out / "trace.csv")) == 2
    queries = tmp_path / "q.csv"
    queries.write_text("x,y\n2.5,1\n0.5,0\n")
    pred_out = tmp_path / "pred"
    code = main(["predict", "--config", str(path), "--out", str(pred_out), "--inputs", str(queries),
                 "--model", str(fit_out / "model.json")])
    assert code == 0
    rows = read_rows(pred_out / "predictions.csv")
    assert [float(r["x"]) for r in rows] == [2.5, 0.5]
    assert all(0 < float(r["y_mean"]) < 1 for r in rows)


def test_spatiotemporal_evaluate(tmp_path):
    path = write_config(tmp_path, {
        "data": {"generator": "banana-like-2d", "n": 90, "seed": 2},
        "spatial_kernel": {"type": "matern52", "variance": 1.0, "lengthscale": 1.0},
        "inducing": {"M": 5, "M_z": 4},
    })
    out = tmp_path / "out"
    assert main(["evaluate", "--config", str(path), "--out", str(out), "--rho", "0.5"]) == 0
    rows = read_rows(out / "predictions.csv")
    assert "r1" in rows[0] and len(rows) == 90


def test_config_error_is_structured(tmp_path, capsys):
    path = write_config(tmp_path, {"bogus": True})
    out = tmp_path / "out"
    assert main(["fit", "--config", str(path), "--out", str(out)]) == 2
    payload = json.loads((out / "error.json").read_text())
    assert payload["error"]["type"] == "ConfigError"
    assert "bogus" in payload["error"]["message"]
    assert json.loads(capsys.readouterr().err) == payload


def test_data_error_reports_line(tmp_path):
    data = tmp_path / "d.csv"
    data.write_text("x,y\n0,1\n1,oops\n")
    path = write_config(tmp_path, {"data": {"path": "d.csv"}})
    out = tmp_path / "out"
    assert main(["fit", "--config", str(path), "--out", str(out)]) == 2
    assert json.loads((out / "error.json").read_text())["error"]["line"] == 3


def test_training_failure_is_nonzero(tmp_path):
    path = write_config(tmp_path, {"train": {"iterations": 3, "learning_rate": 1000.0}})
    out = tmp_path / "out"
    code = main(["fit", "--config", str(path), "--out", str(out)])
    assert code == 1
    assert json.loads((out / "error.json").read_text())["error"]["type"] == "TrainingError"


def test_bad_override(tmp_path):
    assert main(["fit", "--config", str(write_config(tmp_path)), "--out", str(tmp_path / "o"), "--alpha", "0"]) == 2
