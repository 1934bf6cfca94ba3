"""Experiment orchestration: fitting, cross-validation, variant comparison and inducing-size sweeps."""

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import SCHEMA_VERSION
from .data import Dataset, folds, generate, load_csv
from .errors import DataError
from .inference import objective, predict, run_inference
from .metrics import evaluate, summarize
from .spatiotemporal import st_predict
from .training import Layout, Model, fit

# (label, algorithm, alpha) for the compare subcommand
VARIANTS = (("cvi", "cvi", 1.0), ("pep@1", "pep", 1.0), ("pep@0.01", "pep", 0.01), ("pl", "pl", 1.0),
            ("eks", "eks", 1.0))

# Objective each algorithm trains with when compared side by side.
NATURAL_OBJECTIVE = {"cvi": "elbo", "pep": "pep_energy", "pl": "pep_energy", "eks": "pep_energy"}


def load_data(cfg):
    if cfg.data.path is not None:
        data = load_csv(cfg.data.path, cfg.build_likelihood())
    else:
        data = generate(cfg.data.generator, cfg.data.n, cfg.data.seed)
        cfg.build_likelihood().validate(data.y)
    if (cfg.spatial_kernel is None) != (data.r is None):
        raise DataError("spatial columns r1..rp are required exactly when a spatial kernel is configured")
    return data


def _spatial_locations(cfg, data, count):
    if cfg.inducing.spatial_path is not None:
        with open(cfg.inducing.spatial_path, newline="") as fh:
            rows = list(csv.reader(fh))
        try:
            z_r = np.array([[float(v) for v in row] for row in rows[1:] if row], dtype=float)
        except ValueError:
            raise DataError("spatial inducing file must be numeric below its header") from None
        if z_r.ndim != 2 or z_r.shape[1] != data.r.shape[1]:
            raise DataError("spatial inducing file has the wrong number of columns")
        return z_r
    r = data.r
    if r.shape[1] == 1:
        return np.linspace(r.min(), r.max(), count)[:, None]
    # evenly spaced rows along the first coordinate, duplicates removed
    order = np.argsort(r[:, 0], kind="stable")
    pick = order[np.linspace(0, r.shape[0] - 1, count).round().astype(int)]
    return np.unique(r[pick], axis=0)


def make_layout(cfg, data, M=None):
    """Evenly spaced temporal grid over the full input range; spatial locations when needed."""
    M = cfg.inducing.M if M is None else M
    z = np.linspace(data.x.min(), data.x.max(), M)
    if cfg.spatial_kernel is None:
        return Layout(z)
    M_z = cfg.inducing.M_z if cfg.inducing.M_z is not None else M
    return Layout(z, _spatial_locations(cfg, data, M_z))


def make_model(cfg):
    return Model(cfg.build_kernel(), cfg.build_likelihood(), cfg.build_spatial_kernel())


def predict_latent(result, x, r=None):
    """Predictive mean (Q, o) and covariance (Q, o, o) of the latent function."""
    if result.model.spatial_kernel is None:
        return predict(result.state, result.problem, x)
    return st_predict(result.state.posterior, result.problem.chain, x, r)


@dataclass
class Settings:
    """Algorithm choice and its parameters after command-line overrides."""

    algorithm: str
    rho: float
    alpha: float
    damping: float
    parallel: bool
    sweeps: int
    objective: str

    @classmethod
    def from_config(cls, cfg, algorithm=None, alpha=None, rho=None, objective=None):
        a = cfg.algorithm
        return cls(algorithm or a.name, a.rho if rho is None else rho, a.alpha if alpha is None else alpha,
                   a.damping, a.parallel, a.sweeps, objective or cfg.train.objective)

    def state_settings(self):
        return {"rho": self.rho, "alpha": self.alpha, "damping": self.damping, "parallel": self.parallel}


def train(cfg, settings, layout, data, seed):
    """Fit hyperparameters, then run extra site sweeps at the final hyperparameters."""
    tc = replace(cfg.train.to_train_config(seed), objective=settings.objective)
    result = fit(make_model(cfg), layout, data.x, data.y, tc, r=data.r, algorithm=settings.algorithm,
                 **settings.state_settings())
    if settings.sweeps:
        result.state = run_inference(result.state, result.problem, settings.sweeps)
    return result


def train_objective(result, settings):
    alpha = result.state.alpha if settings.algorithm == "pep" else 1.0
    return float(objective(settings.objective, result.state, result.problem, alpha))


def cross_validate(cfg, settings, data, seed, M=None):
    """Per-fold metrics, prediction rows and trace rows."""
    layout = make_layout(cfg, data, M)
    per_fold, predictions, traces = [], [], []
    for k, (tr, te) in enumerate(folds(data.N, cfg.folds, seed)):
        train_set, test_set = data.subset(tr), data.subset(te)
        result = train(cfg, settings, layout, train_set, seed)
        mean, cov = predict_latent(result, test_set.x, test_set.r)
        lik = result.model.likelihood
        metrics, log_pred, y_mean = evaluate(lik, test_set.y, mean, cov)
        metrics["nlml"] = -train_objective(result, settings)
        per_fold.append(metrics)
        for i in range(test_set.N):
            row = {"fold": k, "row": int(test_set.perm[i]), "x": float(test_set.x[i])}
            if test_set.r is not None:
                row.update({f"r{j + 1}": float(v) for j, v in enumerate(test_set.r[i])})
            row.update({"y": float(test_set.y[i]), "y_mean": float(y_mean[i]), "log_pred": float(log_pred[i])})
            row.update({f"f_mean{j}": float(v) for j, v in enumerate(mean[i])})
            row.update({f"f_var{j}": float(cov[i, j, j]) for j in range(cov.shape[1])})
            predictions.append(row)
        for t in result.trace:
            traces.append({"fold": k, **t})
    return per_fold, predictions, traces


# ---------------------------------------------------------------------------
# Output


def write_rows(path, rows):
    if not rows:
        Path(path).write_text("")
        return
    keys = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _header(command, cfg, settings, seed):
    return {"schema_version": SCHEMA_VERSION, "command": command, "seed": seed,
            "algorithm": {"name": settings.algorithm, "rho": settings.rho, "alpha": settings.alpha,
                          "damping": settings.damping, "parallel": settings.parallel},
            "objective": settings.objective, "folds": cfg.folds}


def run_fit(cfg, settings, out, seed):
    data = load_data(cfg)
    result = train(cfg, settings, make_layout(cfg, data), data, seed)
    model = result.model
    fitted = {"kernel": model.kernel.to_dict(), "likelihood": model.likelihood.to_dict(),
              "spatial_kernel": None if model.spatial_kernel is None else model.spatial_kernel.to_dict()}
    summary = _header("fit", cfg, settings, seed)
    summary.update({"n": data.N, "objective_value": train_objective(result, settings), "model": fitted,
                    "skips": result.state.skips})
    write_json(out / "model.json", fitted)
    write_rows(out / "trace.csv", result.trace)
    write_json(out / "summary.json", summary)
    return summary, result


def run_predict(cfg, settings, out, seed, inputs, fitted=None):
    """Predict at the rows of ``inputs``; hyperparameters come from ``fitted`` when given."""
    if fitted is not None:
        cfg = cfg.model_copy(update={"kernel": fitted["kernel"], "likelihood": fitted["likelihood"],
                                     "spatial_kernel": fitted.get("spatial_kernel"),
                                     "train": cfg.train.model_copy(update={"iterations": 0})})
    data = load_data(cfg)
    result = train(cfg, settings, make_layout(cfg, data), data, seed)
    query = _load_queries(inputs, data.r is not None)
    mean, cov = predict_latent(result, query.x, query.r)
    lik = result.model.likelihood
    rows = []
    has_y = not np.all(np.isnan(query.y))
    log_pred = evaluate(lik, query.y, mean, cov)[1] if has_y else None
    y_mean = lik.predictive_mean(mean, cov)
    for i in range(query.N):
        row = {"row": int(query.perm[i]), "x": float(query.x[i])}
        if query.r is not None:
            row.update({f"r{j + 1}": float(v) for j, v in enumerate(query.r[i])})
        row.update({f"f_mean{j}": float(v) for j, v in enumerate(mean[i])})
        row.update({f"f_var{j}": float(cov[i, j, j]) for j in range(cov.shape[1])})
        row["y_mean"] = float(y_mean[i])
        if has_y:
            row.update({"y": float(query.y[i]), "log_pred": float(log_pred[i])})
        rows.append(row)
    rows.sort(key=lambda r: r["row"])
    write_rows(out / "predictions.csv", rows)
    summary = _header("predict", cfg, settings, seed)
    summary["n_queries"] = query.N
    write_json(out / "summary.json", summary)
    return summary


def _load_queries(path, spatial):
    """Query inputs: header x[,r1..rp] with an optional trailing y column."""
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh) if row]
    if not rows:
        raise DataError("empty query file", 1)
    header = [h.strip() for h in rows[0]]
    has_y = header[-1] == "y"
    cols = header[:-1] if has_y else header
    if cols[0] != "x" or (len(cols) > 1) != spatial:
        raise DataError("query header must be x[,r1..rp][,y] matching the model", 1)
    values = []
    for line, row in enumerate(rows[1:], start=2):
        try:
            values.append([float(v) for v in row])
        except ValueError:
            raise DataError(f"non-numeric field in {row}", line) from None
        if len(row) != len(header) or not np.all(np.isfinite(values[-1])):
            raise DataError("wrong field count or non-finite value", line)
    arr = np.array(values, dtype=float).reshape(-1, len(header))
    y = arr[:, -1] if has_y else np.full(arr.shape[0], np.nan)
    return Dataset(arr[:, 0], y, arr[:, 1:len(cols)] if spatial else None)


def run_evaluate(cfg, settings, out, seed):
    data = load_data(cfg)
    per_fold, predictions, traces = cross_validate(cfg, settings, data, seed)
    summary = _header("evaluate", cfg, settings, seed)
    summary.update({"n": data.N, "metrics": summarize(per_fold), "per_fold": per_fold})
    write_rows(out / "predictions.csv", predictions)
    write_rows(out / "traces.csv", traces)
    write_json(out / "summary.json", summary)
    return summary


def run_compare(cfg, settings, out, seed):
    """Cross-validated metrics for every algorithm variant; each trains with its natural objective."""
    data = load_data(cfg)
    table = []
    for label, algorithm, alpha in VARIANTS:
        variant = Settings(algorithm, settings.rho, alpha, settings.damping, settings.parallel, settings.sweeps,
                           NATURAL_OBJECTIVE[algorithm])
        per_fold, _, _ = cross_validate(cfg, variant, data, seed)
        row = {"variant": label}
        for name, stats in summarize(per_fold).items():
            row[f"{name}_mean"], row[f"{name}_std"] = stats["mean"], stats["std"]
        table.append(row)
    summary = _header("compare", cfg, settings, seed)
    summary.update({"n": data.N, "table": table})
    write_rows(out / "compare.csv", table)
    write_json(out / "summary.json", summary)
    return summary


def run_sweep(cfg, settings, out, seed):
    """Cross-validated (M, NLML, NLPD, error) rows over the configured inducing sizes."""
    data = load_data(cfg)
    table = []
    for M in cfg.sweep.M:
        per_fold, _, _ = cross_validate(cfg, settings, data, seed, M)
        stats = summarize(per_fold)
        row = {"M": M, "nlml": stats["nlml"]["mean"], "nlpd": stats["nlpd"]["mean"]}
        if "error" in stats:
            row["error"] = stats["error"]["mean"]
        table.append(row)
    summary = _header("sweep-m", cfg, settings, seed)
    summary.update({"n": data.N, "table": table})
    write_rows(out / "sweep.csv", table)
    write_json(out / "summary.json", summary)
    return summary


__all__ = ["VARIANTS", "Settings", "load_data", "make_layout", "make_model", "train", "cross_validate",
           "run_fit", "run_predict", "run_evaluate", "run_compare", "run_sweep"]
