"""Command-line front end.

Every subcommand writes ``summary.json`` (plus CSV files) into the output
directory. On failure a structured error object is written to ``error.json``
and stderr, and the process exits with status 2 for input problems or 1 otherwise.
"""

import argparse
import json
import sys
from pathlib import Path

from .config import load_config
from .errors import ConfigError, DataError, LikelihoodDomainError, SparseMarkovError, TrainingError
from .experiment import Settings, run_compare, run_evaluate, run_fit, run_predict, run_sweep
from .inference import ALGORITHMS

COMMANDS = ("fit", "predict", "evaluate", "compare", "sweep-m")
_INPUT_ERRORS = (ConfigError, DataError, LikelihoodDomainError)


def build_parser():
    parser = argparse.ArgumentParser(prog="sparsemarkov", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "fit": "train hyperparameters on the full dataset",
        "predict": "predict at query inputs from a CSV",
        "evaluate": "k-fold cross-validated metrics",
        "compare": "cross-validated metrics for cvi, pep@1, pep@0.01, pl and eks",
        "sweep-m": "cross-validated metrics over a range of inducing sizes",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", required=True, type=Path, help="YAML experiment configuration")
        p.add_argument("--out", type=Path, help="output directory (default: the config's 'output')")
        p.add_argument("--seed", type=int, help="override the experiment seed")
        p.add_argument("--algorithm", choices=ALGORITHMS, help="override the site-update algorithm")
        p.add_argument("--alpha", type=float, help="override the PEP power")
        p.add_argument("--rho", type=float, help="override the CVI step size")
        if name == "predict":
            p.add_argument("--inputs", required=True, type=Path, help="CSV with header x[,r1..rp][,y]")
            p.add_argument("--model", type=Path, help="model.json from a previous fit; skips training")
    return parser


def _error_payload(exc):
    err = {"type": type(exc).__name__, "message": str(exc)}
    for attr in ("line", "iteration", "step"):
        if getattr(exc, attr, None) is not None:
            err[attr] = getattr(exc, attr)
    if isinstance(exc, TrainingError) and exc.__cause__ is not None:
        err["cause"] = _error_payload(exc.__cause__)
    return err


def _dispatch(args):
    cfg = load_config(args.config)
    for name in ("alpha", "rho"):
        value = getattr(args, name)
        if value is not None and not 0 < value <= 1:
            raise ConfigError(f"--{name} must lie in (0, 1]")
    seed = cfg.seed if args.seed is None else args.seed
    if seed < 0:
        raise ConfigError("--seed must be non-negative")
    settings = Settings.from_config(cfg, args.algorithm, args.alpha, args.rho)
    out = args.out if args.out is not None else Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    if args.command == "fit":
        return run_fit(cfg, settings, out, seed)[0]
    if args.command == "predict":
        fitted = None
        if args.model is not None:
            try:
                fitted = json.loads(args.model.read_text())
            except (OSError, ValueError) as exc:
                raise ConfigError(f"cannot read model file {args.model}: {exc}") from None
        return run_predict(cfg, settings, out, seed, args.inputs, fitted)
    runner = {"evaluate": run_evaluate, "compare": run_compare, "sweep-m": run_sweep}[args.command]
    return runner(cfg, settings, out, seed)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _dispatch(args)
    except (SparseMarkovError, OSError, ValueError) as exc:
        payload = {"error": _error_payload(exc)}
        text = json.dumps(payload, indent=2, sort_keys=True)
        print(text, file=sys.stderr)
        out = args.out
        if out is not None:
            try:
                out.mkdir(parents=True, exist_ok=True)
                (out / "error.json").write_text(text + "\n")
            except OSError:
                pass
        return 2 if isinstance(exc, _INPUT_ERRORS) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
