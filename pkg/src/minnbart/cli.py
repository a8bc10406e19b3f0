"""
Command-line interface.

Every command writes its outputs plus ``manifest.json`` into an output
directory. The manifest records the resolved options, input and output
digests and timings; ``replay`` re-runs a manifest and checks that the
outputs come out byte-identical.

Exit codes: 0 success, 1 other failure (checkpoint write, replay mismatch),
2 configuration or input error, 3 numerical failure. Failures print a
one-line JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, parse_config
from .data import DataError, lag_vector, read_panel_csv, read_transform_codes, standardize, write_panel_csv
from .forecast import (
    ConfigurationError,
    EvaluationError,
    expanding_window,
    origin_seed,
    pip,
    simulate_forecast_paths,
    write_pip_csv,
)
from .gibbs import ChainOutput, CheckpointError, NumericalError, run_chain
from .split_priors import DegenerateVarianceError, dirichlet_draws

log = logging.getLogger("minnbart")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def code_version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return __version__


def _fmt(x):
    return repr(float(x))


# -- commands ----------------------------------------------------------------------
# Each takes a JSON-able option dict and the output directory and returns
# ``(outputs, inputs, extra)`` for the manifest.


def load_panel(data):
    if not data.get("csv"):
        raise ConfigError("[data] csv is required for this command", "data.csv")
    codes = read_transform_codes(data["codes"]) if data.get("codes") else None
    try:
        panel = read_panel_csv(data["csv"], codes)
    except KeyError as exc:
        raise ConfigError(f"no transformation code for variable {exc.args[0]}", "data.codes") from None
    return panel, [p for p in (data["csv"], data.get("codes")) if p]


def cmd_transform(opts, out):
    cfg = RunConfig.from_dict(opts["config"])
    panel, inputs = load_panel(cfg.data)
    path = write_panel_csv(panel, out / "transformed.csv")
    return [path], inputs, {"T": panel.T, "n": panel.n}


def cmd_fit(opts, out):
    cfg = RunConfig.from_dict(opts["config"])
    panel, inputs = load_panel(cfg.data)
    panel = standardize(panel)
    ckpt = out / "checkpoint.zip"
    use_ckpt = cfg.sampler.checkpoint_every > 0 or opts.get("resume", False)
    chain = run_chain(cfg.sampler, panel, checkpoint_path=ckpt if use_ckpt else None,
                      resume=opts.get("resume", False))
    outputs = [chain.save(out / "chain.npz")]
    if ckpt.exists():
        outputs.append(ckpt)
    return outputs, inputs, {"draws": chain.n_draws}


def cmd_forecast(opts, out):
    cfg = RunConfig.from_dict(opts["config"])
    chain = ChainOutput.load(opts["chain"])
    panel, inputs = load_panel(cfg.data)
    if list(panel.names) != chain.meta["names"]:
        raise ConfigError("chain and data have different variables")
    p = chain.meta["p"]
    c, s = chain.scaling
    x_last = lag_vector((panel.values[-p:] - c) / s, p)
    rng = np.random.default_rng(origin_seed(cfg.sampler.seed, panel.T, 1))
    draws = simulate_forecast_paths(chain, x_last, int(opts["horizons"]), rng).original_units()
    paths = draws.paths[draws.valid]
    path = out / "forecast.csv"
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["horizon", "variable", "mean", "sd", "q05", "q50", "q95"])
        for h in range(paths.shape[1]):
            for i, nm in enumerate(panel.names):
                x = paths[:, h, i]
                q = np.quantile(x, [0.05, 0.5, 0.95])
                w.writerow([h + 1, nm, _fmt(x.mean()), _fmt(x.std(ddof=1) if len(x) > 1 else 0.0)] + [_fmt(v) for v in q])
    return [path], inputs + [opts["chain"]], {"excluded_draws": draws.n_excluded}


def cmd_evaluate(opts, out):
    cfg = RunConfig.from_dict(opts["config"])
    ev = cfg.evaluation
    panel, inputs = load_panel(cfg.data)
    if ev["t0"] is None:
        raise ConfigError("[evaluation] t0 is required", "evaluation.t0")
    if ev["rmspe"] and not ev["benchmark"]:
        raise ConfigError("RMSPE requested but [evaluation] benchmark is not set", "evaluation.benchmark")
    if ev["benchmark"]:
        inputs.append(ev["benchmark"])
    try:
        report = expanding_window(cfg.sampler, panel, ev["t0"], ev["h_max"], refit_stride=ev["refit_stride"],
                                  benchmark=ev["benchmark"], rmspe=ev["rmspe"], n_jobs=ev["n_jobs"])
    except ConfigurationError as exc:
        raise ConfigError(str(exc)) from None
    return report.write(out), inputs, {"origins": len(report.results)}


def cmd_pip(opts, out):
    chain = ChainOutput.load(opts["chain"])
    path = write_pip_csv(pip(chain), chain.meta["names"], out / "pip.csv")
    return [path], [opts["chain"]], {}


def cmd_prior_draws(opts, out):
    alpha = np.asarray(opts["alpha"], dtype=float)
    if alpha.ndim != 1 or alpha.size < 1 or np.any(~(alpha > 0)):
        raise ConfigError("--alpha must be a list of positive numbers", "alpha")
    if opts["draws"] < 1:
        raise ConfigError("--draws must be at least 1", "draws")
    rng = np.random.default_rng(np.random.SeedSequence(opts["seed"], spawn_key=(4,)))
    draws = dirichlet_draws(alpha, opts["draws"], rng)
    path = out / "prior_draws.csv"
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"s{i + 1}" for i in range(alpha.size)])
        for row in draws:
            w.writerow([_fmt(v) for v in row])
    return [path], [], {}


COMMANDS = {
    "transform": cmd_transform,
    "fit": cmd_fit,
    "forecast": cmd_forecast,
    "evaluate": cmd_evaluate,
    "pip": cmd_pip,
    "prior-draws": cmd_prior_draws,
}


def execute(command, opts, out):
    """Run `command` into directory `out` and write its manifest."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    outputs, inputs, extra = COMMANDS[command](opts, out)
    elapsed = time.perf_counter() - start
    manifest = {
        "command": command,
        "options": opts,
        "seed": opts.get("seed", opts.get("config", {}).get("sampler", {}).get("seed")),
        "code_version": code_version(),
        "inputs": {str(Path(p).resolve()): sha256(p) for p in inputs},
        "outputs": {Path(p).name: sha256(p) for p in outputs},
        "timings": {"wall_seconds": elapsed},
        "summary": extra,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return manifest


def replay(manifest_path, out=None):
    """Re-run a manifest; returns ``(ok, mismatched output names)``."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read manifest {manifest_path}: {exc}") from None
    for path, digest in manifest["inputs"].items():
        if not Path(path).exists() or sha256(path) != digest:
            raise ConfigError(f"input {path} is missing or changed since the recorded run")
    opts = dict(manifest["options"])
    opts["resume"] = False
    new = execute(manifest["command"], opts, out if out is not None else manifest_path.parent)
    bad = sorted(k for k, v in manifest["outputs"].items() if new["outputs"].get(k) != v)
    return not bad, bad


# -- argument parsing --------------------------------------------------------------


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser():
    ap = argparse.ArgumentParser(prog="minnbart", description="BART-VAR with structured split priors.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="INI configuration file")
        p.add_argument("--out", help="output directory (default: [output] dir)")
        return p

    with_config(sub.add_parser("transform", help="write the transformed panel"))
    p = with_config(sub.add_parser("fit", help="run the sampler and save the chain"))
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in the output directory")
    p = with_config(sub.add_parser("forecast", help="predictive summaries from the end of the sample"))
    p.add_argument("--chain", required=True)
    p.add_argument("--horizons", type=int, default=None, help="default: [evaluation] h_max")
    p = with_config(sub.add_parser("evaluate", help="expanding-window evaluation"))
    p.add_argument("--jobs", type=int, default=None, help="worker processes over refit blocks")
    p = sub.add_parser("pip", help="posterior inclusion probabilities of a saved chain")
    p.add_argument("--chain", required=True)
    p.add_argument("--out", default=".")
    p = sub.add_parser("prior-draws", help="draws from a Dirichlet on the simplex")
    p.add_argument("--alpha", type=_floats, required=True, help="comma-separated concentrations")
    p.add_argument("--draws", type=int, default=5000)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default=".")
    p = sub.add_parser("replay", help="re-run a manifest and verify its outputs")
    p.add_argument("manifest")
    p.add_argument("--out", default=None)
    return ap


def _options(args):
    """Resolve parsed arguments into the command's option dict and output directory."""
    if args.command in ("pip",):
        return {"chain": str(Path(args.chain).resolve())}, args.out
    if args.command == "prior-draws":
        return {"alpha": args.alpha, "draws": args.draws, "seed": args.seed}, args.out
    cfg = parse_config(args.config)
    out = args.out or cfg.output["dir"]
    if args.command == "evaluate" and args.jobs is not None:
        cfg.evaluation["n_jobs"] = args.jobs
    opts = {"config": cfg.to_dict()}
    if args.command == "fit":
        opts["resume"] = args.resume
    if args.command == "forecast":
        opts["chain"] = str(Path(args.chain).resolve())
        opts["horizons"] = args.horizons or cfg.evaluation["h_max"]
    return opts, out


def _error(code, exc, **extra):
    record = {"status": "error", "exit_code": code, "error": type(exc).__name__, "message": str(exc)}
    record.update(extra)
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "replay":
            ok, bad = replay(args.manifest, args.out)
            print(json.dumps({"status": "ok" if ok else "mismatch", "mismatched": bad}))
            return EXIT_OK if ok else EXIT_FAIL
        opts, out = _options(args)
        manifest = execute(args.command, opts, out)
        print(json.dumps({"status": "ok", "outputs": sorted(manifest["outputs"])}))
        return EXIT_OK
    except ConfigError as exc:
        return _error(EXIT_CONFIG, exc, field=exc.field)
    except (NumericalError, EvaluationError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return _error(EXIT_NUMERIC, exc)
    except (DataError, DegenerateVarianceError, ConfigurationError, OSError, ValueError) as exc:
        return _error(EXIT_CONFIG, exc)
    except CheckpointError as exc:
        return _error(EXIT_FAIL, exc, manifest=exc.manifest)
