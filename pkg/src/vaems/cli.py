"""Command-line interface: simulate, fit, select-k, evaluate, rerun.

Every subcommand writes its outputs under ``--out`` together with a
manifest recording the resolved parameters; ``vaems rerun`` replays a
manifest into a fresh directory, reproducing the CSVs byte for byte.
Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from datetime import datetime, timezone

from . import __version__, pipeline
from .kernels import BACKEND
from .manifest import RunManifest, load_manifest, sha256_file, write_manifest


def _env_seed(value):
    if value is not None:
        return value
    return int(os.environ.get("VAEMS_SEED", "0"))


def _add_seed(parser):
    parser.add_argument("--seed", type=int, default=None,
                        help="base seed (default: $VAEMS_SEED or 0)")


def _add_fit_options(parser):
    parser.add_argument("--catalog", required=True, help="catalog TSV path")
    parser.add_argument("--splits-seed", type=int, default=0)
    parser.add_argument("--n-splits", type=int, default=10,
                        help="number of train/val/test splits (paper protocol: 10)")
    parser.add_argument("--sweep-trials", type=int, default=10,
                        help="random-search trials per (split, k); 0 uses the flag-defined config")
    parser.add_argument("--stability-runs", type=int, default=10)
    parser.add_argument("--jobs", type=int, default=1, help="parallel trainings")
    parser.add_argument("--nmf-iters", type=int, default=2000)
    parser.add_argument("--nmf-tol", type=float, default=1e-6)
    parser.add_argument("--hidden", default="96,48,24", help="encoder widths, comma separated")
    parser.add_argument("--activation", choices=("relu", "softplus"), default="softplus")
    parser.add_argument("--beta", type=float, default=0.5)
    parser.add_argument("--learning-rate", type=float, default=1e-3)
    parser.add_argument("--batch-size", type=int, default=64)
    parser.add_argument("--max-epochs", type=int, default=2000)
    parser.add_argument("--patience", type=int, default=50)
    _add_seed(parser)


def build_parser():
    parser = argparse.ArgumentParser(prog="vaems", description=__doc__)
    parser.add_argument("--version", action="version", version=f"vaems {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic SBS96 catalog with ground truth")
    p.add_argument("--k", type=int, required=True, help="number of true signatures")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--m", type=int, default=96)
    p.add_argument("--noise", choices=("exact", "poisson"), default="poisson")
    p.add_argument("--exposure-scale", type=float, default=1000.0,
                   help="mean total mutations per sample")
    p.add_argument("--signature-concentration", type=float, default=0.1)
    p.add_argument("--out", required=True)
    _add_seed(p)

    p = sub.add_parser("fit", help="extract signatures at a fixed k")
    p.add_argument("--method", choices=("nmf", "vae"), required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--out", required=True)
    _add_fit_options(p)

    p = sub.add_parser("select-k", help="choose the number of signatures")
    p.add_argument("--method", choices=("nmf", "vae", "both"), default="both")
    p.add_argument("--k-min", type=int, required=True)
    p.add_argument("--k-max", type=int, required=True)
    p.add_argument("--out", required=True)
    _add_fit_options(p)

    p = sub.add_parser("evaluate", help="metric table and report charts for a run directory")
    p.add_argument("--run-dir", required=True, help="output directory of fit or select-k")
    p.add_argument("--catalog", default=None, help="catalog TSV (default: from the run manifest)")
    p.add_argument("--truth-signatures", default=None)
    p.add_argument("--truth-exposures", default=None)
    p.add_argument("--ci-samples", type=int, default=1000)
    p.add_argument("--out", required=True)
    _add_seed(p)

    p = sub.add_parser("rerun", help="re-execute a recorded manifest")
    p.add_argument("manifest", help="manifest.json path or its directory")
    p.add_argument("--out", required=True)

    return parser


def _base_config_args(ns):
    hidden = tuple(int(h) for h in ns.hidden.split(","))
    return {
        "hidden_dims": hidden,
        "activation": ns.activation,
        "beta": ns.beta,
        "learning_rate": ns.learning_rate,
        "batch_size": ns.batch_size,
        "max_epochs": ns.max_epochs,
        "patience": ns.patience,
    }


def _finish(command, out_dir, args, outputs, inputs, seed, started):
    manifest = RunManifest(
        command=command,
        args=args,
        version=__version__,
        kernel_backend=BACKEND,
        seed=seed,
        inputs={path: sha256_file(path) for path in inputs if path and os.path.exists(path)},
        outputs=sorted(outputs),
        duration_s=round(time.monotonic() - started, 3),
        created=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )
    write_manifest(out_dir, manifest)


_DISPATCH = {
    "simulate": pipeline.run_simulate,
    "fit": pipeline.run_fit,
    "select-k": pipeline.run_select_k,
    "evaluate": pipeline.run_evaluate,
}


def _run(command, out_dir, args, inputs, seed):
    started = time.monotonic()
    os.makedirs(out_dir, exist_ok=True)
    outputs = _DISPATCH[command](out_dir, **args)
    _finish(command, out_dir, args, outputs, inputs, seed, started)
    return 0


def main(argv=None):
    parser = build_parser()
    ns = parser.parse_args(argv)

    try:
        if ns.command == "simulate":
            seed = _env_seed(ns.seed)
            args = {
                "k": ns.k, "n": ns.n, "m": ns.m, "seed": seed, "noise": ns.noise,
                "exposure_scale": ns.exposure_scale,
                "signature_concentration": ns.signature_concentration,
            }
            return _run("simulate", ns.out, args, [], seed)

        if ns.command == "fit":
            seed = _env_seed(ns.seed)
            args = {
                "catalog_path": ns.catalog, "method": ns.method, "k": ns.k,
                "splits_seed": ns.splits_seed, "n_splits": ns.n_splits, "seed": seed,
                "sweep_trials": ns.sweep_trials, "stability": ns.stability_runs,
                "n_jobs": ns.jobs, "nmf_iters": ns.nmf_iters, "nmf_tol": ns.nmf_tol,
                "base_config": _base_config_args(ns),
            }
            return _run("fit", ns.out, args, [ns.catalog], seed)

        if ns.command == "select-k":
            if ns.k_min > ns.k_max:
                parser.error(f"--k-min {ns.k_min} exceeds --k-max {ns.k_max}")
            seed = _env_seed(ns.seed)
            methods = ("nmf", "vae") if ns.method == "both" else (ns.method,)
            args = {
                "catalog_path": ns.catalog, "methods": list(methods),
                "k_min": ns.k_min, "k_max": ns.k_max,
                "splits_seed": ns.splits_seed, "n_splits": ns.n_splits, "seed": seed,
                "sweep_trials": ns.sweep_trials, "stability": ns.stability_runs,
                "n_jobs": ns.jobs, "nmf_iters": ns.nmf_iters, "nmf_tol": ns.nmf_tol,
                "base_config": _base_config_args(ns),
            }
            return _run("select-k", ns.out, args, [ns.catalog], seed)

        if ns.command == "evaluate":
            seed = _env_seed(ns.seed)
            args = {
                "run_dir": ns.run_dir, "catalog_path": ns.catalog,
                "truth_signatures": ns.truth_signatures,
                "truth_exposures": ns.truth_exposures,
                "ci_samples": ns.ci_samples, "seed": seed,
            }
            inputs = [ns.catalog, ns.truth_signatures, ns.truth_exposures]
            return _run("evaluate", ns.out, args, inputs, seed)

        if ns.command == "rerun":
            recorded = load_manifest(ns.manifest)
            command = recorded["command"]
            if command not in _DISPATCH:
                raise ValueError(f"rerun: manifest command {command!r} is not replayable")
            return _run(command, ns.out, recorded["args"], [], recorded.get("seed"))

        raise AssertionError(f"unhandled command {ns.command}")
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"vaems {ns.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
