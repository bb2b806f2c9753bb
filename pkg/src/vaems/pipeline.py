"""End-to-end drivers shared by the command line and the test suite.

Each driver writes its artifacts under an output directory with fixed
names (catalog.tsv, sweep.csv, stability.csv, k_selection.csv,
metrics.csv, checkpoints/), and returns the list of files it produced.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import replace

import numpy as np

from . import svg
from .checkpoint import (
    load_model_checkpoint,
    load_nmf_checkpoint,
    save_model_checkpoint,
    save_nmf_checkpoint,
)
from .data import load_catalog, load_ground_truth, make_splits, save_catalog, save_ground_truth, simulate
from .metrics import acs_to_truth, align_hungarian, ci_coverage, gkl, mse, pacs, write_metrics_csv
from .model import VaeConfig, forward_eval, signature_matrix
from .nmf import project_exposures, scale_factorization
from .selection import (
    SweepSpace,
    nmf_stability_runs,
    select_k,
    signature_silhouette,
    stability_runs,
    sweep,
    write_k_selection_csv,
    write_stability_csv,
    write_sweep_csv,
)
from .training import make_priors

logger = logging.getLogger(__name__)

RECON_FLOOR = 1e-12  # reconstruction floor before divergence metrics

__all__ = [
    "run_simulate",
    "run_fit",
    "run_select_k",
    "run_evaluate",
    "selection_table",
]


def run_simulate(out_dir, *, k, n, m=96, seed=0, noise="poisson", exposure_scale=1000.0,
                 signature_concentration=0.1):
    """Write a simulated catalog plus its ground-truth bundle."""
    os.makedirs(out_dir, exist_ok=True)
    catalog, truth = simulate(
        k, n, m, seed=seed, noise_mode=noise, exposure_scale=exposure_scale,
        signature_concentration=signature_concentration,
    )
    save_catalog(os.path.join(out_dir, "catalog.tsv"), catalog)
    save_ground_truth(
        os.path.join(out_dir, "signatures_true.tsv"),
        os.path.join(out_dir, "exposures_true.tsv"),
        truth,
        catalog.channel_labels,
        catalog.sample_ids,
    )
    return ["catalog.tsv", "signatures_true.tsv", "exposures_true.tsv"]


def _base_config(k, seed, overrides):
    kwargs = dict(overrides or {})
    kwargs.setdefault("k", k)
    kwargs["seed"] = seed
    return VaeConfig(**kwargs)


def _fit_vae_split(v_train, v_val, k, *, seed, sweep_trials, space, base_overrides,
                   stability, n_jobs, nmf_iters, nmf_tol):
    priors = make_priors(v_train, v_val, k, seed=seed, iters=nmf_iters, tol=nmf_tol)
    base = _base_config(k, seed, base_overrides)
    if sweep_trials >= 1:
        space = replace(space, n_trials=sweep_trials)
        best_config, trials = sweep(
            v_train, v_val, k, space, seed, base_config=base, priors=priors, n_jobs=n_jobs
        )
    else:
        best_config, trials = base, []
    stab = stability_runs(
        v_train, v_val, best_config, runs=stability, n_jobs=n_jobs,
        nmf_iters=nmf_iters, nmf_tol=nmf_tol,
    )
    best_i = int(np.argmin(stab.val_losses))
    return best_config, trials, stab, stab.models[best_i]


def _fit_nmf_split(v_train, v_val, k, *, seed, stability, nmf_iters, nmf_tol):
    v_fit = np.vstack([v_train, v_val])
    stab = nmf_stability_runs(v_fit, v_val, k, seed, runs=stability, iters=nmf_iters, tol=nmf_tol)
    best_i = int(np.argmin(stab.val_losses))
    return stab, stab.models[best_i]


def _write_splits(out_dir, splits):
    payload = [
        {
            "seed": s.seed,
            "train": [int(i) for i in s.train_idx],
            "val": [int(i) for i in s.val_idx],
            "test": [int(i) for i in s.test_idx],
        }
        for s in splits
    ]
    with open(os.path.join(out_dir, "splits.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def _sweep_rows(split, k, trials):
    rows = []
    for t in trials:
        cfg = t.config
        rows.append(
            {
                "split": split, "k": k, "trial": t.trial, "seed": cfg.seed,
                "learning_rate": cfg.learning_rate, "beta": cfg.beta,
                "activation": cfg.activation, "hidden1": cfg.hidden_dims[0],
                "hidden2": cfg.hidden_dims[1], "hidden3": cfg.hidden_dims[2],
                "batch_size": cfg.batch_size, "best_epoch": t.best_epoch,
                "val_loss": t.val_loss, "status": "ok" if t.error is None else f"diverged: {t.error}",
            }
        )
    return rows


def _stability_rows(split, method, stab):
    rows = []
    for rec in stab.run_records:
        rows.append(
            {
                "split": split, "method": method, "k": rec["k"], "run": rec["run"],
                "seed": rec["seed"], "best_epoch": rec["best_epoch"],
                "val_loss": rec["val_loss"], "status": rec["status"],
            }
        )
    return rows


def run_fit(out_dir, *, catalog_path, method, k, splits_seed=0, n_splits=10, seed=0,
            sweep_trials=10, stability=10, n_jobs=1, nmf_iters=2000, nmf_tol=1e-6,
            base_config=None, space=None):
    """Sweep + stability runs (vae) or seeded replicate fits (nmf) per split."""
    if method not in ("vae", "nmf"):
        raise ValueError(f"run_fit: unknown method {method!r}")
    os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
    catalog = load_catalog(catalog_path)
    space = space or SweepSpace()

    splits = [make_splits(catalog.n_samples, splits_seed + si) for si in range(n_splits)]
    _write_splits(out_dir, splits)
    outputs = ["splits.json"]

    sweep_rows, stab_rows = [], []
    for si, split in enumerate(splits):
        v_train = catalog.counts[split.train_idx].astype(np.float64)
        v_val = catalog.counts[split.val_idx].astype(np.float64)
        split_seed = seed + si
        if method == "vae":
            _, trials, stab, best = _fit_vae_split(
                v_train, v_val, k, seed=split_seed, sweep_trials=sweep_trials, space=space,
                base_overrides=base_config, stability=stability, n_jobs=n_jobs,
                nmf_iters=nmf_iters, nmf_tol=nmf_tol,
            )
            sweep_rows.extend(_sweep_rows(si, k, trials))
            for run_i, trained in enumerate(stab.models, start=1):
                name = f"checkpoints/vae_k{k}_split{si:02d}_run{run_i:02d}.ckpt"
                save_model_checkpoint(os.path.join(out_dir, name), trained)
                outputs.append(name)
            name = f"checkpoints/vae_k{k}_split{si:02d}_best.ckpt"
            save_model_checkpoint(os.path.join(out_dir, name), best)
        else:
            stab, best = _fit_nmf_split(
                v_train, v_val, k, seed=split_seed, stability=stability,
                nmf_iters=nmf_iters, nmf_tol=nmf_tol,
            )
            for run_i, fac in enumerate(stab.models, start=1):
                name = f"checkpoints/nmf_k{k}_split{si:02d}_run{run_i:02d}.ckpt"
                save_nmf_checkpoint(os.path.join(out_dir, name), fac,
                                    {"k": k, "split": si, "seed": split_seed + run_i})
                outputs.append(name)
            name = f"checkpoints/nmf_k{k}_split{si:02d}_best.ckpt"
            save_nmf_checkpoint(os.path.join(out_dir, name), best, {"k": k, "split": si})
        outputs.append(name)
        stab_rows.extend(_stability_rows(si, method, stab))

    if method == "vae":
        write_sweep_csv(os.path.join(out_dir, "sweep.csv"), sweep_rows)
        outputs.append("sweep.csv")
    write_stability_csv(os.path.join(out_dir, "stability.csv"), stab_rows)
    outputs.append("stability.csv")
    return outputs


def selection_table(results):
    """Chosen k plus per-k rows with the normalized losses and scores."""
    chosen = select_k(results)
    ks = sorted(results)
    losses = np.array([results[k].mean_val_loss for k in ks], dtype=np.float64)
    spread = losses.max() - losses.min()
    norm = (losses - losses.min()) / spread if spread > 0 else np.zeros_like(losses)
    rows = []
    for i, k in enumerate(ks):
        rows.append(
            {
                "k": k,
                "mean_val_loss": float(losses[i]),
                "normalized_loss": float(norm[i]),
                "silhouette": float(results[k].silhouette),
                "score": float(results[k].silhouette - norm[i]),
                "chosen": int(k == chosen),
            }
        )
    return chosen, rows


def run_select_k(out_dir, *, catalog_path, methods=("nmf", "vae"), k_min, k_max,
                 splits_seed=0, n_splits=10, seed=0, sweep_trials=10, stability=10,
                 n_jobs=1, nmf_iters=2000, nmf_tol=1e-6, base_config=None, space=None):
    """Stability runs for every candidate k, then the silhouette-loss rule."""
    if k_min > k_max:
        raise ValueError(f"run_select_k: k_min={k_min} > k_max={k_max}")
    if k_min == k_max:
        logger.warning("select-k: k range is a single value (%d); it will be chosen trivially", k_min)
    os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
    catalog = load_catalog(catalog_path)
    space = space or SweepSpace()

    splits = [make_splits(catalog.n_samples, splits_seed + si) for si in range(n_splits)]
    _write_splits(out_dir, splits)
    outputs = ["splits.json"]

    ksel_rows, stab_rows, sweep_rows = [], [], []
    chosen_map = {}
    for si, split in enumerate(splits):
        v_train = catalog.counts[split.train_idx].astype(np.float64)
        v_val = catalog.counts[split.val_idx].astype(np.float64)
        split_seed = seed + si
        for method in methods:
            results = {}
            for k in range(k_min, k_max + 1):
                if method == "vae":
                    _, trials, stab, best = _fit_vae_split(
                        v_train, v_val, k, seed=split_seed, sweep_trials=sweep_trials,
                        space=space, base_overrides=base_config, stability=stability,
                        n_jobs=n_jobs, nmf_iters=nmf_iters, nmf_tol=nmf_tol,
                    )
                    sweep_rows.extend(_sweep_rows(si, k, trials))
                    name = f"checkpoints/vae_k{k}_split{si:02d}_best.ckpt"
                    save_model_checkpoint(os.path.join(out_dir, name), best)
                else:
                    stab, best = _fit_nmf_split(
                        v_train, v_val, k, seed=split_seed, stability=stability,
                        nmf_iters=nmf_iters, nmf_tol=nmf_tol,
                    )
                    name = f"checkpoints/nmf_k{k}_split{si:02d}_best.ckpt"
                    save_nmf_checkpoint(os.path.join(out_dir, name), best, {"k": k, "split": si})
                outputs.append(name)
                stab_rows.extend(_stability_rows(si, method, stab))
                results[k] = stab
            if k_min == k_max:
                chosen, rows = k_min, [
                    {"k": k_min, "mean_val_loss": results[k_min].mean_val_loss,
                     "normalized_loss": 0.0, "silhouette": results[k_min].silhouette,
                     "score": results[k_min].silhouette, "chosen": 1}
                ]
            else:
                chosen, rows = selection_table(results)
            chosen_map[f"{method}/split{si:02d}"] = chosen
            for row in rows:
                row.update({"split": si, "method": method})
            ksel_rows.extend(rows)

    write_k_selection_csv(os.path.join(out_dir, "k_selection.csv"), ksel_rows)
    outputs.append("k_selection.csv")
    write_stability_csv(os.path.join(out_dir, "stability.csv"), stab_rows)
    outputs.append("stability.csv")
    if sweep_rows:
        write_sweep_csv(os.path.join(out_dir, "sweep.csv"), sweep_rows)
        outputs.append("sweep.csv")
    with open(os.path.join(out_dir, "chosen_k.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(chosen_map, fh, indent=2, sort_keys=True)
        fh.write("\n")
    outputs.append("chosen_k.json")
    return outputs


def _eval_vae_row(out_dir_run, si, k, v_trainval, v_test, truth_h, truth_w_trainval,
                  truth_w_test, ci_samples, seed):
    path = os.path.join(out_dir_run, f"checkpoints/vae_k{k}_split{si:02d}_best.ckpt")
    trained = load_model_checkpoint(path)
    ev_tr = forward_eval(trained, v_trainval, n_samples=ci_samples, seed=seed)
    ev_te = forward_eval(trained, v_test, n_samples=ci_samples, seed=seed + 1)
    row = {
        "D_KL_train": gkl(v_trainval, np.maximum(ev_tr.v_hat, RECON_FLOOR)),
        "D_KL_test": gkl(v_test, np.maximum(ev_te.v_hat, RECON_FLOOR)),
        "MSE_train": mse(v_trainval, ev_tr.v_hat),
        "MSE_test": mse(v_test, ev_te.v_hat),
    }
    h_est = ev_tr.h
    if truth_h is not None and truth_h.shape[0] == h_est.shape[0]:
        align = align_hungarian(h_est, truth_h)
        row["ACS"] = align.acs
        if truth_w_trainval is not None:
            perm = align.permutation
            lo = np.empty_like(ev_tr.lo); lo[:, perm] = ev_tr.lo
            hi = np.empty_like(ev_tr.hi); hi[:, perm] = ev_tr.hi
            row["CI_train"] = ci_coverage(lo, hi, truth_w_trainval)
            lo = np.empty_like(ev_te.lo); lo[:, perm] = ev_te.lo
            hi = np.empty_like(ev_te.hi); hi[:, perm] = ev_te.hi
            row["CI_test"] = ci_coverage(lo, hi, truth_w_test)
    return row, h_est, trained


def _eval_nmf_row(out_dir_run, si, k, v_trainval, v_test, truth_h):
    path = os.path.join(out_dir_run, f"checkpoints/nmf_k{k}_split{si:02d}_best.ckpt")
    fac, _ = load_nmf_checkpoint(path)
    _, h = scale_factorization(fac.W, fac.H)
    w_tr = project_exposures(v_trainval, h, iters=200)
    w_te = project_exposures(v_test, h, iters=200)
    row = {
        "D_KL_train": gkl(v_trainval, np.maximum(w_tr @ h, RECON_FLOOR)),
        "D_KL_test": gkl(v_test, np.maximum(w_te @ h, RECON_FLOOR)),
        "MSE_train": mse(v_trainval, w_tr @ h),
        "MSE_test": mse(v_test, w_te @ h),
    }
    if truth_h is not None and truth_h.shape[0] == h.shape[0]:
        row["ACS"] = acs_to_truth(h, truth_h)
    return row, h


def _read_k_selection(path):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            fields = dict(zip(header, line.strip().split(",")))
            rows.append(fields)
    return rows


def run_evaluate(out_dir, *, run_dir, catalog_path=None, truth_signatures=None,
                 truth_exposures=None, ci_samples=1000, seed=0):
    """Metric table and report charts from a fit or select-k directory."""
    from .manifest import load_manifest

    os.makedirs(out_dir, exist_ok=True)
    run_manifest = load_manifest(run_dir)
    args = run_manifest["args"]
    catalog_path = catalog_path or args.get("catalog")
    if catalog_path is None:
        raise ValueError("run_evaluate: no catalog path given and none in the run manifest")
    catalog = load_catalog(catalog_path)
    dataset = os.path.splitext(os.path.basename(catalog_path))[0]

    truth_h = truth_w = None
    if truth_signatures:
        truth_h, truth_w = load_ground_truth(truth_signatures, truth_exposures)
    if truth_h is None:
        logger.warning("evaluate: no ground truth supplied; ACS and CI columns will be empty")

    with open(os.path.join(run_dir, "splits.json"), "r", encoding="utf-8") as fh:
        splits = json.load(fh)

    command = run_manifest["command"]
    methods = [args["method"]] if command == "fit" else list(args["methods"])
    ksel_rows = None
    ksel_path = os.path.join(run_dir, "k_selection.csv")
    if os.path.exists(ksel_path):
        ksel_rows = _read_k_selection(ksel_path)

    def k_for(method, si):
        if command == "fit":
            return int(args["k"])
        for row in ksel_rows:
            if row["method"] == method and int(row["split"]) == si and row["chosen"] == "1":
                return int(row["k"])
        raise ValueError(f"run_evaluate: no chosen k for {method} split {si}")

    rows = []
    sets_by_method = {m: [] for m in methods}
    density_source = None
    for method in sorted(methods):
        for si, split in enumerate(splits):
            trainval = np.array(split["train"] + split["val"], dtype=np.int64)
            test = np.array(split["test"], dtype=np.int64)
            v_trainval = catalog.counts[trainval].astype(np.float64)
            v_test = catalog.counts[test].astype(np.float64)
            k = k_for(method, si)
            w_tv = truth_w[trainval] if truth_w is not None else None
            w_te = truth_w[test] if truth_w is not None else None
            if method == "vae":
                row, h_est, trained = _eval_vae_row(
                    run_dir, si, k, v_trainval, v_test, truth_h, w_tv, w_te, ci_samples, seed
                )
                if density_source is None:
                    density_source = (trained, k)
            else:
                row, h_est = _eval_nmf_row(run_dir, si, k, v_trainval, v_test, truth_h)
            sets_by_method[method].append(h_est)
            row.update({"dataset": dataset, "split": si, "model": method, "k": k})
            rows.append(row)

    for method in methods:
        sets = sets_by_method[method]
        if len(sets) >= 2:
            try:
                method_pacs = pacs(sets)
            except ValueError:
                method_pacs = None
            ks = {s.shape[0] for s in sets}
            method_ss = signature_silhouette(sets) if len(ks) == 1 else None
            for row in rows:
                if row["model"] == method:
                    row["PACS"] = method_pacs
                    row["SS"] = method_ss

    rows.sort(key=lambda r: (r["dataset"], r["model"], r["split"]))
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"), rows)
    outputs = ["metrics.csv"]

    if ksel_rows:
        choices = {}
        curves = {}
        for row in ksel_rows:
            method = row["method"]
            if row["chosen"] == "1":
                choices.setdefault(method, []).append(int(row["k"]))
            curves.setdefault(method, {}).setdefault(int(row["k"]), []).append(
                (float(row["mean_val_loss"]), float(row["silhouette"]))
            )
        svg.render_beeswarm(os.path.join(out_dir, "beeswarm.svg"), choices)
        outputs.append("beeswarm.svg")
        ks = sorted({k for per in curves.values() for k in per})
        losses = {
            m: [float(np.mean([v[0] for v in per[k]])) if k in per else float("nan") for k in ks]
            for m, per in curves.items()
        }
        sils = {
            m: [float(np.mean([v[1] for v in per[k]])) if k in per else float("nan") for k in ks]
            for m, per in curves.items()
        }
        svg.render_selection_curves(os.path.join(out_dir, "selection_curves.svg"), ks, losses, sils)
        outputs.append("selection_curves.svg")

    if density_source is not None:
        trained, k = density_source
        ev = forward_eval(trained, catalog.counts.astype(np.float64), n_samples=1, seed=seed)
        panels = []
        if truth_h is not None and truth_h.shape[0] == ev.h.shape[0] and truth_w is not None:
            perm = align_hungarian(ev.h, truth_h).permutation
            w_est = np.empty_like(ev.w_hat)
            w_est[:, perm] = ev.w_hat
            for j in range(truth_h.shape[0]):
                panels.append((f"SIG{j + 1}", truth_w[:, j], w_est[:, j]))
        else:
            for j in range(ev.w_hat.shape[1]):
                panels.append((f"sig {j + 1}", None, ev.w_hat[:, j]))
        svg.render_density(os.path.join(out_dir, "exposure_density.svg"), panels)
        outputs.append("exposure_density.svg")
    return outputs
