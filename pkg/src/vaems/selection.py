"""Hyperparameter search, stability runs, and signature-count selection.

The sweep is a seeded random search over the declared domains (the
original Bayesian-optimization machinery is out of scope and immaterial
at ten trials). Stability retrains the winning configuration with
shifted seeds; the signature count maximizes silhouette minus min-max
normalized mean validation loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import normalize_100x
from .metrics import align_hungarian, cosine_matrix, gkl, write_csv
from .model import VaeConfig, build_model, signature_matrix
from .nmf import nmf_fit, project_exposures, scale_factorization
from .training import TrainingDiverged, make_priors, train

SWEEP_COLUMNS = (
    "split", "k", "trial", "seed", "learning_rate", "beta", "activation",
    "hidden1", "hidden2", "hidden3", "batch_size", "best_epoch", "val_loss", "status",
)
STABILITY_COLUMNS = ("split", "method", "k", "run", "seed", "best_epoch", "val_loss", "status")
K_SELECTION_COLUMNS = (
    "split", "method", "k", "mean_val_loss", "normalized_loss", "silhouette", "score", "chosen",
)

__all__ = [
    "SweepSpace",
    "SweepTrial",
    "SweepDiverged",
    "StabilityResult",
    "StabilityError",
    "sweep",
    "stability_runs",
    "nmf_stability_runs",
    "select_k",
    "signature_silhouette",
    "write_sweep_csv",
    "write_stability_csv",
    "write_k_selection_csv",
]


@dataclass
class SweepSpace:
    """Search domains; log-uniform for rates/weights, ranges for widths."""

    learning_rate: tuple = (1e-4, 1e-2)
    beta: tuple = (0.01, 2.0)
    activations: tuple = ("relu", "softplus")
    hidden1: tuple = (64, 160)
    hidden2: tuple = (32, 63)
    hidden3: tuple = (12, 31)
    batch_sizes: tuple = (32, 64, 128)
    n_trials: int = 10

    def sample(self, rng, k, base):
        """One configuration; every draw satisfies the config invariants."""
        lr = 10.0 ** rng.uniform(np.log10(self.learning_rate[0]), np.log10(self.learning_rate[1]))
        beta = 10.0 ** rng.uniform(np.log10(self.beta[0]), np.log10(self.beta[1]))
        activation = self.activations[rng.integers(len(self.activations))]
        h3_lo = max(self.hidden3[0], k)
        h3 = int(rng.integers(h3_lo, max(self.hidden3[1], h3_lo) + 1))
        h2_lo = max(self.hidden2[0], h3 + 1)
        h2 = int(rng.integers(h2_lo, max(self.hidden2[1], h2_lo) + 1))
        h1_lo = max(self.hidden1[0], h2 + 1)
        h1 = int(rng.integers(h1_lo, max(self.hidden1[1], h1_lo) + 1))
        batch = int(self.batch_sizes[rng.integers(len(self.batch_sizes))])
        return replace(
            base,
            k=k,
            learning_rate=float(lr),
            beta=float(beta),
            activation=str(activation),
            hidden_dims=(h1, h2, h3),
            batch_size=batch,
        )


@dataclass
class SweepTrial:
    trial: int
    config: VaeConfig
    best_epoch: int | None = None
    val_loss: float | None = None
    error: str | None = None


class SweepDiverged(RuntimeError):
    """Every sweep trial produced a non-finite validation loss."""

    def __init__(self, trials):
        self.trials = trials
        detail = "; ".join(f"trial {t.trial}: {t.error}" for t in trials)
        super().__init__(f"all sweep trials diverged ({detail})")


class StabilityError(RuntimeError):
    """More than half of the stability runs diverged."""


@dataclass
class StabilityResult:
    """Outcome of repeated trainings at one configuration."""

    k: int
    models: list
    signature_sets: list
    val_losses: list
    mean_val_loss: float
    silhouette: float
    failures: int = 0
    run_records: list = field(default_factory=list)


def _train_task(task):
    v_train, v_val, h_init, prior_train, prior_val, config = task
    model = build_model(v_train.shape[1], config, h_init=h_init)
    try:
        trained, report = train(model, v_train, v_val, prior_train, prior_val)
    except TrainingDiverged as exc:
        return None, str(exc)
    return trained, None


def _pool_map(fn, tasks, n_jobs):
    if n_jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=n_jobs) as ex:
        return list(ex.map(fn, tasks))


def sweep(v_train, v_val, k, space, seed, *, base_config=None, priors=None, n_jobs=1):
    """Random search minimizing best-epoch validation loss.

    Returns (best config, list of SweepTrial). Diverged trials are kept
    in the log; if every trial diverges, raises SweepDiverged.
    """
    if space.n_trials < 1:
        raise ValueError("sweep: n_trials must be >= 1")
    base = base_config if base_config is not None else VaeConfig(k=k)
    if base.k != k:
        base = replace(base, k=k)
    if priors is None:
        priors = make_priors(v_train, v_val, k, seed=seed)
    prior_train, prior_val, fac = priors

    rng = np.random.default_rng(seed)
    trial_seeds = np.random.SeedSequence(seed).generate_state(space.n_trials)
    configs = [
        replace(space.sample(rng, k, base), seed=int(trial_seeds[t]))
        for t in range(space.n_trials)
    ]
    tasks = [(v_train, v_val, fac.H, prior_train, prior_val, cfg) for cfg in configs]
    outcomes = _pool_map(_train_task, tasks, n_jobs)

    trials = []
    for t, (cfg, (trained, err)) in enumerate(zip(configs, outcomes)):
        if trained is None:
            trials.append(SweepTrial(trial=t, config=cfg, error=err))
        else:
            report = trained.report
            trials.append(
                SweepTrial(
                    trial=t,
                    config=cfg,
                    best_epoch=report.best_epoch,
                    val_loss=float(report.epoch_val_losses[report.best_epoch - 1]),
                )
            )
    finite = [t for t in trials if t.val_loss is not None and np.isfinite(t.val_loss)]
    if not finite:
        raise SweepDiverged(trials)
    best = min(finite, key=lambda t: (t.val_loss, t.trial))
    return best.config, trials


def stability_runs(v_train, v_val, config, *, runs=10, n_jobs=1, nmf_iters=2000, nmf_tol=1e-6):
    """Retrain `runs` models at seeds config.seed+1..config.seed+runs.

    Each run re-fits its own prior NMF with the run seed, so runs differ
    in initialization end to end (otherwise a shared decoder start would
    make every run look stable). Diverged runs are excluded and counted;
    more than five failures is an error. The silhouette is computed
    across the runs' signature sets, the mean validation loss over the
    per-run best epochs.
    """
    configs = [replace(config, seed=config.seed + i) for i in range(1, runs + 1)]
    tasks = []
    for cfg in configs:
        prior_train, prior_val, fac = make_priors(
            v_train, v_val, config.k, seed=cfg.seed, iters=nmf_iters, tol=nmf_tol
        )
        tasks.append((v_train, v_val, fac.H, prior_train, prior_val, cfg))
    outcomes = _pool_map(_train_task, tasks, n_jobs)

    models, sets, losses, records = [], [], [], []
    failures = 0
    for run, (cfg, (trained, err)) in enumerate(zip(configs, outcomes), start=1):
        record = {"run": run, "seed": cfg.seed, "k": config.k}
        if trained is None:
            failures += 1
            record.update({"status": f"diverged: {err}", "best_epoch": None, "val_loss": None})
        else:
            report = trained.report
            loss = float(report.epoch_val_losses[report.best_epoch - 1])
            models.append(trained)
            sets.append(signature_matrix(trained.model))
            losses.append(loss)
            record.update({"status": "ok", "best_epoch": report.best_epoch, "val_loss": loss})
        records.append(record)
    if failures > 5:
        raise StabilityError(f"{failures} of {runs} stability runs diverged")

    silhouette = signature_silhouette(sets) if len(sets) >= 2 else 0.0
    return StabilityResult(
        k=config.k,
        models=models,
        signature_sets=sets,
        val_losses=losses,
        mean_val_loss=float(np.mean(losses)),
        silhouette=silhouette,
        failures=failures,
        run_records=records,
    )


def nmf_stability_runs(v_fit, v_val, k, seed, *, runs=10, iters=2000, tol=1e-6, project_iters=200):
    """Stability replicates for the deterministic baseline.

    Each run is one seeded KL-NMF fit of the (normalized) fit data; the
    per-run validation loss is the per-sample generalized KL of the
    validation rows reconstructed against the frozen basis.
    """
    vf, _ = normalize_100x(np.asarray(v_fit, dtype=np.float64))
    vv, _ = normalize_100x(np.asarray(v_val, dtype=np.float64))
    models, sets, losses, records = [], [], [], []
    for run in range(1, runs + 1):
        fac = nmf_fit(vf, k, iters=iters, seed=seed + run, tol=tol)
        _, h_scaled = scale_factorization(fac.W, fac.H)
        w_val = project_exposures(vv, h_scaled, iters=project_iters)
        loss = gkl(vv, np.maximum(w_val @ h_scaled, 1e-12))
        models.append(fac)
        sets.append(h_scaled)
        losses.append(loss)
        records.append(
            {"run": run, "seed": seed + run, "k": k, "status": "ok",
             "best_epoch": len(fac.loss_trace) - 1, "val_loss": loss}
        )
    silhouette = signature_silhouette(sets) if len(sets) >= 2 else 0.0
    return StabilityResult(
        k=k,
        models=models,
        signature_sets=sets,
        val_losses=losses,
        mean_val_loss=float(np.mean(losses)),
        silhouette=silhouette,
        run_records=records,
    )


def select_k(results):
    """Pick the k maximizing silhouette minus min-max-normalized loss.

    ``results`` maps each candidate k to its StabilityResult. Ties break
    toward the smaller k.
    """
    if len(results) < 2:
        raise ValueError("select_k: need at least two candidate k values")
    ks = sorted(results)
    losses = np.array([results[k].mean_val_loss for k in ks], dtype=np.float64)
    spread = losses.max() - losses.min()
    norm = (losses - losses.min()) / spread if spread > 0 else np.zeros_like(losses)
    scores = np.array([results[k].silhouette for k in ks]) - norm
    best_idx = 0
    for i in range(1, len(ks)):
        if scores[i] > scores[best_idx]:
            best_idx = i
    return ks[best_idx]


def _medoid(rows):
    d = 1.0 - cosine_matrix(rows, rows)
    return rows[int(np.argmin(d.sum(axis=1)))]


def signature_silhouette(sets, refine_passes=2):
    """Cross-run labeling consistency via cosine-distance silhouette.

    Each set is Hungarian-matched to a consensus set (medoid rows,
    iteratively refined); the silhouette is computed over all R*K
    signatures with distance 1 - cosine. Singleton clusters score 0;
    a single signature per set (K = 1) scores 0 by convention.
    """
    sets = [np.asarray(s, dtype=np.float64) for s in sets]
    if len(sets) < 2:
        raise ValueError("signature_silhouette: need at least two signature sets")
    shape = sets[0].shape
    if any(s.shape != shape for s in sets):
        raise ValueError("signature_silhouette: sets must share K and M")
    k = shape[0]
    if k == 1:
        return 0.0

    consensus = sets[0]
    labels = None
    for _ in range(refine_passes + 1):
        labels = [align_hungarian(s, consensus).permutation for s in sets]
        consensus = np.vstack(
            [
                _medoid(np.vstack([s[np.flatnonzero(lab == c)[0]] for s, lab in zip(sets, labels)]))
                for c in range(k)
            ]
        )

    points = np.vstack(sets)
    labs = np.concatenate(labels)
    d = 1.0 - cosine_matrix(points, points)
    scores = np.zeros(points.shape[0])
    for i in range(points.shape[0]):
        same = np.flatnonzero((labs == labs[i]))
        same = same[same != i]
        if same.size == 0:
            continue  # singleton cluster
        a = d[i, same].mean()
        b = min(d[i, labs == c].mean() for c in range(k) if c != labs[i])
        denom = max(a, b)
        scores[i] = (b - a) / denom if denom > 0 else 0.0
    return float(scores.mean())


def write_sweep_csv(path, rows):
    write_csv(path, SWEEP_COLUMNS, rows)


def write_stability_csv(path, rows):
    write_csv(path, STABILITY_COLUMNS, rows)


def write_k_selection_csv(path, rows):
    write_csv(path, K_SELECTION_COLUMNS, rows)
