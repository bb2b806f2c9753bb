"""Optimizer, early stopping, and the beta-ELBO training loop."""

from __future__ import annotations

import numpy as np
from scipy.special import gammaln

from . import autodiff as ad
from .data import normalize_100x
from .model import TrainedModel, TrainReport, build_elbo_tape, encode, kl_poisson, signature_matrix
from .nmf import PriorRates, nmf_fit, prior_rates_from_nmf, project_exposures

__all__ = [
    "Adam",
    "EarlyStopper",
    "TrainingDiverged",
    "make_priors",
    "train",
]


class TrainingDiverged(RuntimeError):
    """A training or validation loss became non-finite."""

    def __init__(self, epoch, loss):
        self.epoch = epoch
        super().__init__(f"non-finite loss {loss} at epoch {epoch}")


class Adam:
    """Adaptive-moment gradient descent over a fixed parameter list."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad**2
            p.value -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


class EarlyStopper:
    """Stop once the tracked loss has not strictly improved for `patience` epochs."""

    def __init__(self, patience):
        self.patience = int(patience)
        self.best = float("inf")
        self.best_epoch = 0
        self.epoch = 0
        self.since_best = 0

    def update(self, loss):
        """Record one epoch's loss; returns True when it improved the best."""
        self.epoch += 1
        if loss < self.best:
            self.best = loss
            self.best_epoch = self.epoch
            self.since_best = 0
            return True
        self.since_best += 1
        return False

    @property
    def should_stop(self):
        return self.since_best >= self.patience


def make_priors(v_train, v_val, k, seed=0, iters=2000, tol=1e-6):
    """Fit the prior NMF on normalized training data and project validation rows.

    Validation samples get prior rates from one multiplicative W-update
    pass against the frozen basis. Returns (train PriorRates,
    validation PriorRates, the NMF factorization).
    """
    vt, _ = normalize_100x(np.asarray(v_train, dtype=np.float64))
    vv, _ = normalize_100x(np.asarray(v_val, dtype=np.float64))
    fac = nmf_fit(vt, k, iters=iters, seed=seed, tol=tol)
    prior_train = prior_rates_from_nmf(fac)
    w_val = project_exposures(vv, fac.H, iters=1)
    s = fac.H.sum(axis=1)
    prior_val = PriorRates(lambda0=np.maximum(w_val * s[None, :], 1e-6))
    return prior_train, prior_val, fac


def _plugin_loss(model, v, lambda0, beta):
    """Deterministic beta-objective: NLL at the posterior-mean exposures plus KL.

    Replacing the latent draw by its mean removes Monte Carlo jitter, so
    epoch-to-epoch comparisons (early stopping, sweep and k selection)
    are noise-free. The training objective itself keeps the sampled path.
    """
    rates = encode(model, v)
    v_hat = rates @ signature_matrix(model)
    recon = float(-(v * np.log(v_hat + 1e-10) - v_hat - gammaln(v + 1.0)).sum())
    return recon + beta * kl_poisson(rates, lambda0)


def _sampled_loss(model, v, lambda0, beta, rng, batch_size):
    """Summed eval-mode beta-ELBO over `v`, one latent sample per batch."""
    total = 0.0
    truncated = 0
    draws = 0
    for start in range(0, v.shape[0], batch_size):
        batch = v[start : start + batch_size]
        lam0 = lambda0[start : start + batch_size]
        tape, ids = build_elbo_tape(model, batch, lam0, beta, rng=rng)
        total += float(tape.value(ids["loss"]))
        truncated += tape.nodes[ids["sample"]].meta["truncated"]
        draws += batch.shape[0] * model.config.k
    return total, truncated, draws


def train(model, v_train, v_val, prior_train, prior_val):
    """Minimize the negated beta-ELBO with Adam and patience-based stopping.

    Training and validation inputs are 100X-normalized for optimization
    only. The per-epoch validation loss is the deterministic plug-in
    beta-objective (see _plugin_loss); parameters are restored to the
    best validation epoch. The reported final training loss is a
    one-sample forward pass of the pooled, unnormalized training and
    validation data through the restored model.
    """
    cfg = model.config
    v_train = np.asarray(v_train, dtype=np.float64)
    v_val = np.asarray(v_val, dtype=np.float64)
    if v_train.shape[0] == 0 or v_val.shape[0] == 0:
        raise ValueError("train: empty split")
    if v_train.shape[1] != model.m or v_val.shape[1] != model.m:
        raise ValueError("train: channel count mismatch between splits and model")
    lam0_train = prior_train.lambda0
    lam0_val = prior_val.lambda0
    if lam0_train.shape != (v_train.shape[0], cfg.k) or lam0_val.shape != (v_val.shape[0], cfg.k):
        raise ValueError("train: prior rows not aligned to split samples")

    vt, _ = normalize_100x(v_train)
    vv, _ = normalize_100x(v_val)

    # Warm-start the head bias at the prior's mean rates so initial
    # encoder rates sit on the data scale instead of softplus(0).
    model.head_b.value[...] = ad.softplus_inv(np.maximum(lam0_train.mean(axis=0), 1e-4))

    opt = Adam(model.parameters(), cfg.learning_rate)
    stopper = EarlyStopper(cfg.patience)
    rng = np.random.default_rng([cfg.seed, 1])
    report = TrainReport()
    best_snap = model.snapshot()
    n = vt.shape[0]

    stopped = "max_epochs"
    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            tape, ids = build_elbo_tape(
                model, vt[idx], lam0_train[idx], cfg.beta,
                rng=rng, training=True, update_running=True,
            )
            loss = float(tape.value(ids["loss"]))
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
            opt.zero_grad()
            tape.backward(ids["loss"])
            opt.step()
            epoch_loss += loss
            report.truncated_draws += tape.nodes[ids["sample"]].meta["truncated"]
            report.total_draws += idx.size * cfg.k

        val_loss = _plugin_loss(model, vv, lam0_val, cfg.beta)
        if not np.isfinite(val_loss):
            raise TrainingDiverged(epoch, val_loss)
        report.epoch_train_losses.append(epoch_loss)
        report.epoch_val_losses.append(val_loss)
        if stopper.update(val_loss):
            best_snap = model.snapshot()
        if stopper.should_stop:
            stopped = "patience"
            break

    model.restore(best_snap)
    report.best_epoch = stopper.best_epoch
    report.stopped_reason = stopped

    pooled = np.vstack([v_train, v_val])
    lam0_pooled = np.vstack([lam0_train, lam0_val])
    final, trunc, drawn = _sampled_loss(
        model, pooled, lam0_pooled, cfg.beta, np.random.default_rng([cfg.seed, 3]), cfg.batch_size
    )
    report.final_train_loss = final
    report.truncated_draws += trunc
    report.total_draws += drawn

    trained = TrainedModel(
        model=model,
        config=cfg,
        report=report,
        lambda0_train=lam0_train.copy(),
        lambda0_val=lam0_val.copy(),
    )
    return trained, report
