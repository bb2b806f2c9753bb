"""Poisson-latent autoencoder: configuration, model, losses, evaluation.

The encoder is three affine + batch-norm + activation blocks followed by
an affine head mapped to strictly positive rates. The latent exposures
are exact Poisson draws obtained by counting exponential waiting times
in [0, 1]; their gradient path is a sigmoid relaxation of the
cumulative-sum comparisons (straight-through on the hard count). The
decoder is a single non-negative matrix, row-normalized in the forward
pass so reconstruction row sums track exposure row sums.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import gammaln

from . import autodiff as ad
from .kernels import poisson_relax
from .nmf import PriorRates

ACTIVATIONS = ("relu", "softplus")

RATE_EPS = 1e-6  # floor added to encoder rates
RECON_EPS = 1e-10  # inside log of the reconstruction likelihood

__all__ = [
    "ACTIVATIONS",
    "VaeConfig",
    "VaeModel",
    "TrainedModel",
    "EvalResult",
    "PoissonSample",
    "build_model",
    "encode",
    "decode",
    "signature_matrix",
    "kl_poisson",
    "sample_poisson_reparam",
    "default_series_cap",
    "elbo_loss",
    "build_elbo_tape",
    "forward_eval",
]


@dataclass
class VaeConfig:
    """Model and training hyperparameters."""

    k: int
    hidden_dims: tuple = (96, 48, 24)
    activation: str = "softplus"
    beta: float = 0.5
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 2000
    patience: int = 50
    relax_temperature: float = 0.1
    series_cap: int | None = None  # None: adaptive max(50, lam_max + 10*sqrt(lam_max))
    seed: int = 0

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.k < 1:
            raise ValueError("config: k must be >= 1")
        if len(self.hidden_dims) != 3:
            raise ValueError("config: hidden_dims must have three widths")
        if not (self.hidden_dims[0] > self.hidden_dims[1] > self.hidden_dims[2]):
            raise ValueError(f"config: hidden_dims must be strictly decreasing, got {self.hidden_dims}")
        if self.hidden_dims[2] < self.k:
            raise ValueError(
                f"config: final hidden width {self.hidden_dims[2]} must be >= k={self.k}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"config: activation must be one of {ACTIVATIONS}")
        if self.beta <= 0.0:
            raise ValueError("config: beta must be positive")
        if self.learning_rate <= 0.0:
            raise ValueError("config: learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("config: batch_size, max_epochs and patience must be >= 1")
        if self.relax_temperature <= 0.0:
            raise ValueError("config: relax_temperature must be positive")
        if self.series_cap is not None and self.series_cap < 1:
            raise ValueError("config: series_cap must be >= 1 when set")

    def to_dict(self):
        return asdict(self)


class VaeModel:
    """Encoder/decoder parameters plus batch-norm running state."""

    def __init__(self, m, config):
        self.m = int(m)
        self.config = config
        rng = np.random.default_rng(config.seed)
        widths = (self.m,) + config.hidden_dims
        self.blocks = []
        for i in range(3):
            fan_in, fan_out = widths[i], widths[i + 1]
            bound = math.sqrt(1.0 / fan_in)
            self.blocks.append(
                {
                    "w": ad.Parameter(rng.uniform(-bound, bound, (fan_in, fan_out)), f"enc{i}_w"),
                    "b": ad.Parameter(np.zeros(fan_out), f"enc{i}_b"),
                    "gamma": ad.Parameter(np.ones(fan_out), f"enc{i}_gamma"),
                    "beta": ad.Parameter(np.zeros(fan_out), f"enc{i}_beta"),
                    "state": ad.BatchNormState(fan_out),
                }
            )
        bound = math.sqrt(1.0 / widths[-1])
        self.head_w = ad.Parameter(rng.uniform(-bound, bound, (widths[-1], config.k)), "head_w")
        self.head_b = ad.Parameter(np.zeros(config.k), "head_b")
        # Decoder stored unconstrained; softplus + row normalization in the forward pass.
        self.dec_h = ad.Parameter(ad.softplus_inv(rng.uniform(0.1, 1.1, (config.k, self.m))), "dec_h")
        self.truncated_draws = 0
        self.total_draws = 0

    def parameters(self):
        params = []
        for blk in self.blocks:
            params.extend([blk["w"], blk["b"], blk["gamma"], blk["beta"]])
        params.extend([self.head_w, self.head_b, self.dec_h])
        return params

    def snapshot(self):
        values = [p.value.copy() for p in self.parameters()]
        states = [blk["state"].copy() for blk in self.blocks]
        return values, states

    def restore(self, snap):
        values, states = snap
        for p, v in zip(self.parameters(), values):
            p.value[...] = v
        for blk, st in zip(self.blocks, states):
            blk["state"] = st.copy()


def build_model(m, config, h_init=None):
    """Fresh model with seeded fan-in initialization.

    When ``h_init`` (rows of a prior NMF basis) is given, the decoder
    starts at those rows, row-normalized and mapped back through the
    softplus non-negativity map.
    """
    if m < 1:
        raise ValueError("build_model: channel count must be >= 1")
    model = VaeModel(m, config)
    if h_init is not None:
        h_init = np.asarray(h_init, dtype=np.float64)
        if h_init.shape != (config.k, m):
            raise ValueError(f"build_model: h_init shape {h_init.shape} != ({config.k}, {m})")
        rows = h_init.sum(axis=1)
        if np.any(rows <= 0.0):
            raise ValueError("build_model: h_init has a zero row")
        scaled = np.maximum(h_init / rows[:, None], 1e-8)
        model.dec_h.value[...] = ad.softplus_inv(scaled)
    return model


def default_series_cap(rates, configured=None):
    """Series truncation: max(50, lam_max + 10*sqrt(lam_max)) unless pinned."""
    if configured is not None:
        return int(configured)
    lam_max = float(np.max(rates))
    return max(50, int(math.ceil(lam_max + 10.0 * math.sqrt(lam_max))))


def _rates_on_tape(tape, model, x, training, update_running):
    h = x
    for blk in model.blocks:
        h = tape.affine(h, tape.parameter(blk["w"]), tape.parameter(blk["b"]))
        h = tape.batchnorm(
            h,
            tape.parameter(blk["gamma"]),
            tape.parameter(blk["beta"]),
            blk["state"],
            training=training,
            update_running=update_running,
        )
        h = tape.softplus(h) if model.config.activation == "softplus" else tape.relu(h)
    head = tape.affine(h, tape.parameter(model.head_w), tape.parameter(model.head_b))
    return tape.add_scalar(tape.softplus(head), RATE_EPS)


def _signatures_on_tape(tape, model):
    return tape.row_normalize(tape.softplus(tape.parameter(model.dec_h)))


def build_elbo_tape(
    model,
    v_batch,
    lambda0,
    beta,
    *,
    rng=None,
    draws=None,
    training=False,
    update_running=False,
    relaxed=False,
):
    """Record one forward pass of the negated beta-ELBO.

    Returns (tape, ids) where ids has node ids for loss, recon, kl,
    rates, sample, vhat. The reconstruction term is the Poisson negative
    log-likelihood (log-factorials included via log-gamma); the KL term
    is the raw rate divergence, weighted by beta only inside the loss.
    Exactly one of ``rng``/``draws`` supplies the sampler noise.
    """
    v_batch = np.asarray(v_batch, dtype=np.float64)
    lambda0 = np.asarray(lambda0, dtype=np.float64)
    if v_batch.ndim != 2 or v_batch.shape[1] != model.m:
        raise ValueError(f"elbo: batch shape {v_batch.shape} incompatible with {model.m} channels")
    if not np.all(np.isfinite(v_batch)):
        raise ValueError("elbo: non-finite entries in batch")
    if lambda0.shape != (v_batch.shape[0], model.config.k):
        raise ValueError(f"elbo: prior shape {lambda0.shape} != {(v_batch.shape[0], model.config.k)}")
    if np.any(lambda0 <= 0.0):
        raise ValueError("elbo: prior rates must be strictly positive")
    if beta <= 0.0:
        raise ValueError("elbo: beta must be positive")

    tape = ad.Tape()
    x = tape.constant(v_batch)
    rates = _rates_on_tape(tape, model, x, training, update_running)

    if draws is None:
        if rng is None:
            raise ValueError("elbo: need an rng or pre-drawn noise")
        cap = default_series_cap(tape.value(rates), model.config.series_cap)
        draws = rng.standard_exponential((v_batch.shape[0] * model.config.k, cap))
    w = tape.poisson_sample(rates, draws, model.config.relax_temperature, relaxed=relaxed)

    h = _signatures_on_tape(tape, model)
    vhat = tape.matmul(w, h)

    log_vhat = tape.log(tape.add_scalar(vhat, RECON_EPS))
    lgamma_total = float(gammaln(v_batch + 1.0).sum())
    recon = tape.add(
        tape.add(tape.scale(tape.sum(tape.mul(x, log_vhat)), -1.0), tape.sum(vhat)),
        tape.constant(lgamma_total),
    )

    c_l0 = tape.constant(lambda0)
    c_log_l0 = tape.constant(np.log(lambda0))
    kl = tape.sum(
        tape.add(tape.sub(c_l0, rates), tape.mul(rates, tape.sub(tape.log(rates), c_log_l0)))
    )

    loss = tape.add(recon, tape.scale(kl, beta))
    ids = {"loss": loss, "recon": recon, "kl": kl, "rates": rates, "sample": w, "vhat": vhat}
    return tape, ids


def elbo_loss(model, v_batch, prior, beta, seed=0):
    """Negated beta-ELBO of one batch: (loss, reconstruction NLL, raw KL).

    Evaluation-mode forward with one reparameterized sample drawn from
    ``seed``. ``loss = recon + beta * kl``.
    """
    lambda0 = prior.lambda0 if isinstance(prior, PriorRates) else prior
    rng = np.random.default_rng(seed)
    tape, ids = build_elbo_tape(model, v_batch, lambda0, beta, rng=rng)
    return (
        float(tape.value(ids["loss"])),
        float(tape.value(ids["recon"])),
        float(tape.value(ids["kl"])),
    )


def encode(model, v):
    """Evaluation-mode rates for a batch; strictly positive, batch x K."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != model.m:
        raise ValueError(f"encode: batch shape {v.shape} incompatible with {model.m} channels")
    if not np.all(np.isfinite(v)):
        raise ValueError("encode: non-finite entries in batch")
    tape = ad.Tape()
    rates = _rates_on_tape(tape, model, tape.constant(v), training=False, update_running=False)
    return tape.value(rates).copy()


def signature_matrix(model):
    """Current decoder as a row-stochastic K x M matrix."""
    h = ad.softplus(model.dec_h.value)
    return h / (h.sum(axis=1) + 1e-12)[:, None]


def decode(model, w):
    """Reconstruction W @ H with the row-stochastic decoder."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] != model.config.k:
        raise ValueError(f"decode: exposure shape {w.shape} incompatible with k={model.config.k}")
    if np.any(w < 0.0):
        raise ValueError("decode: exposures must be non-negative")
    return w @ signature_matrix(model)


def kl_poisson(lambda_q, lambda_0):
    """Closed-form Poisson KL divergence summed over all entries.

    D(q || p) = lambda_0 - lambda_q + lambda_q * log(lambda_q / lambda_0),
    non-negative and zero iff the rates coincide.
    """
    lq = np.asarray(lambda_q, dtype=np.float64)
    l0 = np.asarray(lambda_0, dtype=np.float64)
    if lq.shape != l0.shape:
        raise ValueError(f"kl_poisson: shape mismatch {lq.shape} vs {l0.shape}")
    if np.any(lq <= 0.0) or np.any(l0 <= 0.0):
        raise ValueError("kl_poisson: rates must be strictly positive")
    total = float((l0 - lq + lq * np.log(lq / l0)).sum())
    return max(total, 0.0)


@dataclass
class PoissonSample:
    """One reparameterized draw: hard counts plus the relaxed gradient path."""

    counts: np.ndarray
    soft_counts: np.ndarray
    dcount_dlam: np.ndarray
    truncated: int
    cap: int


def sample_poisson_reparam(rates, seed, tau=0.1, cap=None):
    """Exact Poisson draw by waiting-time counting, with relaxed gradients.

    The forward value counts exponential waiting times 1/lam * E_j until
    their cumulative sum leaves [0, 1], truncated at ``cap`` (adaptive by
    default); the gradient path applies a temperature-``tau`` sigmoid to
    each cumulative-sum comparison.
    """
    rates = np.asarray(rates, dtype=np.float64)
    if np.any(rates <= 0.0):
        raise ValueError("sample_poisson_reparam: rates must be strictly positive")
    if tau <= 0.0:
        raise ValueError("sample_poisson_reparam: tau must be positive")
    cap = default_series_cap(rates, cap)
    if cap < 1:
        raise ValueError("sample_poisson_reparam: cap must be >= 1")
    rng = np.random.default_rng(seed)
    flat = np.ascontiguousarray(rates.ravel())
    draws = rng.standard_exponential((flat.size, cap))
    hard, soft, dsoft, truncated = poisson_relax(flat, draws, float(tau))
    return PoissonSample(
        counts=hard.reshape(rates.shape),
        soft_counts=soft.reshape(rates.shape),
        dcount_dlam=dsoft.reshape(rates.shape),
        truncated=truncated,
        cap=cap,
    )


@dataclass
class TrainedModel:
    """A trained model bundled with its priors and training report."""

    model: VaeModel
    config: VaeConfig
    report: "TrainReport"
    lambda0_train: np.ndarray
    lambda0_val: np.ndarray


@dataclass
class TrainReport:
    """Per-epoch losses and the early-stopping outcome."""

    epoch_train_losses: list = field(default_factory=list)
    epoch_val_losses: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_reason: str = ""
    final_train_loss: float = float("nan")
    truncated_draws: int = 0
    total_draws: int = 0

    def to_dict(self):
        return {
            "epoch_train_losses": [float(x) for x in self.epoch_train_losses],
            "epoch_val_losses": [float(x) for x in self.epoch_val_losses],
            "best_epoch": int(self.best_epoch),
            "stopped_reason": self.stopped_reason,
            "final_train_loss": float(self.final_train_loss),
            "truncated_draws": int(self.truncated_draws),
            "total_draws": int(self.total_draws),
        }


@dataclass
class EvalResult:
    """Posterior-mean exposures, signatures, reconstruction, and CI bounds."""

    w_hat: np.ndarray
    h: np.ndarray
    v_hat: np.ndarray
    lo: np.ndarray
    hi: np.ndarray


def forward_eval(trained, v, n_samples=1000, seed=0, level=0.95):
    """Deterministic exposures plus Monte Carlo credibility intervals.

    ``w_hat`` is the encoder rate matrix (the Poisson posterior mean), so
    it is identical across calls; the per-entry interval bounds are
    empirical quantiles of ``n_samples`` Poisson draws at those rates.
    The point reconstruction is rate-based: ``v_hat = w_hat @ H``.
    """
    if n_samples < 1:
        raise ValueError("forward_eval: n_samples must be >= 1")
    model = trained.model if isinstance(trained, TrainedModel) else trained
    w_hat = encode(model, v)
    h = signature_matrix(model)
    v_hat = w_hat @ h

    alpha = (1.0 - level) / 2.0
    rng = np.random.default_rng(seed)
    flat = w_hat.ravel()
    lo = np.empty_like(flat)
    hi = np.empty_like(flat)
    chunk = max(1, int(2e7) // max(1, n_samples))
    for start in range(0, flat.size, chunk):
        lam = flat[start : start + chunk]
        draws = rng.poisson(lam=lam[None, :], size=(n_samples, lam.size))
        lo[start : start + chunk] = np.quantile(draws, alpha, axis=0, method="inverted_cdf")
        hi[start : start + chunk] = np.quantile(draws, 1.0 - alpha, axis=0, method="inverted_cdf")
    return EvalResult(
        w_hat=w_hat, h=h, v_hat=v_hat, lo=lo.reshape(w_hat.shape), hi=hi.reshape(w_hat.shape)
    )
