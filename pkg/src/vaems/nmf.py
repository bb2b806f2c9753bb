"""KL-divergence NMF with multiplicative updates.

Used twice: to initialize the Poisson prior rates of the autoencoder
(the factorization's weight matrix, rescaled so the basis rows sum to
one) and as the deterministic baseline extractor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS = 1e-12
RATE_FLOOR = 1e-6

__all__ = [
    "NmfFactorization",
    "PriorRates",
    "nmf_fit",
    "scale_factorization",
    "prior_rates_from_nmf",
    "project_exposures",
    "generalized_kl_total",
]


@dataclass
class NmfFactorization:
    """Non-negative factors V ~ W @ H with the per-iteration objective."""

    W: np.ndarray
    H: np.ndarray
    loss_trace: list = field(default_factory=list)

    @property
    def k(self):
        return self.W.shape[1]


@dataclass
class PriorRates:
    """Strictly positive Poisson rates, one row per sample."""

    lambda0: np.ndarray


def generalized_kl_total(V, V_hat):
    """Sum of v*log(v/vhat) - v + vhat over all entries, with 0*log 0 = 0."""
    V = np.asarray(V, dtype=np.float64)
    V_hat = np.asarray(V_hat, dtype=np.float64)
    pos = V > 0.0
    safe = np.maximum(V_hat[pos], EPS)
    return float((V[pos] * np.log(V[pos] / safe)).sum() - V.sum() + V_hat.sum())


def nmf_fit(V, k, iters=2000, seed=0, tol=1e-6):
    """Factorize a non-negative matrix by multiplicative KL updates.

    Initialization is seeded uniform(0.1, 1.1). Stops after ``iters``
    full updates or once the relative objective improvement over a
    10-iteration window falls below ``tol``. ``loss_trace[0]`` is the
    objective at initialization.
    """
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2:
        raise ValueError(f"nmf_fit: expected a matrix, got shape {V.shape}")
    if np.any(V < 0.0):
        raise ValueError("nmf_fit: catalog entries must be non-negative")
    if not np.any(V > 0.0):
        raise ValueError("nmf_fit: all-zero catalog has no KL factorization")
    n, m = V.shape
    if not 1 <= k <= min(n, m):
        raise ValueError(f"nmf_fit: k={k} outside [1, {min(n, m)}]")
    if iters < 1:
        raise ValueError("nmf_fit: iters must be >= 1")

    rng = np.random.default_rng(seed)
    W = rng.uniform(0.1, 1.1, size=(n, k))
    H = rng.uniform(0.1, 1.1, size=(k, m))

    trace = [generalized_kl_total(V, W @ H)]
    for _ in range(iters):
        WH = W @ H
        W *= (V / (WH + EPS)) @ H.T / (H.sum(axis=1)[None, :] + EPS)
        WH = W @ H
        H *= W.T @ (V / (WH + EPS)) / (W.sum(axis=0)[:, None] + EPS)
        trace.append(generalized_kl_total(V, W @ H))
        if len(trace) > 10:
            prev, cur = trace[-11], trace[-1]
            if prev - cur < tol * max(abs(prev), EPS):
                break
    return NmfFactorization(W=W, H=H, loss_trace=trace)


def scale_factorization(W, H):
    """Rescale so each row of H sums to one, preserving the product."""
    W = np.asarray(W, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    s = H.sum(axis=1)
    dead = np.flatnonzero(s <= 0.0)
    if dead.size:
        raise ValueError(f"scale_factorization: signature {dead[0]} has zero row sum")
    return W * s[None, :], H / s[:, None]


def prior_rates_from_nmf(fac):
    """Prior Poisson rates: W rescaled by the basis row sums, floored.

    The floor keeps every rate strictly positive; a Poisson rate of
    exactly zero is inadmissible.
    """
    s = fac.H.sum(axis=1)
    return PriorRates(lambda0=np.maximum(fac.W * s[None, :], RATE_FLOOR))


def project_exposures(V, H, iters=1, w0=None):
    """Exposures for new samples under a frozen basis H.

    Runs ``iters`` multiplicative W-updates from a flat allocation of
    each sample's total (or from ``w0``). One pass is enough for prior
    rates of validation samples; reconstruction metrics use more.
    """
    V = np.asarray(V, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    k = H.shape[0]
    if w0 is None:
        W = np.tile(V.sum(axis=1)[:, None] / k, (1, k)) + EPS
    else:
        W = np.array(w0, dtype=np.float64)
    denom = H.sum(axis=1)[None, :] + EPS
    for _ in range(max(1, int(iters))):
        WH = W @ H
        W *= (V / (WH + EPS)) @ H.T / denom
    return W
