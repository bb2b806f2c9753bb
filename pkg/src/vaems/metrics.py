"""Reconstruction, alignment, stability, and coverage measures.

Divergences are averaged per sample so train/test values stay
comparable across split sizes. Signature alignment maximizes total
cosine similarity through the Hungarian assignment.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

logger = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "dataset",
    "split",
    "model",
    "k",
    "D_KL_train",
    "D_KL_test",
    "MSE_train",
    "MSE_test",
    "ACS",
    "PACS",
    "SS",
    "CI_train",
    "CI_test",
)

__all__ = [
    "AlignmentResult",
    "gkl",
    "mse",
    "cosine",
    "cosine_matrix",
    "align_hungarian",
    "acs_to_truth",
    "pacs",
    "ci_coverage",
    "write_metrics_csv",
    "METRIC_COLUMNS",
]


def gkl(V, V_hat):
    """Generalized KL divergence per sample: mean_n sum_m v log(v/vhat) - v + vhat."""
    V = np.asarray(V, dtype=np.float64)
    V_hat = np.asarray(V_hat, dtype=np.float64)
    if V.shape != V_hat.shape:
        raise ValueError(f"gkl: shape mismatch {V.shape} vs {V_hat.shape}")
    pos = V > 0.0
    bad = pos & (V_hat <= 0.0)
    if np.any(bad):
        n, m = np.argwhere(bad)[0]
        raise ValueError(f"gkl: infinite divergence, reconstruction is 0 at sample {n}, channel {m}")
    total = (V[pos] * np.log(V[pos] / V_hat[pos])).sum() - V.sum() + V_hat.sum()
    return float(total) / V.shape[0]


def mse(V, V_hat):
    """Mean squared error over all entries."""
    V = np.asarray(V, dtype=np.float64)
    V_hat = np.asarray(V_hat, dtype=np.float64)
    if V.shape != V_hat.shape:
        raise ValueError(f"mse: shape mismatch {V.shape} vs {V_hat.shape}")
    return float(((V - V_hat) ** 2).mean())


def cosine(a, b):
    """Cosine similarity of two non-negative, non-zero vectors; in [0, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine: zero vector")
    return min(float(a @ b / (na * nb)), 1.0)


def cosine_matrix(A, B):
    """Pairwise cosine similarities between the rows of A and B."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise ValueError("cosine_matrix: zero row")
    return np.minimum((A @ B.T) / np.outer(na, nb), 1.0)


@dataclass
class AlignmentResult:
    """Optimal one-to-one signature matching and its similarities."""

    permutation: np.ndarray  # permutation[i] = row of B matched to row i of A
    per_pair_cosine: np.ndarray
    acs: float


def align_hungarian(H_a, H_b):
    """Match two equal-size signature sets, maximizing total cosine similarity."""
    H_a = np.asarray(H_a, dtype=np.float64)
    H_b = np.asarray(H_b, dtype=np.float64)
    if H_a.shape != H_b.shape:
        raise ValueError(f"align_hungarian: shape mismatch {H_a.shape} vs {H_b.shape}")
    sim = cosine_matrix(H_a, H_b)
    rows, cols = linear_sum_assignment(-sim)
    perm = np.empty(H_a.shape[0], dtype=np.int64)
    perm[rows] = cols
    per_pair = sim[rows, perm[rows]]
    return AlignmentResult(permutation=perm, per_pair_cosine=per_pair, acs=float(per_pair.mean()))


def acs_to_truth(H_est, H_true):
    """Average cosine similarity to a reference set after optimal alignment."""
    return align_hungarian(H_est, H_true).acs


def pacs(sets):
    """Mean ACS over all unordered pairs of equal-size signature sets.

    Pairs with unequal signature counts are excluded (and logged); at
    least one valid pair is required.
    """
    sets = [np.asarray(s, dtype=np.float64) for s in sets]
    if len(sets) < 2:
        raise ValueError("pacs: need at least two signature sets")
    values = []
    excluded = 0
    for i in range(len(sets)):
        for j in range(i + 1, len(sets)):
            if sets[i].shape[0] != sets[j].shape[0]:
                excluded += 1
                continue
            values.append(acs_to_truth(sets[i], sets[j]))
    if excluded:
        logger.warning("pacs: excluded %d pairs with unequal signature counts", excluded)
    if not values:
        raise ValueError("pacs: no pair of equal-size sets")
    return float(np.mean(values))


def ci_coverage(lo, hi, W_true):
    """Fraction of true exposures inside the inclusive [lo, hi] intervals."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    W_true = np.asarray(W_true, dtype=np.float64)
    if lo.shape != W_true.shape or hi.shape != W_true.shape:
        raise ValueError(f"ci_coverage: shape mismatch {lo.shape}/{hi.shape} vs {W_true.shape}")
    if np.any(lo > hi):
        raise ValueError("ci_coverage: lo > hi for some entries")
    return float(((W_true >= lo) & (W_true <= hi)).mean())


def _format(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, columns, rows):
    """Write dict rows under a fixed header; floats via repr for stable bytes."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_format(row.get(col)) for col in columns) + "\n")


def write_metrics_csv(path, rows):
    """Write metric rows in the fixed report column order."""
    write_csv(path, METRIC_COLUMNS, rows)
