"""Pure-numpy fallback for the Poisson waiting-time kernel."""

import numpy as np


def poisson_relax(lam, draws, tau):
    """Count exponential arrivals in [0, 1] and their relaxed gradient.

    ``lam`` is a flat vector of strictly positive rates and ``draws`` a
    matching (n, cap) block of standard-exponential variates; the i-th
    waiting-time series is ``draws[i] / lam[i]``. Returns

    - ``hard``: the exact Poisson draw per entry (arrivals with
      cumulative time <= 1, truncated at cap),
    - ``soft``: sum_j sigmoid((1 - S_ij) / tau), the relaxed count,
    - ``dsoft``: d(soft)/d(lam) per entry,
    - ``truncated``: number of entries whose series was still inside
      [0, 1] at the cap (the hard count is then a lower bound).
    """
    lam = np.asarray(lam, dtype=np.float64)
    s = np.cumsum(draws, axis=1)
    s /= lam[:, None]
    hard = np.count_nonzero(s <= 1.0, axis=1).astype(np.float64)
    x = (1.0 - s) / tau
    e = np.exp(-np.abs(x))
    soft = np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e)).sum(axis=1)
    dsoft = (e / (1.0 + e) ** 2 * s).sum(axis=1) / (tau * lam)
    truncated = int(np.count_nonzero(s[:, -1] <= 1.0))
    return hard, soft, dsoft, truncated
