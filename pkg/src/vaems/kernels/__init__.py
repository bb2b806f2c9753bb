"""Poisson waiting-time kernel with compiled and pure-numpy backends.

The compiled backend is preferred when the extension built; setting the
environment variable ``VAEMS_PURE_PYTHON`` forces the numpy fallback.
Both backends consume the same pre-drawn exponential buffer, so sampled
counts are identical across backends and the relaxed gradients agree to
floating-point roundoff.
"""

import os

from . import _poisson_np

if os.environ.get("VAEMS_PURE_PYTHON"):
    _impl = _poisson_np
else:
    try:
        from . import _poisson_cy as _impl
    except ImportError:
        _impl = _poisson_np

poisson_relax = _impl.poisson_relax
BACKEND = "numpy" if _impl is _poisson_np else "cython"

__all__ = ["poisson_relax", "BACKEND"]
