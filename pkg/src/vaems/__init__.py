"""Poisson-latent autoencoder and KL-NMF baseline for SBS96 signature extraction."""

__version__ = "0.1.0"

from .data import MutationCatalog, load_catalog, make_splits, normalize_100x, simulate
from .kernels import BACKEND as kernel_backend
from .metrics import acs_to_truth, align_hungarian, ci_coverage, gkl, mse, pacs
from .model import VaeConfig, build_model, elbo_loss, forward_eval, kl_poisson, sample_poisson_reparam
from .nmf import nmf_fit, prior_rates_from_nmf, scale_factorization
from .selection import SweepSpace, select_k, signature_silhouette, stability_runs, sweep
from .training import make_priors, train

__all__ = [
    "__version__",
    "kernel_backend",
    "MutationCatalog",
    "load_catalog",
    "make_splits",
    "normalize_100x",
    "simulate",
    "acs_to_truth",
    "align_hungarian",
    "ci_coverage",
    "gkl",
    "mse",
    "pacs",
    "VaeConfig",
    "build_model",
    "elbo_loss",
    "forward_eval",
    "kl_poisson",
    "sample_poisson_reparam",
    "nmf_fit",
    "prior_rates_from_nmf",
    "scale_factorization",
    "SweepSpace",
    "select_k",
    "signature_silhouette",
    "stability_runs",
    "sweep",
    "make_priors",
    "train",
]
