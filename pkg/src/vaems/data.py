"""SBS96 catalog I/O, 100X normalization, splits, and the simulator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SBS96_CHANNELS",
    "CatalogFormatError",
    "MutationCatalog",
    "SplitSpec",
    "GroundTruth",
    "load_catalog",
    "save_catalog",
    "normalize_100x",
    "make_splits",
    "simulate",
    "save_ground_truth",
    "load_ground_truth",
]


def _sbs96_channels():
    subs = ("C>A", "C>G", "C>T", "T>A", "T>C", "T>G")
    labels = [f"{l}[{s}]{r}" for s in subs for l in "ACGT" for r in "ACGT"]
    return tuple(sorted(labels))


# Canonical order is the lexicographic sort of the channel labels.
SBS96_CHANNELS = _sbs96_channels()


class CatalogFormatError(ValueError):
    """Structured parse error; carries the offending 1-based line number."""

    def __init__(self, message, line=None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


@dataclass
class MutationCatalog:
    """N x M matrix of mutation counts with channel and sample labels."""

    counts: np.ndarray
    channel_labels: tuple
    sample_ids: tuple

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.channel_labels = tuple(self.channel_labels)
        self.sample_ids = tuple(self.sample_ids)
        n, m = self.counts.shape
        if len(self.channel_labels) != m:
            raise ValueError(f"catalog: {len(self.channel_labels)} labels for {m} channels")
        if len(self.sample_ids) != n:
            raise ValueError(f"catalog: {len(self.sample_ids)} ids for {n} samples")
        if len(set(self.channel_labels)) != m:
            raise ValueError("catalog: duplicate channel labels")
        if len(set(self.sample_ids)) != n:
            raise ValueError("catalog: duplicate sample ids")
        if np.any(self.counts < 0):
            raise ValueError("catalog: negative counts")

    @property
    def n_samples(self):
        return self.counts.shape[0]

    @property
    def n_channels(self):
        return self.counts.shape[1]


@dataclass
class SplitSpec:
    """Disjoint train/validation/test indices covering all samples."""

    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    seed: int


@dataclass
class GroundTruth:
    """Row-stochastic true signatures and the exposures that made the catalog."""

    H_true: np.ndarray
    W_true: np.ndarray
    noise_mode: str


def load_catalog(path):
    """Parse a channels-as-rows SBS96 TSV and reorder to canonical channels."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise CatalogFormatError("empty catalog file", line=1)

    header = lines[0].split("\t")
    if header[0] != "MutationType":
        raise CatalogFormatError(f"first column must be 'MutationType', got {header[0]!r}", line=1)
    sample_ids = header[1:]
    if not sample_ids:
        raise CatalogFormatError("no sample columns in header", line=1)
    if len(set(sample_ids)) != len(sample_ids):
        raise CatalogFormatError("duplicate sample ids in header", line=1)

    expected = set(SBS96_CHANNELS)
    seen = {}
    rows = {}
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        fields = raw.split("\t")
        if len(fields) != len(sample_ids) + 1:
            raise CatalogFormatError(
                f"expected {len(sample_ids) + 1} fields, got {len(fields)}", line=lineno
            )
        label = fields[0]
        if label not in expected:
            raise CatalogFormatError(f"unknown channel {label!r}", line=lineno)
        if label in seen:
            raise CatalogFormatError(
                f"duplicate channel {label!r} (first at line {seen[label]})", line=lineno
            )
        seen[label] = lineno
        values = []
        for col, field in enumerate(fields[1:], start=2):
            try:
                value = int(field)
            except ValueError:
                raise CatalogFormatError(
                    f"non-integer count {field!r} for channel {label!r} (column {col})",
                    line=lineno,
                ) from None
            if value < 0:
                raise CatalogFormatError(
                    f"negative count {value} for channel {label!r} (column {col})", line=lineno
                )
            values.append(value)
        rows[label] = values

    missing = expected - set(rows)
    if missing:
        raise CatalogFormatError(f"missing channel {sorted(missing)[0]!r}")
    counts = np.array([rows[label] for label in SBS96_CHANNELS], dtype=np.int64).T
    return MutationCatalog(counts=counts, channel_labels=SBS96_CHANNELS, sample_ids=sample_ids)


def save_catalog(path, catalog):
    """Write a catalog in the channels-as-rows TSV layout."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("MutationType\t" + "\t".join(catalog.sample_ids) + "\n")
        for j, label in enumerate(catalog.channel_labels):
            fh.write(label + "\t" + "\t".join(str(int(c)) for c in catalog.counts[:, j]) + "\n")


def normalize_100x(counts):
    """Scale rows whose total strictly exceeds 100*M down to total 100*M.

    Accepts a catalog or a plain matrix; returns (normalized float
    matrix, per-sample scale factors). Rows at or below the threshold
    are untouched (factor 1.0). The input is never modified.
    """
    if isinstance(counts, MutationCatalog):
        counts = counts.counts
    V = np.asarray(counts, dtype=np.float64)
    threshold = 100.0 * V.shape[1]
    totals = V.sum(axis=1)
    factors = np.where(totals > threshold, threshold / np.maximum(totals, 1.0), 1.0)
    return V * factors[:, None], factors


def make_splits(n, seed):
    """Seeded shuffle partitioned 64/16/20 into train/validation/test."""
    if n < 5:
        raise ValueError(f"make_splits: need at least 5 samples, got {n}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_test = round(0.2 * n)
    n_val = round(0.16 * n)
    return SplitSpec(
        train_idx=np.sort(perm[n_test + n_val :]),
        val_idx=np.sort(perm[n_test : n_test + n_val]),
        test_idx=np.sort(perm[:n_test]),
        seed=int(seed),
    )


def simulate(
    k,
    n,
    m=96,
    seed=0,
    noise_mode="poisson",
    exposure_scale=1000.0,
    signature_concentration=0.1,
    exposure_concentration=1.0,
):
    """Generate a catalog as (rounded or Poisson-sampled) W_true @ H_true.

    Signatures are symmetric-Dirichlet rows (low concentration gives the
    spiky profiles real signatures have); per-sample totals are gamma
    distributed with mean ``exposure_scale`` and get allocated across
    signatures by a flat Dirichlet.
    """
    if k < 1:
        raise ValueError("simulate: k must be >= 1")
    if n < k or m < k:
        raise ValueError(f"simulate: need n, m >= k, got n={n}, m={m}, k={k}")
    if noise_mode not in ("exact", "poisson"):
        raise ValueError(f"simulate: unknown noise_mode {noise_mode!r}")

    rng = np.random.default_rng(seed)
    H = rng.dirichlet(np.full(m, signature_concentration), size=k)
    H /= H.sum(axis=1, keepdims=True)
    totals = rng.gamma(shape=4.0, scale=exposure_scale / 4.0, size=n)
    alloc = rng.dirichlet(np.full(k, exposure_concentration), size=n)
    W = totals[:, None] * alloc
    product = W @ H
    if noise_mode == "exact":
        counts = np.floor(product + 0.5).astype(np.int64)
    else:
        counts = rng.poisson(product).astype(np.int64)

    labels = SBS96_CHANNELS if m == 96 else tuple(f"ch{j:03d}" for j in range(m))
    ids = tuple(f"S{i:04d}" for i in range(n))
    catalog = MutationCatalog(counts=counts, channel_labels=labels, sample_ids=ids)
    return catalog, GroundTruth(H_true=H, W_true=W, noise_mode=noise_mode)


def save_ground_truth(signatures_path, exposures_path, truth, channel_labels, sample_ids):
    """Write the truth bundle: row-stochastic signatures and exposures."""
    k = truth.H_true.shape[0]
    names = [f"SIG{i + 1}" for i in range(k)]
    with open(signatures_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("Signature\t" + "\t".join(channel_labels) + "\n")
        for i, name in enumerate(names):
            fh.write(name + "\t" + "\t".join(f"{v:.6f}" for v in truth.H_true[i]) + "\n")
    with open(exposures_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("Sample\t" + "\t".join(names) + "\n")
        for i, sid in enumerate(sample_ids):
            fh.write(sid + "\t" + "\t".join(f"{v:.6f}" for v in truth.W_true[i]) + "\n")


def load_ground_truth(signatures_path, exposures_path=None):
    """Read the truth bundle back; exposures are optional."""
    with open(signatures_path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    H = np.array([[float(v) for v in line.split("\t")[1:]] for line in lines[1:] if line.strip()])
    W = None
    if exposures_path is not None:
        with open(exposures_path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        W = np.array([[float(v) for v in line.split("\t")[1:]] for line in lines[1:] if line.strip()])
    return H, W
