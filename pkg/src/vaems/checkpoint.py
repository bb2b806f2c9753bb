"""Versioned binary container for trained models and baseline fits.

Layout: the magic header ``VAEMS1\\n``, an 8-byte little-endian JSON
length, the JSON header (kind, config, report, array manifest), then
the raw arrays in manifest order, C-contiguous.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .model import TrainedModel, TrainReport, VaeConfig, build_model
from .nmf import NmfFactorization

MAGIC = b"VAEMS1\n"

__all__ = [
    "MAGIC",
    "save_model_checkpoint",
    "load_model_checkpoint",
    "save_nmf_checkpoint",
    "load_nmf_checkpoint",
    "read_container",
]


def _write_container(path, header, arrays):
    manifest = [
        {"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)}
        for name, arr in arrays.items()
    ]
    header = dict(header)
    header["arrays"] = manifest
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr).tobytes())


def read_container(path):
    """Return (header, arrays) from a VAEMS1 container."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a VAEMS1 checkpoint (magic {magic!r})")
        (length,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(length).decode("utf-8"))
        arrays = {}
        for spec in header["arrays"]:
            dtype = np.dtype(spec["dtype"])
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            data = fh.read(count * dtype.itemsize)
            arrays[spec["name"]] = np.frombuffer(data, dtype=dtype).reshape(spec["shape"]).copy()
    return header, arrays


def _model_arrays(trained):
    model = trained.model
    arrays = {}
    for i, blk in enumerate(model.blocks):
        arrays[f"enc{i}_w"] = blk["w"].value
        arrays[f"enc{i}_b"] = blk["b"].value
        arrays[f"enc{i}_gamma"] = blk["gamma"].value
        arrays[f"enc{i}_beta"] = blk["beta"].value
        arrays[f"enc{i}_rmean"] = blk["state"].running_mean
        arrays[f"enc{i}_rvar"] = blk["state"].running_var
    arrays["head_w"] = model.head_w.value
    arrays["head_b"] = model.head_b.value
    arrays["dec_h"] = model.dec_h.value
    arrays["lambda0_train"] = trained.lambda0_train
    arrays["lambda0_val"] = trained.lambda0_val
    return arrays


def save_model_checkpoint(path, trained):
    header = {
        "kind": "vae",
        "version": 1,
        "config": trained.config.to_dict(),
        "report": trained.report.to_dict(),
        "m": trained.model.m,
    }
    _write_container(path, header, _model_arrays(trained))


def load_model_checkpoint(path):
    header, arrays = read_container(path)
    if header.get("kind") != "vae":
        raise ValueError(f"{path}: checkpoint kind {header.get('kind')!r}, expected 'vae'")
    cfg_dict = dict(header["config"])
    cfg_dict["hidden_dims"] = tuple(cfg_dict["hidden_dims"])
    config = VaeConfig(**cfg_dict)
    model = build_model(int(header["m"]), config)
    for i, blk in enumerate(model.blocks):
        blk["w"].value[...] = arrays[f"enc{i}_w"]
        blk["b"].value[...] = arrays[f"enc{i}_b"]
        blk["gamma"].value[...] = arrays[f"enc{i}_gamma"]
        blk["beta"].value[...] = arrays[f"enc{i}_beta"]
        blk["state"].running_mean = arrays[f"enc{i}_rmean"].copy()
        blk["state"].running_var = arrays[f"enc{i}_rvar"].copy()
    model.head_w.value[...] = arrays["head_w"]
    model.head_b.value[...] = arrays["head_b"]
    model.dec_h.value[...] = arrays["dec_h"]
    report = TrainReport(**header["report"])
    return TrainedModel(
        model=model,
        config=config,
        report=report,
        lambda0_train=arrays["lambda0_train"],
        lambda0_val=arrays["lambda0_val"],
    )


def save_nmf_checkpoint(path, fac, meta=None):
    header = {"kind": "nmf", "version": 1, "meta": dict(meta or {})}
    arrays = {"W": fac.W, "H": fac.H, "loss_trace": np.asarray(fac.loss_trace, dtype=np.float64)}
    _write_container(path, header, arrays)


def load_nmf_checkpoint(path):
    header, arrays = read_container(path)
    if header.get("kind") != "nmf":
        raise ValueError(f"{path}: checkpoint kind {header.get('kind')!r}, expected 'nmf'")
    fac = NmfFactorization(W=arrays["W"], H=arrays["H"], loss_trace=list(arrays["loss_trace"]))
    return fac, header.get("meta", {})
