"""Versioned JSON checkpoints holding one or more networks plus run provenance.

Floats go through ``repr`` so every weight round-trips bit-exactly.
"""
from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .nets import Net, NetDims
from .space import HyperSpace

FORMAT = "hyperedit-checkpoint"
VERSION = 1


class CorruptCheckpoint(ValueError):
    """File is unreadable, of the wrong format, or internally inconsistent."""


def _net_to_dict(net: Net) -> dict:
    return {
        "dims": asdict(net.dims),
        "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in sorted(net.params.items())},
    }


def _net_from_dict(d: dict) -> Net:
    dims = d["dims"]
    dims = NetDims(**{**dims, "out_sizes": tuple(dims["out_sizes"])})
    params = {}
    for k, rec in d["params"].items():
        arr = np.array(rec["data"], dtype=np.float64)
        if arr.size != int(np.prod(rec["shape"])):
            raise CorruptCheckpoint(f"{k}: {arr.size} values for shape {rec['shape']}")
        params[k] = arr.reshape(rec["shape"])
    for k, v in params.items():
        if not np.all(np.isfinite(v)):
            raise CorruptCheckpoint(f"{k}: non-finite weights")
    return Net(dims, params)


def save_checkpoint(path, nets: dict, space: HyperSpace, config_hash: str, seed: int, extra: dict | None = None):
    doc = {
        "format": FORMAT, "version": VERSION, "config_hash": config_hash, "seed": seed,
        "space": space.to_dict(), "nets": {name: _net_to_dict(n) for name, n in nets.items()},
        **(extra or {}),
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_checkpoint(path) -> tuple[dict, dict, HyperSpace]:
    """Return (metadata, {name: Net}, space); raises CorruptCheckpoint on any inconsistency."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise CorruptCheckpoint(f"{path}: not valid JSON ({e})") from e
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise CorruptCheckpoint(f"{path}: not a {FORMAT} file")
    if doc.get("version") != VERSION:
        raise CorruptCheckpoint(f"{path}: unsupported version {doc.get('version')}")
    try:
        space = HyperSpace.from_dict(doc["space"])
        nets = {name: _net_from_dict(d) for name, d in doc["nets"].items()}
    except CorruptCheckpoint:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptCheckpoint(f"{path}: {e}") from e
    pol = nets.get("policy")
    if pol is not None and pol.dims.out_sizes != space.sizes:
        raise CorruptCheckpoint(f"{path}: policy heads {pol.dims.out_sizes} do not match space {space.sizes}")
    meta = {k: v for k, v in doc.items() if k not in ("nets", "space")}
    return meta, nets, space
