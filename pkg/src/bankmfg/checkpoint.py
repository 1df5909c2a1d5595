"""Versioned JSON checkpoints for networks, optimizer state, and RNG state.

Floats are serialized through Python's ``repr`` (shortest round-trip
representation), so a save/load cycle restores every array bit-exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .nets import NeuronMeasure, OptimizerState

FORMAT = "bankmfg-checkpoint"
VERSION = 1


def _arr_to_list(arr: np.ndarray) -> list:
    if not np.all(np.isfinite(arr)):
        raise ValueError("refusing to checkpoint non-finite values")
    return np.asarray(arr, dtype=float).tolist()


def _net_to_dict(net: NeuronMeasure) -> dict:
    return {
        "activation": net.activation,
        "alpha": _arr_to_list(net.alpha),
        "c": _arr_to_list(net.c),
        "beta": _arr_to_list(net.beta),
    }


def _net_from_dict(d: dict) -> NeuronMeasure:
    return NeuronMeasure(
        alpha=np.array(d["alpha"], dtype=float),
        c=np.array(d["c"], dtype=float),
        beta=np.array(d["beta"], dtype=float),
        activation=d["activation"],
    )


def _opt_to_dict(opt: OptimizerState) -> dict:
    return {
        "lr": opt.lr,
        "beta1": opt.beta1,
        "beta2": opt.beta2,
        "eps": opt.eps,
        "t": opt.t,
        "m": {k: _arr_to_list(v) for k, v in opt.m.items()},
        "v": {k: _arr_to_list(v) for k, v in opt.v.items()},
    }


def _opt_from_dict(d: dict) -> OptimizerState:
    return OptimizerState(
        lr=d["lr"],
        beta1=d["beta1"],
        beta2=d["beta2"],
        eps=d["eps"],
        t=d["t"],
        m={k: np.array(v, dtype=float) for k, v in d["m"].items()},
        v={k: np.array(v, dtype=float) for k, v in d["v"].items()},
    )


def save_checkpoint(
    path,
    networks: dict[str, NeuronMeasure],
    optimizers: dict[str, OptimizerState] | None = None,
    rng_state: dict | None = None,
    meta: dict | None = None,
) -> None:
    """Write a checkpoint; ``rng_state`` is ``rng.bit_generator.state``."""
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "meta": meta or {},
        "networks": {k: _net_to_dict(v) for k, v in networks.items()},
        "optimizers": {k: _opt_to_dict(v) for k, v in (optimizers or {}).items()},
        "rng_state": rng_state,
    }
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path) -> dict:
    """Read a checkpoint back into live objects; validates format and version."""
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} file")
    if payload.get("version") != VERSION:
        raise ValueError(
            f"{path}: unsupported checkpoint version {payload.get('version')!r}"
        )
    return {
        "meta": payload["meta"],
        "networks": {k: _net_from_dict(v) for k, v in payload["networks"].items()},
        "optimizers": {k: _opt_from_dict(v) for k, v in payload["optimizers"].items()},
        "rng_state": payload["rng_state"],
    }
