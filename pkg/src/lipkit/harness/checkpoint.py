"""LKPT1 checkpoints: config, training state and every tensor needed to resume.

Layout: ``LKPT1\\n``, a little-endian u32 header length, a UTF-8 JSON header,
then the LKT1 tensors listed in the header, back to back.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..model import ModelParams, init_model
from ..ndtensor import Rng, ShapeError, tensor_from_bytes, tensor_to_bytes
from ..recipe import AdamState, SchedulerState
from .config import ExperimentConfig, config_from_dict

MAGIC = b"LKPT1\n"


@dataclass
class TrainState:
    epoch: int = 0
    adam: AdamState = field(default_factory=AdamState)
    scheduler: SchedulerState | None = None
    best_acc: float = -1.0
    seed: int = 0
    # metrics rows written so far, so a resumed run can reproduce the full log
    metrics: list[str] = field(default_factory=list)


def _state_doc(st: TrainState) -> dict:
    sch = st.scheduler
    return {
        "epoch": st.epoch,
        "best_acc": st.best_acc,
        "seed": st.seed,
        "metrics": st.metrics,
        "adam": {"beta1": st.adam.beta1, "beta2": st.adam.beta2, "eps_adam": st.adam.eps_adam, "t_step": st.adam.t_step},
        "scheduler": None if sch is None else {
            "kind": sch.kind, "base_lr": sch.base_lr, "lr": sch.lr, "t": sch.t,
            "best": None if math.isinf(sch.best) else sch.best, "since_best": sch.since_best,
        },
    }


def save_checkpoint(path: str | Path, cfg: ExperimentConfig, params: ModelParams, state: TrainState) -> None:
    tensors: list[tuple[str, np.ndarray]] = [(f"param:{p.name}", p.data) for p in params.named_params()]
    tensors += [(f"buffer:{k}", v) for k, v in params.buffers().items()]
    tensors += [(f"adam.m:{k}", v) for k, v in sorted(state.adam.m.items())]
    tensors += [(f"adam.v:{k}", v) for k, v in sorted(state.adam.v.items())]
    blobs = [tensor_to_bytes(np.ascontiguousarray(a)) for _, a in tensors]
    header = {
        "config": cfg.to_dict(),
        "state": _state_doc(state),
        "tensors": [[name, len(b)] for (name, _), b in zip(tensors, blobs)],
    }
    head = json.dumps(header, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        for b in blobs:
            f.write(b)
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise ValueError(f"{path} is not an LKPT1 checkpoint")
    (n,) = struct.unpack_from("<I", blob, len(MAGIC))
    off = len(MAGIC) + 4
    header = json.loads(blob[off:off + n])
    off += n
    tensors = {}
    for name, size in header["tensors"]:
        if off + size > len(blob):
            raise ValueError(f"{path}: truncated at tensor {name}")
        tensors[name] = tensor_from_bytes(blob[off:off + size])
        off += size
    return header, tensors


def _assign(dst: np.ndarray, src: np.ndarray, name: str) -> None:
    if dst.shape != src.shape:
        raise ShapeError(f"checkpoint tensor {name} has shape {src.shape}, model expects {dst.shape}")
    dst[...] = src


def load_checkpoint(path: str | Path, cfg: ExperimentConfig | None = None):
    """Return (config, params, train state).

    With ``cfg`` given, tensors are loaded into a model built from it, so a
    checkpoint whose shapes disagree with the config raises ``ShapeError``.
    """
    header, tensors = read_checkpoint(path)
    cfg = cfg or config_from_dict(header["config"])
    params = init_model(cfg.model, Rng(0))
    named = {p.name: p for p in params.named_params()}
    for name, p in named.items():
        key = f"param:{name}"
        if key not in tensors:
            raise ShapeError(f"checkpoint is missing parameter {name}")
        _assign(p.data, tensors[key], name)
    for name, buf in params.buffers().items():
        _assign(buf, tensors[f"buffer:{name}"], name)
    sd = header["state"]
    adam = AdamState(**sd["adam"])
    for key, arr in tensors.items():
        kind, _, pname = key.partition(":")
        if kind == "adam.m":
            adam.m[pname] = arr.copy()
        elif kind == "adam.v":
            adam.v[pname] = arr.copy()
    sch = sd["scheduler"]
    if sch is not None:
        sch = SchedulerState(**{**sch, "best": math.inf if sch["best"] is None else sch["best"]})
    state = TrainState(sd["epoch"], adam, sch, sd["best_acc"], sd["seed"], list(sd["metrics"]))
    return cfg, params, state
