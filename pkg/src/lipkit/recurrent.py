"""GRU cell, stacked (bi)directional GRU and the temporal-mean classifier head.

Gate convention::

    z  = sigmoid(W_z x + U_z h + b_z)
    r  = sigmoid(W_r x + U_r h + b_r)
    n  = tanh(W_h x + b_h_in + r * (U_h h + b_h_rec))
    h' = (1 - z) * n + z * h
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Variable, make_op, _sigmoid
from .ndtensor import FLOAT32, Rng, ShapeError, rand_uniform
from .nn import Param, dropout, linear

GATE_WEIGHTS = ("W_z", "W_r", "W_h")
REC_WEIGHTS = ("U_z", "U_r", "U_h")
BIASES = ("b_z", "b_r", "b_h_in", "b_h_rec")


@dataclass
class GruStackConfig:
    layers: int = 3
    hidden: int = 64
    bidirectional: bool = True
    inter_layer_dropout: float = 0.2
    # "unit": every GRU parameter ~ U(-1, 1); "scaled": U(-1/sqrt(h), 1/sqrt(h))
    init: str = "unit"

    def validate(self) -> None:
        if self.layers < 1 or self.hidden < 1:
            raise ValueError("GRU stack needs layers >= 1 and hidden >= 1")
        if not 0.0 <= self.inter_layer_dropout < 1.0:
            raise ValueError("inter_layer_dropout must be in [0, 1)")
        if self.init not in ("unit", "scaled"):
            raise ValueError(f"unknown GRU init {self.init!r}")

    @property
    def directions(self) -> int:
        return 2 if self.bidirectional else 1

    @property
    def output_width(self) -> int:
        return self.hidden * self.directions


@dataclass
class GruLayerParams:
    W_z: Param
    W_r: Param
    W_h: Param
    U_z: Param
    U_r: Param
    U_h: Param
    b_z: Param
    b_r: Param
    b_h_in: Param
    b_h_rec: Param

    @property
    def hidden(self) -> int:
        return self.U_z.shape[0]

    @property
    def input_width(self) -> int:
        return self.W_z.shape[1]

    def params(self) -> list[Param]:
        return [getattr(self, k) for k in GATE_WEIGHTS + REC_WEIGHTS + BIASES]

    @classmethod
    def init(cls, rng: Rng, d: int, h: int, name: str, mode: str = "unit", dtype=FLOAT32) -> "GruLayerParams":
        bound = 1.0 if mode == "unit" else 1.0 / math.sqrt(h)
        shapes = {k: (h, d) for k in GATE_WEIGHTS}
        shapes.update({k: (h, h) for k in REC_WEIGHTS})
        shapes.update({k: (h,) for k in BIASES})
        return cls(**{k: Param(rand_uniform(rng, s, -bound, bound, dtype), f"{name}.{k}") for k, s in shapes.items()})

    @classmethod
    def zeros(cls, d: int, h: int, name: str = "gru", dtype=FLOAT32) -> "GruLayerParams":
        shapes = {k: (h, d) for k in GATE_WEIGHTS}
        shapes.update({k: (h, h) for k in REC_WEIGHTS})
        shapes.update({k: (h,) for k in BIASES})
        return cls(**{k: Param(np.zeros(s, dtype), f"{name}.{k}") for k, s in shapes.items()})


def gru_cell(a: Variable, h_prev: Variable, U: Variable, b_rec: Variable) -> Variable:
    """Fused recurrence given the precomputed input projection ``a`` = [a_z | a_r | a_h].

    ``a`` is (B, 3h), ``h_prev`` (B, h), ``U`` (3h, h) and ``b_rec`` (h,).
    """
    H = h_prev.shape[-1]
    if a.shape[-1] != 3 * H or U.shape != (3 * H, H) or b_rec.shape != (H,):
        raise ShapeError(f"gru cell shape mismatch: a {a.shape}, h {h_prev.shape}, U {U.shape}, b {b_rec.shape}")
    hp = h_prev.data
    c = hp @ U.data.T
    z = _sigmoid(a.data[:, :H] + c[:, :H])
    r = _sigmoid(a.data[:, H:2 * H] + c[:, H:2 * H])
    nrec = c[:, 2 * H:] + b_rec.data
    n = np.tanh(a.data[:, 2 * H:] + r * nrec)
    h = n + z * (hp - n)

    def backward(g):
        dz_pre = g * (hp - n) * z * (1.0 - z)
        dn_pre = g * (1.0 - z) * (1.0 - n * n)
        dr_pre = dn_pre * nrec * r * (1.0 - r)
        dnrec = dn_pre * r
        dc = np.concatenate([dz_pre, dr_pre, dnrec], axis=1)
        da = np.concatenate([dz_pre, dr_pre, dn_pre], axis=1) if a.requires_grad else None
        dh = g * z + dc @ U.data if h_prev.requires_grad else None
        dU = dc.T @ hp if U.requires_grad else None
        db = dnrec.sum(axis=0) if b_rec.requires_grad else None
        return da, dh, dU, db

    return make_op(h, (a, h_prev, U, b_rec), backward)


def _packed(params: GruLayerParams) -> tuple[Variable, Variable, Variable]:
    W = ag.concat([params.W_z, params.W_r, params.W_h], axis=0)
    U = ag.concat([params.U_z, params.U_r, params.U_h], axis=0)
    b_in = ag.concat([params.b_z, params.b_r, params.b_h_in], axis=0)
    return W, U, b_in


def gru_cell_step(x_t: Variable, h_prev: Variable, params: GruLayerParams) -> Variable:
    """One recurrence step; accepts single vectors (d,) / (h,) or batches (B, d) / (B, h)."""
    x_t, h_prev = ag.as_variable(x_t), ag.as_variable(h_prev)
    single = x_t.data.ndim == 1
    if single:
        x_t = ag.reshape(x_t, (1, -1))
        h_prev = ag.reshape(h_prev, (1, -1))
    if x_t.shape[-1] != params.input_width or h_prev.shape[-1] != params.hidden:
        raise ShapeError(f"gru step mismatch: x {x_t.shape}, h {h_prev.shape}, params d={params.input_width} h={params.hidden}")
    W, U, b_in = _packed(params)
    h = gru_cell(linear(x_t, W, b_in), h_prev, U, params.b_h_rec)
    return ag.reshape(h, (params.hidden,)) if single else h


def gru_direction(x: Variable, params: GruLayerParams, reverse: bool = False) -> Variable:
    """Run one direction over a (B, T, d) sequence from h0 = 0; returns (B, T, h)."""
    B, T, d = x.shape
    if d != params.input_width:
        raise ShapeError(f"gru input width {d} != {params.input_width}")
    W, U, b_in = _packed(params)
    proj = ag.reshape(linear(ag.reshape(x, (B * T, d)), W, b_in), (B, T, 3 * params.hidden))
    h = Variable(np.zeros((B, params.hidden), dtype=x.dtype))
    outs: list[Variable] = [None] * T  # type: ignore[list-item]
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        h = gru_cell(ag.take(proj, t, axis=1), h, U, params.b_h_rec)
        outs[t] = h
    return ag.stack(outs, axis=1)


def init_gru_stack(rng: Rng, d_in: int, cfg: GruStackConfig, name: str = "gru", dtype=FLOAT32):
    """Parameters as ``layers[l][direction]``."""
    cfg.validate()
    layers = []
    width = d_in
    for l in range(cfg.layers):
        dirs = [
            GruLayerParams.init(rng, width, cfg.hidden, f"{name}.l{l}.{tag}", cfg.init, dtype)
            for tag in ("fwd", "bwd")[: cfg.directions]
        ]
        layers.append(dirs)
        width = cfg.output_width
    return layers


def gru_stack_forward(seq, cfg: GruStackConfig, layers, rng: Rng | None = None, mode: str = "eval") -> Variable:
    """(B, T, d) -> (B, T, h * directions); a (T, d) input gives (T, h * directions)."""
    seq = ag.as_variable(seq)
    single = seq.data.ndim == 2
    if single:
        seq = ag.reshape(seq, (1,) + seq.shape)
    if seq.shape[1] < 1:
        raise ShapeError("gru stack needs a non-empty sequence")
    x = seq
    for l, dirs in enumerate(layers):
        if l > 0:
            x = dropout(x, cfg.inter_layer_dropout, rng, mode)
        outs = [gru_direction(x, dirs[0], reverse=False)]
        if cfg.bidirectional:
            outs.append(gru_direction(x, dirs[1], reverse=True))
        x = outs[0] if len(outs) == 1 else ag.concat(outs, axis=2)
    if single:
        x = ag.reshape(x, x.shape[1:])
    return x


def temporal_mean_head(seq_out, fc_w: Variable, fc_b: Variable | None) -> Variable:
    """Average over time then classify: (B, T, D) -> (B, N), or (T, D) -> (N,)."""
    seq_out = ag.as_variable(seq_out)
    single = seq_out.data.ndim == 2
    if seq_out.shape[-2] < 1:
        raise ShapeError("temporal_mean_head needs at least one time step")
    pooled = ag.mean(seq_out, axis=-2)
    if single:
        return ag.reshape(linear(ag.reshape(pooled, (1, -1)), fc_w, fc_b), (fc_w.shape[0],))
    return linear(pooled, fc_w, fc_b)
