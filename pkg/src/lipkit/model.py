"""Frontend (3D stem + per-frame residual stages + optional SE) and GRU backend."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Variable
from .ndtensor import Rng, ShapeError, as_dtype, rand_uniform
from .nn import (
    BatchNormState,
    Param,
    activation,
    batchnorm,
    conv2d,
    conv3d,
    conv_fans,
    conv_output_extent,
    global_avgpool,
    init_dense_uniform,
    linear,
    maxpool2d,
)
from .recurrent import GruLayerParams, GruStackConfig, gru_stack_forward, init_gru_stack, temporal_mean_head


@dataclass
class FrontendConfig:
    stem_kernel: list[int] = field(default_factory=lambda: [5, 7, 7])
    stem_stride: list[int] = field(default_factory=lambda: [1, 2, 2])
    stem_pad: list[int] = field(default_factory=lambda: [2, 3, 3])
    # per-frame max pool after the stem; kernel 0 disables it
    pool_kernel: int = 3
    pool_stride: int = 2
    pool_pad: int = 1
    widths: list[int] = field(default_factory=lambda: [8, 16, 32, 64])
    blocks: list[int] = field(default_factory=lambda: [1, 1, 1, 1])
    se_enabled: bool = False
    se_reduction: int = 4

    def validate(self) -> None:
        if len(self.widths) != len(self.blocks) or not self.widths:
            raise ValueError("frontend widths and blocks must be non-empty and the same length")
        if len(self.stem_kernel) != 3 or len(self.stem_stride) != 3 or len(self.stem_pad) != 3:
            raise ValueError("stem kernel/stride/pad must each have 3 entries (t, h, w)")
        if self.stem_stride[0] != 1 or 2 * self.stem_pad[0] != self.stem_kernel[0] - 1:
            raise ValueError("stem must preserve the temporal extent (stride 1, pad (kt-1)/2)")
        if any(w < 1 for w in self.widths) or any(b < 1 for b in self.blocks):
            raise ValueError("widths and block counts must be positive")
        if self.se_enabled and any(w % self.se_reduction for w in self.widths):
            raise ValueError(f"se_reduction {self.se_reduction} must divide every stage width {self.widths}")


@dataclass
class ModelConfig:
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    backend: GruStackConfig = field(default_factory=GruStackConfig)
    num_classes: int = 10
    use_word_boundary: bool = False
    # "unit": final layer ~ U[-1, 1]; "scaled": Glorot bound like the other dense layers
    fc_init: str = "unit"
    precision: str = "float32"

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.fc_init not in ("unit", "scaled"):
            raise ValueError(f"unknown fc_init {self.fc_init!r}")
        as_dtype(self.precision)
        self.frontend.validate()
        self.backend.validate()

    @property
    def dtype(self):
        return as_dtype(self.precision)

    @property
    def feature_width(self) -> int:
        return self.frontend.widths[-1]


# ---------------------------------------------------------------- parameters

@dataclass
class ConvBN:
    w: Param
    bn: BatchNormState


@dataclass
class SEParams:
    W1: Param  # (C/r, C)
    W2: Param  # (C, C/r)


@dataclass
class BlockParams:
    conv1: ConvBN
    conv2: ConvBN
    stride: int
    shortcut: ConvBN | None = None
    se: SEParams | None = None


@dataclass
class ModelParams:
    stem: ConvBN
    stages: list[list[BlockParams]]
    gru: list[list[GruLayerParams]]
    fc_w: Param
    fc_b: Param

    def named_params(self) -> Iterator[Param]:
        yield from _convbn_params(self.stem)
        for stage in self.stages:
            for blk in stage:
                yield from _convbn_params(blk.conv1)
                yield from _convbn_params(blk.conv2)
                if blk.se is not None:
                    yield blk.se.W1
                    yield blk.se.W2
                if blk.shortcut is not None:
                    yield from _convbn_params(blk.shortcut)
        for dirs in self.gru:
            for d in dirs:
                yield from d.params()
        yield self.fc_w
        yield self.fc_b

    def params(self) -> list[Param]:
        return list(self.named_params())

    def batchnorms(self) -> Iterator[tuple[str, BatchNormState]]:
        units = [self.stem]
        for stage in self.stages:
            for blk in stage:
                units += [blk.conv1, blk.conv2] + ([blk.shortcut] if blk.shortcut is not None else [])
        for u in units:
            yield u.bn.gamma.name.rsplit(".", 1)[0], u.bn

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, bn in self.batchnorms():
            out[f"{name}.running_mean"] = bn.running_mean
            out[f"{name}.running_var"] = bn.running_var
        return out

    def count(self) -> int:
        return sum(p.data.size for p in self.named_params())


def _convbn_params(u: ConvBN):
    yield u.w
    yield u.bn.gamma
    yield u.bn.beta


def _conv_bn(rng: Rng, shape, name: str, dtype) -> ConvBN:
    fan_in, fan_out = conv_fans(shape)
    w = Param(init_dense_uniform(rng, fan_in, fan_out, shape, dtype), f"{name}.w")
    return ConvBN(w, BatchNormState.create(shape[0], f"{name}.bn", dtype))


def init_model(cfg: ModelConfig, rng: Rng) -> ModelParams:
    cfg.validate()
    fe = cfg.frontend
    dtype = cfg.dtype
    stem = _conv_bn(rng, (fe.widths[0], 1, *fe.stem_kernel), "stem", dtype)
    stages = []
    c_in = fe.widths[0]
    for si, (width, nblocks) in enumerate(zip(fe.widths, fe.blocks)):
        blocks = []
        for bi in range(nblocks):
            stride = 2 if (si > 0 and bi == 0) else 1
            name = f"layer{si + 1}.{bi}"
            blk = BlockParams(
                conv1=_conv_bn(rng, (width, c_in, 3, 3), f"{name}.conv1", dtype),
                conv2=_conv_bn(rng, (width, width, 3, 3), f"{name}.conv2", dtype),
                stride=stride,
            )
            if fe.se_enabled:
                mid = width // fe.se_reduction
                blk.se = SEParams(
                    W1=Param(init_dense_uniform(rng, width, mid, (mid, width), dtype), f"{name}.se.W1"),
                    W2=Param(init_dense_uniform(rng, mid, width, (width, mid), dtype), f"{name}.se.W2"),
                )
            if stride != 1 or c_in != width:
                blk.shortcut = _conv_bn(rng, (width, c_in, 1, 1), f"{name}.shortcut", dtype)
            blocks.append(blk)
            c_in = width
        stages.append(blocks)
    d_in = cfg.feature_width + (1 if cfg.use_word_boundary else 0)
    gru = init_gru_stack(rng, d_in, cfg.backend, "gru", dtype)
    D, N = cfg.backend.output_width, cfg.num_classes
    a = 1.0 if cfg.fc_init == "unit" else float(np.sqrt(2.0 / (D + N)))
    fc_w = Param(rand_uniform(rng, (N, D), -a, a, dtype), "fc.w")
    fc_b = Param(rand_uniform(rng, (N,), -a, a, dtype), "fc.b")
    return ModelParams(stem, stages, gru, fc_w, fc_b)


# ---------------------------------------------------------------- forward

def se_block(x: Variable, params: SEParams) -> Variable:
    """Scale each channel of (B, C, H, W) by sigmoid(W2 relu(W1 mean_hw(x)))."""
    C = x.shape[1]
    mid = params.W1.shape[0]
    if params.W1.shape != (mid, C) or params.W2.shape != (C, mid) or mid < 1 or C % mid:
        raise ShapeError(f"SE weights {params.W1.shape}/{params.W2.shape} do not fit {C} channels")
    s = global_avgpool(x)
    gate = activation(linear(activation(linear(s, params.W1), "relu"), params.W2), "sigmoid")
    return x * ag.reshape(gate, gate.shape + (1, 1))


def _residual_block(x: Variable, blk: BlockParams, mode: str) -> Variable:
    out = conv2d(x, blk.conv1.w, None, stride=blk.stride, pad=1)
    out = activation(batchnorm(out, blk.conv1.bn, mode), "relu")
    out = batchnorm(conv2d(out, blk.conv2.w, None, stride=1, pad=1), blk.conv2.bn, mode)
    if blk.se is not None:
        out = se_block(out, blk.se)
    if blk.shortcut is not None:
        short = batchnorm(conv2d(x, blk.shortcut.w, None, stride=blk.stride, pad=0), blk.shortcut.bn, mode)
    else:
        short = x
    return activation(out + short, "relu")


def frontend_extents(cfg: FrontendConfig, H: int, W: int) -> list[tuple[int, int]]:
    """Spatial extent after the stem, the pool and each stage."""
    ext = []
    kh, kw = cfg.stem_kernel[1:]
    sh, sw = cfg.stem_stride[1:]
    ph, pw = cfg.stem_pad[1:]
    h, w = conv_output_extent(H, kh, sh, ph), conv_output_extent(W, kw, sw, pw)
    ext.append((h, w))
    if cfg.pool_kernel:
        h = conv_output_extent(h, cfg.pool_kernel, cfg.pool_stride, cfg.pool_pad)
        w = conv_output_extent(w, cfg.pool_kernel, cfg.pool_stride, cfg.pool_pad)
        ext.append((h, w))
    for si in range(len(cfg.widths)):
        if si > 0:
            if h < 2 or w < 2:
                raise ShapeError(f"input {H}x{W} too small: stage {si + 1} would downsample a {h}x{w} map")
            h, w = conv_output_extent(h, 3, 2, 1), conv_output_extent(w, 3, 2, 1)
        ext.append((h, w))
    return ext


def frontend_forward(video, cfg: ModelConfig, params: ModelParams, mode: str = "eval") -> Variable:
    """(B, 1, T, H, W) -> (B, T, D) per-frame features."""
    video = ag.as_variable(video, cfg.dtype)
    if video.data.ndim != 5 or video.shape[1] != 1:
        raise ShapeError(f"frontend expects grayscale (B, 1, T, H, W), got {video.shape}")
    if video.dtype != cfg.dtype:
        video = Variable(video.data.astype(cfg.dtype))
    fe = cfg.frontend
    B, _, T, H, W = video.shape
    frontend_extents(fe, H, W)
    x = conv3d(video, params.stem.w, None, stride=fe.stem_stride, pad=fe.stem_pad)
    x = activation(batchnorm(x, params.stem.bn, mode), "relu")
    C, h, w = x.shape[1], x.shape[3], x.shape[4]
    if x.shape[2] != T:
        raise ShapeError("stem changed the temporal extent")
    x = ag.reshape(ag.transpose(x, (0, 2, 1, 3, 4)), (B * T, C, h, w))
    if fe.pool_kernel:
        x = maxpool2d(x, fe.pool_kernel, fe.pool_stride, fe.pool_pad)
    for stage in params.stages:
        for blk in stage:
            x = _residual_block(x, blk, mode)
    feats = global_avgpool(x)
    return ag.reshape(feats, (B, T, feats.shape[1]))


def attach_word_boundary(features: Variable, mask) -> Variable:
    """Append the per-frame boundary indicator as one extra feature: (B, T, D) -> (B, T, D + 1)."""
    features = ag.as_variable(features)
    B, T = features.shape[:2]
    m = np.asarray(mask, dtype=features.dtype)
    if m.ndim == 1:
        m = np.broadcast_to(m, (B, m.shape[0]))
    if m.shape != (B, T):
        raise ShapeError(f"boundary mask shape {m.shape} does not match features {features.shape[:2]}")
    return ag.concat([features, Variable(np.ascontiguousarray(m)[..., None])], axis=2)


def model_forward(
    video,
    cfg: ModelConfig,
    params: ModelParams,
    boundary=None,
    rng: Rng | None = None,
    mode: str = "eval",
) -> Variable:
    """Logits (B, N) for a (B, 1, T, H, W) clip batch."""
    if cfg.use_word_boundary and boundary is None:
        raise ValueError("model uses word boundaries but no boundary mask was supplied")
    feats = frontend_forward(video, cfg, params, mode)
    if cfg.use_word_boundary:
        feats = attach_word_boundary(feats, boundary)
    seq = gru_stack_forward(feats, cfg.backend, params.gru, rng, mode)
    return temporal_mean_head(seq, params.fc_w, params.fc_b)
