"""Dense tensor helpers, seeded randomness and the LKT1 tensor file format.

Tensors are plain ``numpy.ndarray`` objects. Float32 is the training dtype;
float64 is used by the gradient-check suites.
"""
from __future__ import annotations

import math
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

FLOAT32 = np.float32
FLOAT64 = np.float64

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
MAGIC = b"LKT1"


class ShapeError(ValueError):
    """Raised when operand extents violate an op's contract."""


def tensor(data, dtype=FLOAT32) -> np.ndarray:
    """Build a tensor, rejecting NaN/Inf values."""
    arr = np.asarray(data, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} invalid for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(x: np.ndarray, axes=None, kind: str = "sum") -> np.ndarray:
    """Reduce ``x`` over ``axes`` (all axes when None) with sum, mean or max."""
    ax = _normalize_axes(axes, x.ndim)
    if kind == "sum":
        return np.sum(x, axis=ax)
    if kind == "mean":
        return np.mean(x, axis=ax)
    if kind == "max":
        return np.max(x, axis=ax)
    raise ValueError(f"unknown reduction {kind!r}")


class Rng:
    """Seeded PCG64 stream.

    Every stochastic op takes one of these explicitly. ``keys`` let callers
    derive independent streams (per epoch, per purpose) from one seed.
    """

    def __init__(self, seed: int, *keys: int):
        if not 0 <= seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *self.keys])))

    def child(self, *keys: int) -> "Rng":
        return Rng(self.seed, *self.keys, *keys)

    def random(self, size=None) -> np.ndarray | float:
        return self._gen.random(size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state


def rand_uniform(rng: Rng, shape, lo: float, hi: float, dtype=FLOAT32) -> np.ndarray:
    if not lo < hi:
        raise ValueError(f"rand_uniform needs lo < hi, got [{lo}, {hi})")
    u = rng.random(shape)
    out = (lo + (hi - lo) * u).astype(dtype)
    # float32 rounding can land exactly on hi
    if dtype != FLOAT64:
        out = np.minimum(out, np.nextafter(np.asarray(hi, dtype=dtype), np.asarray(lo, dtype=dtype)))
        out = np.maximum(out, np.asarray(lo, dtype=dtype))
    return out


_BETA_EDGE = np.finfo(np.float64).eps


def rand_beta(rng: Rng, alpha: float) -> float:
    """Draw from Beta(alpha, alpha) with Johnk's rejection method.

    Works in log space so that ``u ** (1/alpha)`` cannot underflow for small
    alpha. Results are clipped to ``[eps, 1 - eps]`` so both ``lam`` and
    ``1 - lam`` stay strictly inside (0, 1).
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"rand_beta supports 0 < alpha <= 1, got {alpha}")
    inv = 1.0 / alpha
    while True:
        u, v = rng.random(2)
        if u == 0.0 or v == 0.0:
            continue
        lx = math.log(u) * inv
        ly = math.log(v) * inv
        m = max(lx, ly)
        ls = m + math.log(math.exp(lx - m) + math.exp(ly - m))
        if ls <= 0.0:
            lam = math.exp(lx - ls)
            return min(max(lam, _BETA_EDGE), 1.0 - _BETA_EDGE)


def write_tensor(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        raise ValueError(f"LKT1 stores float32/float64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("rank too large for LKT1")
    f.write(MAGIC)
    f.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise ValueError("not an LKT1 tensor (bad magic)")
    code, rank = struct.unpack_from("<BB", blob, 4)
    if code not in _CODE_DTYPES:
        raise ValueError(f"unknown LKT1 dtype code {code}")
    shape = struct.unpack_from(f"<{rank}I", blob, 6)
    dtype = _CODE_DTYPES[code].newbyteorder("<")
    start = 6 + 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    need = start + count * dtype.itemsize
    if len(blob) < need:
        raise ValueError("truncated LKT1 payload")
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=start)
    return data.reshape(shape).astype(_CODE_DTYPES[code])


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, arr)


def load_tensor(path: str | Path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def as_dtype(name: str):
    try:
        return {"float32": FLOAT32, "float64": FLOAT64}[name]
    except KeyError:
        raise ValueError(f"unsupported precision {name!r}") from None

