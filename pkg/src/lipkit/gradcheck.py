"""Central finite-difference checks for ops built on :mod:`lipkit.autograd`."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import Variable
from .ndtensor import Rng


def check_gradients(
    fn: Callable[[], Variable],
    variables: Sequence[Variable],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: Rng | None = None,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``fn`` rebuilds the forward pass from the current values of ``variables``
    (which must require grad). The scalar probed is ``sum(out * R)`` for a
    fixed random ``R``, so every output element contributes. The error of one
    coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    rng = rng or Rng(0)
    out = fn()
    weights = rng.normal(out.shape).astype(out.dtype)
    for v in variables:
        v.grad = np.zeros_like(v.data)
    out.backward(weights)
    analytic = [np.array(v.grad, copy=True) for v in variables]

    def probe() -> float:
        return float(np.sum(fn().data.astype(np.float64) * weights))

    worst = 0.0
    for v, ga in zip(variables, analytic):
        flat = v.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.permutation(flat.size)[:max_coords])
        gflat = ga.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = probe()
            flat[i] = orig - h
            down = probe()
            flat[i] = orig
            num = (up - down) / (2 * h)
            err = abs(gflat[i] - num) / max(1.0, abs(gflat[i]))
            worst = max(worst, err)
    return worst
