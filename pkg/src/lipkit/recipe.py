"""Training recipe: targets and loss, mixup, Adam, learning-rate schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Variable, make_op
from .ndtensor import Rng, ShapeError, rand_beta
from .nn import Param

SCHEDULERS = ("plateau", "cosine", "exponential")


@dataclass
class RecipeConfig:
    base_lr: float = 3e-4
    weight_decay: float = 1e-4
    base_batch: int = 32
    batch: int = 32
    epsilon: float = 0.0          # label smoothing strength (0.1 when enabled)
    mixup: bool = False
    alpha: float = 0.2
    mixup_per_sample: bool = False
    total_epochs: int = 80
    scheduler: str = "plateau"
    plateau_patience: int = 3
    plateau_factor: float = 2.0
    min_lr: float = 1e-6
    exp_decay: float = 0.95
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    decoupled_weight_decay: bool = False
    decay_norm_and_bias: bool = True
    seed: int = 0

    def validate(self) -> None:
        for name in ("base_lr", "base_batch", "batch", "alpha", "total_epochs", "plateau_factor", "min_lr", "exp_decay"):
            if not getattr(self, name) > 0:
                raise ValueError(f"recipe.{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("recipe.weight_decay must be non-negative")
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError("recipe.epsilon must be in [0, 1)")
        if self.scheduler not in SCHEDULERS:
            raise ValueError(f"recipe.scheduler must be one of {SCHEDULERS}")
        if self.plateau_patience < 1:
            raise ValueError("recipe.plateau_patience must be >= 1")

    @property
    def lr(self) -> float:
        return scale_lr(self.base_lr, self.batch, self.base_batch)


# ---------------------------------------------------------------- targets and loss

def label_smooth(y: int, n: int, eps: float, dtype=np.float64) -> np.ndarray:
    """q_i = eps/N off-target, 1 - (N-1) eps/N on target."""
    if not 0 <= y < n:
        raise ValueError(f"label {y} out of range for {n} classes")
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"smoothing epsilon must be in [0, 1), got {eps}")
    q = np.full(n, eps / n, dtype=dtype)
    q[y] = 1.0 - (n - 1) * eps / n
    return q


def smooth_targets(labels, n: int, eps: float, dtype=np.float64) -> np.ndarray:
    return np.stack([label_smooth(int(y), n, eps, dtype) for y in labels])


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _check_targets(q: np.ndarray) -> None:
    if np.any(q < 0) or not np.allclose(q.sum(axis=-1), 1.0, atol=1e-6, rtol=0):
        raise ValueError("target must be a distribution (non-negative, summing to 1)")


def cross_entropy(logits, q) -> Variable:
    """Mean over the batch of -sum_i q_i log softmax(logits)_i.

    Accepts a single (N,) row or a (B, N) batch.
    """
    logits = logits if isinstance(logits, Variable) else Variable(np.asarray(logits, dtype=np.float64))
    q = np.asarray(q, dtype=logits.dtype)
    if q.shape != logits.shape:
        raise ShapeError(f"target shape {q.shape} != logits shape {logits.shape}")
    _check_targets(q)
    lp = log_softmax(logits.data)
    rows = 1 if logits.data.ndim == 1 else logits.shape[0]
    loss = -(q * lp).sum() / rows

    def backward(g):
        return (g * (np.exp(lp) - q) / rows,)

    return make_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# ---------------------------------------------------------------- mixup

@dataclass
class MixedBatch:
    x: np.ndarray
    q: np.ndarray
    boundary: np.ndarray | None
    lam: np.ndarray       # (B,) weights of the "A" sample
    perm: np.ndarray      # partner indices into the original batch


def mixup_batch(x, q, boundary=None, alpha: float = 0.2, rng: Rng | None = None,
                lam: float | None = None, perm=None, per_sample: bool = False) -> MixedBatch:
    """Convex-combine each sample with a partner from a shuffled copy of the batch.

    One ``lam`` ~ Beta(alpha, alpha) per batch unless ``per_sample``. ``lam``
    and ``perm`` may be pinned explicitly; whatever is not pinned is drawn
    from ``rng``.
    """
    x = np.asarray(x)
    q = np.asarray(q)
    B = x.shape[0]
    if B < 1:
        raise ValueError("mixup needs a non-empty batch")
    if q.shape[0] != B:
        raise ShapeError("targets and inputs disagree on batch size")
    if rng is None and (lam is None or perm is None):
        raise ValueError("mixup needs an rng unless both lam and perm are given")
    perm = rng.permutation(B) if perm is None else np.asarray(perm)
    if sorted(perm.tolist()) != list(range(B)):
        raise ValueError("perm must be a permutation of the batch indices")
    if lam is not None:
        lams = np.full(B, float(lam))
    elif per_sample:
        lams = np.array([rand_beta(rng, alpha) for _ in range(B)])
    else:
        lams = np.full(B, rand_beta(rng, alpha))

    def mix(a):
        w = lams.reshape((B,) + (1,) * (a.ndim - 1)).astype(a.dtype)
        return w * a + (1 - w) * a[perm]

    return MixedBatch(
        x=mix(x),
        q=mix(q),
        boundary=None if boundary is None else mix(np.asarray(boundary)),
        lam=lams,
        perm=perm,
    )


# ---------------------------------------------------------------- optimizer

def scale_lr(base_lr: float, batch: int, base_batch: int = 32) -> float:
    if batch < 1:
        raise ValueError("batch must be >= 1")
    return base_lr * batch / base_batch


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    t_step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def _decays(p: Param, decay_norm_and_bias: bool) -> bool:
    return decay_norm_and_bias or p.data.ndim > 1


def adam_step(params, state: AdamState, lr: float, weight_decay: float = 0.0,
              decoupled: bool = False, decay_norm_and_bias: bool = True) -> None:
    """One Adam update, then zero the gradients.

    Weight decay is added to the gradient (L2) by default; ``decoupled``
    shrinks the weights directly instead.
    """
    params = list(params)
    if not any(p.has_grad for p in params):
        raise RuntimeError("adam_step called before any gradient was populated")
    state.t_step += 1
    t = state.t_step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p in params:
        g = p.grad
        wd = weight_decay if _decays(p, decay_norm_and_bias) else 0.0
        if wd and not decoupled:
            g = g + wd * p.data
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps_adam)
        if wd and decoupled:
            p.data -= (lr * wd) * p.data
        p.data -= (lr * update).astype(p.data.dtype, copy=False)
        p.zero_grad()


# ---------------------------------------------------------------- schedulers

@dataclass
class SchedulerState:
    kind: str
    base_lr: float
    lr: float
    t: int = 0
    best: float = math.inf
    since_best: int = 0

    @classmethod
    def start(cls, kind: str, base_lr: float) -> "SchedulerState":
        if kind not in SCHEDULERS:
            raise ValueError(f"unknown scheduler {kind!r}")
        return cls(kind=kind, base_lr=base_lr, lr=base_lr)


def cosine_lr(t: int, total: int, base_lr: float) -> float:
    if not 0 <= t <= total:
        raise ValueError(f"cosine schedule epoch {t} outside [0, {total}]")
    return 0.5 * (1.0 + math.cos(t * math.pi / total)) * base_lr


def scheduler_epoch_end(state: SchedulerState, val_error: float, cfg: RecipeConfig) -> float:
    """Advance one epoch and return the learning rate for the next one."""
    state.t += 1
    if state.kind == "cosine":
        state.lr = cosine_lr(state.t, cfg.total_epochs, state.base_lr)
    elif state.kind == "exponential":
        state.lr = state.lr * cfg.exp_decay
    else:
        if val_error < state.best:
            state.best = val_error
            state.since_best = 0
        else:
            state.since_best += 1
            if state.since_best >= cfg.plateau_patience:
                if state.lr > cfg.min_lr:
                    state.lr = max(state.lr / cfg.plateau_factor, cfg.min_lr)
                state.since_best = 0
    return state.lr
