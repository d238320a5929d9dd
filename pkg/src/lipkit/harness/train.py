"""Training and evaluation loops."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from ..autograd import Variable
from ..datapipe import DataError, DatasetManifest, VideoSample, iterate_batches, load_samples
from ..model import ModelParams, init_model, model_forward
from ..ndtensor import Rng
from ..recipe import (
    SchedulerState,
    adam_step,
    cross_entropy,
    log_softmax,
    mixup_batch,
    scheduler_epoch_end,
    smooth_targets,
)
from .checkpoint import TrainState, load_checkpoint, save_checkpoint
from .config import ExperimentConfig

METRICS_HEADER = "epoch,phase,lr,loss,acc"

# sub-stream keys under the run seed
_MODEL, _DATA, _DROPOUT, _MIXUP = 1, 2, 3, 4


class NumericError(RuntimeError):
    """Non-finite loss during training."""


@dataclass
class EvalResult:
    loss: float
    acc: float
    logits: np.ndarray
    labels: np.ndarray
    ids: list[str]

    @property
    def preds(self) -> np.ndarray:
        return self.logits.argmax(axis=1)

    def per_class(self, K: int) -> list[float | None]:
        out = []
        for k in range(K):
            sel = self.labels == k
            out.append(float((self.preds[sel] == k).mean()) if sel.any() else None)
        return out


def _row(epoch: int, phase: str, lr: float, loss: float, acc: float) -> str:
    return f"{epoch},{phase},{lr!r},{loss!r},{acc!r}"


def evaluate(cfg: ExperimentConfig, params: ModelParams, samples: list[VideoSample]) -> EvalResult:
    """Eval mode, centre crop, no mixup."""
    if not samples:
        raise DataError("cannot evaluate an empty split")
    K = cfg.model.num_classes
    logits, labels, ids = [], [], []
    for batch in iterate_batches(samples, cfg.recipe.batch, cfg.data, train=False):
        x = batch.x.astype(cfg.model.dtype, copy=False)
        out = model_forward(x, cfg.model, params, batch.boundary.astype(x.dtype), mode="eval")
        logits.append(out.data)
        labels.append(batch.labels)
        ids += batch.ids
    L = np.concatenate(logits)
    y = np.concatenate(labels)
    if np.any(y >= K):
        raise DataError(f"label outside the model's {K} classes")
    lp = log_softmax(L.astype(np.float64))
    loss = float(-lp[np.arange(len(y)), y].mean())
    acc = float((L.argmax(axis=1) == y).mean())
    return EvalResult(loss, acc, L, y, ids)


def train_epoch(cfg: ExperimentConfig, params: ModelParams, state: TrainState,
                samples: list[VideoSample], epoch: int, lr: float) -> tuple[float, float]:
    r = cfg.recipe
    K = cfg.model.num_classes
    dtype = cfg.model.dtype
    seed = state.seed
    plist = params.params()
    tot_loss = tot_correct = n = 0.0
    for step, batch in enumerate(iterate_batches(samples, r.batch, cfg.data, Rng(seed, _DATA, epoch), train=True)):
        x = batch.x.astype(dtype, copy=False)
        q = smooth_targets(batch.labels, K, r.epsilon, dtype)
        boundary = batch.boundary.astype(dtype)
        if r.mixup:
            mixed = mixup_batch(x, q, boundary, r.alpha, Rng(seed, _MIXUP, epoch, step), per_sample=r.mixup_per_sample)
            x, q, boundary = mixed.x, mixed.q, mixed.boundary
        logits = model_forward(x, cfg.model, params, boundary, Rng(seed, _DROPOUT, epoch, step), mode="train")
        loss = cross_entropy(logits, q)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
        pred = logits.data.argmax(axis=1)
        loss.backward()
        adam_step(plist, state.adam, lr, r.weight_decay, r.decoupled_weight_decay, r.decay_norm_and_bias)
        b = len(batch.ids)
        tot_loss += value * b
        tot_correct += float((pred == batch.labels).sum())
        n += b
    return tot_loss / n, tot_correct / n


def _load_split(cfg: ExperimentConfig, data_dir, manifest: DatasetManifest, split: str) -> list[VideoSample]:
    samples = load_samples(data_dir, manifest, split, cfg.data)
    if not samples:
        raise DataError(f"split {split!r} is empty")
    return samples


def run_train(cfg: ExperimentConfig, data_dir: str | Path, out_dir: str | Path,
              resume: str | Path | None = None, log: Callable[[str], None] | None = None,
              epochs: int | None = None) -> dict:
    """Train for ``recipe.total_epochs`` (or stop early after ``epochs``); returns a summary.

    Writes ``metrics.csv``, ``best.ckpt`` and ``last.ckpt`` into ``out_dir``.
    """
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest.load(data_dir)
    if len(manifest.classes) != cfg.model.num_classes:
        raise DataError(f"dataset has {len(manifest.classes)} classes, model.num_classes is {cfg.model.num_classes}")
    train = _load_split(cfg, data_dir, manifest, "train")
    val = _load_split(cfg, data_dir, manifest, "val")

    if resume is not None:
        _, params, state = load_checkpoint(resume, cfg)
    else:
        params = init_model(cfg.model, Rng(cfg.recipe.seed, _MODEL))
        state = TrainState(seed=cfg.recipe.seed, scheduler=SchedulerState.start(cfg.recipe.scheduler, cfg.recipe.lr))
        state.adam.beta1, state.adam.beta2, state.adam.eps_adam = cfg.recipe.beta1, cfg.recipe.beta2, cfg.recipe.eps_adam

    last = cfg.recipe.total_epochs if epochs is None else min(cfg.recipe.total_epochs, epochs)
    for epoch in range(state.epoch + 1, last + 1):
        lr = state.scheduler.lr
        loss, acc = train_epoch(cfg, params, state, train, epoch, lr)
        rows = [_row(epoch, "train", lr, loss, acc)]
        if cfg.data.eval_train:
            te = evaluate(cfg, params, train)
            rows.append(_row(epoch, "train_eval", lr, te.loss, te.acc))
        ev = evaluate(cfg, params, val)
        rows.append(_row(epoch, "val", lr, ev.loss, ev.acc))
        scheduler_epoch_end(state.scheduler, 1.0 - ev.acc, cfg.recipe)
        state.epoch = epoch
        state.metrics += rows
        improved = ev.acc > state.best_acc
        if improved:
            state.best_acc = ev.acc
            save_checkpoint(out / "best.ckpt", cfg, params, state)
        save_checkpoint(out / "last.ckpt", cfg, params, state)
        _write_metrics(out / "metrics.csv", state.metrics)
        if log:
            log(f"epoch {epoch}: lr {lr:.3g} train loss {loss:.4f} acc {acc:.3f} | val loss {ev.loss:.4f} acc {ev.acc:.3f}")
    _write_metrics(out / "metrics.csv", state.metrics)
    return {"best_val_acc": state.best_acc, "epochs": state.epoch, "out_dir": str(out)}


def _write_metrics(path: Path, rows: list[str]) -> None:
    path.write_text("\n".join([METRICS_HEADER] + rows) + "\n")


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return [
            {"epoch": int(r["epoch"]), "phase": r["phase"], "lr": float(r["lr"]), "loss": float(r["loss"]), "acc": float(r["acc"])}
            for r in csv.DictReader(f)
        ]


def run_eval(ckpt: str | Path, data_dir: str | Path, split: str = "val") -> dict:
    cfg, params, _ = load_checkpoint(ckpt)
    manifest = DatasetManifest.load(data_dir)
    res = evaluate(cfg, params, _load_split(cfg, data_dir, manifest, split))
    return {
        "split": split,
        "accuracy": res.acc,
        "loss": res.loss,
        "per_class": res.per_class(cfg.model.num_classes),
        "predictions": [(i, int(y), int(p)) for i, y, p in zip(res.ids, res.labels, res.preds)],
    }


def predictions_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "label", "pred"])
    w.writerows(report["predictions"])
    return buf.getvalue()


def logits_for(cfg: ExperimentConfig, params: ModelParams, x: np.ndarray, boundary: np.ndarray | None = None) -> np.ndarray:
    """Eval-mode logits on a raw (B, 1, T, H, W) batch."""
    if boundary is None:
        boundary = np.ones((x.shape[0], x.shape[2]), dtype=x.dtype)
    return model_forward(Variable(x.astype(cfg.model.dtype)), cfg.model, params, boundary, mode="eval").data
