"""Ablation suites: preset grids run over several seeds and summarised as a table."""
from __future__ import annotations

import csv
import json
import math
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import ExperimentConfig, config_from_dict, with_overrides
from .train import run_train


@dataclass(frozen=True)
class ExperimentPreset:
    name: str
    deltas: dict


REFINED = {
    "model.frontend.se_enabled": True,
    "recipe.mixup": True,
    "recipe.scheduler": "cosine",
    "recipe.epsilon": 0.1,
    "model.use_word_boundary": True,
}

SUITES: dict[str, list[ExperimentPreset]] = {
    "frontend": [ExperimentPreset("baseline", {}), ExperimentPreset("se", {"model.frontend.se_enabled": True})],
    "backend": [
        ExperimentPreset("gru_dropout", {}),
        ExperimentPreset("gru_no_dropout", {"model.backend.inter_layer_dropout": 0.0}),
    ],
    "data": [
        ExperimentPreset("baseline", {}),
        ExperimentPreset("word_boundary", {"model.use_word_boundary": True}),
        ExperimentPreset("alignment", {"data.align": True}),
    ],
    "tweaks": [
        ExperimentPreset("baseline", {}),
        ExperimentPreset("mixup", {"recipe.mixup": True}),
        ExperimentPreset("label_smoothing", {"recipe.epsilon": 0.1}),
    ],
    "schedulers": [
        ExperimentPreset("plateau", {"recipe.scheduler": "plateau"}),
        ExperimentPreset("cosine", {"recipe.scheduler": "cosine"}),
        ExperimentPreset("exponential", {"recipe.scheduler": "exponential"}),
    ],
    "final": [ExperimentPreset("basic", {}), ExperimentPreset("refined", REFINED)],
}

DEFAULT_SEEDS = (0, 1, 2)


def desk_config(num_classes: int = 10) -> ExperimentConfig:
    """Desk-scale base configuration shared by every preset."""
    return with_overrides(ExperimentConfig(), {
        "model.num_classes": num_classes,
        "model.backend.init": "scaled",
        "model.fc_init": "scaled",
        "recipe.base_lr": 1e-3,
        "recipe.total_epochs": 60,
    })


def preset_config(base: ExperimentConfig, preset: ExperimentPreset, seed: int) -> ExperimentConfig:
    return with_overrides(base, {**preset.deltas, "recipe.seed": seed})


def _summary(rows: list[dict], presets: list[ExperimentPreset]) -> list[tuple[str, float, float, int]]:
    out = []
    for p in presets:
        accs = [r["val_acc"] for r in rows if r["preset"] == p.name and math.isfinite(r["val_acc"])]
        mean = float(np.mean(accs)) if accs else math.nan
        spread = float(np.std(accs)) if accs else math.nan
        out.append((p.name, mean, spread, len(accs)))
    return out


def render_table(suite: str, rows: list[dict], presets: list[ExperimentPreset]) -> str:
    lines = [f"suite: {suite}", f"{'preset':<18} {'val acc (mean +- std)':>22} {'seeds':>6}"]
    for name, mean, spread, n in _summary(rows, presets):
        cell = "failed" if n == 0 else f"{100 * mean:6.2f} +- {100 * spread:5.2f}"
        lines.append(f"{name:<18} {cell:>22} {n:>6}")
    return "\n".join(lines) + "\n"


def run_ablation(suite: str, data_dir: str | Path, out_dir: str | Path, seeds=DEFAULT_SEEDS,
                 base: ExperimentConfig | None = None, log: Callable[[str], None] | None = None,
                 only: Sequence[str] | None = None) -> list[dict]:
    """Run every preset of ``suite`` (or the ``only`` subset) for every seed.

    A failing run is recorded and skipped.

    Writes ``ablation.csv`` (``suite,preset,seed,val_acc``), ``table.txt`` and
    ``runs.json`` (config hash, full config and any error per row).
    """
    if suite not in SUITES:
        raise KeyError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
    base = base or desk_config()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    presets = SUITES[suite]
    if only is not None:
        unknown = set(only) - {p.name for p in presets}
        if unknown:
            raise KeyError(f"suite {suite!r} has no presets {sorted(unknown)}")
        presets = [p for p in presets if p.name in only]
    rows, sidecar = [], {}
    for p in presets:
        for seed in seeds:
            cfg = preset_config(base, p, seed)
            key = f"{p.name}/seed{seed}"
            entry = {"hash": cfg.digest(), "config": cfg.to_dict(), "error": None}
            try:
                res = run_train(cfg, data_dir, out / p.name / f"seed{seed}")
                acc = float(res["best_val_acc"])
            except Exception as e:  # noqa: BLE001 - one failed cell must not stop the suite
                acc = math.nan
                entry["error"] = f"{type(e).__name__}: {e}"
                if log:
                    log(traceback.format_exc())
            rows.append({"suite": suite, "preset": p.name, "seed": seed, "val_acc": acc})
            sidecar[key] = entry
            if log:
                log(f"{suite} {key}: val_acc {acc:.4f}")
            _write(out, suite, rows, sidecar, presets)
    return rows


def _write(out: Path, suite: str, rows: list[dict], sidecar: dict, presets) -> None:
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["suite", "preset", "seed", "val_acc"])
        for r in rows:
            w.writerow([r["suite"], r["preset"], r["seed"], repr(r["val_acc"])])
    (out / "runs.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    (out / "table.txt").write_text(render_table(suite, rows, presets))


def read_ablation(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return [{"suite": r["suite"], "preset": r["preset"], "seed": int(r["seed"]), "val_acc": float(r["val_acc"])}
                for r in csv.DictReader(f)]


def preset_means(rows: list[dict]) -> dict[str, float]:
    names = sorted({r["preset"] for r in rows})
    return {n: float(np.nanmean([r["val_acc"] for r in rows if r["preset"] == n])) for n in names}


def rerun_row(runs_json: str | Path, key: str, data_dir: str | Path, out_dir: str | Path) -> tuple[str, float]:
    """Re-run one recorded cell from its stored config; returns (config hash, val acc)."""
    entry = json.loads(Path(runs_json).read_text())[key]
    cfg = config_from_dict(entry["config"])
    if cfg.digest() != entry["hash"]:
        raise ValueError(f"{key}: stored config does not match its recorded hash")
    res = run_train(cfg, data_dir, out_dir)
    return cfg.digest(), float(res["best_val_acc"])
