import json
import math

import numpy as np
import pytest

from lipkit.datapipe import DataError, SyntheticSpec, generate_synthetic, load_samples, DatasetManifest, iterate_batches
from lipkit.harness.ablation import SUITES, read_ablation, rerun_row, run_ablation
from lipkit.harness.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from lipkit.harness.cli import main
from lipkit.harness.config import ConfigError, ExperimentConfig, config_from_dict, load_config, with_overrides
from lipkit.harness.train import evaluate, logits_for, read_metrics, run_eval, run_train
from lipkit.ndtensor import ShapeError
from lipkit.recipe import cosine_lr

TINY = {
    "model.num_classes": 3,
    "model.frontend.widths": [4, 8],
    "model.frontend.blocks": [1, 1],
    "model.backend.layers": 1,
    "model.backend.hidden": 8,
    "model.backend.init": "scaled",
    "model.fc_init": "scaled",
    "recipe.batch": 4,
    "recipe.base_batch": 4,
    "recipe.base_lr": 1e-3,
    "recipe.total_epochs": 3,
    "data.resize": 16,
    "data.crop": 12,
}


def tiny_config(**extra) -> ExperimentConfig:
    return with_overrides(ExperimentConfig(), {**TINY, **extra})


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    generate_synthetic(d, SyntheticSpec(classes=3, per_class=8, frames=8, size=16, seed=2))
    return d


# ---------------------------------------------------------------- config

def test_config_json_round_trip(tmp_path):
    cfg = tiny_config()
    p = tmp_path / "c.json"
    p.write_text(cfg.to_json())
    back = load_config(p)
    assert back == cfg and back.digest() == cfg.digest()


@pytest.mark.parametrize("doc, path", [
    ({"model": {"colour": 1}}, "model.colour"),
    ({"recipe": {"base_lr": "fast"}}, "recipe.base_lr"),
    ({"model": {"backend": {"hidden": 1.5}}}, "model.backend.hidden"),
    ({"data": {"crop": 100}}, "data"),
    ({"optimizer": {}}, "optimizer"),
])
def test_config_errors_name_the_field(doc, path):
    with pytest.raises(ConfigError, match=path.replace(".", r"\.")):
        config_from_dict(doc).validate()


def test_override_of_unknown_path():
    with pytest.raises(ConfigError):
        with_overrides(ExperimentConfig(), {"model.nope": 1})


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_bit_identical_logits(tmp_path, data_dir):
    cfg = tiny_config(**{"recipe.total_epochs": 1})
    run_train(cfg, data_dir, tmp_path)
    ck = tmp_path / "last.ckpt"
    cfg2, params, state = load_checkpoint(ck)
    assert cfg2 == cfg and state.epoch == 1
    x = np.random.default_rng(0).random((2, 1, 8, 12, 12)).astype(np.float32)
    a = logits_for(cfg2, params, x)
    save_checkpoint(tmp_path / "again.ckpt", cfg2, params, state)
    _, params3, _ = load_checkpoint(tmp_path / "again.ckpt")
    assert logits_for(cfg2, params3, x).tobytes() == a.tobytes()
    header, tensors = read_checkpoint(ck)
    assert any(k.startswith("adam.m:") for k in tensors)


def test_checkpoint_shape_mismatch(tmp_path, data_dir):
    cfg = tiny_config(**{"recipe.total_epochs": 1})
    run_train(cfg, data_dir, tmp_path)
    wider = tiny_config(**{"model.backend.hidden": 6})
    with pytest.raises(ShapeError):
        load_checkpoint(tmp_path / "last.ckpt", wider)


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        read_checkpoint(p)


# ---------------------------------------------------------------- training

def test_metrics_schema_and_cosine_lr(tmp_path, data_dir):
    cfg = tiny_config(**{"recipe.scheduler": "cosine", "data.eval_train": True})
    run_train(cfg, data_dir, tmp_path)
    text = (tmp_path / "metrics.csv").read_text()
    assert text.splitlines()[0] == "epoch,phase,lr,loss,acc"
    rows = read_metrics(tmp_path / "metrics.csv")
    assert [r["phase"] for r in rows[:3]] == ["train", "train_eval", "val"]
    for r in rows:
        assert r["lr"] == cosine_lr(r["epoch"] - 1, 3, cfg.recipe.lr)


def test_exponential_lr_column(tmp_path, data_dir):
    cfg = tiny_config(**{"recipe.scheduler": "exponential"})
    run_train(cfg, data_dir, tmp_path)
    for r in read_metrics(tmp_path / "metrics.csv"):
        assert abs(r["lr"] - cfg.recipe.lr * 0.95 ** (r["epoch"] - 1)) <= 1e-15


def test_same_seed_same_metrics(tmp_path, data_dir):
    cfg = tiny_config(**{"recipe.mixup": True, "recipe.epsilon": 0.1})
    run_train(cfg, data_dir, tmp_path / "a")
    run_train(cfg, data_dir, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_resume_matches_uninterrupted(tmp_path, data_dir):
    cfg = tiny_config(**{"recipe.mixup": True, "model.backend.inter_layer_dropout": 0.2, "model.backend.layers": 2})
    run_train(cfg, data_dir, tmp_path / "full")
    run_train(cfg, data_dir, tmp_path / "part", epochs=1)
    run_train(cfg, data_dir, tmp_path / "part", resume=tmp_path / "part" / "last.ckpt")
    assert (tmp_path / "full" / "metrics.csv").read_bytes() == (tmp_path / "part" / "metrics.csv").read_bytes()


def test_eval_reproduces_logged_best_accuracy(tmp_path, data_dir):
    res = run_train(tiny_config(), data_dir, tmp_path)
    rep = run_eval(tmp_path / "best.ckpt", data_dir, "val")
    assert rep["accuracy"] == res["best_val_acc"]
    assert len(rep["predictions"]) == len(DatasetManifest.load(data_dir).split("val"))
    assert len(rep["per_class"]) == 3


def test_eval_order_invariance(data_dir):
    cfg = tiny_config()
    from lipkit.model import init_model
    from lipkit.ndtensor import Rng

    params = init_model(cfg.model, Rng(0))
    samples = load_samples(data_dir, DatasetManifest.load(data_dir), "val", cfg.data)
    a = evaluate(cfg, params, samples)
    b = evaluate(cfg, params, samples[::-1])
    assert a.acc == b.acc


def test_empty_split_is_an_error(tmp_path, data_dir):
    m = DatasetManifest.load(data_dir)
    for e in m.samples:
        if e.split == "val":
            e.split = "test"
    d = tmp_path / "noval"
    (d / "clips").mkdir(parents=True)
    for e in m.samples:
        (d / e.path).write_bytes((data_dir / e.path).read_bytes())
    m.save(d)
    with pytest.raises(DataError):
        run_train(tiny_config(), d, tmp_path / "out")
    with pytest.raises(DataError):
        next(iterate_batches([], 2, tiny_config().data))


def test_class_count_mismatch(tmp_path, data_dir):
    with pytest.raises(DataError):
        run_train(tiny_config(**{"model.num_classes": 4}), data_dir, tmp_path)


# ---------------------------------------------------------------- CLI

def _write_cfg(tmp_path, **extra):
    p = tmp_path / "cfg.json"
    p.write_text(tiny_config(**extra).to_json())
    return p


def test_cli_end_to_end(tmp_path, capsys):
    data = tmp_path / "d"
    assert main(["gen-data", "--out", str(data), "--classes", "3", "--per-class", "6",
                 "--frames", "8", "--size", "16", "--seed", "1"]) == 0
    cfg = _write_cfg(tmp_path, **{"recipe.total_epochs": 1})
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "run")]) == 0
    preds = tmp_path / "p.csv"
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(tmp_path / "run" / "best.ckpt"), "--data", str(data),
                 "--split", "test", "--predictions", str(preds)]) == 0
    report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert report["split"] == "test" and 0.0 <= report["accuracy"] <= 1.0
    assert preds.read_text().splitlines()[0] == "id,label,pred"


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_exit_codes(tmp_path, data_dir):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"recipe": {"lr_typo": 1}}))
    assert main(["train", "--config", str(bad), "--data", str(data_dir), "--out", str(tmp_path / "o")]) == 2
    cfg = _write_cfg(tmp_path)
    assert main(["train", "--config", str(cfg), "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 3
    # an absurd learning rate overflows the parameters and the loss goes non-finite
    boom = _write_cfg(tmp_path, **{"recipe.base_lr": 1e38, "recipe.weight_decay": 0.0})
    assert main(["train", "--config", str(boom), "--data", str(data_dir), "--out", str(tmp_path / "o2")]) == 4


def test_cli_align(tmp_path):
    from lipkit.align import default_template
    from lipkit.ndtensor import load_tensor, save_tensor

    tpl = default_template(24)
    (tmp_path / "t.json").write_text(json.dumps(tpl))
    frames = tmp_path / "frames"
    frames.mkdir()
    rng = np.random.default_rng(0)
    for i in range(3):
        save_tensor(frames / f"{i:03d}.lkt", rng.random((24, 24)).astype(np.float32))
    (tmp_path / "lm.json").write_text(json.dumps([tpl["points"]] * 3))
    out = tmp_path / "out"
    assert main(["align", "--frames", str(frames), "--landmarks", str(tmp_path / "lm.json"),
                 "--template", str(tmp_path / "t.json"), "--out", str(out)]) == 0
    np.testing.assert_allclose(load_tensor(out / "001.lkt"), load_tensor(frames / "001.lkt"), atol=1e-6)
    (tmp_path / "lm.json").write_text(json.dumps([tpl["points"][:4]] * 3))
    assert main(["align", "--frames", str(frames), "--landmarks", str(tmp_path / "lm.json"),
                 "--template", str(tmp_path / "t.json"), "--out", str(out)]) == 3


# ---------------------------------------------------------------- ablation

def test_suites_cover_the_grid():
    assert set(SUITES) == {"frontend", "backend", "data", "tweaks", "schedulers", "final"}
    final = {p.name: p.deltas for p in SUITES["final"]}
    assert final["basic"] == {}
    assert final["refined"]["recipe.mixup"] and final["refined"]["model.frontend.se_enabled"]
    for presets in SUITES.values():
        names = [p.name for p in presets]
        assert len(names) == len(set(names))


def test_ablation_smoke_and_rerun(tmp_path, data_dir):
    base = tiny_config(**{"recipe.total_epochs": 1})
    rows = run_ablation("final", data_dir, tmp_path, seeds=[0, 1], base=base)
    assert [(r["preset"], r["seed"]) for r in rows] == [("basic", 0), ("basic", 1), ("refined", 0), ("refined", 1)]
    assert read_ablation(tmp_path / "ablation.csv") == rows
    table = (tmp_path / "table.txt").read_text()
    assert "refined" in table and " 2" in table
    h, acc = rerun_row(tmp_path / "runs.json", "refined/seed1", data_dir, tmp_path / "again")
    sidecar = json.loads((tmp_path / "runs.json").read_text())
    assert h == sidecar["refined/seed1"]["hash"]
    assert acc == rows[3]["val_acc"]


def test_ablation_records_failures_and_continues(tmp_path, data_dir):
    base = tiny_config(**{"recipe.total_epochs": 1, "model.num_classes": 4})
    rows = run_ablation("frontend", data_dir, tmp_path, seeds=[0], base=base)
    assert len(rows) == 2 and all(math.isnan(r["val_acc"]) for r in rows)
    sidecar = json.loads((tmp_path / "runs.json").read_text())
    assert all("DataError" in e["error"] for e in sidecar.values())
    assert "failed" in (tmp_path / "table.txt").read_text()
