import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from doco import cli
from doco.checkpoint import load_checkpoint, save_checkpoint
from doco.errors import ConfigurationError, DivergenceError
from doco.model import FROZEN_PREFIXES, TRAINABLE_PREFIXES, build_store
from doco.numerics import OptimizerConfig, learning_rate
from doco.pipeline import (
    ExperimentConfig,
    TrainConfig,
    ablation_config,
    ablation_suite,
    eval_retrieval,
    format_table,
    pretrain,
    retrieval_hits,
)

from conftest import small_model


def _config(**kw) -> TrainConfig:
    opt = kw.pop("optimizer", OptimizerConfig(warmup_steps=2, total_steps=8))
    return TrainConfig(optimizer=opt, model=small_model(), batch_size=4, steps=8, **kw)


def _snapshot(store):
    return {n: t.data.copy() for n, t in store.params.items()}


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(intra=False, inter=False)
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(image_level=True)


def test_train_config_dict_round_trip():
    cfg = _config(intra=False, image_level=True)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_zero_learning_rate_leaves_parameters(small_data):
    cfg = _config(optimizer=OptimizerConfig(lr_max=0.0, lr_min=0.0, warmup_steps=0, total_steps=1))
    store = build_store(cfg.model)
    before = _snapshot(store)
    store, history = pretrain(small_data, cfg, steps=1)
    assert len(history) == 1 and np.isfinite(history[0]["total"])
    for name, data in before.items():
        assert store[name].data.tobytes() == data.tobytes()


def test_only_vision_side_changes(small_data):
    cfg = _config()
    store = build_store(cfg.model)
    before = _snapshot(store)
    frozen = store.digest(store.names(prefix="mm."))
    store, _ = pretrain(small_data, cfg)
    assert store.digest(store.names(prefix="mm.")) == frozen
    changed = {n for n, d in before.items() if store[n].data.tobytes() != d.tobytes()}
    assert all(n.startswith(TRAINABLE_PREFIXES) for n in changed)
    assert not any(n.startswith(FROZEN_PREFIXES) for n in changed)
    for prefix in TRAINABLE_PREFIXES:
        assert any(n.startswith(prefix) for n in changed), prefix


def test_history_is_deterministic_and_follows_schedule(small_data):
    cfg = _config()
    _, h1 = pretrain(small_data, cfg)
    _, h2 = pretrain(small_data, cfg)
    assert json.dumps(h1) == json.dumps(h2)
    assert [h["step"] for h in h1] == list(range(1, 9))
    assert [h["lr"] for h in h1] == [learning_rate(cfg.optimizer, k) for k in range(1, 9)]


def test_resume_matches_uninterrupted(small_data, tmp_path):
    cfg = _config()
    full_store, full = pretrain(small_data, cfg)
    part_store, first = pretrain(small_data, cfg, steps=3)
    path = save_checkpoint(part_store, tmp_path / "mid.ckpt")
    resumed_store, rest = pretrain(small_data, cfg, store=load_checkpoint(path))
    assert json.dumps(first + rest) == json.dumps(full)
    for name, t in full_store.params.items():
        assert resumed_store[name].data.tobytes() == t.data.tobytes()


def test_divergence_raises_and_saves_last_good(small_data, tmp_path):
    bad = [dataclasses.replace(a, image=np.full_like(a.image, np.nan)) for a in small_data]
    path = tmp_path / "last_good.ckpt"
    cfg = _config()
    with pytest.raises(DivergenceError) as info:
        pretrain(bad, cfg, checkpoint_path=path)
    assert info.value.step == 1
    saved = load_checkpoint(path)
    fresh = build_store(cfg.model)
    assert saved.digest() == fresh.digest()


def test_self_retrieval_is_perfect(rng):
    rows = rng.normal(size=(6, 5))
    assert retrieval_hits(rows, rows).all()
    assert retrieval_hits(rows, rows[::-1]).mean() < 1.0


def test_eval_report_fields(small_data, tmp_path):
    model = small_model()
    report = eval_retrieval(build_store(model), small_data, model, loss_curve=[1.0, 0.5])
    assert report.n_objects == sum(len(a.objects) + 1 for a in small_data)
    assert report.per_image_counts == [len(a.objects) + 1 for a in small_data]
    assert 0.0 <= report.top1_retrieval_accuracy <= 1.0
    written = json.loads(report.write(tmp_path / "r.json").read_text())
    assert written["loss_curve"] == [1.0, 0.5]


def test_ablation_rows(small_data):
    base = _config(optimizer=OptimizerConfig(warmup_steps=1, total_steps=2))
    base = dataclasses.replace(base, steps=2)
    variants = {"w/o DoCo": {"intra": False, "image_level": True}, "avg": {"aggregation": "average"}}
    rows = ablation_suite(small_data[:8], small_data[8:], base, variants)
    assert [r.name for r in rows] == list(variants)
    table = format_table(rows)
    assert len(table.splitlines()) == 2 + len(variants)
    cfg = ablation_config(base, variants["avg"])
    assert cfg.model.aggregation.mode == "average" and cfg.seed == base.seed


def test_reference_config_loads():
    exp = ExperimentConfig.from_file(Path(__file__).parents[1] / "configs" / "reference.json")
    assert exp.n_train == 512 and exp.n_heldout == 128
    assert exp.train.model.aggregation.mode == "roi"
    assert exp.thresholds["reference_min_top1"] == 0.8


# command line -------------------------------------------------------------------

@pytest.fixture
def tiny_experiment(tmp_path):
    cfg = {
        "n_train": 4, "n_heldout": 4,
        "data": {"seed": 1, "image_size": 32, "n_objects_range": [1, 2]},
        "train": {
            "batch_size": 2, "steps": 2,
            "optimizer": {"warmup_steps": 1, "total_steps": 2},
            "model": dataclasses.asdict(small_model()),
        },
    }
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(cfg))
    return path


def test_cli_gen_pretrain_eval(tiny_experiment, tmp_path, capsys):
    data = tmp_path / "data"
    assert cli.main(["gen", "--config", str(tiny_experiment), "--count", "4", "--out", str(data)]) == 0
    ckpt = tmp_path / "model.ckpt"
    assert cli.main(["pretrain", "--config", str(tiny_experiment), "--data", str(data), "--out", str(ckpt)]) == 0
    report = tmp_path / "report.json"
    assert cli.main(["eval", "--ckpt", str(ckpt), "--data", str(data), "--report", str(report)]) == 0
    fields = json.loads(report.read_text())
    assert set(fields) >= {"top1_retrieval_accuracy", "per_image_counts", "loss_curve", "wall_clock"}
    assert len(fields["loss_curve"]) == 2
    assert "top-1 retrieval accuracy" in capsys.readouterr().out


def test_cli_inspect_mask(tiny_experiment, tmp_path, capsys):
    data = tmp_path / "data"
    cli.main(["gen", "--config", str(tiny_experiment), "--count", "1", "--out", str(data)])
    capsys.readouterr()
    assert cli.main(["inspect-mask", "--data", str(data), "--image", "synth-1-000000", "--object", "0"]) == 0
    grid = capsys.readouterr().out.splitlines()[1:]
    assert len(grid) == 4 and all(len(line.split()) == 4 for line in grid)
    assert cli.main(["inspect-mask", "--data", str(data), "--image", "synth-1-000000", "--object", "9"]) == 2


def test_cli_validation_errors_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"intra": False, "inter": False}}))
    assert cli.main(["pretrain", "--config", str(bad), "--out", str(tmp_path / "x.ckpt")]) == 2
    assert cli.main(["eval", "--ckpt", str(tmp_path / "missing.ckpt"), "--data", str(tmp_path)]) == 2


def test_cli_divergence_exit_3(tiny_experiment, tmp_path, monkeypatch):
    def diverge(*args, **kwargs):
        raise DivergenceError("non-finite loss at step 1", step=1)

    monkeypatch.setattr(cli, "pretrain", diverge)
    assert cli.main(["pretrain", "--config", str(tiny_experiment), "--out", str(tmp_path / "d.ckpt")]) == 3


def test_cli_gradcheck_small(capsys):
    assert cli.main(["gradcheck", "--samples", "16"]) == 0
    assert "ok" in capsys.readouterr().out
