import math
import struct

import numpy as np
import pytest
import torch

from thorn.checkpoint import CheckpointError, file_hash, load_checkpoint, save_checkpoint
from thorn.config import ConfigError, ExperimentConfig, load_config, write_flat_toml
from thorn.harness import (
    ClipStore,
    DatasetMismatch,
    PlateauScheduler,
    augment_batch,
    dihedral,
    evaluate,
    evaluate_model,
    load_model,
    read_rows,
    summarize,
    train,
    train_model,
    translate,
)
from thorn.model import build_model
from thorn.synthdata import SynthConfig, generate_dataset, load_splits


def tiny_config(**kw):
    base = dict(num_objects=4, num_verbs=3, input_size=16, grid_size=0, d1=8, d_global=8, d2=4, d_e=2,
                heads=2, n_blocks=1, tcn_kernel=3, epochs=2, batch_size=4, lr=1e-3)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    cfg = SynthConfig(num_objects=4, num_verbs=3, frames=4, height=16, width=16, object_radius=2,
                      clips_per_class=3, seed=1)
    return generate_dataset(cfg, out)


# ---------------------------------------------------------------- scheduler


def _opt(lr=1.0):
    return torch.optim.SGD([torch.nn.Parameter(torch.zeros(1))], lr=lr)


def test_scheduler_cuts_after_patience():
    opt = _opt()
    sched = PlateauScheduler(opt, factor=0.1, patience=2)
    assert not sched.step(1.0)
    assert not sched.step(1.0)
    assert sched.step(1.0)
    assert opt.param_groups[0]["lr"] == pytest.approx(0.1)


def test_scheduler_resets_on_improvement():
    opt = _opt()
    sched = PlateauScheduler(opt, factor=0.5, patience=2)
    for loss in (1.0, 1.1, 0.9, 1.0, 0.8, 0.85):
        assert not sched.step(loss)
    assert opt.param_groups[0]["lr"] == 1.0


# ---------------------------------------------------------------- augmentation


def test_dihedral_group_actions():
    clips = torch.rand(8, 2, 5, 5, 3)
    out = dihedral(clips, list(range(8)))
    assert out.shape == clips.shape
    assert torch.equal(out[0], clips[0])
    assert torch.equal(out[1], clips[1].flip(1))
    assert torch.equal(out[4], clips[4].transpose(1, 2))
    # every symmetry is a pixel permutation
    for i in range(8):
        assert torch.equal(out[i].flatten(1, 2).sort(dim=1).values, clips[i].flatten(1, 2).sort(dim=1).values)


def test_dihedral_swap_needs_square():
    with pytest.raises(ValueError):
        dihedral(torch.rand(1, 2, 4, 5, 3), [4])


def test_translate_is_cyclic():
    clips = torch.rand(2, 1, 6, 6, 3)
    out = translate(clips, np.array([[1, 2], [0, 0]]))
    assert torch.equal(out[0, 0, 1, 2], clips[0, 0, 0, 0])
    assert torch.equal(out[1], clips[1])


@pytest.mark.parametrize("mode", ["none", "dihedral", "dihedral_shift"])
def test_augment_preserves_shape_and_values(mode):
    clips = torch.rand(3, 2, 8, 8, 3)
    out = augment_batch(clips, np.random.default_rng(0), mode)
    assert out.shape == clips.shape
    # symmetries and cyclic shifts only move pixels around
    for a, b in zip(out, clips):
        assert torch.equal(a.flatten().sort().values, b.flatten().sort().values)


def test_augment_rejects_unknown_mode():
    with pytest.raises(ValueError):
        augment_batch(torch.rand(1, 1, 4, 4, 3), np.random.default_rng(0), "mixup")


# ---------------------------------------------------------------- config


def test_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        ExperimentConfig(node_mode="spatial")
    with pytest.raises(ConfigError):
        ExperimentConfig(tcn_kernel=4)
    with pytest.raises(ConfigError):
        ExperimentConfig(dropout=1.0)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"nonsense": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"d1": "big"})


def test_config_file_round_trip(tmp_path, monkeypatch):
    monkeypatch.delenv("THORN_SEED", raising=False)
    cfg = tiny_config(seed=5, augment="dihedral")
    write_flat_toml(cfg.to_dict(), tmp_path / "c.toml")
    assert load_config(tmp_path / "c.toml") == cfg


def test_seed_precedence(tmp_path, monkeypatch):
    write_flat_toml({"seed": 1}, tmp_path / "c.toml")
    monkeypatch.setenv("THORN_SEED", "2")
    assert load_config(tmp_path / "c.toml").seed == 2
    assert load_config(tmp_path / "c.toml", seed=3).seed == 3
    monkeypatch.setenv("THORN_SEED", "x")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.toml")


def test_nested_or_missing_config(tmp_path):
    (tmp_path / "n.toml").write_text("[model]\nd1 = 3\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "n.toml")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    model = build_model(tiny_config())
    state = model.state_dict()
    save_checkpoint(tmp_path / "m.ckpt", state, {"a": 1})
    loaded, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"a": 1}
    assert loaded.keys() == state.keys()
    for k in state:
        assert torch.equal(loaded[k].float(), state[k].float())


def test_checkpoint_rejects_corruption(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", {"w": torch.ones(3)})
    data = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"X" + data[1:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(data[:-5])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.ckpt")
    (tmp_path / "long.ckpt").write_bytes(data + struct.pack("<I", 0))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "long.ckpt")


# ---------------------------------------------------------------- metrics


def test_summarize_known_values():
    class A:
        def __init__(self, v, n):
            self.clip_id, self.verb, self.noun, self.detector_scores = f"c{v}{n}", v, n, None

    anns = [A(0, 0), A(1, 1), A(1, 0)]
    verb_logits = np.array([[5.0, 0], [0, 5.0], [5.0, 0]])
    noun_logits = np.array([[5.0, 0], [0, 5.0], [5.0, 0]])
    with pytest.warns(RuntimeWarning):
        rep = summarize(anns, verb_logits, noun_logits, fusion=True)
    assert rep["verb_top1"] == pytest.approx(200 / 3)
    assert rep["noun_top1"] == 100.0
    assert rep["action_top1"] == pytest.approx(200 / 3)
    assert math.isnan(rep["fused_noun_top1"])
    verb_rows = {r["class"]: r for r in rep.per_class if r["kind"] == "verb"}
    assert verb_rows[1]["n"] == 2 and verb_rows[1]["correct"] == 1


def test_untrained_model_at_chance(tiny_data):
    # with lr 0 nothing moves: the loss is finite and accuracy is what the init gives
    cfg = tiny_config(lr=0.0, epochs=1)
    res = train_model(cfg, tiny_data.train, tiny_data.val)
    fresh = build_model(cfg)
    a = evaluate_model(res.model, tiny_data.test, cfg, fusion=False)
    b = evaluate_model(fresh, tiny_data.test, cfg, fusion=False)
    assert a.metrics == pytest.approx(b.metrics, nan_ok=True)
    assert math.isfinite(a["loss_total"])


def test_dataset_mismatch_is_rejected(tiny_data):
    with pytest.raises(DatasetMismatch):
        train_model(tiny_config(num_objects=5), tiny_data.train)
    with pytest.raises(DatasetMismatch):
        train_model(tiny_config(), [])


def test_train_writes_artifacts_and_reloads(tiny_data, tmp_path):
    cfg = tiny_config(epochs=2)
    res = train(cfg, tiny_data.manifest, tmp_path / "run")
    for name in ("best.ckpt", "last.ckpt", "metrics.csv", "config.toml"):
        assert (tmp_path / "run" / name).exists()
    rows = read_rows(tmp_path / "run" / "metrics.csv")
    assert [int(r["epoch"]) for r in rows] == [1, 2]
    model, loaded_cfg, meta = load_model(tmp_path / "run" / "last")
    assert loaded_cfg == cfg
    assert meta["step"] == res.steps
    split = load_splits(tiny_data.manifest)["test"]
    a = evaluate_model(res.model, split, cfg, fusion=False)
    b = evaluate_model(model, split, cfg, fusion=False)
    for key in ("verb_top1", "noun_top1", "action_top1"):
        assert a[key] == b[key]


def test_evaluate_writes_reports(tiny_data, tmp_path):
    train(tiny_config(epochs=1), tiny_data.manifest, tmp_path / "run")
    rep = evaluate(tmp_path / "run" / "best", tiny_data.manifest, "test", True, tmp_path / "ev")
    assert rep["n_clips"] == len(tiny_data.test)
    assert not math.isnan(rep["fused_noun_top1"])
    for name in ("eval_test_metrics.csv", "eval_test_per_class.csv", "eval_test_predictions.csv"):
        assert (tmp_path / "ev" / name).exists()


def test_max_steps_caps_training(tiny_data):
    res = train_model(tiny_config(epochs=50, max_steps=3), tiny_data.train)
    assert res.steps == 3


def test_same_seed_same_checkpoint(tiny_data, tmp_path):
    cfg = tiny_config(epochs=1, augment="dihedral_shift")
    train(cfg, tiny_data.manifest, tmp_path / "a")
    train(cfg, tiny_data.manifest, tmp_path / "b")
    assert file_hash(tmp_path / "a" / "last.ckpt") == file_hash(tmp_path / "b" / "last.ckpt")
    train(cfg.replace(seed=1), tiny_data.manifest, tmp_path / "c")
    assert file_hash(tmp_path / "a" / "last.ckpt") != file_hash(tmp_path / "c" / "last.ckpt")


def test_clip_store_caches(tiny_data):
    store = ClipStore()
    ann = tiny_data.train[0]
    assert store.get(ann) is store.get(ann)
