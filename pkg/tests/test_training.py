import json
import struct

import numpy as np
import pytest

from rescuenet.data import GeneratorConfig, generate_scenes, save_dataset
from rescuenet.model import ConfigError, ModelConfig, build_model
from rescuenet.tensor import Tensor
from rescuenet.training import (
    ABLATION_ROWS,
    CheckpointError,
    IncompatibleCheckpointError,
    TrainConfig,
    TrainingError,
    checkpoint_bytes,
    checkpoint_from_bytes,
    init_checkpoint,
    load_checkpoint,
    run_ablations_on_pairs,
    save_checkpoint,
    sgd_step,
    train,
    train_on_pairs,
    unsupervised_prefixes,
)
from rescuenet.model import ModelParams


@pytest.fixture(scope="module")
def pairs():
    return generate_scenes(GeneratorConfig(), 4, seed=31)


SMALL = TrainConfig(steps=3, batch=2, seed=5)


# -- optimizer --------------------------------------------------------------

def one_param(value):
    return ModelParams({"w": Tensor(np.array([value], dtype=np.float64), requires_grad=True, dtype=np.float64)})


def test_plain_gradient_step():
    p = one_param(1.0)
    sgd_step(p, {"w": np.array([1.0])}, {}, lr=0.1, momentum=0.0)
    assert p["w"].data[0] == pytest.approx(0.9, abs=1e-15)


def test_zero_gradient_is_fixed_point():
    p = one_param(0.3)
    sgd_step(p, {"w": np.array([0.0])}, {}, lr=0.1, momentum=0.9)
    assert p["w"].data[0] == 0.3


def test_two_momentum_steps():
    p = one_param(0.0)
    buf = {}
    for _ in range(2):
        sgd_step(p, {"w": np.array([1.0])}, buf, lr=0.1, momentum=0.9)
    assert buf["w"][0] == pytest.approx(1.9, abs=1e-15)
    assert p["w"].data[0] == pytest.approx(-0.29, abs=1e-15)


def test_missing_gradient_is_an_error():
    with pytest.raises(TrainingError, match="missing gradient"):
        sgd_step(one_param(0.0), {"w": None}, {}, lr=0.1, momentum=0.9)


def test_only_ce_mode_leaves_heads_unsupervised():
    assert unsupervised_prefixes(ModelConfig(loss_mode="ce")) == ("change.",)
    assert unsupervised_prefixes(ModelConfig(loss_mode="ce", change_head_enabled=False)) == ()
    assert unsupervised_prefixes(ModelConfig()) == ()


# -- config -----------------------------------------------------------------

def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(crop=30).validate()
    with pytest.raises(ConfigError):
        TrainConfig(fusion="change_only", change_head=False).validate()
    with pytest.raises(ConfigError):
        TrainConfig(lr_schedule="cosine").validate()
    assert TrainConfig(lr_schedule="poly", steps=10).lr_at(10) == 0.0
    assert TrainConfig().lr_at(123) == 0.05


# -- checkpoints ------------------------------------------------------------

def test_zero_steps_returns_initialization(pairs):
    res = train_on_pairs(pairs, TrainConfig(steps=0, seed=4))
    assert res.checkpoint.step == 0
    assert res.checkpoint.params.equal(build_model(TrainConfig().model_config(), 4))
    assert res.losses == []


def test_checkpoint_roundtrip_bytes(tmp_path, pairs):
    ckpt = train_on_pairs(pairs, SMALL).checkpoint
    path = tmp_path / "a.ckpt"
    save_checkpoint(ckpt, path)
    raw = path.read_bytes()
    again = load_checkpoint(path)
    assert checkpoint_bytes(again) == raw
    assert again.step == 3 and again.rng_state == SMALL.seed
    assert again.train_config == SMALL
    assert again.model_config == ckpt.model_config
    assert set(again.momentum) == set(ckpt.params.trainable())


def test_checkpoint_layout(pairs):
    ckpt = init_checkpoint(TrainConfig(seed=1))
    raw = checkpoint_bytes(ckpt)
    assert raw[:4] == b"RNET"
    assert struct.unpack("<I", raw[4:8]) == (1,)
    (n,) = struct.unpack("<I", raw[8:12])
    assert json.loads(raw[12 : 12 + n]) == ckpt.model_config.to_dict()
    step, rng = struct.unpack("<QQ", raw[-16:])
    assert (step, rng) == (0, 1)


def test_checkpoint_errors(tmp_path):
    raw = checkpoint_bytes(init_checkpoint(TrainConfig()))
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint_from_bytes(b"X" + raw[1:])
    with pytest.raises(CheckpointError, match="version"):
        checkpoint_from_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint_from_bytes(raw[:-5])
    with pytest.raises(CheckpointError, match="trailing"):
        checkpoint_from_bytes(raw + b"\0")


def test_incompatible_config_lists_missing_paths(tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(init_checkpoint(TrainConfig(change_head=False)), path)
    with pytest.raises(IncompatibleCheckpointError) as err:
        load_checkpoint(path, ModelConfig())
    assert "change.conv1.weight" in err.value.missing
    assert err.value.unexpected == []


# -- training loop ----------------------------------------------------------

def test_same_seed_same_checkpoint(pairs):
    a = checkpoint_bytes(train_on_pairs(pairs, SMALL).checkpoint)
    b = checkpoint_bytes(train_on_pairs(pairs, SMALL).checkpoint)
    assert a == b
    c = checkpoint_bytes(train_on_pairs(pairs, TrainConfig(steps=3, batch=2, seed=6)).checkpoint)
    assert a != c


def test_resume_is_bit_exact(tmp_path, pairs):
    full = train_on_pairs(pairs, TrainConfig(steps=4, batch=2, seed=2))
    half = train_on_pairs(pairs, TrainConfig(steps=2, batch=2, seed=2))
    save_checkpoint(half.checkpoint, tmp_path / "half.ckpt")
    resumed = train_on_pairs(pairs, TrainConfig(steps=4, batch=2, seed=2), resume=load_checkpoint(tmp_path / "half.ckpt"))
    assert checkpoint_bytes(resumed.checkpoint) == checkpoint_bytes(full.checkpoint)
    assert half.losses + resumed.losses == full.losses


@pytest.mark.parametrize("mode", ["ce", "locaware", "locaware_dice"])
def test_every_loss_mode_trains(pairs, mode):
    res = train_on_pairs(pairs, TrainConfig(steps=2, batch=2, loss_mode=mode))
    assert len(res.losses) == 2 and all(np.isfinite(res.losses))


def test_log_format(pairs):
    lines = []
    train_on_pairs(pairs, TrainConfig(steps=2, batch=2, eval_every=2), log=lines.append)
    step_lines = [ln for ln in lines if ln.startswith("step=")]
    assert len(step_lines) == 2
    fields = dict(kv.split("=") for kv in step_lines[0].split())
    assert set(fields) == {"step", "loss", "loc", "damage", "dice", "change", "ce", "lr"}
    assert fields["step"] == "1" and float(fields["loss"]) > 0
    assert lines[-1].startswith("eval step=2 ") and "score=" in lines[-1]


def test_nan_loss_aborts_with_scene_ids(pairs):
    ckpt = init_checkpoint(SMALL)
    ckpt.params["seg.out.bias"].data[:] = np.nan
    with pytest.raises(TrainingError, match="non-finite loss") as err:
        train_on_pairs(pairs, SMALL, resume=ckpt)
    assert any(p.scene_id in str(err.value) for p in pairs)


def test_train_from_directory(tmp_path, pairs):
    save_dataset(pairs, tmp_path / "d")
    a = train(tmp_path / "d", SMALL).checkpoint
    b = train_on_pairs(sorted(pairs, key=lambda p: p.scene_id), SMALL).checkpoint
    assert checkpoint_bytes(a) == checkpoint_bytes(b)


def test_ablation_report_shape(pairs):
    rep = run_ablations_on_pairs(pairs, pairs, TrainConfig(steps=1, batch=1), [0])
    assert len(rep.rows) == 7 == len(ABLATION_ROWS)
    assert all(0.0 <= s <= 1.0 for row in rep.rows for s in row.scores)
    text = rep.to_text()
    assert "Localization Aware Loss + Dice Loss" in text
    assert "Without change detection head" in text
    data = json.loads(rep.to_json())
    assert len(data["rows"]) == 7
