import json

import numpy as np
import pytest

from rescuenet import cli
from rescuenet.data.io import netpbm_bytes, read_netpbm


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert run("generate", "--out", d, "--count", 2, "--seed", 7, "--image-size", 64) == 0
    return d


@pytest.fixture(scope="module")
def checkpoint(dataset, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "model.ckpt"
    assert run("train", "--data", dataset, "--steps", 2, "--batch", 2, "--out", path) == 0
    return path


def test_generate_writes_four_files_per_scene(dataset, capsys):
    names = sorted(p.name for p in dataset.iterdir())
    assert len(names) == 8
    assert {n.split("_", 2)[-1] for n in names} == {"pre.ppm", "post.ppm", "mask.pgm", "labels.json"}


def test_generate_is_reproducible(dataset, tmp_path, capsys):
    assert run("generate", "--out", tmp_path, "--count", 2, "--seed", 7) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 2 and lines[0].startswith("scene=s7_00000 ")
    for p in dataset.iterdir():
        assert (tmp_path / p.name).read_bytes() == p.read_bytes()


def test_generate_bad_distribution_writes_nothing(tmp_path, capsys):
    out = tmp_path / "x"
    assert run("generate", "--out", out, "--count", 2, "--class-dist", "0.5,0.5,0.2") == 1
    assert run("generate", "--out", out, "--count", 2, "--class-dist", "0.5,0.5,0.2,0.2") == 1
    assert not out.exists()
    assert "error" in capsys.readouterr().err


def test_train_zero_steps_is_initialization(dataset, tmp_path):
    from rescuenet.model import build_model
    from rescuenet.training import TrainConfig, load_checkpoint

    path = tmp_path / "init.ckpt"
    assert run("train", "--data", dataset, "--steps", 0, "--seed", 3, "--out", path) == 0
    ckpt = load_checkpoint(path)
    assert ckpt.step == 0
    assert ckpt.params.equal(build_model(TrainConfig().model_config(), 3))


def test_train_invalid_loss_is_usage_error(dataset, tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run("train", "--data", dataset, "--loss", "focal", "--out", tmp_path / "x.ckpt")
    assert exc.value.code == 1
    assert not (tmp_path / "x.ckpt").exists()


def test_train_log_lines(dataset, tmp_path, capsys):
    assert run("train", "--data", dataset, "--steps", 2, "--batch", 1, "--loss", "locaware",
               "--seg-head", "simple", "--change-head", "off", "--out", tmp_path / "m.ckpt") == 0
    lines = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("step=")]
    assert [ln.split()[0] for ln in lines] == ["step=1", "step=2"]
    for ln in lines:
        fields = dict(kv.split("=") for kv in ln.split())
        assert float(fields["loss"]) > 0 and float(fields["change"]) == 0.0


def test_train_missing_dataset(tmp_path):
    assert run("train", "--data", tmp_path / "nope", "--steps", 1, "--out", tmp_path / "m.ckpt") == 1


def test_eval_writes_report(dataset, checkpoint, tmp_path, capsys):
    report = tmp_path / "r.json"
    assert run("eval", "--data", dataset, "--ckpt", checkpoint, "--report", report, "--pred-out", tmp_path / "p") == 0
    data = json.loads(report.read_text())
    assert data["n_pixels"] == 2 * 64 * 64
    assert (tmp_path / "r.txt").read_text() == capsys.readouterr().out
    assert len(list((tmp_path / "p").glob("*_mask.pgm"))) == 2


def test_eval_jobs_env_override(dataset, checkpoint, tmp_path, monkeypatch):
    assert run("eval", "--data", dataset, "--ckpt", checkpoint, "--report", tmp_path / "a.json") == 0
    monkeypatch.setenv("RESCUENET_THREADS", "3")
    assert cli._jobs(1) == 3
    assert run("eval", "--data", dataset, "--ckpt", checkpoint, "--report", tmp_path / "b.json") == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_eval_change_only_without_change_head(dataset, tmp_path, capsys):
    ckpt = tmp_path / "nochange.ckpt"
    assert run("train", "--data", dataset, "--steps", 0, "--change-head", "off", "--out", ckpt) == 0
    assert run("eval", "--data", dataset, "--ckpt", ckpt, "--fusion", "change_only", "--report", tmp_path / "r.json") == 1
    assert "change" in capsys.readouterr().err
    assert not (tmp_path / "r.json").exists()


def test_score_perfect(dataset, tmp_path, capsys):
    assert run("score", "--pred", dataset, "--gt", dataset, "--report", tmp_path / "s.json") == 0
    assert json.loads((tmp_path / "s.json").read_text())["score"] == 1.0


def test_score_hand_example(tmp_path):
    (tmp_path / "gt").mkdir()
    (tmp_path / "pred").mkdir()
    (tmp_path / "gt" / "a_mask.pgm").write_bytes(netpbm_bytes(np.array([[0, 1], [1, 2]], np.uint8)))
    (tmp_path / "pred" / "a_mask.pgm").write_bytes(netpbm_bytes(np.array([[0, 1], [2, 2]], np.uint8)))
    assert run("score", "--pred", tmp_path / "pred", "--gt", tmp_path / "gt", "--report", tmp_path / "s.json") == 0
    assert json.loads((tmp_path / "s.json").read_text())["score"] == pytest.approx(0.86)


def test_score_errors(tmp_path, dataset):
    (tmp_path / "pred").mkdir()
    assert run("score", "--pred", tmp_path / "pred", "--gt", dataset, "--report", tmp_path / "s.json") == 1
    sid = next(dataset.glob("*_mask.pgm")).name
    (tmp_path / "pred" / sid).write_bytes(netpbm_bytes(np.zeros((8, 8), np.uint8)))
    other = next(p for p in dataset.glob("*_mask.pgm") if p.name != sid)
    (tmp_path / "pred" / other.name).write_bytes(other.read_bytes())
    assert run("score", "--pred", tmp_path / "pred", "--gt", dataset, "--report", tmp_path / "s.json") == 1
    assert not (tmp_path / "s.json").exists()


def test_render_colours(tmp_path):
    mask = np.array([[0, 1, 2], [3, 4, 255]], np.uint8)
    (tmp_path / "m.pgm").write_bytes(netpbm_bytes(mask))
    assert run("render", "--mask", tmp_path / "m.pgm", "--out", tmp_path / "m.ppm") == 0
    rgb = read_netpbm(tmp_path / "m.ppm")
    assert rgb[0].tolist() == [[0, 0, 255], [0, 200, 0], [255, 165, 0]]
    assert rgb[1].tolist() == [[255, 105, 180], [255, 0, 0], [0, 0, 0]]
    # undamaged buildings render green and destroyed ones red
    assert cli.PALETTE[1] == (0, 200, 0) and cli.PALETTE[4] == (255, 0, 0)


def test_render_all_zero_is_blue(tmp_path):
    (tmp_path / "z.pgm").write_bytes(netpbm_bytes(np.zeros((3, 4), np.uint8)))
    assert run("render", "--mask", tmp_path / "z.pgm", "--out", tmp_path / "z.ppm") == 0
    assert np.all(read_netpbm(tmp_path / "z.ppm") == [0, 0, 255])


def test_render_invalid_class(tmp_path):
    (tmp_path / "bad.pgm").write_bytes(netpbm_bytes(np.full((2, 2), 9, np.uint8)))
    assert run("render", "--mask", tmp_path / "bad.pgm", "--out", tmp_path / "bad.ppm") == 1
    assert not (tmp_path / "bad.ppm").exists()


def test_gradcheck_exit_code(capsys):
    assert run("gradcheck", "--trials", 2) == 0
    out = capsys.readouterr().out.splitlines()
    assert any(ln.startswith("conv2d_weight") for ln in out)
    assert all(ln.endswith(" ok") for ln in out)
    assert run("gradcheck", "--trials", 1, "--tol", "-1") == 2
