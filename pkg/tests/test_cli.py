import csv
import io
import subprocess
import sys

import numpy as np
import pytest

from flowlite import checkpoint
from flowlite.cli import main, pad_to_multiple
from flowlite.flowio import read_flo, write_flo
from flowlite.network import init_params
from flowlite.training import TrainConfig, evaluate, holdout_set

TINY_CONFIG = """\
# small network for fast tests
num_levels=4
radius_per_level=2,2,2,2
encoder_widths=4,6,8,8
decoder_widths=8,8,8,8
generator_widths=6,6,6
large_kernel_levels=3
image_size=32
max_disp=4
batch_size=2
holdout_size=2
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return str(path)


@pytest.fixture
def trained(tmp_path, config):
    out = tmp_path / "m.ckpt"
    assert main(["train", "--config", config, "--variant", "CMFD", "--steps", "2", "--out", str(out)]) == 0
    return str(out)


def test_train_is_reproducible(tmp_path, config):
    paths = [tmp_path / "a.ckpt", tmp_path / "b.ckpt"]
    for i, p in enumerate(paths):
        assert main(["train", "--config", config, "--variant", "CMFD", "--steps", "500", "--seed", "7",
                     "--metrics", str(tmp_path / f"m{i}.jsonl"), "--out", str(p)]) == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert (tmp_path / "m0.jsonl").read_text() == (tmp_path / "m1.jsonl").read_text()


def test_zero_steps_writes_initial_weights(tmp_path, config):
    out = tmp_path / "z.ckpt"
    assert main(["train", "--config", config, "--variant", "CM", "--steps", "0", "--seed", "2",
                 "--out", str(out)]) == 0
    ck = checkpoint.load(str(out))
    assert ck.config.variant.label == "CM"
    for k, v in init_params(ck.config, seed=2).items():
        assert ck.params[k].tobytes() == v.data.tobytes()


def test_seed_environment_fallback(tmp_path, config, monkeypatch):
    monkeypatch.setenv("FLOWLITE_SEED", "7")
    out = tmp_path / "e.ckpt"
    assert main(["train", "--config", config, "--steps", "0", "--out", str(out)]) == 0
    assert checkpoint.load(str(out)).seed == 7
    # an explicit seed wins over the environment
    assert main(["train", "--config", config, "--steps", "0", "--seed", "1", "--out", str(out)]) == 0
    assert checkpoint.load(str(out)).seed == 1


def test_resolved_config_is_logged(tmp_path, config, caplog):
    with caplog.at_level("INFO", logger="flowlite"):
        main(["train", "--config", config, "--steps", "0", "--set", "lr_new=0.01", "--out", str(tmp_path / "x")])
    text = caplog.text
    assert "lr_new=0.01" in text and "encoder_widths=4,6,8,8" in text and "seed=" in text


def test_unknown_variant_is_rejected(tmp_path, config, capsys):
    code = main(["train", "--config", config, "--variant", "BOGUS", "--out", str(tmp_path / "x")])
    assert code != 0
    err = capsys.readouterr().err
    for label in ("NO", "FF", "CM", "CMFD"):
        assert label in err
    assert not (tmp_path / "x").exists()


def test_unknown_key_is_rejected(tmp_path, config, capsys):
    assert main(["train", "--config", config, "--set", "learning_rate=1", "--out", str(tmp_path / "x")]) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_infer_same_image_gives_zero_flow(tmp_path, config):
    ckpt = tmp_path / "init.ckpt"
    assert main(["train", "--config", config, "--variant", "CMFD", "--steps", "0", "--out", str(ckpt)]) == 0
    img = np.random.default_rng(0).random((32, 32, 3)).astype(np.float32)
    np.save(tmp_path / "a.npy", img)
    out = tmp_path / "f.flo"
    assert main(["infer", "--checkpoint", str(ckpt), str(tmp_path / "a.npy"), str(tmp_path / "a.npy"),
                 "--out", str(out)]) == 0
    np.testing.assert_array_equal(read_flo(str(out)).data, 0.0)


def test_infer_keeps_odd_extents(tmp_path, trained):
    rng = np.random.default_rng(1)
    for name in ("a", "b"):
        np.save(tmp_path / f"{name}.npy", rng.random((75, 100, 3)).astype(np.float32))
    out, png = tmp_path / "f.flo", tmp_path / "f.png"
    assert main(["infer", "--checkpoint", trained, str(tmp_path / "a.npy"), str(tmp_path / "b.npy"),
                 "--out", str(out), "--color", str(png)]) == 0
    assert read_flo(str(out)).shape == (1, 2, 75, 100)
    assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_infer_then_eval_reproduces_holdout_error(tmp_path, trained, capsys):
    ck = checkpoint.load(trained)
    tc = TrainConfig(image_size=32, max_disp=4.0, holdout_size=1, level_weights=[1.0, 1.0, 1.0])
    sample = holdout_set(tc)[0]
    expected = evaluate(ck.config, ck.tensors(requires_grad=False), [sample])["aee"]
    np.save(tmp_path / "a.npy", sample.i1.transpose(1, 2, 0))
    np.save(tmp_path / "b.npy", sample.i2.transpose(1, 2, 0))
    write_flo(str(tmp_path / "gt.flo"), sample.u_gt[None])
    assert main(["infer", "--checkpoint", trained, str(tmp_path / "a.npy"), str(tmp_path / "b.npy"),
                 "--out", str(tmp_path / "f.flo")]) == 0
    capsys.readouterr()
    assert main(["eval", str(tmp_path / "f.flo"), str(tmp_path / "gt.flo")]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    reported = float(next(r for r in rows if r["region"] == "all")["aee"])
    assert expected > 0
    assert reported == pytest.approx(expected, abs=1e-6)


def test_eval_with_masks(tmp_path):
    u = np.zeros((1, 2, 4, 4), dtype=np.float32)
    gt = u.copy()
    gt[:, 0, :, :2] = 4.0
    write_flo(str(tmp_path / "u.flo"), u)
    write_flo(str(tmp_path / "gt.flo"), gt)
    left = np.zeros((4, 4), dtype=np.uint8)
    left[:, :2] = 1
    np.save(tmp_path / "left.npy", left)
    out = tmp_path / "r.csv"
    assert main(["eval", str(tmp_path / "u.flo"), str(tmp_path / "gt.flo"), "--mask",
                 f"left={tmp_path / 'left.npy'}", "--out", str(out)]) == 0
    rows = {r["region"]: r for r in csv.DictReader(out.open())}
    assert float(rows["all"]["aee"]) == pytest.approx(2.0)
    assert float(rows["left"]["aee"]) == pytest.approx(4.0)
    assert float(rows["left"]["fl"]) == pytest.approx(1.0)


def test_eval_identical_flows(tmp_path, capsys):
    u = np.random.default_rng(3).standard_normal((1, 2, 5, 6)).astype(np.float32)
    write_flo(str(tmp_path / "u.flo"), u)
    assert main(["eval", str(tmp_path / "u.flo"), str(tmp_path / "u.flo")]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert float(rows[0]["aee"]) == 0.0 and float(rows[0]["fl"]) == 0.0


def test_eval_rejects_shape_mismatch(tmp_path):
    write_flo(str(tmp_path / "a.flo"), np.zeros((1, 2, 4, 4), dtype=np.float32))
    write_flo(str(tmp_path / "b.flo"), np.zeros((1, 2, 4, 5), dtype=np.float32))
    assert main(["eval", str(tmp_path / "a.flo"), str(tmp_path / "b.flo")]) == 2


def test_viz_writes_png(tmp_path):
    write_flo(str(tmp_path / "u.flo"), np.random.default_rng(4).standard_normal((1, 2, 8, 9)).astype(np.float32))
    out = tmp_path / "u.png"
    assert main(["viz", str(tmp_path / "u.flo"), "--out", str(out)]) == 0
    import cv2
    assert cv2.imread(str(out)).shape == (8, 9, 3)


def test_corrupt_checkpoint_fails_cleanly(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    np.save(tmp_path / "a.npy", np.zeros((8, 8, 3), dtype=np.float32))
    assert main(["infer", "--checkpoint", str(bad), str(tmp_path / "a.npy"), str(tmp_path / "a.npy")]) == 1
    assert capsys.readouterr().err.startswith("flowlite infer:")


def test_ablate_table(tmp_path, config):
    out = tmp_path / "abl.csv"
    assert main(["ablate", "--config", config, "--steps", "1", "--seeds", "0", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert [r["variant"] for r in rows] == ["NO", "CM-", "CMFD-", "CM", "CMFD"]
    assert [r["confidence_map"] for r in rows] == ["no", "no", "no", "yes", "yes"]


def test_pad_to_multiple_reflects():
    img = np.arange(15, dtype=np.float32).reshape(1, 1, 3, 5)
    padded, extents = pad_to_multiple(img, 4)
    assert padded.shape == (1, 1, 4, 8) and extents == (3, 5)
    np.testing.assert_array_equal(padded[..., :3, :5], img)
    np.testing.assert_array_equal(padded[0, 0, 3, :5], img[0, 0, 1])


@pytest.mark.slow
def test_gradcheck_command():
    result = subprocess.run([sys.executable, "-m", "flowlite.cli", "gradcheck", "--seed", "0"],
                            capture_output=True, text=True, timeout=300)
    assert result.returncode == 0, result.stdout + result.stderr
    assert "all" in result.stdout and "FAIL" not in result.stdout
