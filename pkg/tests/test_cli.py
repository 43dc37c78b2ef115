import subprocess
import sys

import numpy as np
import pytest

from fcnlab.cli import main
from fcnlab.graph import read_checkpoint
from fcnlab.imageio import load_image


def run(capsys, *argv):
    status = main(list(argv))
    out, err = capsys.readouterr()
    return status, out, err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("shapes")
    assert main(["generate", "--out", str(root), "--size", "32", "--train", "6", "--val", "2", "--test", "2",
                 "--seed", "3"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--net", "fcn8s.net", "--data", str(dataset), "--out", str(out), "--regime", "heavy",
                 "--seed", "1", "--updates", "4", "--snapshot-every", "2"]) == 0
    return out


def test_probe_vgg(capsys):
    status, out, _ = run(capsys, "probe", "vgg16.net")
    assert status == 0
    assert "output: rf 404 stride 32" in out


def test_probe_alexnet(capsys):
    status, out, _ = run(capsys, "probe", "alexnet")
    assert "output: rf 355 stride 32" in out


def test_equiv(capsys):
    status, out, _ = run(capsys, "equiv", "0.9", "20", "1")
    assert status == 0 and out.startswith("p' = 0.9947")
    status, out, _ = run(capsys, "equiv", "0.99", "1", "20")
    assert out.startswith("p' = 0.8179")


def test_equiv_bad_momentum(capsys):
    status, _, err = run(capsys, "equiv", "1.5", "20", "1")
    assert status == 1 and "momentum" in err


def test_missing_net(capsys, dataset, tmp_path):
    missing = tmp_path / "nope.net"
    status, _, err = run(capsys, "train", "--net", str(missing), "--data", str(dataset))
    assert status == 2 and str(missing) in err


def test_bad_net_file(capsys, dataset, tmp_path):
    bad = tmp_path / "bad.net"
    bad.write_text("input 3\nc1 conv 3\n")
    status, _, err = run(capsys, "probe", str(bad))
    assert status == 1 and "byte 8" in err


def test_generate_layout(dataset):
    for split, n in (("train", 6), ("val", 2), ("test", 2)):
        assert len((dataset / split / "manifest.txt").read_text().split()) == n
    assert load_image(dataset / "train" / "images" / "0000.png").shape == (32, 32, 3)


def test_generate_deterministic(tmp_path, dataset):
    assert main(["generate", "--out", str(tmp_path), "--size", "32", "--train", "6", "--val", "2", "--test", "2",
                 "--seed", "3"]) == 0
    for rel in ("train/images/0005.png", "test/labels/0001.png"):
        assert (tmp_path / rel).read_bytes() == (dataset / rel).read_bytes()


def test_train_outputs(trained):
    assert (trained / "train.log").read_text().splitlines()[0].split()[0] == "iter"
    assert "mean_iu" in (trained / "metrics.txt").read_text()
    values = read_checkpoint(trained / "checkpoint.bin")
    assert "score_pool1.weight" in values and values["meta.input_scale"][0] == 20.0


def test_train_reproducible(trained, dataset, tmp_path):
    assert main(["train", "--net", "fcn8s.net", "--data", str(dataset), "--out", str(tmp_path), "--regime", "heavy",
                 "--seed", "1", "--updates", "4", "--snapshot-every", "2"]) == 0
    assert (tmp_path / "checkpoint.bin").read_bytes() == (trained / "checkpoint.bin").read_bytes()
    assert (tmp_path / "metrics.txt").read_bytes() == (trained / "metrics.txt").read_bytes()


def test_train_staged_accum(dataset, tmp_path, capsys):
    status, out, _ = run(capsys, "train", "--net", "toy16s", "--data", str(dataset), "--out", str(tmp_path),
                         "--regime", "accum", "--updates", "2", "--staged", "--snapshot-every", "1")
    assert status == 0
    assert len((tmp_path / "train.log").read_text().splitlines()) == 3


def test_eval(capsys, trained, dataset):
    status, out, _ = run(capsys, "eval", "--net", "fcn8s.net", "--checkpoint", str(trained / "checkpoint.bin"),
                         "--data", str(dataset), "--exclude-background")
    assert status == 0 and len(out.splitlines()) == 2


def test_eval_wrong_net(capsys, trained, dataset):
    status, _, err = run(capsys, "eval", "--net", "vgg16.net", "--checkpoint", str(trained / "checkpoint.bin"),
                         "--data", str(dataset))
    assert status == 1 and "does not match" in err


def test_eval_missing_checkpoint(capsys, dataset, tmp_path):
    status, _, _ = run(capsys, "eval", "--net", "fcn8s.net", "--checkpoint", str(tmp_path / "x.bin"),
                       "--data", str(dataset))
    assert status == 2


def test_infer(capsys, trained, dataset, tmp_path):
    image = dataset / "test" / "images" / "0000.png"
    status, out, _ = run(capsys, "infer", "--net", "fcn8s.net", "--checkpoint", str(trained / "checkpoint.bin"),
                         "--image", str(image), "--out", str(tmp_path))
    assert status == 0
    label = load_image(tmp_path / "label.png")
    assert label.shape == (32, 32) and label.max() < 5
    assert len(list(tmp_path.glob("score_*.pgm"))) == 5


def test_bound(capsys, dataset):
    status, out, _ = run(capsys, "bound", "--data", str(dataset), "--factors", "1,2,4")
    rows = [line.split() for line in out.splitlines()[1:]]
    assert status == 0 and rows[0] == ["1", "1.0000"]
    values = [float(r[1]) for r in rows]
    assert values == sorted(values, reverse=True)


def test_config_file(capsys, tmp_path):
    cfg = tmp_path / "opts.cfg"
    cfg.write_text("# horizon for the table\nhorizon = 3\n")
    status, out, _ = run(capsys, "equiv", "0.9", "2", "1", "--config", str(cfg))
    assert status == 0 and len(out.splitlines()) == 2 + 3


def test_config_unknown_key(capsys, tmp_path):
    cfg = tmp_path / "opts.cfg"
    cfg.write_text("colour = red\n")
    status, _, err = run(capsys, "equiv", "0.9", "2", "1", "--config", str(cfg))
    assert status == 2 and "colour" in err


def test_console_script():
    proc = subprocess.run([sys.executable, "-m", "fcnlab.cli", "probe", "vgg16.net"], capture_output=True, text=True)
    assert proc.returncode == 0 and "rf 404 stride 32" in proc.stdout
