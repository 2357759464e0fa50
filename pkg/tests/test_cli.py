import json

import numpy as np
import pytest

from splat4d.camera import read_cameras, write_cameras
from splat4d.cli import main
from splat4d.harness import orbit_view, read_scene
from splat4d.optimizer import Trace
from splat4d.rasterizer import read_png, read_raw
from splat4d.transformer import read_checkpoint


@pytest.fixture
def fixtures(tmp_path):
    assert main(["make-scene", "--seed", "42", "--moving", "4", "--static", "2", "--out", str(tmp_path / "s.4dgs")]) == 0
    write_cameras(tmp_path / "c.json", [orbit_view(30, 10, 2.7, 0.0, 16)])
    return tmp_path


def test_render_single_png(fixtures):
    out = fixtures / "x.png"
    args = ["render", "--scene", str(fixtures / "s.4dgs"), "--cameras", str(fixtures / "c.json"), "--time", "0"]
    assert main(args + ["--out", str(out)]) == 0
    assert read_png(out).shape == (16, 16, 3)
    assert main(args + ["--out", str(fixtures / "y.png")]) == 0
    assert out.read_bytes() == (fixtures / "y.png").read_bytes()
    assert main(args + ["--out", str(fixtures / "x.raw"), "--background", "0,0,0", "--mode", "training"]) == 0
    assert read_raw(fixtures / "x.raw", 16, 16).max() <= 1.0


def test_render_times_directory(fixtures):
    out = fixtures / "frames"
    assert main(["render", "--scene", str(fixtures / "s.4dgs"), "--cameras", str(fixtures / "c.json"),
                 "--times", "-1:1:3", "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["view0_t0.png", "view0_t1.png", "view0_t2.png"]


def test_usage_errors(fixtures, capsys):
    assert main(["render", "--scene", "x"]) == 2
    assert "usage" in capsys.readouterr().err
    assert main(["render", "--scene", "x", "--cameras", "y", "--out", "z", "--times", "bad"]) == 2
    assert main(["make-setup", "--kind", "spiral", "--frames", "3", "--out", "z"]) == 2
    assert main([]) == 2


def test_invalid_data_exit_one(fixtures, capsys):
    (fixtures / "bad.4dgs").write_bytes(b"nope")
    assert main(["render", "--scene", str(fixtures / "bad.4dgs"), "--cameras", str(fixtures / "c.json"),
                 "--out", str(fixtures / "o.png")]) == 1
    assert "error" in capsys.readouterr().err
    assert main(["make-scene", "--seed", "0", "--moving", "0", "--static", "0", "--out", str(fixtures / "e")]) == 1


def test_make_setup(tmp_path, capsys):
    assert main(["make-setup", "--kind", "single_view_video", "--frames", "24", "--out", str(tmp_path / "v.json")]) == 0
    assert "27 views, 24 timestamps" in capsys.readouterr().out
    assert len(read_cameras(tmp_path / "v.json")) == 27


def test_fit_and_eval(fixtures):
    views = [orbit_view(90 * k, 10, 2.7, t, 16) for k, t in enumerate((-1, -0.3, 0.3, 1))]
    write_cameras(fixtures / "train.json", views)
    assert main(["render", "--scene", str(fixtures / "s.4dgs"), "--cameras", str(fixtures / "train.json"),
                 "--out", str(fixtures / "targets")]) == 0
    args = ["fit", "--targets", str(fixtures / "targets"), "--cameras", str(fixtures / "train.json"), "--n", "6",
            "--iters", "3", "--seed", "1"]
    assert main(args + ["--out", str(fixtures / "f1.4dgs"), "--trace", str(fixtures / "t.csv")]) == 0
    assert main(args + ["--out", str(fixtures / "f2.4dgs")]) == 0
    assert (fixtures / "f1.4dgs").read_bytes() == (fixtures / "f2.4dgs").read_bytes()
    assert len(read_scene(fixtures / "f1.4dgs")) == 6
    assert len(Trace.read_csv(fixtures / "t.csv").rows) == 4
    assert main(["eval", "--scene", str(fixtures / "f1.4dgs"), "--ref", str(fixtures / "targets"),
                 "--setup", str(fixtures / "train.json"), "--report", str(fixtures / "r.json")]) == 0
    report = json.loads((fixtures / "r.json").read_text())
    assert len(report["entries"]) == 4
    assert main(["eval", "--scene", str(fixtures / "s.4dgs"), "--ref", str(fixtures / "s.4dgs"),
                 "--setup", str(fixtures / "train.json"), "--report", str(fixtures / "self.json")]) == 0
    assert json.loads((fixtures / "self.json").read_text())["mean_psnr"] == 99.0


def test_fit_missing_target(fixtures):
    write_cameras(fixtures / "train.json", [orbit_view(0, 0, 2.7, 0, 16), orbit_view(90, 0, 2.7, 0, 16)])
    (fixtures / "empty").mkdir()
    assert main(["fit", "--targets", str(fixtures / "empty"), "--cameras", str(fixtures / "train.json"), "--n", "2",
                 "--iters", "1", "--seed", "0", "--out", str(fixtures / "f.4dgs")]) == 1


def test_train_toy(tmp_path):
    assert main(["make-episode", "--seed", "0", "--resolution", "16", "--out", str(tmp_path / "ep")]) == 0
    (tmp_path / "cfg.json").write_text(json.dumps({"hidden_dim": 16, "layers": 1, "heads": 2, "patch_size": 8}))
    args = ["train-toy", "--config", str(tmp_path / "cfg.json"), "--data", str(tmp_path / "ep"), "--iters", "2",
            "--seed", "0"]
    assert main(args + ["--out", str(tmp_path / "a.4dlw")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.4dlw")]) == 0
    assert (tmp_path / "a.4dlw").read_bytes() == (tmp_path / "b.4dlw").read_bytes()
    assert read_checkpoint(tmp_path / "a.4dlw")[0].hidden_dim == 16
    (tmp_path / "bad.json").write_text(json.dumps({"depth": 3}))
    assert main(["train-toy", "--config", str(tmp_path / "bad.json"), "--data", str(tmp_path / "ep"), "--iters", "1",
                 "--seed", "0", "--out", str(tmp_path / "c.4dlw")]) == 1


@pytest.mark.parametrize("module", ["head", "ssim"])
def test_gradcheck_command(module, capsys):
    assert main(["gradcheck", "--module", module, "--seed", "7"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_gradcheck_rasterizer_seed7(capsys):
    assert main(["gradcheck", "--module", "rasterizer", "--seed", "7"]) == 0
    out = capsys.readouterr().out
    assert "max rel err" in out and float(out.split("max rel err ")[1].split()[0]) < 1e-4
