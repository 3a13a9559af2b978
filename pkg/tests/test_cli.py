import json
from pathlib import Path

import numpy as np
import pytest

from splat4d.cli import main
from splat4d.dataset import load_color_png


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "scene.cfg"
    spec.write_text(
        "scene.frame_count = 8\nscene.width = 64\nscene.height = 48\n"
        "scene.dynamic = false\nscene.seed = 11\n"
    )
    out = root / "data"
    assert main(["synth", "--spec", str(spec), "--output", str(out)]) == 0
    return root, spec, out


def test_synth_layout(synth_dir):
    root, spec, out = synth_dir
    for name in ("rgb.txt", "depth.txt", "groundtruth.txt", "intrinsics.txt", "scene_spec.txt"):
        assert (out / name).exists(), name
    assert len(list((out / "rgb").glob("*.png"))) == 8
    assert len(list((out / "depth").glob("*.png"))) == 8


def test_synth_deterministic(synth_dir, tmp_path):
    root, spec, out = synth_dir
    out2 = tmp_path / "data2"
    assert main(["synth", "--spec", str(spec), "--output", str(out2)]) == 0
    for rel in ["rgb.txt", "groundtruth.txt"]:
        assert (out / rel).read_bytes() == (out2 / rel).read_bytes()
    for png in sorted((out / "rgb").glob("*.png")):
        assert png.read_bytes() == (out2 / "rgb" / png.name).read_bytes()


def test_synth_zero_frames_is_config_error(tmp_path):
    spec = tmp_path / "bad.cfg"
    spec.write_text("scene.frame_count = 0\n")
    assert main(["synth", "--spec", str(spec), "--output", str(tmp_path / "x")]) == 2


def test_run_eval_render_cycle(synth_dir, tmp_path):
    root, spec, data = synth_dir
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "mapping.iterations_per_keyframe = 4\n"
        "tracking.max_iterations = 15\n"
        "tracking.min_anchor_count = 16\n"
    )
    out = tmp_path / "out"
    rc = main(["run", str(data), "--config", str(cfg), "--output", str(out),
               "--seed", "3", "--preview-every", "4"])
    assert rc == 0
    assert (out / "trajectory.txt").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 3

    report = tmp_path / "report.csv"
    rc = main(["eval", "--trajectory", str(out / "trajectory.txt"),
               "--groundtruth", str(data / "groundtruth.txt"),
               "--renders", str(out / "renders"), "--gt-frames", str(data / "rgb"),
               "--out", str(report)])
    assert rc == 0
    lines = report.read_text().splitlines()
    assert lines[0] == "sequence,ate_cm,psnr_db,ssim,frames,runtime_s"
    cells = lines[1].split(",")
    assert float(cells[1]) >= 0.0
    assert int(cells[4]) == 8
    assert report.with_suffix(".frames.csv").exists()

    img = tmp_path / "view.png"
    rc = main(["render", "--checkpoint", str(out / "checkpoints" / "ckpt_final.s4dc"),
               "--keyframe-index", "0", "--out", str(img)])
    assert rc == 0
    assert load_color_png(img).shape == (48, 64, 3)


def test_run_missing_depth_file(synth_dir, tmp_path):
    root, spec, data = synth_dir
    import shutil

    broken = tmp_path / "broken"
    shutil.copytree(data, broken)
    victims = sorted((broken / "depth").glob("*.png"))
    victims[3].unlink()
    rc = main(["run", str(broken), "--output", str(tmp_path / "o")])
    assert rc == 3


def test_eval_self_is_perfect(synth_dir, tmp_path):
    root, spec, data = synth_dir
    rc = main(["eval", "--trajectory", str(data / "groundtruth.txt"),
               "--groundtruth", str(data / "groundtruth.txt"),
               "--renders", str(data / "rgb"), "--gt-frames", str(data / "rgb"),
               "--out", str(tmp_path / "self.csv")])
    assert rc == 0
    cells = (tmp_path / "self.csv").read_text().splitlines()[1].split(",")
    assert float(cells[1]) == pytest.approx(0.0, abs=1e-9)  # ATE
    assert float(cells[2]) == pytest.approx(99.0)  # PSNR cap
    assert float(cells[3]) == pytest.approx(1.0)  # SSIM


def test_eval_mismatched_renders(synth_dir, tmp_path):
    root, spec, data = synth_dir
    rdir = tmp_path / "renders"
    rdir.mkdir()
    (rdir / "999.png").write_bytes((data / "rgb").glob("*.png").__next__().read_bytes())
    rc = main(["eval", "--trajectory", str(data / "groundtruth.txt"),
               "--groundtruth", str(data / "groundtruth.txt"),
               "--renders", str(rdir), "--gt-frames", str(data / "rgb")])
    assert rc == 3


def test_render_bad_checkpoint(tmp_path):
    bad = tmp_path / "bad.s4dc"
    bad.write_bytes(b"JUNKJUNKJUNK")
    rc = main(["render", "--checkpoint", str(bad), "--keyframe-index", "0",
               "--out", str(tmp_path / "o.png")])
    assert rc == 3


def test_unknown_config_key_exit_code(synth_dir, tmp_path):
    root, spec, data = synth_dir
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("tracking.gamma_zz = 1\n")
    rc = main(["run", str(data), "--config", str(cfg), "--output", str(tmp_path / "o")])
    assert rc == 2
