import csv
import json
import subprocess
import sys

import pytest

from masklift.cli import echo_path, main

SMALL_BLOBS = ["--n-objects", "2", "--dims", "32,32,32", "--n-views", "12", "--image-size", "64", "--seed", "5"]


def run_ok(argv, capsys=None):
    code = main([str(a) for a in argv])
    assert code == 0
    return capsys.readouterr() if capsys else None


def error_line(capsys, argv, code=2):
    assert main([str(a) for a in argv]) == code
    err = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(err)


@pytest.fixture(scope="module")
def blob_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("blobs")
    assert main(["synth", "--kind", "blobs", "--out", str(d), *SMALL_BLOBS]) == 0
    return d


def test_synth_lift_metrics_pipeline(blob_dir, tmp_path, capsys):
    lift_out = tmp_path / "lift"
    run_ok(["lift", "--density", blob_dir / "density.dgrd", "--poses", blob_dir / "poses.json",
            "--masks", blob_dir / "masks", "--cloud", blob_dir / "cloud.ply", "--out", lift_out, "--passes", "2"])
    assert (lift_out / "mask_field.mfld").is_file() and (lift_out / "config.json").is_file()
    capsys.readouterr()
    run_ok(["metrics", "--pred", lift_out / "labeled.ply", "--truth", blob_dir / "truth.ply",
            "--out", tmp_path / "m.json", "--id-map", "0:0,1:1"])
    line = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert line["matcher"] == "explicit" and line["miou"] >= 0.90
    full = json.loads((tmp_path / "m.json").read_text())
    assert [r["truth_id"] for r in full["instances"]] == [0, 1]
    run_ok(["metrics", "--pred", lift_out / "labeled.ply", "--truth", blob_dir / "truth.ply",
            "--out", tmp_path / "g.json"])
    assert json.loads((tmp_path / "g.json").read_text())["matcher"] == "greedy-iou"


def test_traits_on_ribbon(tmp_path):
    run_ok(["synth", "--kind", "ribbon", "--out", tmp_path])
    out = tmp_path / "traits.csv"
    run_ok(["traits", "--cloud", tmp_path / "ribbon.ply", "--out", out, "--alpha", "0.15",
            "--outlier-sigma", "5", "--threads", "1"])
    (row,) = list(csv.DictReader(out.open()))
    assert row["class"] == "leaf"
    assert abs(float(row["length_cm"]) / 10 - 1) < 0.05
    assert abs(float(row["width_cm"]) / 2 - 1) < 0.02
    echo = json.loads(echo_path(str(out)).read_text())
    assert echo["alpha"] == 0.15 and echo["command"] == "traits"


def test_rearframes(tmp_path, capsys):
    run_ok(["synth", "--kind", "frames", "--out", tmp_path])
    capsys.readouterr()
    run_ok(["rearframes", "--reference", tmp_path / "reference.png", "--frames", tmp_path / "frames",
            "--out", tmp_path / "rear.json"])
    assert json.loads(capsys.readouterr().out.strip()) == {"first": 10, "last": 20}
    assert json.loads((tmp_path / "rear.json").read_text()) == {"first": 10, "last": 20}


def test_postprocess_and_prompts(tmp_path):
    import numpy as np

    from masklift import io
    (tmp_path / "m").mkdir()
    m = np.zeros((20, 20))
    m[4:16, 4:16] = 1
    m[9, 9] = 0
    io.write_mask_png(tmp_path / "m" / "frame_00000_obj_00.png", m)
    run_ok(["postprocess", "--masks", tmp_path / "m", "--out", tmp_path / "clean"])
    assert io.read_gray_png(tmp_path / "clean" / "frame_00000_obj_00.png")[9, 9] > 0
    det = [{"obj_id": 0, "frame": 0, "center": [5, 5], "polygon": [[0, 0], [10, 0], [10, 10], [0, 10]]}]
    (tmp_path / "d.json").write_text(json.dumps(det))
    run_ok(["prompts", "--detections", tmp_path / "d.json", "--out", tmp_path / "p.json"])
    assert json.loads((tmp_path / "p.json").read_text())[0]["positive"][0] == [5.0, 5.0]


def test_config_precedence(tmp_path):
    run_ok(["synth", "--kind", "ribbon", "--out", tmp_path / "r", "--length", "6"])
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"length": 8.0, "width": 1.0}))
    run_ok(["synth", "--kind", "ribbon", "--out", tmp_path / "r2", "--config", cfg, "--length", "5"])
    echo = json.loads((tmp_path / "r2" / "config.json").read_text())
    assert echo["length"] == 5.0 and echo["width"] == 1.0 and echo["spacing"] == 0.05
    assert json.loads((tmp_path / "r2" / "truth.json").read_text())["length"] == 5.0


def test_error_lines(tmp_path, capsys):
    assert error_line(capsys, [])["error"] == "usage"
    assert error_line(capsys, ["lift", "--poses", "x"])["error"] == "usage"
    assert error_line(capsys, ["traits", "--cloud", tmp_path / "nope.ply"])["error"] == "missing_file"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"bogus": 1}))
    assert error_line(capsys, ["synth", "--config", bad])["error"] == "bad_config"
    bad.write_text("{")
    assert error_line(capsys, ["synth", "--config", bad])["error"] == "bad_config"
    assert error_line(capsys, ["synth", "--kind", "cubes", "--out", tmp_path / "s"])["error"] == "bad_config"
    assert error_line(capsys, ["synth", "--n-views", "many"])["error"] == "bad_config"
    # Failed runs leave no echo behind.
    assert not (tmp_path / "s" / "config.json").exists()


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "masklift.cli", "synth", "--kind", "ribbon", "--out",
                           str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "ribbon.ply").is_file()
    proc = subprocess.run([sys.executable, "-m", "masklift.cli", "nonsense"], capture_output=True, text=True)
    assert proc.returncode == 2 and json.loads(proc.stderr.strip())["error"] == "usage"
