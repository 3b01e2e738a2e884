from __future__ import annotations

import json

import numpy as np
import pytest

from recnet.cli import main
from recnet.model import RecNet, save_weights
from recnet.pointcloud_io import read_cloud_xyz, read_kitti_poses
from recnet.projection import load_range_image
from recnet.transmission import read_descriptor_file


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["--threads", "1", "synthetic", str(root / "seq"), "--scans", "6", "--trajectory", "loop", "--laps", "2"]) == 0
    save_weights(RecNet("mini", seed=0), root / "w.rwts")
    return root


def test_synthetic_layout(workspace):
    bins = sorted((workspace / "seq" / "velodyne").glob("*.bin"))
    assert [b.name for b in bins][:2] == ["000000.bin", "000001.bin"]
    assert len(read_kitti_poses(workspace / "seq" / "poses.txt")) == 6
    assert len((workspace / "seq" / "times.txt").read_text().split()) == 6


def test_project_unproject(workspace, tmp_path):
    assert main(["project", str(workspace / "seq" / "velodyne"), str(tmp_path / "rimg"), "--profile", "mini"]) == 0
    img = load_range_image(tmp_path / "rimg" / "000003.rimg")
    assert img.data.shape == (32, 450)
    assert main(["project", str(workspace / "seq" / "velodyne" / "000000.bin"), str(tmp_path / "one.rimg")]) == 0
    assert load_range_image(tmp_path / "one.rimg").data.shape == (64, 900)
    assert main(["unproject", str(tmp_path / "rimg"), str(tmp_path / "xyz")]) == 0
    assert len(read_cloud_xyz(tmp_path / "xyz" / "000003.xyz")) == np.count_nonzero(img.data)


def test_encode_decode_eval(workspace, tmp_path):
    main(["project", str(workspace / "seq" / "velodyne"), str(tmp_path / "rimg"), "--profile", "mini"])
    seq = workspace / "seq"
    args = ["encode", str(tmp_path / "rimg"), "--weights", str(workspace / "w.rwts"), "--out", str(tmp_path / "d.recb")]
    assert main(args + ["--poses", str(seq / "poses.txt"), "--times", str(seq / "times.txt")]) == 0
    stream = read_descriptor_file(tmp_path / "d.recb")
    assert [r.scan_id for r in stream.records] == list(range(6))
    assert stream.records[4].timestamp == pytest.approx(0.4)
    assert main(["decode", str(tmp_path / "d.recb"), str(tmp_path / "dec"), "--weights", str(workspace / "w.rwts")]) == 0
    assert sorted(p.name for p in (tmp_path / "dec").iterdir())[0] == "000000.rimg"

    pr = tmp_path / "pr.csv"
    base = ["eval-pr", "--descriptors", str(tmp_path / "d.recb"), "--map-seconds", "0.3", "--out", str(pr)]
    assert main(base + ["--oracle-tail", "--thresholds", "0.1,0.5,0.7"]) == 0
    rows = pr.read_text().splitlines()[1:]
    assert len(rows) == 3
    assert all(float(r.split(",")[1]) == 1.0 for r in rows)
    assert pr.with_suffix(".png").exists()
    assert main(base + ["--weights", str(workspace / "w.rwts"), "--num-thresholds", "5"]) == 0
    assert len(pr.read_text().splitlines()) == 6
    # everything lands in the map
    assert main(["eval-pr", "--descriptors", str(tmp_path / "d.recb"), "--map-seconds", "100", "--oracle-tail"]) != 0

    out = tmp_path / "map.xyz"
    common = ["reconstruct-map", "--descriptors", str(tmp_path / "d.recb"), "--weights", str(workspace / "w.rwts"), "--out", str(out)]
    assert main(common + ["--poses", str(seq / "poses.txt")]) == 0
    assert out.exists()
    (tmp_path / "short.txt").write_text("1 0 0 0 0 1 0 0 0 0 1 0\n")
    assert main(common + ["--poses", str(tmp_path / "short.txt")]) == 1


def test_reconstruct_map_empty(workspace, tmp_path, capsys):
    from recnet.transmission import write_descriptor_file

    write_descriptor_file(tmp_path / "e.recb", [], profile="mini")
    out = tmp_path / "m.xyz"
    assert main(["reconstruct-map", "--descriptors", str(tmp_path / "e.recb"), "--weights", str(workspace / "w.rwts"), "--out", str(out)]) == 0
    assert out.read_text() == ""


def test_eval_ssim(workspace, tmp_path):
    main(["project", str(workspace / "seq" / "velodyne"), str(tmp_path / "rimg"), "--profile", "mini"])
    main(["unproject", str(tmp_path / "rimg"), str(tmp_path / "orig")])
    out = tmp_path / "ssim.csv"
    args = ["eval-ssim", "--original", str(tmp_path / "orig"), "--reconstructed", f"Copy={tmp_path / 'orig'}", "--out", str(out)]
    assert main(args + ["--downsample-voxel", "0.75"]) == 0
    lines = out.read_text().splitlines()
    assert [l.split(",")[0] for l in lines[1:]] == ["Downsampled", "Copy"]
    assert lines[2].split(",")[1] == "100.0000"
    assert out.with_suffix(".png").exists()
    (tmp_path / "partial").mkdir()
    (tmp_path / "partial" / "000000.xyz").write_text((tmp_path / "orig" / "000000.xyz").read_text())
    assert main(["eval-ssim", "--original", str(tmp_path / "orig"), "--reconstructed", f"P={tmp_path / 'partial'}"]) == 1


def test_bandwidth(tmp_path, capsys):
    manifest = {"duration": 10, "scans": {"count": 100, "points": 100_000}, "descriptors": {"count": 100, "bytes": 65_536}}
    (tmp_path / "m.json").write_text(json.dumps(manifest))
    assert main(["bandwidth", str(tmp_path / "m.json"), "--out", str(tmp_path / "bw.txt")]) == 0
    text = (tmp_path / "bw.txt").read_text()
    assert "16,000" in text and "655.36" in text and "24.41x" in text
    assert (tmp_path / "bw.png").exists()
    (tmp_path / "z.json").write_text(json.dumps({**manifest, "duration": 0}))
    assert main(["bandwidth", str(tmp_path / "z.json")]) == 1


def test_train_and_resume(workspace, tmp_path):
    cfg = {
        "profile": "mini", "steps": 2, "batch_size": 2, "checkpoint_interval": 1, "val_batches": 1,
        "r_pos": 13.0, "r_neg": 20.0,
        "data": {"train": {"synthetic": {"n_scans": 6, "trajectory": "loop", "seed": 1}}},
    }
    (tmp_path / "t.json").write_text(json.dumps(cfg))
    run = tmp_path / "run"
    assert main(["train", str(tmp_path / "t.json"), "--out", str(run)]) == 0
    assert (run / "train_log.png").exists()
    assert sorted(p.name for p in (run / "checkpoints").glob("*.json")) == ["ckpt_000000.json", "ckpt_000001.json", "ckpt_000002.json"]
    assert main(["train", str(tmp_path / "t.json"), "--out", str(run), "--resume", "--steps", "3"]) == 0
    steps = [l.split(",")[0] for l in (run / "train_log.csv").read_text().splitlines()[1:]]
    assert steps == ["1", "2", "3"]
    (tmp_path / "bad.json").write_text(json.dumps({"steps": 1, "bogus": 1}))
    assert main(["train", str(tmp_path / "bad.json"), "--out", str(tmp_path / "r2")]) == 1


def test_config_file_defaults(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"synthetic": {"scans": 3, "trajectory": "loop"}}))
    assert main(["--config", str(tmp_path / "c.json"), "synthetic", str(tmp_path / "s")]) == 0
    assert len(list((tmp_path / "s" / "velodyne").iterdir())) == 3
    assert main(["--config", str(tmp_path / "c.json"), "synthetic", str(tmp_path / "s2"), "--scans", "2"]) == 0
    assert len(list((tmp_path / "s2" / "velodyne").iterdir())) == 2


def test_missing_input():
    assert main(["unproject", "/nonexistent/x.rimg", "/tmp/out"]) == 1
