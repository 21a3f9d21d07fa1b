"""End-to-end subcommand tests through main() return codes."""

import csv
import os

import numpy as np
import pytest

from rfshape.cli import main
from rfshape.cloudio import load_rfpc
from rfshape.net.checkpoint import load_checkpoint

# small network so train/eval chains run in well under a second
TOY_MODEL = [
    "--set", "model.n_input=64", "--set", "model.n_coarse=16",
    "--set", "model.upsample=2", "--set", "model.mlp1=16,32",
    "--set", "model.mlp2=32,64", "--set", "model.coarse_hidden=32,32",
    "--set", "model.folding_hidden=32,32",
    "--set", "model.classifier_hidden=16",
    "--set", "train.cd_target_points=256",
]


def write_scene(path, lines):
    path.write_text("".join(line + "\n" for line in lines))


def write_linear_traj(path, n=6, step=0.12):
    rows = [f"{0.1 * i} {-0.3 + step * i:.3f} 0 0 1 0 0 0" for i in range(n)]
    path.write_text("".join(r + "\n" for r in rows))


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    rc = main(["gen-dataset", str(root), "--per-object", "1", "--recipes",
               "depth", "--n-partial", "128", "--n-complete", "256",
               "--seed", "3"])
    assert rc == 0
    return root


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, dataset_dir):
    out = tmp_path_factory.mktemp("run")
    rc = main(["train", str(dataset_dir), str(out), *TOY_MODEL, "--steps",
               "5", "--batch-size", "2", "--seed", "1", "--log-every",
               "999"])
    assert rc == 0
    return out


class TestSimulate:
    def test_end_to_end(self, tmp_path):
        scene = tmp_path / "scene.txt"
        traj = tmp_path / "traj.txt"
        write_scene(scene, ["0 3 0.5 1.0 0 -1 0"])
        write_linear_traj(traj)
        out = tmp_path / "out"
        rc = main(["simulate", str(scene), str(traj), str(out),
                   "--set", "mount_height=0.5", "--set", "cfar.variant=os",
                   "--set", "cfar.p_fa=1e-4"])
        assert rc == 0
        for i in range(6):
            assert (out / f"frame_{i:04d}.rfpc").exists()
            assert (out / f"frame_{i:04d}_h.hm").exists()
            assert (out / f"frame_{i:04d}_v.hm").exists()
        acc = load_rfpc(str(out / "accumulated.rfpc"))
        assert len(acc.points) > 0
        with open(out / "manifest.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 6
        assert rows[0]["cloud"] == "frame_0000.rfpc"

    def test_empty_scene_gives_empty_clouds(self, tmp_path):
        scene = tmp_path / "scene.txt"
        traj = tmp_path / "traj.txt"
        scene.write_text("# nothing here\n")
        write_linear_traj(traj, n=2)
        out = tmp_path / "out"
        assert main(["simulate", str(scene), str(traj), str(out)]) == 0
        assert len(load_rfpc(str(out / "frame_0000.rfpc")).points) == 0
        assert len(load_rfpc(str(out / "accumulated.rfpc")).points) == 0

    def test_malformed_scene_exits_3(self, tmp_path, capsys):
        scene = tmp_path / "scene.txt"
        traj = tmp_path / "traj.txt"
        scene.write_text("0 3 0.5\n")
        write_linear_traj(traj, n=2)
        assert main(["simulate", str(scene), str(traj),
                     str(tmp_path / "o")]) == 3
        assert "scene.txt:1" in capsys.readouterr().err

    def test_malformed_trajectory_exits_3(self, tmp_path, capsys):
        scene = tmp_path / "scene.txt"
        traj = tmp_path / "traj.txt"
        write_scene(scene, ["0 3 0.5 1.0"])
        traj.write_text("0 0 0 0 1 0 0 0\nnot a pose\n")
        assert main(["simulate", str(scene), str(traj),
                     str(tmp_path / "o")]) == 3
        assert "traj.txt:2" in capsys.readouterr().err

    def test_deterministic_bytes(self, tmp_path):
        scene = tmp_path / "scene.txt"
        traj = tmp_path / "traj.txt"
        write_scene(scene, ["0 3 0.5 1.0 0 -1 0"])
        write_linear_traj(traj, n=2)
        args = ["--set", "radar.noise_sigma=0.01", "--seed", "7"]
        assert main(["simulate", str(scene), str(traj),
                     str(tmp_path / "a"), *args]) == 0
        assert main(["simulate", str(scene), str(traj),
                     str(tmp_path / "b"), *args]) == 0
        for name in ("frame_0001_h.hm", "frame_0001.rfpc", "manifest.csv",
                     "accumulated.rfpc"):
            a = (tmp_path / "a" / name).read_bytes()
            b = (tmp_path / "b" / name).read_bytes()
            assert a == b, name


class TestUsageErrors:
    def test_unknown_set_key(self, tmp_path, capsys):
        rc = main(["gen-dataset", str(tmp_path / "d"), "--set", "cfar.win=1"])
        assert rc == 2
        assert "cfar.win" in capsys.readouterr().err

    def test_malformed_set_pair(self, tmp_path, capsys):
        rc = main(["gen-dataset", str(tmp_path / "d"), "--set", "nonsense"])
        assert rc == 2
        assert "--set" in capsys.readouterr().err

    def test_bad_subcommand(self):
        assert main(["frobnicate"]) == 2

    def test_unknown_experiment(self, tmp_path, capsys):
        rc = main(["experiment", "warp", "-o", str(tmp_path / "x.csv")])
        assert rc == 2
        assert "warp" in capsys.readouterr().err

    def test_config_file_precedence(self, dataset_dir, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("train.steps=7\n")
        out1 = tmp_path / "o1"
        assert main(["train", str(dataset_dir), str(out1), *TOY_MODEL,
                     "--config", str(cfg), "--log-every", "999"]) == 0
        with open(out1 / "history.csv", newline="") as fh:
            assert len(list(csv.DictReader(fh))) == 7
        out2 = tmp_path / "o2"
        assert main(["train", str(dataset_dir), str(out2), *TOY_MODEL,
                     "--config", str(cfg), "--steps", "3",
                     "--log-every", "999"]) == 0
        with open(out2 / "history.csv", newline="") as fh:
            assert len(list(csv.DictReader(fh))) == 3


class TestGenDataset:
    def test_manifest_and_tree(self, dataset_dir):
        with open(dataset_dir / "manifest.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3
        assert sorted(r["class_name"] for r in rows) == [
            "box", "cylinder", "sphere"]
        for r in rows:
            assert (dataset_dir / r["partial"]).exists()
            assert (dataset_dir / r["complete"]).exists()

    def test_mesh_dir_classes(self, tmp_path):
        from rfshape.meshes import box_mesh, save_obj
        mdir = tmp_path / "meshes"
        mdir.mkdir()
        save_obj(str(mdir / "crate_000.obj"), box_mesh((0.4, 0.4, 0.4)))
        save_obj(str(mdir / "crate_001.obj"), box_mesh((0.5, 0.3, 0.4)))
        out = tmp_path / "ds"
        rc = main(["gen-dataset", str(out), "--mesh-dir", str(mdir),
                   "--per-object", "1", "--recipes", "depth",
                   "--n-partial", "64", "--n-complete", "128"])
        assert rc == 0
        with open(out / "manifest.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert {r["class_name"] for r in rows} == {"crate"}
        assert {r["object_id"] for r in rows} == {"crate_000", "crate_001"}

    def test_empty_mesh_dir_exits_3(self, tmp_path):
        mdir = tmp_path / "meshes"
        mdir.mkdir()
        assert main(["gen-dataset", str(tmp_path / "ds"),
                     "--mesh-dir", str(mdir)]) == 3


class TestTrain:
    def test_artifacts(self, trained_dir):
        for name in ("checkpoint.rfck", "history.csv", "epochs.csv",
                     "split.csv", "effective_config.txt"):
            assert (trained_dir / name).exists()
        with open(trained_dir / "history.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 5
        assert float(rows[0]["loss"]) > 0
        params, cfg, norm_mode = load_checkpoint(
            str(trained_dir / "checkpoint.rfck"))
        assert cfg.n_coarse == 16
        assert norm_mode == "centroid"

    def test_divergence_exits_4_with_last_good(self, dataset_dir, tmp_path,
                                               capsys):
        out = tmp_path / "blowup"
        rc = main(["train", str(dataset_dir), str(out), *TOY_MODEL,
                   "--steps", "30", "--optimizer", "sgd",
                   "--learning-rate", "1e9", "--seed", "1",
                   "--log-every", "999"])
        assert rc == 4
        assert "non-finite" in capsys.readouterr().err
        assert (out / "checkpoint_last_good.rfck").exists()
        assert not (out / "checkpoint.rfck").exists()

    def test_missing_dataset_exits_3(self, tmp_path):
        assert main(["train", str(tmp_path / "nope"),
                     str(tmp_path / "out")]) == 3


class TestEval:
    def test_ground_truth_predictions_score_zero(self, dataset_dir,
                                                 tmp_path):
        out = tmp_path / "gt.csv"
        rc = main(["eval", str(dataset_dir), "--predictions",
                   str(dataset_dir), "-o", str(out), "--seed", "2"])
        assert rc == 0
        with open(out, newline="") as fh:
            rows = list(csv.DictReader(fh))
        sample_rows = [r for r in rows if not r["sample"].startswith("mean/")]
        assert len(sample_rows) == 3
        for r in rows:
            assert float(r["cd_sq_m2"]) == 0.0
            assert float(r["cd_l2_m"]) == 0.0
            assert float(r["emd_l2_m"]) == 0.0
        assert rows[-1]["sample"] == "mean/all"

    def test_checkpoint_mode(self, dataset_dir, trained_dir, tmp_path):
        out = tmp_path / "ck.csv"
        rc = main(["eval", str(dataset_dir), "--checkpoint",
                   str(trained_dir / "checkpoint.rfck"), "-o", str(out),
                   "--seed", "2", "--emd-points", "128"])
        assert rc == 0
        with open(out, newline="") as fh:
            rows = list(csv.DictReader(fh))
        sample_rows = [r for r in rows if not r["sample"].startswith("mean/")]
        for r in sample_rows:
            assert float(r["cd_l2_m"]) > 0
            assert r["pred_class"] in ("0", "1", "2")

    def test_requires_a_source(self, dataset_dir, tmp_path):
        assert main(["eval", str(dataset_dir), "-o",
                     str(tmp_path / "x.csv")]) == 2


class TestReconstruct:
    def test_writes_plys_with_model_counts(self, dataset_dir, trained_dir,
                                           tmp_path):
        partial = dataset_dir / "box" / "box_000" / "sample_00_depth" / \
            "partial.rfpc"
        out = tmp_path / "rec"
        rc = main(["reconstruct", str(partial), "--checkpoint",
                   str(trained_dir / "checkpoint.rfck"), "-o", str(out)])
        assert rc == 0
        fine_header = (out / "fine.ply").read_text().splitlines()[:4]
        assert fine_header[0] == "ply"
        assert "element vertex 64" in fine_header  # 16 coarse x 2^2
        coarse_header = (out / "coarse.ply").read_text().splitlines()[:4]
        assert "element vertex 16" in coarse_header

    def test_bad_checkpoint_exits_3(self, dataset_dir, tmp_path):
        partial = dataset_dir / "box" / "box_000" / "sample_00_depth" / \
            "partial.rfpc"
        bad = tmp_path / "bad.rfck"
        bad.write_bytes(b"not a checkpoint")
        assert main(["reconstruct", str(partial), "--checkpoint", str(bad),
                     "-o", str(tmp_path / "rec")]) == 3


class TestExperiment:
    def test_frames_ablation_csv(self, tmp_path):
        out = tmp_path / "fa.csv"
        rc = main(["experiment", "frames_ablation", "-o", str(out),
                   "--frame-counts", "1,2", "--seed", "0"])
        assert rc == 0
        with open(out, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["n_frames"] for r in rows] == ["1", "2"]
        assert float(rows[0]["chamfer_m"]) > 0
