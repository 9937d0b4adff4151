import json

import numpy as np
import pytest

from main import main
from utils.experiment_log import read_csv
from utils.pointcloud import PointCloud, load_cloud, save_cloud

SMALL_SPEC = "extent_x=20\nextent_y=20\ndensity=4\nbuildings=1\ntrees=3\nvegetation_patches=2\nstreets=1\n"
FAST_RUN = [
    "--ensemble", "2", "--epochs", "3", "--r", "2", "--cycles", "2",
    "--budget", "0.05", "--initial-budget", "0.05", "--k-neighbors", "8",
]  # fmt: skip


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    monkeypatch.setenv("LOG_DIR", str(tmp_path / "logs"))
    monkeypatch.chdir(tmp_path)
    (tmp_path / "small.txt").write_text(SMALL_SPEC, encoding="utf-8")
    return tmp_path


@pytest.fixture
def scene(workspace):
    assert main(["generate", "--spec", "small.txt", "--out", "scene/small"]) == 0
    return "scene/small_train.alpc", "scene/small_eval.alpc"


class TestGenerate:
    def test_writes_both_clouds(self, workspace, capsys):
        assert main(["generate", "--spec", "small.txt", "--out", "a", "--seed", "5"]) == 0
        out = capsys.readouterr().out
        assert "a_train.alpc:" in out and "a_eval.alpc:" in out
        train, evaluation = load_cloud("a_train.alpc"), load_cloud("a_eval.alpc")
        assert train.class_count == evaluation.class_count == 6
        assert (workspace / "logs").is_dir()

    def test_repeat_is_byte_identical(self, workspace):
        main(["generate", "--spec", "small.txt", "--out", "a"])
        main(["generate", "--spec", "small.txt", "--out", "b"])
        assert (workspace / "a_train.alpc").read_bytes() == (workspace / "b_train.alpc").read_bytes()

    def test_flags_override_the_spec_file(self, workspace):
        args = ["generate", "--spec", "small.txt", "--out", "c", "--density", "2", "--set", "classes=ground,street"]
        assert main(args) == 0
        assert load_cloud("c_train.alpc").class_count == 2

    def test_missing_out(self, workspace):
        assert main(["generate"]) == 2

    def test_bad_spec_value(self, workspace):
        assert main(["generate", "--out", "d", "--set", "density=-1"]) == 2


class TestSeparate:
    def test_summary(self, scene, capsys):
        assert main(["separate", "--cloud", scene[0], "--r", "2", "--out", "regions.txt"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0].startswith("regions: ")
        count = int(out[0].split()[1])
        assert "kinds: column=" in out[3]
        assert "supervoxel_object=0" in out[3]
        dump = open("regions.txt", encoding="utf-8").read().splitlines()
        assert len(dump) == count
        assert dump[0].split()[1] == "column"

    def test_zero_edge_length(self, scene):
        assert main(["separate", "--cloud", scene[0], "--r", "0"]) == 2

    def test_missing_cloud_file(self, workspace):
        assert main(["separate", "--cloud", "nowhere.alpc"]) == 1

    def test_supervoxels_on_flat_ground(self, workspace, capsys):
        main(["generate", "--spec", "small.txt", "--out", "flat", "--set", "classes=ground,street"])
        capsys.readouterr()
        assert main(["separate", "--cloud", "flat_train.alpc", "--separation", "supervoxels"]) == 0
        kinds = dict(item.split("=") for item in capsys.readouterr().out.splitlines()[3].split()[1:])
        assert int(kinds["supervoxel_ground"]) > 0
        assert int(kinds["supervoxel_object"]) <= 2


class TestEval:
    @pytest.fixture
    def truth(self, workspace):
        cloud = PointCloud(np.arange(12.0).reshape(4, 3), np.zeros((4, 3)), [0, 0, 1, 1], class_count=2)
        save_cloud(cloud, "truth.alpc")
        return "truth.alpc"

    def test_ground_truth_scores_one(self, truth, capsys):
        assert main(["eval", "--pred", truth, "--cloud", truth]) == 0
        assert capsys.readouterr().out.splitlines()[0] == "mIoU 1.000000"

    def test_label_file(self, truth, capsys):
        with open("pred.txt", "w", encoding="utf-8") as f:
            f.write("0\n1\n0\n1\n")
        assert main(["eval", "--pred", "pred.txt", "--cloud", truth]) == 0
        assert capsys.readouterr().out.splitlines() == ["mIoU 0.333333", "iou_c0 0.333333", "iou_c1 0.333333"]

    def test_ignore_class(self, truth, capsys):
        with open("pred.txt", "w", encoding="utf-8") as f:
            f.write("0\n1\n0\n1\n")
        assert main(["eval", "--pred", "pred.txt", "--cloud", truth, "--ignore-class", "0"]) == 0
        assert capsys.readouterr().out.splitlines() == ["mIoU 0.500000", "iou_c0 nan", "iou_c1 0.500000"]

    def test_length_mismatch(self, truth):
        with open("short.txt", "w", encoding="utf-8") as f:
            f.write("0\n1\n")
        assert main(["eval", "--pred", "short.txt", "--cloud", truth]) == 1

    def test_bad_label_line(self, truth):
        with open("bad.txt", "w", encoding="utf-8") as f:
            f.write("0\nroad\n")
        assert main(["eval", "--pred", "bad.txt", "--cloud", truth]) == 1


class TestRun:
    def test_single_run(self, scene, capsys):
        args = ["run", "--cloud", scene[0], "--eval-cloud", scene[1], "--seed", "1", *FAST_RUN]
        assert main(args) == 0
        log = read_csv("runs/avg_ent_columns_1.csv")
        assert [row.cycle for row in log.rows] == [0, 1, 2]
        assert log.notes == []
        assert "avg_ent_columns_1: mIoU" in capsys.readouterr().out

    def test_all_policies_replay_across_thread_counts(self, scene, workspace):
        args = ["run", "--cloud", scene[0], "--eval-cloud", scene[1], "--policy", "all", *FAST_RUN]
        assert main([*args, "--jobs", "1", "--out-dir", "first", "--curves", "--mermaid", "flow.md"]) == 0
        assert main([*args, "--jobs", "3", "--out-dir", "second"]) == 0
        names = sorted(path.name for path in (workspace / "first").glob("*.csv"))
        assert names == [f"{p}_columns_0.csv" for p in ("avg_ent", "avg_var", "random", "redal")]
        for name in names:
            serial, threaded = read_csv(f"first/{name}"), read_csv(f"second/{name}")
            assert serial.body_lines() == threaded.body_lines()
            assert (serial.fingerprint, serial.config_json) == (threaded.fingerprint, threaded.config_json)
        assert (workspace / "first" / "curves_0.svg").read_text(encoding="utf-8").lstrip().startswith("<?xml")
        assert (workspace / "flow.md").read_text(encoding="utf-8").startswith("```mermaid\ngraph LR")

    def test_yaml_config(self, scene, workspace):
        (workspace / "exp.yaml").write_text("policy: random\ncycles: 1\n", encoding="utf-8")
        assert main(["run", "--cloud", scene[0], "--config", "exp.yaml", *FAST_RUN, "--cycles", "1"]) == 0
        log = read_csv("runs/random_columns_0.csv")
        assert len(log.rows) == 2
        assert "evaluation on the training cloud" in log.notes

    def test_yaml_seed_is_kept_without_seed_flag(self, scene, workspace):
        (workspace / "exp.yaml").write_text("seed: 7\n", encoding="utf-8")
        assert main(["run", "--cloud", scene[0], "--config", "exp.yaml", *FAST_RUN, "--cycles", "1"]) == 0
        log = read_csv("runs/avg_ent_columns_7.csv")
        assert json.loads(log.config_json)["seed"] == 7
        assert not (workspace / "runs" / "avg_ent_columns_0.csv").exists()

    def test_seed_flag_overrides_yaml_seed(self, scene, workspace):
        (workspace / "exp.yaml").write_text("seed: 7\n", encoding="utf-8")
        args = ["run", "--cloud", scene[0], "--config", "exp.yaml", "--seed", "2", *FAST_RUN, "--cycles", "1"]
        assert main(args) == 0
        assert json.loads(read_csv("runs/avg_ent_columns_2.csv").config_json)["seed"] == 2

    def test_summary_over_seeds(self, scene, capsys):
        args = ["run", "--cloud", scene[0], "--eval-cloud", scene[1], "--seed", "0", "1", "--baseline", *FAST_RUN]
        assert main([*args, "--cycles", "1"]) == 0
        out = capsys.readouterr().out.splitlines()
        summary = [line for line in out if line.startswith("avg_ent_columns over 2 seeds: mIoU ")]
        assert len(summary) == 1
        assert " ± " in summary[0]
        assert "; mIoU@90 reached " in summary[0]

    def test_no_summary_for_one_seed(self, scene, capsys):
        assert main(["run", "--cloud", scene[0], *FAST_RUN, "--cycles", "1"]) == 0
        assert not any(" seeds: " in line for line in capsys.readouterr().out.splitlines())

    def test_duplicate_seeds(self, scene):
        assert main(["run", "--cloud", scene[0], "--seed", "3", "3", *FAST_RUN]) == 2

    def test_bad_augment_letters(self, scene):
        assert main(["run", "--cloud", scene[0], "--augment", "SQ", *FAST_RUN]) == 2

    def test_bad_policy(self, scene):
        assert main(["run", "--cloud", scene[0], "--policy", "greedy"]) == 2
