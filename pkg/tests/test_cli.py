"""End-to-end tests of the command-line interface: exit codes,
manifests, artifacts, and config override plumbing."""

import json
import os
import xml.etree.ElementTree as ET

import pytest

import bevgraph.training
from bevgraph import cli
from bevgraph.training import TrainingDivergence


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("data")
    code = cli.main(["simulate", "--out", str(path),
                     "--set", "sim.n_objects=[3,5]",
                     "--set", "n_train=12", "--set", "n_val=6",
                     "--seed", "77"])
    assert code == 0
    return path


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, data_dir):
    path = tmp_path_factory.mktemp("run")
    code = cli.main(["train", "--out", str(path),
                     "--set", f"dataset_dir={data_dir}",
                     "--set", "train.epochs=2", "--set", "train.lr=0.001",
                     "--set", "train.batch_size=4"])
    assert code == 0
    return path


@pytest.fixture(scope="module")
def eval_dir(tmp_path_factory, data_dir, run_dir):
    path = tmp_path_factory.mktemp("eval")
    code = cli.main(["eval", "--out", str(path),
                     "--set", f"checkpoint={run_dir}/checkpoint.json",
                     "--set", f"dataset_dir={data_dir}"])
    assert code == 0
    return path


def read_manifest(out_dir):
    with open(os.path.join(out_dir, "manifest.json")) as fh:
        return json.load(fh)


class TestManifests:
    def test_every_output_dir_gets_one(self, data_dir, run_dir, eval_dir):
        for out_dir, command in ((data_dir, "simulate"), (run_dir, "train"),
                                 (eval_dir, "eval")):
            manifest = read_manifest(out_dir)
            assert manifest["command"] == command
            assert manifest["out_dir"] == str(out_dir)
            assert manifest["build"].startswith("bevgraph-")
            assert isinstance(manifest["resolved_config"], dict)

    def test_overrides_are_recorded_and_applied(self, data_dir):
        manifest = read_manifest(data_dir)
        assert "sim.n_objects=[3,5]" in manifest["overrides"]
        assert manifest["resolved_config"]["sim"]["n_objects"] == [3, 5]
        assert manifest["resolved_config"]["sim"]["seed"] == 77
        assert manifest["resolved_config"]["n_train"] == 12


class TestSimulate:
    def test_writes_both_splits(self, data_dir):
        assert (data_dir / "train.json.gz").exists()
        assert (data_dir / "val.json.gz").exists()

    def test_regeneration_is_byte_identical(self, data_dir, tmp_path):
        code = cli.main(["simulate", "--out", str(tmp_path),
                         "--set", "sim.n_objects=[3,5]",
                         "--set", "n_train=12", "--set", "n_val=6",
                         "--seed", "77"])
        assert code == 0
        for name in ("train.json.gz", "val.json.gz"):
            assert (tmp_path / name).read_bytes() == \
                (data_dir / name).read_bytes()

    def test_requires_out(self):
        assert cli.main(["simulate"]) == 2

    def test_invalid_sim_field_is_config_error(self, tmp_path):
        code = cli.main(["simulate", "--out", str(tmp_path),
                         "--set", "sim.depth_cue_mode=bogus"])
        assert code == 2

    def test_zero_scene_count_rejected(self, tmp_path):
        code = cli.main(["simulate", "--out", str(tmp_path),
                         "--set", "n_train=0"])
        assert code == 2


class TestTrain:
    def test_artifacts(self, run_dir):
        for name in ("checkpoint.json", "run_record.json", "metrics.jsonl",
                     "manifest.json"):
            assert (run_dir / name).exists(), name

    def test_missing_dataset_is_config_error(self):
        assert cli.main(["train"]) == 2

    def test_bad_train_field_is_config_error(self, data_dir):
        code = cli.main(["train", "--set", f"dataset_dir={data_dir}",
                         "--set", "train.epochs=0"])
        assert code == 2

    def test_divergence_exits_numeric(self, data_dir, monkeypatch):
        def explode(dataset, config, out_dir=None):
            raise TrainingDivergence("boom", scene_id=4, epoch=1)

        monkeypatch.setattr(bevgraph.training, "train", explode)
        code = cli.main(["train", "--set", f"dataset_dir={data_dir}",
                         "--set", "train.epochs=1"])
        assert code == 3


class TestEval:
    def test_metrics_files(self, eval_dir):
        with open(eval_dir / "metrics.json") as fh:
            doc = json.load(fh)
        assert {"loc_error", "iou", "per_class_iou", "num_scenes",
                "binned"} <= set(doc)
        assert (eval_dir / "metrics.csv").exists()

    def test_reproduces_training_final_metrics(self, run_dir, eval_dir):
        with open(run_dir / "run_record.json") as fh:
            record = json.load(fh)
        with open(eval_dir / "metrics.json") as fh:
            metrics = json.load(fh)
        assert metrics["loc_error"] == record["final_val_loc_error"]
        assert metrics["iou"] == record["final_val_iou"]

    def test_missing_checkpoint_is_config_error(self, data_dir):
        code = cli.main(["eval", "--set", "checkpoint=/nope/c.json",
                         "--set", f"dataset_dir={data_dir}"])
        assert code == 2

    def test_version_mismatch_is_config_error(self, data_dir, run_dir,
                                              tmp_path):
        doc = json.loads((run_dir / "checkpoint.json").read_text())
        doc["format_version"] = 99
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(doc))
        code = cli.main(["eval", "--set", f"checkpoint={bad}",
                         "--set", f"dataset_dir={data_dir}"])
        assert code == 2

    def test_foreign_dataset_is_config_error(self, run_dir,
                                             tmp_path_factory):
        other = tmp_path_factory.mktemp("other_data")
        assert cli.main(["simulate", "--out", str(other),
                         "--set", "sim.n_objects=[3,5]",
                         "--set", "n_train=2", "--set", "n_val=2",
                         "--seed", "78"]) == 0
        code = cli.main(["eval",
                         "--set", f"checkpoint={run_dir}/checkpoint.json",
                         "--set", f"dataset_dir={other}"])
        assert code == 2

    def test_bad_split_is_config_error(self, data_dir, run_dir):
        code = cli.main(["eval",
                         "--set", f"checkpoint={run_dir}/checkpoint.json",
                         "--set", f"dataset_dir={data_dir}",
                         "--set", "split=test"])
        assert code == 2


@pytest.fixture(scope="module")
def ablation_dir(tmp_path_factory, data_dir):
    path = tmp_path_factory.mktemp("abl")
    code = cli.main(["ablate", "--out", str(path),
                     "--set", f"dataset_dir={data_dir}",
                     "--set", "train.epochs=1",
                     "--set", "train.lr=0.001"])
    assert code == 0
    return path


class TestAblate:
    def test_propagation_axis_emits_table_structure(self, ablation_dir,
                                                    capsys):
        with open(ablation_dir / "ablation_summary.json") as fh:
            doc = json.load(fh)
        levels = [row["level"] for row in doc["summary"]]
        assert levels == ["n2n", "n2n+e2n", "n2n+e2n+e2e",
                          "n2n+e2n+e2e+n2e"]
        supervision = [row["supervision"] for row in doc["summary"]]
        assert supervision == ["nodes", "nodes", "nodes+edges",
                               "nodes+edges"]
        assert (ablation_dir / "ablation_runs.csv").exists()

    def test_unknown_axis_is_config_error(self, data_dir):
        code = cli.main(["ablate", "--set", f"dataset_dir={data_dir}",
                         "--set", "axis=magic"])
        assert code == 2

    def test_too_few_seeds_is_config_error(self, data_dir):
        code = cli.main(["ablate", "--set", f"dataset_dir={data_dir}",
                         "--set", "seeds=[1,2]"])
        assert code == 2


class TestGradcheck:
    def test_passes_on_default_config(self, tmp_path, capsys):
        code = cli.main(["gradcheck", "--out", str(tmp_path),
                         "--set", "draws=1"])
        out = capsys.readouterr().out
        assert code == 0
        assert "PASS" in out
        with open(tmp_path / "gradcheck.json") as fh:
            doc = json.load(fh)
        assert doc["passed"] is True
        assert doc["max_rel_error"] < 1e-4

    def test_impossible_threshold_exits_four(self, capsys):
        code = cli.main(["gradcheck", "--set", "draws=1",
                         "--set", "threshold=1e-15"])
        assert code == 4
        assert "FAIL" in capsys.readouterr().err

    def test_bad_propagation_field_is_config_error(self):
        code = cli.main(["gradcheck", "--set", "propagation.num_layers=0"])
        assert code == 2


class TestReport:
    def test_renders_plots_and_tables(self, tmp_path, data_dir, eval_dir):
        abl = tmp_path / "abl"
        assert cli.main(["ablate", "--out", str(abl),
                         "--set", f"dataset_dir={data_dir}",
                         "--set", "axis=node_degree",
                         "--set", "levels=[1,3]",
                         "--set", "train.epochs=1",
                         "--set", "train.lr=0.001"]) == 0
        out = tmp_path / "rep"
        binned = json.dumps([{"label": "demo",
                              "path": str(eval_dir / "metrics.json")}])
        code = cli.main(["report", "--out", str(out),
                         "--set", f"ablation_summary="
                                  f"{abl}/ablation_summary.json",
                         "--set", f"binned_metrics={binned}"])
        assert code == 0
        for name in ("iou_vs_distance.svg", "loc_error_vs_distance.svg",
                     "ablation_loc_error.svg"):
            ET.parse(out / name)   # valid XML
        assert (out / "distance_bins.csv").exists()
        assert (out / "ablation_table.csv").exists()

    def test_requires_out(self, eval_dir):
        binned = json.dumps([{"label": "demo",
                              "path": str(eval_dir / "metrics.json")}])
        assert cli.main(["report",
                         "--set", f"binned_metrics={binned}"]) == 2

    def test_requires_some_input(self, tmp_path):
        assert cli.main(["report", "--out", str(tmp_path)]) == 2

    def test_missing_metrics_file_is_config_error(self, tmp_path):
        binned = json.dumps([{"label": "x", "path": "/nope.json"}])
        code = cli.main(["report", "--out", str(tmp_path),
                         "--set", f"binned_metrics={binned}"])
        assert code == 2


class TestFlagPlumbing:
    def test_unknown_command_exits_two(self):
        with pytest.raises(SystemExit) as info:
            cli.main(["frobnicate"])
        assert info.value.code == 2

    def test_unknown_flag_exits_two(self):
        with pytest.raises(SystemExit) as info:
            cli.main(["train", "--frobnicate"])
        assert info.value.code == 2

    def test_malformed_set_is_config_error(self):
        assert cli.main(["train", "--set", "no_equals_sign"]) == 2

    def test_help_enumerates_config_fields(self, capsys):
        with pytest.raises(SystemExit) as info:
            cli.main(["train", "--help"])
        assert info.value.code == 0
        out = capsys.readouterr().out
        for field in ("epochs", "lr", "weight_decay", "k_neighbors",
                      "dataset_dir", "grad_clip"):
            assert field in out

    def test_config_file_layered_under_overrides(self, tmp_path):
        cfg = tmp_path / "sim.json"
        cfg.write_text(json.dumps({"sim": {"seed": 5}, "n_train": 3,
                                   "n_val": 2}))
        out = tmp_path / "out"
        code = cli.main(["simulate", "--config", str(cfg),
                         "--out", str(out), "--set", "n_val=1"])
        assert code == 0
        manifest = read_manifest(out)
        assert manifest["resolved_config"]["n_train"] == 3
        assert manifest["resolved_config"]["n_val"] == 1
        assert manifest["resolved_config"]["sim"]["seed"] == 5
        assert manifest["config_path"] == str(cfg)

    def test_missing_config_file_is_config_error(self):
        assert cli.main(["simulate", "--config", "/nope.json",
                         "--out", "/tmp/x"]) == 2

    def test_thread_cap_env_is_validated(self, monkeypatch, tmp_path):
        monkeypatch.setenv("BEVGRAPH_THREADS", "zero")
        assert cli.main(["gradcheck", "--set", "draws=1"]) == 2
        monkeypatch.setenv("BEVGRAPH_THREADS", "0")
        assert cli.main(["gradcheck", "--set", "draws=1"]) == 2

    def test_thread_cap_recorded_in_manifest(self, monkeypatch, tmp_path,
                                             data_dir):
        monkeypatch.setenv("BEVGRAPH_THREADS", "2")
        out = tmp_path / "sim"
        assert cli.main(["simulate", "--out", str(out),
                         "--set", "n_train=1", "--set", "n_val=1"]) == 0
        assert read_manifest(out)["threads"] == 2
