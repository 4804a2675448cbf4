import json

import numpy as np
import pandas as pd
import pytest

from conftest import channel_zero_net, constant_net
from localnoise.attacks.patch_attack import Patch
from localnoise.main import main
from localnoise.pipeline.connectors.file_store import FileStore
from localnoise.pipeline.formats import load_dataset_ppm, load_model, save_model, save_patch
from localnoise.pipeline.schemas import NoiseDomain

TINY_DATA = ["--num_classes", "2", "--train_per_class", "4", "--heldout_per_class", "2"]


@pytest.fixture(autouse=True)
def isolated(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    for key in ("LOCALNOISE_PRECISION", "LOCALNOISE_EVAL_ENGINE", "LOCALNOISE_OUTPUT_DIR"):
        monkeypatch.delenv(key, raising=False)


def read_manifest(directory):
    with open(directory / "manifest.json") as f:
        return json.load(f)


class TestAttackSingle:
    def test_zero_step_fails_after_the_cap(self, tmp_path):
        save_model(constant_net([1.0, 0.0]), tmp_path / "model.lvnm")
        code = main(
            [
                "--action", "attack_single",
                "--output_dir", "out",
                "--model_path", "model.lvnm",
                "--image_size", "16",
                *TINY_DATA,
                "--target", "1",
                "--step_size", "0",
                "--max_iterations", "5",
            ]
        )
        assert code == 0
        result = json.loads((tmp_path / "out" / "result.json").read_text())
        assert result["outcome"] == "failed"
        assert result["iterations"] == 5
        assert result["source"] == 0
        manifest = read_manifest(tmp_path / "out")
        assert {entry["path"] for entry in manifest["artifacts"]} == {"noised.ppm", "patch.lvpn", "result.json"}
        assert "created" not in json.dumps(manifest)

    def test_missing_model_path(self, tmp_path, capsys):
        code = main(["--action", "attack_single", "--output_dir", "out", "--target", "1"])
        assert code == 2
        err = capsys.readouterr().err.strip().splitlines()
        assert err[-1].startswith("error: ConfigError: field=model_path:")
        assert not (tmp_path / "out" / "manifest.json").exists()

    def test_model_file_not_found(self, capsys):
        code = main(["--action", "attack_single", "--output_dir", "out", "--model_path", "nope.lvnm"])
        assert code == 2
        assert "error: FormatError: field=model_path:" in capsys.readouterr().err

    def test_invalid_flag_value_names_the_field(self, capsys):
        code = main(["--action", "attack_single", "--output_dir", "out", "--patch_size", "0"])
        assert code == 2
        assert "error: ConfigError: field=patch_size:" in capsys.readouterr().err


class TestTrainModel:
    ARGS = ["--action", "train_model", "--image_size", "16", *TINY_DATA, "--epochs", "1", "--batch_size", "4"]

    def test_reruns_are_byte_identical(self, tmp_path):
        assert main([*self.ARGS, "--output_dir", "first"]) == 0
        assert main([*self.ARGS, "--output_dir", "second"]) == 0
        assert main(["--action", "train_model", "--config", "first/manifest.json", "--output_dir", "third"]) == 0

        digests = [read_manifest(tmp_path / name)["artifacts"] for name in ("first", "second", "third")]
        assert digests[0] == digests[1] == digests[2]
        assert {entry["path"] for entry in digests[0]} == {"metrics.csv", "model.lvnm"}

        net = load_model(tmp_path / "first" / "model.lvnm")
        assert net.input_shape == (16, 16, 3)
        assert net.num_classes == 2
        metrics = pd.read_csv(tmp_path / "first" / "metrics.csv")
        assert list(metrics["epoch"]) == [1]

    def test_manifest_records_parameters(self, tmp_path):
        assert main([*self.ARGS, "--output_dir", "first", "--seed", "7"]) == 0
        manifest = read_manifest(tmp_path / "first")
        assert manifest["action"] == "train_model"
        assert manifest["parameters"]["seed"] == 7
        assert manifest["settings"]["precision"] == "float32"
        assert manifest["seeds"]["init"] == 7


class TestEvalSweep:
    def test_grid_and_maps(self, tmp_path):
        save_model(constant_net([1.0, 0.0], input_shape=(32, 32, 3)), tmp_path / "model.lvnm")
        patch = Patch(values=np.full((5, 5, 3), 0.5, dtype=np.float32), domain=NoiseDomain.IMAGE)
        save_patch(patch, tmp_path / "patch.lvpn")
        code = main(
            [
                "--action", "eval_sweep",
                "--output_dir", "sweep",
                "--model_path", "model.lvnm",
                "--patch_paths", "patch.lvpn",
                *TINY_DATA,
                "--target", "1",
            ]
        )
        assert code == 0
        frame = pd.read_csv(tmp_path / "sweep" / "sweep.csv")
        assert len(frame) == 196
        assert sorted(p.name for p in (tmp_path / "sweep" / "maps").glob("*.pgm")) == [
            "argmax_class.pgm",
            "argmax_is_neither.pgm",
            "argmax_is_source.pgm",
            "argmax_is_target.pgm",
            "source_prob.pgm",
            "target_prob.pgm",
        ]
        summary = json.loads((tmp_path / "sweep" / "sweep.json").read_text())
        assert summary["grid_rows"] == summary["grid_cols"] == 14
        assert summary["fraction_target_confident"] == 0.0
        assert summary["fraction_not_source"] == 0.0


class TestExportDataset:
    def test_written_split_loads_back(self, tmp_path):
        assert main(["--action", "export_dataset", "--output_dir", "data", "--image_size", "16", *TINY_DATA]) == 0
        loaded = load_dataset_ppm(tmp_path / "data" / "heldout")
        assert len(loaded) == 4
        assert list(loaded.labels) == [0, 1, 0, 1]
        assert loaded.images.shape == (4, 16, 16, 3)


class TestFileStore:
    def test_rollback_removes_written_files(self, tmp_path):
        store = FileStore(tmp_path / "run")
        store.write_bytes("a.bin", b"abc")
        store.write_bytes("nested/b.bin", b"def")
        assert [entry.path for entry in store.artifacts()] == ["a.bin", "nested/b.bin"]

        store.rollback()
        assert not (tmp_path / "run" / "a.bin").exists()
        assert not (tmp_path / "run" / "nested" / "b.bin").exists()
        assert store.artifacts() == []

    def test_no_temp_files_left(self, tmp_path):
        store = FileStore(tmp_path / "run")
        store.write_bytes("a.bin", b"abc")
        assert [p.name for p in (tmp_path / "run").iterdir()] == ["a.bin"]


class TestPipeline:
    """Transfer patch -> every evaluation action, each re-run from its own manifest."""

    COMMON = ["--model_path", "model.lvnm", "--image_size", "16", *TINY_DATA]

    def run_twice(self, tmp_path, action, *args):
        assert main(["--action", action, "--output_dir", action, *self.COMMON, *args]) == 0
        again = f"{action}_again"
        assert main(["--action", action, "--config", f"{action}/manifest.json", "--output_dir", again]) == 0
        first = read_manifest(tmp_path / action)["artifacts"]
        assert first == read_manifest(tmp_path / again)["artifacts"]
        return {entry["path"] for entry in first}

    def test_chained_actions_are_reproducible(self, tmp_path):
        save_model(channel_zero_net(), tmp_path / "model.lvnm")
        written = self.run_twice(
            tmp_path,
            "attack_transfer",
            "--target", "1",
            "--step_size", "1000",
            "--train_image_count", "8",
            "--consecutive_successes", "2",
            "--max_total_iterations", "50",
        )
        assert written == {"patch.lvpn", "patch.json", "patch_display.ppm"}
        sidecar = json.loads((tmp_path / "attack_transfer" / "patch.json").read_text())
        assert sidecar["target"] == 1
        assert sidecar["converged"] is True

        patch = ["--patch_paths", "attack_transfer/patch.lvpn"]
        assert self.run_twice(tmp_path, "eval_transfer", *patch) == {"transfer.csv", "transfer.json"}
        transfer = json.loads((tmp_path / "eval_transfer" / "transfer.json").read_text())
        assert transfer["target"] == 1
        assert transfer["evaluated"] == 4
        assert transfer["rate_confident"] <= transfer["rate_argmax_target"] <= transfer["rate_not_source"]

        assert self.run_twice(tmp_path, "class_matrix", *patch) == {"class_matrix.csv"}
        matrix = pd.read_csv(tmp_path / "class_matrix" / "class_matrix.csv")
        assert list(matrix["source"]) == [0, 1]
        # the net predicts class 0 for every clean image, whatever its label
        assert matrix["target_1"].notna().tolist() == [True, False]
        assert matrix["target_0"].isna().all()

        written = self.run_twice(tmp_path, "saliency", *patch, "--fix_max_iterations", "20", "--saved_maps", "2")
        assert {"saliency.json", "saliency_table.csv", "saliency_records.csv"} <= written
        assert {"maps/fix_00.csv", "maps/fix_00.pgm", "maps/fix_00.json", "maps/fix_01.json"} <= written
        summary = json.loads((tmp_path / "saliency" / "saliency.json").read_text())
        records = pd.read_csv(tmp_path / "saliency" / "saliency_records.csv")
        assert summary["evaluated_pairs"] * 2 == len(records)

        written = self.run_twice(tmp_path, "eval_sweep", *patch, "--target", "1")
        assert "sweep.csv" in written and len([p for p in written if p.endswith(".pgm")]) == 6
        assert len(pd.read_csv(tmp_path / "eval_sweep" / "sweep.csv")) == 36

        written = self.run_twice(tmp_path, "shift_check", *patch, "--target", "1", "--corner", "bottom_right")
        assert written == {"shift.csv", "context.json"}
        assert len(pd.read_csv(tmp_path / "shift_check" / "shift.csv")) == 4

    def test_failure_after_writing_removes_outputs(self, tmp_path, monkeypatch, capsys):
        save_model(constant_net([1.0, 0.0]), tmp_path / "model.lvnm")
        save_patch(Patch(values=np.zeros((5, 5, 3), dtype=np.float32), domain=NoiseDomain.NETWORK), tmp_path / "p.lvpn")

        def broken_summary(**_):
            raise RuntimeError("summary unavailable")

        monkeypatch.setattr("localnoise.main.SweepSummary", broken_summary)
        code = main(["--action", "eval_sweep", "--output_dir", "sweep", *self.COMMON, "--patch_paths", "p.lvpn", "--target", "1"])
        assert code == 1
        assert "error: RuntimeError: field=-: summary unavailable" in capsys.readouterr().err
        out = tmp_path / "sweep"
        assert not (out / "sweep.csv").exists()
        assert not (out / "manifest.json").exists()
        assert not list((out / "maps").glob("*.pgm"))
