import json
from pathlib import Path

import pytest

from paramfactor.cli import main

BASE_CONFIG = {
    "seed": 13,
    "family": "diagonal",
    "dims": {"h": 4, "e": 8, "c": None, "k": 2, "hidden": [12, 10]},
    "featurizer": {"mode": "precomputed"},
    "train": {
        "learning_rate": 1e-2,
        "batch_size": 4,
        "v_train": 2,
        "patience": 5,
        "validation_every": 10,
        "max_steps": 40,
    },
    "partition": {"hold_out_fraction": 0.34},
    "synth": {
        "n_tasks": 2,
        "n_langs": 3,
        "class_counts": [3, 3],
        "examples_per_cell": 30,
        "sentence_length": 4,
    },
    "paths": {"manifest": None, "features": None, "out": None},
}


def write_config(tmp_path, out_name="run", **overrides) -> Path:
    config = json.loads(json.dumps(BASE_CONFIG))
    out = tmp_path / out_name
    config["paths"]["out"] = str(out)
    config["paths"]["manifest"] = str(out / "manifest.tsv")
    config["paths"]["features"] = str(out / "features.tsv")
    for section, values in overrides.items():
        if isinstance(values, dict):
            config[section].update(values)
        else:
            config[section] = values
    path = tmp_path / f"{out_name}.json"
    path.write_text(json.dumps(config))
    return path


@pytest.fixture()
def synth_run(tmp_path):
    config = write_config(tmp_path)
    assert main(["synth", "--config", str(config)]) == 0
    out = tmp_path / "run"
    return config, out


class TestSynthCommand:
    def test_outputs_exist(self, synth_run):
        _, out = synth_run
        assert (out / "manifest.tsv").exists()
        assert (out / "truth.bin").exists()
        assert (out / "features.tsv").exists()
        assert (out / "resolved_config.json").exists()
        assert len(list(out.glob("cell_*.tsv"))) == 6

    def test_idempotent_reruns(self, tmp_path):
        config = write_config(tmp_path)
        assert main(["synth", "--config", str(config)]) == 0
        out = tmp_path / "run"
        snapshot = {p.name: p.read_bytes() for p in out.iterdir()}
        assert main(["synth", "--config", str(config)]) == 0
        for p in out.iterdir():
            assert snapshot[p.name] == p.read_bytes(), p.name

    def test_zero_tasks_is_usage_error(self, tmp_path):
        config = write_config(tmp_path, synth={"n_tasks": 0, "class_counts": []})
        assert main(["synth", "--config", str(config)]) == 2

    def test_unknown_config_key_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"nonsense": 1}))
        assert main(["synth", "--config", str(path)]) == 2

    def test_missing_config_file(self, tmp_path):
        assert main(["synth", "--config", str(tmp_path / "nope.json")]) == 2


class TestTrainCommand:
    def test_train_writes_checkpoint_and_log(self, synth_run):
        config, out = synth_run
        assert main(["train", "--config", str(config)]) == 0
        assert (out / "checkpoint.bin").exists()
        log = (out / "train.log").read_text().splitlines()
        assert len(log) == 40
        assert (out / "partition.json").exists()

    def test_resume_continues_from_checkpoint(self, synth_run, tmp_path):
        config, out = synth_run
        # full run in a separate directory for comparison
        full_cfg = write_config(tmp_path, out_name="full", train={"max_steps": 40})
        assert main(["synth", "--config", str(full_cfg)]) == 0
        assert main(["train", "--config", str(full_cfg)]) == 0

        # same data and output directory, shorter schedule, separate file
        half_raw = json.loads(Path(config).read_text())
        half_raw["train"]["max_steps"] = 20
        half_cfg = tmp_path / "half.json"
        half_cfg.write_text(json.dumps(half_raw))
        assert main(["train", "--config", str(half_cfg)]) == 0
        mid = out / "mid.bin"
        (out / "checkpoint.bin").rename(mid)
        assert main(["train", "--config", str(config), "--resume", str(mid)]) == 0

        full_log = (tmp_path / "full" / "train.log").read_text().splitlines()
        resumed_log = (out / "train.log").read_text().splitlines()
        assert resumed_log == full_log

    def test_corrupt_checkpoint_is_runtime_error(self, synth_run):
        config, out = synth_run
        bad = out / "bad.bin"
        bad.write_bytes(b"PFCKPT\x00\x01corrupt: yes\n\n")
        assert main(["train", "--config", str(config), "--resume", str(bad)]) == 1


class TestEvalCommands:
    @pytest.fixture()
    def trained(self, synth_run):
        config, out = synth_run
        assert main(["train", "--config", str(config)]) == 0
        return config, out

    def test_eval_factor(self, trained, capsys):
        config, out = trained
        assert main(["eval", "--config", str(config), "--cells", "all"]) == 0
        rows = [
            line.split("\t")
            for line in capsys.readouterr().out.splitlines()
            if line.startswith("task")
        ]
        assert len(rows) == 6
        for row in rows:
            assert 0.0 <= float(row[2]) <= 1.0
        summary = (out / "summary_factor.tsv").read_text().splitlines()
        assert len(summary) == 7  # header + 6 cells

    def test_eval_idempotent(self, trained):
        config, out = trained
        assert main(["eval", "--config", str(config)]) == 0
        first = (out / "summary_factor.tsv").read_bytes()
        assert main(["eval", "--config", str(config)]) == 0
        assert (out / "summary_factor.tsv").read_bytes() == first

    def test_eval_bma(self, trained):
        config, out = trained
        assert main(["eval", "--config", str(config), "--bma", "5"]) == 0
        assert (out / "summary_factor.tsv").exists()

    def test_eval_missing_checkpoint(self, synth_run):
        config, _ = synth_run
        assert main(["eval", "--config", str(config)]) == 2

    def test_predict_writes_report(self, trained):
        config, out = trained
        assert main([
            "predict", "--config", str(config), "--task", "task0", "--lang", "lang1",
        ]) == 0
        reports = list(out.glob("report_task0_lang1_factor.tsv"))
        assert len(reports) == 1

    def test_entropy_row_counts(self, trained):
        config, out = trained
        part = json.loads((out / "partition.json").read_text())
        # seen cells evaluate their test split; unseen cells their whole corpus
        n_examples = 30 * len(part["unseen"])
        for key, split in part["splits"].items():
            n_examples += len(split[2])
        n_tokens = 4 * n_examples

        assert main(["entropy", "--config", str(config), "--cells", "all"]) == 0
        rows = (out / "entropy.tsv").read_text().splitlines()
        assert len(rows) == 1 + n_tokens

        assert main([
            "entropy", "--config", str(config), "--cells", "all", "--per-example",
        ]) == 0
        rows = (out / "entropy.tsv").read_text().splitlines()
        assert len(rows) == 1 + n_examples

    def test_baseline_commands(self, trained, capsys):
        config, out = trained
        for system in ("ls", "jm"):
            assert main(["baseline", system, "--config", str(config)]) == 0
            assert (out / f"summary_{system}.tsv").exists()
        assert main(["baseline", "ns", "--config", str(config)]) == 0  # synth wrote features

    def test_baseline_ns_without_features_is_usage_error(self, trained, tmp_path):
        config, out = trained
        raw = json.loads(Path(config).read_text())
        raw["paths"]["features"] = None
        bad = tmp_path / "nofeat.json"
        bad.write_text(json.dumps(raw))
        assert main(["baseline", "ns", "--config", str(bad)]) == 2

    def test_unknown_system_usage_error(self, trained):
        config, _ = trained
        assert main(["eval", "--config", str(config), "--system", "wat"]) == 2


def test_missing_required_flag_is_usage_error():
    assert main(["train"]) == 2


def test_unknown_subcommand_is_usage_error():
    assert main(["frobnicate"]) == 2
