import csv
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from earlyclass.cli import main

# tiny test splits leave some classes without stop decisions
pytestmark = pytest.mark.filterwarnings("ignore:no stop decisions:UserWarning")

TOY_GEN = ["--samples-per-class", "8", "--regions", "5", "--seed", "3"]
TOY_TRAIN = ["--epochs", "2", "--seq-len", "10", "--hidden-dim", "8", "--num-layers", "1",
             "--batch-size", "16", "--micro-batch", "16"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def toy_dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "toy.csv"
    assert main(["generate", "--out", str(path), *TOY_GEN]) == 0
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, toy_dataset):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--dataset", str(toy_dataset), "--out-dir", str(out), "--alpha", "1.0", *TOY_TRAIN]) == 0
    return out


@pytest.mark.parametrize("cmd", [[], ["generate"], ["train"], ["eval"], ["sweep"], ["trace"]])
def test_help_exits_zero(cmd):
    result = subprocess.run([sys.executable, "-m", "earlyclass.cli", *cmd, "--help"], capture_output=True, text=True)
    assert result.returncode == 0
    assert "usage" in result.stdout


class TestGenerate:
    def test_header_and_summary(self, toy_dataset, capsys):
        header = toy_dataset.read_text().splitlines()[0]
        assert header == "sample_id,region_id,label,day," + ",".join(f"b{i}" for i in range(13))
        assert {int(r["label"]) for r in read_csv(toy_dataset)} == set(range(9))
        assert toy_dataset.with_suffix(".classes.json").exists()

    def test_same_seed_same_bytes(self, tmp_path, toy_dataset):
        again = tmp_path / "again.csv"
        assert main(["generate", "--out", str(again), *TOY_GEN]) == 0
        assert again.read_bytes() == toy_dataset.read_bytes()

    def test_zero_samples_rejected(self, tmp_path, capsys):
        assert main(["generate", "--out", str(tmp_path / "x.csv"), "--samples-per-class", "0"]) == 2
        assert "samples_per_class" in capsys.readouterr().err


class TestTrain:
    def test_outputs(self, trained):
        for name in ("checkpoint.json", "history.csv", "model.json", "best_model.json", "run_config.json"):
            assert (trained / name).exists()
        rows = read_csv(trained / "history.csv")
        assert len(rows) == 2
        assert list(rows[0]) == ["epoch", "train_loss", "val_loss", "val_accuracy", "val_mean_stop_fraction"]

    def test_alpha_recorded(self, trained):
        ck = json.loads((trained / "checkpoint.json").read_text())
        assert ck["train_config"]["alpha"] == 1.0

    def test_missing_dataset(self, tmp_path, capsys):
        missing = tmp_path / "nope.csv"
        assert main(["train", "--dataset", str(missing), "--out-dir", str(tmp_path)]) == 2
        assert str(missing) in capsys.readouterr().err

    def test_bad_config_key(self, tmp_path, toy_dataset):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"dataset": str(toy_dataset), "learning": 1}))
        assert main(["train", "--config", str(cfg)]) == 2

    def test_config_file(self, tmp_path, toy_dataset):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({
            "dataset": str(toy_dataset), "output_dir": str(tmp_path / "out"),
            "model": {"hidden_dim": 4, "num_layers": 1},
            "train": {"epochs": 1, "seq_len": 10, "batch_size": 32, "micro_batch": 32},
        }))
        assert main(["train", "--config", str(cfg)]) == 0
        assert len(read_csv(tmp_path / "out" / "history.csv")) == 1

    def test_smoke_budget(self, tmp_path, toy_dataset):
        start = time.perf_counter()
        args = ["train", "--dataset", str(toy_dataset), "--out-dir", str(tmp_path), "--epochs", "5",
                "--seq-len", "10", "--hidden-dim", "16", "--num-layers", "2"]
        assert main(args) == 0
        assert time.perf_counter() - start < 60

    def test_resume(self, tmp_path, toy_dataset, trained):
        out = tmp_path / "resumed"
        args = ["train", "--dataset", str(toy_dataset), "--out-dir", str(out), "--alpha", "1.0", *TOY_TRAIN]
        args[args.index("--epochs") + 1] = "3"
        assert main(args + ["--resume", str(trained / "checkpoint.json")]) == 0
        rows = read_csv(out / "history.csv")
        assert len(rows) == 3
        assert rows[:2] == read_csv(trained / "history.csv")


class TestEval:
    def test_reports(self, tmp_path, trained, toy_dataset, capsys):
        out = tmp_path / "ev"
        assert main(["eval", "--checkpoint", str(trained / "model.json"), "--dataset", str(toy_dataset),
                     "--out-dir", str(out), "--repeats", "5"]) == 0
        printed = capsys.readouterr().out
        for metric in ("accuracy", "tstop", "precision", "recall", "f1", "kappa"):
            assert metric in printed
        report = {r["metric"]: r for r in read_csv(out / "report.csv")}
        assert report["accuracy"]["std"] != ""
        assert (out / "confusion.csv").exists() and (out / "stop_stats.csv").exists()
        assert (out / "stop_times.png").stat().st_size > 0

    def test_expected_mode_deterministic(self, tmp_path, trained, toy_dataset):
        texts = []
        for k in range(2):
            out = tmp_path / f"ev{k}"
            main(["eval", "--checkpoint", str(trained / "checkpoint.json"), "--dataset", str(toy_dataset),
                  "--out-dir", str(out), "--stop-mode", "expected", "--no-figures"])
            texts.append((out / "report.csv").read_bytes())
        assert texts[0] == texts[1]

    def test_dimension_mismatch(self, tmp_path, trained):
        bad = tmp_path / "bad.csv"
        bad.write_text("sample_id,region_id,label,day,b0,b1\n0,0,0,1.0,0.1,0.2\n")
        assert main(["eval", "--checkpoint", str(trained / "model.json"), "--dataset", str(bad)]) != 0


class TestSweep:
    def test_rows_and_determinism(self, tmp_path, toy_dataset):
        texts = []
        for k in range(2):
            out = tmp_path / f"sw{k}"
            args = ["sweep", "--dataset", str(toy_dataset), "--out-dir", str(out), "--alphas", "0.2,0.6,1.0",
                    "--seeds", "2", *TOY_TRAIN]
            args[args.index("--epochs") + 1] = "1"
            assert main(args) == 0
            texts.append((out / "sweep.csv").read_bytes())
        rows = read_csv(tmp_path / "sw0" / "sweep.csv")
        assert [float(r["alpha"]) for r in rows] == [0.2, 0.6, 1.0]
        assert texts[0] == texts[1]
        assert (tmp_path / "sw0" / "sweep.png").exists()

    def test_empty_alpha_list(self, tmp_path, toy_dataset, capsys):
        assert main(["sweep", "--dataset", str(toy_dataset), "--alphas", ""]) == 2
        assert "alphas" in capsys.readouterr().err


class TestTrace:
    def test_trace_file(self, tmp_path, trained, toy_dataset):
        out = tmp_path / "trace.csv"
        assert main(["trace", "--checkpoint", str(trained / "model.json"), "--dataset", str(toy_dataset),
                     "--sample-id", "4", "--seq-len", "10", "--out", str(out)]) == 0
        rows = read_csv(out)
        assert len(rows) == 10
        assert abs(sum(float(r["P_t"]) for r in rows) - 1.0) < 1e-6
        assert float(rows[-1]["p_t"]) == 1.0
        for r in rows:
            assert abs(sum(float(r[f"yhat_{k}"]) for k in range(9)) - 1.0) < 1e-6
        assert sum(int(r["stopped_flag"]) for r in rows) == 1
        assert out.with_suffix(".png").exists()

    def test_unknown_sample(self, trained, toy_dataset, capsys):
        assert main(["trace", "--checkpoint", str(trained / "model.json"), "--dataset", str(toy_dataset),
                     "--sample-id", "99999"]) == 2
        assert "99999" in capsys.readouterr().err


def test_inputs_not_mutated(tmp_path, trained, toy_dataset):
    before = toy_dataset.read_bytes(), (trained / "model.json").read_bytes()
    main(["eval", "--checkpoint", str(trained / "model.json"), "--dataset", str(toy_dataset),
          "--out-dir", str(tmp_path), "--no-figures"])
    assert (toy_dataset.read_bytes(), (trained / "model.json").read_bytes()) == before


def test_console_script_installed():
    result = subprocess.run(["earlyclass", "--help"], capture_output=True, text=True)
    assert result.returncode == 0 and "generate" in result.stdout
    assert np.__name__ == "numpy"
