import csv
import json
import subprocess
import sys

import pytest

from multiresnet.cli import OUT_ENV, main
from multiresnet.data import encode_cifar10

SMALL_TRAIN = ["--depth", "8", "--k", "2", "--epochs", "2", "--seed", "1", "--n-train", "128", "--n-test", "64"]


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def run(argv, out):
    return main(list(argv) + ["--out", str(out)])


class TestAnalyze:
    def test_counts_k2(self, tmp_path):
        assert run(["analyze", "--n", "3", "--k", "2"], tmp_path) == 0
        rows = read_csv(tmp_path / "distribution.csv")
        assert [r[1] for r in rows[1:]] == ["1", "6", "12", "8"]

    def test_counts_k1(self, tmp_path):
        assert run(["analyze", "--n", "3", "--k", "1"], tmp_path) == 0
        assert [r[1] for r in read_csv(tmp_path / "distribution.csv")[1:]] == ["1", "3", "3", "1"]

    def test_bad_coverage(self, tmp_path, capsys):
        assert run(["analyze", "--p", "1.5"], tmp_path) != 0
        assert "outside (0, 1)" in capsys.readouterr().err

    def test_ranges_file(self, tmp_path):
        assert run(["analyze", "--n", "20", "--c", "3", "--r", "0.5"], tmp_path) == 0
        rows = {r[0]: r for r in read_csv(tmp_path / "ranges.csv")[1:]}
        assert set(rows) == {"curve", "base", "deep", "wide"}
        assert int(rows["deep"][5]) < 3 * int(rows["base"][5])

    def test_fraction_r(self, tmp_path):
        assert run(["analyze", "--n", "3", "--k", "2", "--r", "1/2"], tmp_path) == 0
        assert [r[2] for r in read_csv(tmp_path / "distribution.csv")[1:]] == ["1", "3", "3", "1"]


class TestTrain:
    def test_train_writes_outputs(self, tmp_path):
        assert run(["train"] + SMALL_TRAIN, tmp_path) == 0
        for name in ("checkpoint.bin", "train_log.csv", "timing.csv", "manifest.json"):
            assert (tmp_path / name).exists()
        man = json.loads((tmp_path / "manifest.json").read_text())
        assert man["subcommand"] == "train"
        assert man["seed"] == 1
        assert man["config"]["depth"] == 8
        assert set(man["artifacts"]) == {"checkpoint.bin", "train_log.csv"}
        assert "wall_time" in man and "version" in man
        assert len(read_csv(tmp_path / "train_log.csv")) == 3

    def test_bad_depth(self, tmp_path, capsys):
        assert run(["train", "--depth", "9", "--block", "basic"], tmp_path) != 0
        assert "6n+2" in capsys.readouterr().err

    def test_missing_dataset(self, tmp_path, capsys):
        assert run(["train", "--dataset", str(tmp_path / "nowhere")], tmp_path / "o") != 0
        assert "does not exist" in capsys.readouterr().err

    def test_config_file_and_flag_precedence(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# small run\ndepth = 8\nk = 1\nepochs = 1\nn_train = 64\nn_test = 32\nseed = 5\n")
        assert run(["train", "--config", str(cfg), "--k", "2"], tmp_path / "o") == 0
        man = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert man["config"]["k"] == 2 and man["config"]["seed"] == 5 and man["config"]["epochs"] == 1

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("depht = 8\n")
        assert run(["train", "--config", str(cfg)], tmp_path / "o") != 0
        assert "depht" in capsys.readouterr().err

    def test_cifar_directory(self, tmp_path):
        import numpy as np

        rng = np.random.default_rng(0)
        data = tmp_path / "cifar"
        data.mkdir()
        for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
            (data / name).write_bytes(encode_cifar10(rng.integers(0, 256, (10_000, 3, 32, 32), dtype=np.uint8),
                                                     rng.integers(0, 10, 10_000)))
        # a malformed file in place of a training batch is reported, not crashed on
        (data / "data_batch_2.bin").write_bytes(b"\x00" * 100)
        assert run(["train", "--dataset", str(data), "--epochs", "1"], tmp_path / "o") != 0


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert run(["train"] + SMALL_TRAIN, out) == 0
    return out / "checkpoint.bin"


class TestCheckpointCommands:
    def test_lesion_control_row(self, checkpoint, tmp_path):
        assert run(["lesion", "--checkpoint", str(checkpoint), "--n-train", "128", "--n-test", "64"], tmp_path) == 0
        rows = read_csv(tmp_path / "lesion.csv")
        assert rows[1][0] == "none" and float(rows[1][2]) == 0.0

    def test_evaluate(self, checkpoint, tmp_path):
        assert run(["evaluate", "--checkpoint", str(checkpoint), "--n-train", "128", "--n-test", "64"], tmp_path) == 0
        rows = read_csv(tmp_path / "eval.csv")
        assert [r[0] for r in rows[1:]] == ["train", "test"]

    def test_path_gradient_on_checkpoint(self, checkpoint, tmp_path):
        argv = ["path-gradient", "--checkpoint", str(checkpoint), "--depths", "0,1", "--n-test", "64", "--n-train", "128"]
        assert run(argv, tmp_path) == 0
        rows = read_csv(tmp_path / "path_gradient.csv")
        assert [r[0] for r in rows[1:]] == ["0", "1"]
        assert rows[2][1] == "2"  # one basic function is two convolutions

    def test_image_size_mismatch(self, checkpoint, tmp_path, capsys):
        argv = ["lesion", "--checkpoint", str(checkpoint), "--image-size", "16", "--n-train", "64", "--n-test", "32"]
        assert run(argv, tmp_path) != 0
        assert "expects images" in capsys.readouterr().err

    def test_missing_checkpoint(self, tmp_path, capsys):
        assert run(["lesion", "--checkpoint", str(tmp_path / "none.bin")], tmp_path) != 0
        assert "does not exist" in capsys.readouterr().err


class TestSimulationCommands:
    def test_simulate_ideal(self, tmp_path):
        argv = ["simulate", "--k", "2", "--latency", "0", "--bandwidth", "inf", "--t-fixed", "0"]
        assert run(argv, tmp_path) == 0
        row = read_csv(tmp_path / "sim.csv")[1]
        assert float(row[6]) == 0.0

    def test_simulate_rejects_k1_model(self, tmp_path, capsys):
        assert run(["simulate", "--k", "1", "--strategy", "model"], tmp_path) != 0
        assert "divisible" in capsys.readouterr().err

    def test_simulate_from_config(self, tmp_path):
        cfg = tmp_path / "s.cfg"
        cfg.write_text("depth = 110\nk = 4\nbatch_size = 32\nworkers = 4\nstrategy = hybrid\nt_fn = 1e-5\n")
        assert run(["simulate", "--config", str(cfg)], tmp_path / "o") == 0
        assert read_csv(tmp_path / "o" / "sim.csv")[1][4] == "hybrid"

    def test_calibrate_bundled(self, tmp_path):
        assert run(["calibrate"], tmp_path) == 0
        text = (tmp_path / "cost_model.cfg").read_text()
        assert "t_fn =" in text and "bandwidth =" in text
        rows = read_csv(tmp_path / "residuals.csv")
        assert len(rows) == 13 and rows[0][6] == "rel_error"

    def test_speedup_table(self, tmp_path):
        assert run(["speedup-table"], tmp_path) == 0
        md = (tmp_path / "speedup.md").read_text().splitlines()
        assert len(md) == 8

    def test_speedup_table_uses_cost_file(self, tmp_path):
        assert run(["calibrate"], tmp_path / "cal") == 0
        assert run(["speedup-table", "--config", str(tmp_path / "cal" / "cost_model.cfg")], tmp_path / "a") == 0
        assert run(["speedup-table"], tmp_path / "b") == 0
        assert (tmp_path / "a" / "speedup.csv").read_bytes() == (tmp_path / "b" / "speedup.csv").read_bytes()


class TestDeterminism:
    @pytest.mark.parametrize(
        "argv",
        [
            ["analyze", "--n", "40", "--k", "3", "--r", "0.7"],
            ["path-gradient", "--depths", "0,2,4", "--samples", "3"],
            ["calibrate"],
            ["speedup-table"],
            ["train"] + SMALL_TRAIN,
        ],
        ids=lambda a: a[0],
    )
    def test_replay_manifest(self, argv, tmp_path):
        assert run(argv, tmp_path / "a") == 0
        assert run([argv[0], "--manifest", str(tmp_path / "a" / "manifest.json")], tmp_path / "b") == 0
        man_a = json.loads((tmp_path / "a" / "manifest.json").read_text())
        man_b = json.loads((tmp_path / "b" / "manifest.json").read_text())
        assert man_a["config"] == man_b["config"]
        for name in man_a["artifacts"]:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
        assert man_a["artifacts"] == man_b["artifacts"]

    def test_manifest_for_other_command_rejected(self, tmp_path, capsys):
        assert run(["calibrate"], tmp_path / "a") == 0
        assert run(["analyze", "--manifest", str(tmp_path / "a" / "manifest.json")], tmp_path / "b") != 0
        assert "manifest is for" in capsys.readouterr().err


class TestEntryPoint:
    def test_env_output_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv(OUT_ENV, str(tmp_path))
        assert main(["analyze", "--n", "4"]) == 0
        assert (tmp_path / "analyze" / "distribution.csv").exists()

    def test_module_invocation(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "multiresnet", "analyze", "--n", "3", "--out", str(tmp_path)],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0, proc.stderr
        bad = subprocess.run([sys.executable, "-m", "multiresnet", "analyze", "--p", "2", "--out", str(tmp_path)],
                             capture_output=True, text=True)
        assert bad.returncode != 0 and "error" in bad.stderr

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as info:
            main(["frobnicate"])
        assert info.value.code != 0
