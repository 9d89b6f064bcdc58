import csv
import json

import numpy as np
import pytest

from scatterpos import cli
from scatterpos.nn import build_model, reference_spec
from scatterpos.persistence import load_checkpoint

TINY = ["--preset", "custom", "--experiments", "4", "--holdout", "1", "--samples", "60"]


def run(*argv):
    return cli.main([str(a) for a in argv] + ["--quiet"])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert run("gen", *TINY, "--seed", 4, "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("train")
    assert run("train", "--data", data_dir, "--model", "mlp_baseline", "--epochs", 2,
               "--out", out) == 0
    return out / "checkpoint.bin"


def test_gen_outputs(data_dir):
    for name in ("dataset.bin", "manifest.json", "calibration.json", "gen.config.json"):
        assert (data_dir / name).is_file()
    doc = json.loads((data_dir / "gen.config.json").read_text())
    assert doc["command"] == "gen"
    assert doc["args"]["experiments"] == 4


def test_paper_shape_preset_resolution(monkeypatch, tmp_path):
    seen = {}

    def fake(calib, grid, **kw):
        seen.update(kw)
        raise cli.ArgumentError("stop here")

    monkeypatch.setattr(cli, "generate_bundle", fake)
    assert run("gen", "--out", tmp_path) == cli.EXIT_ARGS
    assert seen["experiments"] == 20 and seen["holdout"] == 3


@pytest.mark.parametrize("argv", [
    ["gen", "--experiments", "2", "--holdout", "2"],
    ["gen", "--no-such-flag"],
    ["train", "--data", ".", "--model", "mlp_baseline", "--epochs", "0"],
    ["frobnicate"],
    ["ablate", "--data", ".", "--seeds", "a,b"],
])
def test_argument_errors(argv, tmp_path):
    assert run(*argv, "--out-dir", tmp_path) == cli.EXIT_ARGS


def test_unknown_model(data_dir, tmp_path):
    assert run("train", "--data", data_dir, "--model", "resnet", "--out", tmp_path) == \
        cli.EXIT_ARGS


def test_missing_checkpoint(data_dir, tmp_path):
    assert run("eval", "--data", data_dir, "--checkpoint", tmp_path / "nope.bin",
               "--out-dir", tmp_path) == cli.EXIT_FILE


def test_corrupt_dataset(data_dir, tmp_path):
    bad = tmp_path / "bad"
    bad.mkdir()
    for name in ("manifest.json", "calibration.json"):
        (bad / name).write_bytes((data_dir / name).read_bytes())
    raw = bytearray((data_dir / "dataset.bin").read_bytes())
    raw[100] ^= 0xFF
    (bad / "dataset.bin").write_bytes(bytes(raw))
    assert run("eval", "--data", bad, "--physical", "--out-dir", tmp_path) == cli.EXIT_FILE


def test_numeric_exit_code():
    from scatterpos.errors import FormatVersionError, NumericalError, SingularityError
    assert cli.exit_code(FormatVersionError("v2")) == cli.EXIT_FILE
    assert cli.exit_code(FloatingPointError("overflow")) == cli.EXIT_NUMERIC
    assert cli.exit_code(NumericalError("nan")) == cli.EXIT_NUMERIC
    assert cli.exit_code(SingularityError("pole", 3)) == cli.EXIT_NUMERIC


def test_train_smoke(checkpoint):
    out = checkpoint.parent
    hist = read_csv(out / "history.csv")
    assert [int(r["epoch"]) for r in hist] == [0, 1]
    doc = json.loads((out / "train.config.json").read_text())
    assert doc["args"]["train_config"]["epochs"] == 2
    model, header = load_checkpoint(checkpoint)
    assert header["spec"]["name"] == "mlp_baseline"


def test_cnn_default_batch_size(data_dir, tmp_path):
    assert run("train", "--data", data_dir, "--model", "cnn_fe_cvnn", "--epochs", 1,
               "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "train.config.json").read_text())
    cfg = cli.TrainConfig.from_dict(doc["args"]["train_config"])
    assert cfg.resolved_batch_size("cnn") == 64
    assert cfg.resolved_batch_size("mlp") == 128


def test_eval_checkpoint_csv(data_dir, checkpoint, tmp_path):
    out = tmp_path / "m.csv"
    assert run("eval", "--data", data_dir, "--checkpoint", checkpoint, "--out", out) == 0
    rows = read_csv(out)
    assert list(rows[0]) == list(cli.CSV_FIELDS)
    assert rows[0]["model"] == "mlp_baseline" and rows[0]["partition"] == "test_new"
    assert (tmp_path / "eval.config.json").is_file()


def test_physical_eval_noiseless(tmp_path):
    data = tmp_path / "clean"
    assert run("gen", *TINY, "--noise", 0, "--drift", 0, "--temperature", 25,
               "--out", data) == 0
    assert run("eval", "--data", data, "--physical", "--out-dir", tmp_path) == 0
    (row,) = read_csv(tmp_path / "metrics.csv")
    assert float(row["rmse_mm"]) < 1e-3


def test_converged_toy_train_partition(tmp_path):
    data, out = tmp_path / "d", tmp_path / "t"
    assert run("gen", "--preset", "custom", "--experiments", 3, "--holdout", 1,
               "--samples", 200, "--noise", 0, "--drift", 0, "--temperature", 25,
               "--out", data) == 0
    assert run("train", "--data", data, "--model", "mlp_baseline", "--epochs", 150,
               "--lr", 3e-3, "--patience", 150, "--out", out) == 0
    assert run("eval", "--data", data, "--checkpoint", out / "checkpoint.bin",
               "--partition", "train", "--out-dir", out) == 0
    (row,) = read_csv(out / "metrics.csv")
    assert float(row["re_percent"]) < 2.0


def test_gen_train_eval_deterministic(tmp_path):
    def pipeline(d):
        assert run("gen", *TINY, "--seed", 9, "--out", d / "data") == 0
        assert run("train", "--data", d / "data", "--model", "mlp_bn", "--epochs", 2,
                   "--seed", 9, "--out", d / "train") == 0
        assert run("eval", "--data", d / "data", "--checkpoint", d / "train" / "checkpoint.bin",
                   "--out-dir", d / "train") == 0
        return [(d / p).read_bytes() for p in ("data/dataset.bin", "data/manifest.json",
                                               "train/checkpoint.bin", "train/history.csv",
                                               "train/metrics.csv")]

    assert pipeline(tmp_path / "a") == pipeline(tmp_path / "b")


def test_replay_reproduces(tmp_path, data_dir):
    first = tmp_path / "first"
    assert run("train", "--data", data_dir, "--model", "mlp_fe", "--epochs", 2,
               "--batch-size", 32, "--seed", 2, "--out", first) == 0
    again = tmp_path / "again"
    assert run("replay", first / "train.config.json", "--out-dir", again) == 0
    assert (again / "checkpoint.bin").read_bytes() == (first / "checkpoint.bin").read_bytes()
    assert (again / "history.csv").read_bytes() == (first / "history.csv").read_bytes()

    gen2 = tmp_path / "gen2"
    assert run("replay", data_dir / "gen.config.json", "--out-dir", gen2) == 0
    assert (gen2 / "dataset.bin").read_bytes() == (data_dir / "dataset.bin").read_bytes()


def test_replay_rejects_unknown_command(tmp_path):
    cfg = tmp_path / "x.config.json"
    cfg.write_text(json.dumps({"command": "rm", "args": {}}))
    assert run("replay", cfg, "--out-dir", tmp_path) == cli.EXIT_ARGS


def test_seed_env_overrides(monkeypatch, tmp_path):
    assert run("gen", *TINY, "--seed", 5, "--out", tmp_path / "a") == 0
    monkeypatch.setenv(cli.SEED_ENV, "5")
    assert run("gen", *TINY, "--seed", 1, "--out", tmp_path / "b") == 0
    doc = json.loads((tmp_path / "b" / "gen.config.json").read_text())
    assert doc["args"]["seed"] == 5
    assert (tmp_path / "a" / "dataset.bin").read_bytes() == \
        (tmp_path / "b" / "dataset.bin").read_bytes()
    monkeypatch.setenv(cli.SEED_ENV, "five")
    assert run("gen", *TINY, "--out", tmp_path / "c") == cli.EXIT_ARGS


def test_global_flags_before_subcommand(tmp_path):
    assert cli.main(["--quiet", "--seed", "3", "--out-dir", str(tmp_path), "gen", *TINY]) == 0
    doc = json.loads((tmp_path / "gen.config.json").read_text())
    assert doc["args"]["seed"] == 3


def test_ablate_full_grid(data_dir, tmp_path):
    assert run("ablate", "--data", data_dir, "--seeds", "0", "--epochs", 1, "--out", tmp_path) == 0
    rows = read_csv(tmp_path / "ablation.csv")
    assert sum(r["seed"] == "median" for r in rows) == 10
    assert sum(r["model"] == "physical_baseline" for r in rows) == 1
    lines = (tmp_path / "ordering.txt").read_text().splitlines()
    assert [l[:3] for l in lines] == ["(a)", "(b)", "(c)", "(d)", "(e)"]
    assert all(("PASS" in l) != ("FAIL" in l) for l in lines)


def test_ablate_activation_grid(data_dir, tmp_path):
    assert run("ablate", "--data", data_dir, "--grid", "activations", "--seeds", "0",
               "--epochs", 1, "--out", tmp_path) == 0
    rows = read_csv(tmp_path / "ablation.csv")
    med = [r for r in rows if r["seed"] == "median"]
    assert sorted(r["activation"] for r in med) == ["leaky_relu", "relu", "selu", "sigmoid"]
    assert not (tmp_path / "ordering.txt").exists()


def test_bench(checkpoint, data_dir, tmp_path):
    def once(sub):
        assert run("bench", "--checkpoint", checkpoint, "--data", data_dir,
                   "--out-dir", tmp_path / sub) == 0
        with open(tmp_path / sub / "bench.csv", newline="") as fh:
            header = next(csv.reader(fh))
        (row,) = read_csv(tmp_path / sub / "bench.csv")
        return header, row

    header, a = once("a")
    assert tuple(header) == cli.BENCH_FIELDS
    assert int(a["params"]) == build_model(reference_spec("mlp_baseline"), 0).param_count()
    assert int(a["repeat"]) == 1000
    medians = [float(a["latency_median_us"])]
    for i in range(2):
        medians.append(float(once(f"r{i}")[1]["latency_median_us"]))
    ref = np.median(medians)
    assert all(abs(m - ref) <= 0.2 * ref for m in medians), medians
