# Copyright kinedecode contributors
# Licensed under the Revised BSD License, see LICENSE for details.
# SPDX-License-Identifier: BSD-3-Clause

import json

import numpy as np
import pytest

from kinedecode import cli, pipeline
from kinedecode.config import RunConfig
from kinedecode.store import load_arrays
from kinedecode.tables import read_matrix, read_table

TINY_RUN = {
    "window": {"window_samples": 50, "step_samples": 50, "delay_ms": 100},
    "model": {"large_kernel": 9, "large_features": 2, "branch_kernels": [3, 5],
              "branch_features": 2, "pool_k": 5, "pool_s": 5, "embed_dim": 16, "heads": 2,
              "head_dim": 8, "dropout": 0.0},
    "train": {"epochs": 1, "batch_size": 64, "n_val": 1, "n_test": 1},
    "copilot": {"critic": {"epochs": 5}},
    "kinematics": {"out_rate_hz": 10.0},
}


@pytest.fixture
def run_config(tmp_path):
    values = json.loads(json.dumps(TINY_RUN))
    values["paths"] = {"data_dir": str(tmp_path / "data"), "output_dir": str(tmp_path / "out")}
    path = tmp_path / "run.json"
    path.write_text(json.dumps(values))
    return path


def test_parser_lists_commands():
    parser = cli.get_parser()
    args = parser.parse_args(["generate", "--trials", "3"])
    assert (args.command, args.trials, args.seed, args.subjects) == ("generate", 3, None, 1)
    assert parser.parse_args(["export-arm"]).trial is None
    with pytest.raises(SystemExit):
        parser.parse_args(["fly"])


def test_antialias_flag():
    parser = cli.get_parser()
    args, extra = parser.parse_known_args(["preprocess", "--antialias", "--train.epochs", "2"])
    assert args.antialias
    assert cli.collect_overrides(args, extra) == [("train.epochs", 2),
                                                  ("preprocess.antialias", True)]
    args, extra = parser.parse_known_args(["preprocess"])
    assert cli.collect_overrides(args, extra) == []
    config = RunConfig().replace(cli.collect_overrides(*parser.parse_known_args(
        ["preprocess", "--antialias"])))
    assert config.preprocess["antialias"] is True
    assert RunConfig().preprocess["antialias"] is False


def test_invalid_override_exits_one(run_config):
    assert cli.main(["--config", str(run_config), "train", "--train.nope", "1"]) == 1
    assert cli.main(["--config", str(run_config), "train", "--train.epochs"]) == 1
    assert cli.main(["--config", str(run_config), "train", "--window.window_samples", "20"]) == 1


def test_missing_data_exits_one(run_config):
    assert cli.main(["--config", str(run_config), "preprocess"]) == 1


@pytest.mark.parametrize("command", ["train", "decode", "evaluate", "filter", "export-arm",
                                     "sweep"])
def test_missing_artifact_exits_two(run_config, command):
    assert cli.main(["--config", str(run_config), command]) == 2


def test_missing_artifact_names_producer(tmp_path):
    config = RunConfig({"paths": {"output_dir": str(tmp_path)}})
    with pytest.raises(pipeline.StageError, match="kinedecode decode") as e:
        pipeline.run_evaluate(config)
    assert e.value.artifact == tmp_path / pipeline.DECODED


def test_generate(run_config, tmp_path, capsys):
    assert cli.main(["--config", str(run_config), "generate", "--trials", "3",
                     "--subjects", "2"]) == 0
    assert "wrote 3 synthetic trials" in capsys.readouterr().out
    assert sorted(p.name for p in (tmp_path / "data").iterdir()) == ["trial_0", "trial_1",
                                                                      "trial_2"]


def test_jerk_by_trial_restarts_per_trial():
    t = np.arange(8, dtype=np.float64)
    pred = np.column_stack([t ** 3] * 6)
    ids = np.array([0] * 4 + [1] * 4)
    jerk = pipeline.jerk_by_trial(pred, ids)
    single = pipeline.jerk_by_trial(pred[:4], ids[:4])
    np.testing.assert_array_equal(jerk[:4], single)
    assert jerk.shape == (8,)


def _run_all(config_path, out):
    for command in (["generate", "--trials", "4", "--subjects", "2"], ["preprocess"], ["train"],
                    ["decode"], ["evaluate"], ["filter"], ["export-arm"]):
        rc = cli.main(["--config", str(config_path)] + command
                      + ["--paths.output_dir", str(out)])
        assert rc == 0, command


@pytest.mark.slow
def test_end_to_end(run_config, tmp_path, capsys):
    out = tmp_path / "out"
    _run_all(run_config, out)
    printed = capsys.readouterr().out
    assert "evaluate: overall PCC" in printed
    assert "filter: retained" in printed

    for name in (pipeline.PREPROCESSED, pipeline.DECODER, pipeline.CLASSIFIER, pipeline.CRITIC,
                 pipeline.DECODED, "history.csv", "classifier_history.csv", "split.csv",
                 "predictions.csv", "decode_summary.csv", "metrics.csv", "retention.csv",
                 "copilot_sweep.csv"):
        assert (out / name).is_file(), name

    header, rows = read_table(out / "split.csv")
    assert header == ["trial", "part", "subject"]
    assert sorted(r[1] for r in rows) == ["test", "train", "train", "val"]

    header, rows = read_table(out / "metrics.csv")
    assert header == ["quantity", "pcc", "rmse"]
    assert len(rows) == 11
    assert all(-1.0 <= float(r[1]) <= 1.0 for r in rows)

    decoded = load_arrays(out / pipeline.DECODED)
    np.testing.assert_allclose(decoded["decoded.posterior"].sum(axis=1), 1.0, atol=1e-9)
    assert np.all(np.diff(decoded["decoded.target_index"]) > 0)

    header, rows = read_table(out / "retention.csv")
    assert header == ["state", "points", "retained", "ratio"]
    assert rows[-1][0] == "ALL"
    assert int(rows[-1][1]) == len(decoded["decoded.pred"])

    _, sweep = read_table(out / "copilot_sweep.csv")
    assert len(sweep) == 7

    trial = int(decoded["decoded.trial_ids"].min())
    header, joints = read_matrix(out / ("joints_trial_%d.csv" % trial))
    assert header[0] == "t" and len(header) == 8
    assert np.all(np.diff(joints[:, 0]) > 0)


@pytest.mark.slow
def test_pipeline_is_reproducible(run_config, tmp_path):
    _run_all(run_config, tmp_path / "a")
    _run_all(run_config, tmp_path / "b")
    for name in (pipeline.DECODER, pipeline.DECODED, pipeline.CRITIC):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.slow
def test_sweep(run_config, tmp_path, capsys):
    out = tmp_path / "out"
    for command in (["generate", "--trials", "4"], ["preprocess"], ["sweep"]):
        assert cli.main(["--config", str(run_config)] + command) == 0
    assert "sweep: 14 settings" in capsys.readouterr().out
    header, rows = read_table(out / "sweep.csv")
    assert header == ["grid", "window_samples", "delay_ms", "pcc", "rmse", "midpoint_pcc",
                      "train_windows"]
    assert [r[0] for r in rows] == ["window"] * 7 + ["delay"] * 7
    assert [int(r[1]) for r in rows[:7]] == [50, 100, 200, 250, 500, 750, 1000]
    assert [int(r[2]) for r in rows[7:]] == [100, 200, 300, 400, 500, 600, 700]
