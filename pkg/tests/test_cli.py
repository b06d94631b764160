"""Tests for the command-line front end."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
import voluptuous as vol

from glmm_rvb.cli import RunConfig, build_parser, main, run
from glmm_rvb.const import EXIT_CONFIG, EXIT_DATA, EXIT_OK
from glmm_rvb.exceptions import ConfigError
from glmm_rvb.results import read_state, read_subjects, read_summary, read_trace

FAST = ["--max-iter", "40", "--draws", "20"]


def _write_counts(path: Path, *, bad_row: bool = False) -> Path:
    rng = np.random.default_rng(0)
    subjects = np.repeat(np.arange(1, 7), 4)
    x = np.tile([-0.3, -0.1, 0.1, 0.3], 6)
    y = rng.poisson(np.exp(0.5 + x)).astype(int)
    if bad_row:
        y[5] = -1
    pd.DataFrame({"patient": subjects, "count": y, "x": x}).to_csv(path, index=False)
    return path


def _fit_args(csv: Path, out: Path, *extra: str) -> list[str]:
    return [
        "--data", str(csv), "--family", "poisson", "--response", "count", "--group-col", "patient",
        "--fixed", "x", "--out", str(out), *FAST, *extra,
    ]  # fmt: skip


@pytest.mark.parametrize(
    ("raw", "message"),
    [
        ({"out": "o"}, "--data or --preset"),
        ({"out": "o", "data": "d.csv"}, "--family"),
        ({"out": "o", "data": "d.csv", "family": "gaussian_unit"}, "allow-internal"),
        ({"out": "o", "preset": "seeds", "prior": "file"}, "--prior-file"),
        ({"out": "o", "preset": "seeds", "shards": 2}, "normal prior"),
    ],
)
def test_run_config_errors(raw: dict[str, object], message: str) -> None:
    with pytest.raises(ConfigError, match=message):
        RunConfig.from_mapping(raw)


def test_run_config_rejects_two_sources() -> None:
    with pytest.raises(vol.Invalid):
        RunConfig.from_mapping({"out": "o", "preset": "seeds", "data": "d.csv", "family": "binomial"})


def test_run_config_parses_columns() -> None:
    config = RunConfig.from_mapping({"out": "o", "data": "d.csv", "family": "poisson", "fixed": "a, b", "seed": "3"})
    assert config.columns.fixed == ("a", "b")
    assert config.seed == 3
    assert config.fit_config().seed == 3


def test_parser_defaults_to_fit() -> None:
    args = build_parser().parse_args(["fit", "--preset", "seeds", "--out", "o"])
    assert args.command == "fit"
    assert args.preset == "seeds"
    assert args.log_level == "INFO"


def test_fit_writes_result_files(tmp_path: Path) -> None:
    out = tmp_path / "out"
    assert main(_fit_args(_write_counts(tmp_path / "data.csv"), out)) == EXIT_OK

    fields, summary = read_summary(out / "summary.txt")
    assert list(summary["parameter"]) == ["intercept", "x", "omega", "sigma"]
    assert fields["family"] == "poisson"
    assert fields["iterations"] == "40"
    assert read_state(out / "state.txt").state.n == 6
    assert list(read_subjects(out / "subjects.csv")["subject"]) == [str(k) for k in range(1, 7)]
    assert read_trace(out / "trace.csv").size == 0
    diagnostics = json.loads((out / "diagnostics.json").read_text(encoding="utf-8"))
    assert diagnostics["dimensions"]["n"] == 6
    assert "total=" in (out / "timing.txt").read_text(encoding="utf-8")


def test_fit_is_reproducible(tmp_path: Path) -> None:
    csv = _write_counts(tmp_path / "data.csv")
    assert main(_fit_args(csv, tmp_path / "a", "--seed", "5")) == EXIT_OK
    assert main(_fit_args(csv, tmp_path / "b", "--seed", "5")) == EXIT_OK
    for name in ("summary.txt", "trace.csv", "state.txt", "subjects.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_invalid_response_exit_code(tmp_path: Path, caplog: pytest.LogCaptureFixture) -> None:
    csv = _write_counts(tmp_path / "data.csv", bad_row=True)
    assert main(_fit_args(csv, tmp_path / "out")) == EXIT_DATA
    assert "line 7" in caplog.text


def test_missing_file_exit_code(tmp_path: Path) -> None:
    assert main(_fit_args(tmp_path / "absent.csv", tmp_path / "out")) == EXIT_DATA


def test_too_many_shards_exit_code(tmp_path: Path) -> None:
    csv = _write_counts(tmp_path / "data.csv")
    assert main(_fit_args(csv, tmp_path / "out", "--prior", "normal-omega", "--shards", "9")) == EXIT_CONFIG


def test_internal_family_needs_flag(tmp_path: Path) -> None:
    raw = {"out": str(tmp_path), "data": str(tmp_path / "d.csv"), "family": "gaussian_unit"}
    assert run(raw) == EXIT_CONFIG


def test_wrong_prior_dimension(tmp_path: Path) -> None:
    prior = tmp_path / "prior.json"
    prior.write_text(json.dumps({"kind": "normal", "mean": [0, 0], "sd": [1, 1]}), encoding="utf-8")
    csv = _write_counts(tmp_path / "data.csv")
    assert main(_fit_args(csv, tmp_path / "out", "--prior", "file", "--prior-file", str(prior))) == EXIT_CONFIG


def test_wishart_prior_file(tmp_path: Path) -> None:
    prior = tmp_path / "prior.json"
    prior.write_text(json.dumps({"kind": "wishart", "nu": 1, "scale": [[0.5]]}), encoding="utf-8")
    csv = _write_counts(tmp_path / "data.csv")
    assert main(_fit_args(csv, tmp_path / "out", "--prior", "file", "--prior-file", str(prior))) == EXIT_OK


def test_simulate_then_fit(tmp_path: Path) -> None:
    sim = tmp_path / "sim"
    assert main(["simulate", "--scenario", "binomial2", "--subjects", "8", "--seed", "2", "--out", str(sim)]) == 0
    truth = json.loads((sim / "truth.json").read_text(encoding="utf-8"))
    assert truth["beta"] == {"intercept": 0.0, "x": 1.0}
    assert len(truth["b"]) == 8
    args = [
        "--data", str(sim / "data.csv"), "--family", "binomial", "--trials-col", "m", "--fixed", "x",
        "--method", "a1", "--out", str(tmp_path / "fit"), *FAST,
    ]  # fmt: skip
    assert main(args) == EXIT_OK
    fields, _ = read_summary(tmp_path / "fit" / "summary.txt")
    assert fields["method"] == "a1"


def test_sharded_fit_combine_and_compare(tmp_path: Path) -> None:
    csv = _write_counts(tmp_path / "data.csv")
    out = tmp_path / "sharded"
    assert main(_fit_args(csv, out, "--prior", "normal-omega", "--shards", "2")) == EXIT_OK
    assert (out / "shard0_trace.csv").exists()
    assert read_state(out / "shard1_state.txt").fields["shard"] == "1"
    fields, summary = read_summary(out / "summary.txt")
    assert fields["shards"] == "2"
    assert list(summary["parameter"]) == ["intercept", "x", "omega", "sigma"]
    assert sorted(read_subjects(out / "subjects.csv")["subject"], key=int) == [str(k) for k in range(1, 7)]

    combined = tmp_path / "combined"
    states = [str(out / "shard0_state.txt"), str(out / "shard1_state.txt")]
    assert main(["combine", *states, "--draws", "50", "--out", str(combined)]) == EXIT_OK
    fields, recombined = read_summary(combined / "summary.txt")
    assert fields["kind"] == "combined"
    np.testing.assert_allclose(recombined["mean"].to_numpy()[:3], summary["mean"].to_numpy()[:3], rtol=1e-8)

    report = tmp_path / "compare.csv"
    assert main(["compare", str(out / "subjects.csv"), str(out / "subjects.csv"), "--out", str(report)]) == EXIT_OK
    frame = pd.read_csv(report)
    np.testing.assert_allclose(frame["r1"], 0.0)
    np.testing.assert_allclose(frame["r2"], 1.0)


def test_unknown_scenario_is_rejected() -> None:
    with pytest.raises(SystemExit):
        main(["simulate", "--scenario", "gamma", "--out", "x"])
