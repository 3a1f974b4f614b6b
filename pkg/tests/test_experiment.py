import csv
import json

import numpy as np
import pytest

from rbsde.bsde import feedback_intensity_from_file
from rbsde.errors import ConfigError
from rbsde.experiment import (
    ExperimentConfig,
    exact,
    experiment_config_from_dict,
    measured,
    run_experiment,
    unwrap,
)


def quick_config(out_dir, **overrides) -> ExperimentConfig:
    raw = {
        "problem": "constant-reward",
        "seed": 3,
        "schedule": [[8.0, 2.0, 250], [8.0, 4.0, 250]],
        "dt": 0.05,
        "output_dir": str(out_dir),
    }
    raw.update(overrides)
    return experiment_config_from_dict(raw)


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("constant-run")
    cfg = quick_config(out)
    return run_experiment(cfg), out


def test_config_rejects_missing_seed():
    with pytest.raises(ConfigError, match="seed"):
        experiment_config_from_dict({"problem": "constant-reward"})


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown config keys"):
        experiment_config_from_dict({"problem": "constant-reward",
                                     "seed": 1, "speling": 2})


def test_config_rejects_unknown_stage():
    with pytest.raises(ConfigError, match="pipeline"):
        experiment_config_from_dict({"problem": "constant-reward",
                                     "seed": 1, "pipeline": ["solve-pde"]})


def test_config_rejects_bad_schedule_row():
    with pytest.raises(ConfigError):
        experiment_config_from_dict({"problem": "constant-reward",
                                     "seed": 1, "schedule": [[5.0, 2.0]]})


def test_config_rejects_unknown_zoo_problem():
    with pytest.raises(ConfigError, match="unknown zoo problem"):
        experiment_config_from_dict({"problem": "no-such", "seed": 1})


def test_config_defaults():
    cfg = experiment_config_from_dict({"problem": "bangbang-1d", "seed": 7})
    assert cfg.dt == 0.00625
    assert cfg.pipeline[0] == "validate"
    assert cfg.schedule[0][0] == 10.0
    assert cfg.threads == 1


def test_wrapper_helpers():
    assert unwrap(exact(2)) == 2
    assert unwrap(measured(1.5, 0.1)) == 1.5
    assert exact(float("inf"))["value"] is None
    assert measured(np.float64(1.0), np.float64(0.0))["stderr"] == 0.0


def test_full_pipeline_passes(full_run):
    result, out = full_run
    assert result.exit_code == 0
    assert [r.status for r in result.records] == ["pass"] * 6


def test_full_pipeline_artifacts(full_run):
    _, out = full_run
    for name in ("report.json", "summary.csv", "bsde_stages.csv",
                 "feedback_table.npz", "hjb_grid.csv", "moments.csv",
                 "paths_sample.csv"):
        assert (out / name).exists(), name


def test_bsde_stage_csv_columns(full_run):
    _, out = full_run
    with open(out / "bsde_stages.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["T", "n", "Y0", "stderr", "t_tail", "n_gap",
                       "constraint_violation", "K_T_mean"]
    assert rows[1][5] == ""
    assert float(rows[2][5]) >= 0.0
    assert len(rows) == 3


def _walk_numbers(node, path=""):
    """Yield paths of bare numbers outside {value, stderr|tag} wrappers."""
    if isinstance(node, dict):
        if "value" in node and ("stderr" in node or "tag" in node):
            return
        for k, v in node.items():
            yield from _walk_numbers(v, f"{path}.{k}")
    elif isinstance(node, list):
        for i, v in enumerate(node):
            yield from _walk_numbers(v, f"{path}[{i}]")
    elif isinstance(node, bool) or node is None or isinstance(node, str):
        return
    elif isinstance(node, (int, float)):
        yield path


def test_every_report_number_is_wrapped(full_run):
    _, out = full_run
    with open(out / "report.json") as fh:
        report = json.load(fh)
    bare = list(_walk_numbers(report))
    assert bare == [], bare


def test_value_near_closed_form(full_run):
    result, _ = full_run
    detail = result.record("solve-bsde").detail
    y0 = unwrap(detail["value"])
    scheme_exact = 2.0 * (1.0 - (1.0 - 0.5 * 0.05) ** 160)
    assert y0 == pytest.approx(scheme_exact, abs=1e-10)
    assert detail["monotone_in_n"] is True


def test_compare_rows_within_tolerance(full_run):
    result, _ = full_run
    rows = result.record("compare").detail["rows"]
    assert len(rows) == 2
    for row in rows:
        assert row["within_tolerance"], row
        assert row["covered_by_certificate"], row


def test_invariant_verdicts(full_run):
    result, _ = full_run
    detail = result.record("invariants").detail
    names = [v["name"] for v in detail["verdicts"]]
    for expected in ("value-bound", "penalty-nonnegative",
                     "density-martingale", "monotone-in-n", "dual-sandwich",
                     "tail-contraction"):
        assert expected in names
    assert detail["failed"] == []


def test_feedback_table_is_consumable(full_run):
    _, out = full_run
    nu = feedback_intensity_from_file(out / "feedback_table.npz")
    rates = nu.rate(0.0, _point_feats(), np.zeros(3), 0.0)
    assert np.all(rates > 0.0)


def _point_feats():
    from rbsde.zoo import zoo_get

    spec = zoo_get("constant-reward").build()
    return spec.point_features(np.zeros((3, 1)))


def test_summary_csv_is_bit_exact(tmp_path):
    out = tmp_path / "repeat"
    cfg = quick_config(out, pipeline=["validate", "simulate", "solve-bsde"],
                       schedule=[[4.0, 2.0, 200]])
    run_experiment(cfg)
    first_summary = (out / "summary.csv").read_bytes()
    first_report = (out / "report.json").read_bytes()
    run_experiment(cfg)
    assert (out / "summary.csv").read_bytes() == first_summary
    assert (out / "report.json").read_bytes() == first_report


def test_short_horizon_fails_compare(tmp_path):
    out = tmp_path / "short"
    cfg = quick_config(out, schedule=[[3.0, 2.0, 200]],
                       pipeline=["validate", "solve-bsde", "compare"])
    result = run_experiment(cfg)
    assert result.exit_code == 2
    assert result.record("compare").status == "fail"
    rows = result.record("compare").detail["rows"]
    assert all(row["covered_by_certificate"] for row in rows)


def test_growth_gate_fails_validation(tmp_path):
    problem = {
        "coefficients": {"drift": "-x + a", "diffusion": "1 + 0.5*x",
                         "running_reward": "-x*x"},
        "regime": "A'", "M": 1.0, "r": 2.0, "L": 3.0,
        "dim_state": 1, "dim_noise": 1, "beta": 0.05, "x0": [0.0],
        "control_space": {"kind": "finite", "actions": [-1.0, 1.0]},
    }
    cfg = experiment_config_from_dict({
        "problem": problem, "seed": 2, "output_dir": str(tmp_path / "bad")})
    result = run_experiment(cfg)
    assert result.exit_code == 3
    assert result.record("validate").status == "config-error"
    assert all(r.status == "skipped" for r in result.records[1:])


def test_hjb_on_path_dependent_problem_is_config_error(tmp_path):
    cfg = experiment_config_from_dict({
        "problem": "memory-drift", "seed": 4,
        "pipeline": ["validate", "solve-hjb"],
        "output_dir": str(tmp_path / "md")})
    result = run_experiment(cfg)
    assert result.exit_code == 3
    assert result.record("solve-hjb").status == "config-error"


def test_pipeline_missing_dependency_is_config_error(tmp_path):
    cfg = experiment_config_from_dict({
        "problem": "constant-reward", "seed": 5,
        "pipeline": ["compare"],
        "output_dir": str(tmp_path / "dep")})
    result = run_experiment(cfg)
    assert result.exit_code == 3
    assert result.record("compare").status == "config-error"
