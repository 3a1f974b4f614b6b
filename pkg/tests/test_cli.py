import json

from rbsde.cli import main


def write_json(path, payload):
    path.write_text(json.dumps(payload))
    return str(path)


OU_PROBLEM = {
    "dim_state": 1,
    "dim_noise": 1,
    "beta": 1.0,
    "x0": [0.5],
    "regime": "A",
    "M": 6.0,
    "L": 2.0,
    "control_space": {"kind": "finite", "actions": [-1.0, 1.0]},
    "coefficients": {
        "drift": "a",
        "diffusion": "1.0",
        "running_reward": "-np.minimum(np.abs(x), 6.0)",
    },
}


def test_zoo_list_prints_catalogue(capsys):
    assert main(["zoo", "list"]) == 0
    out = capsys.readouterr().out
    for name in ("constant-reward", "singleton-ou", "bangbang-1d",
                 "controlled-vol-1d", "memory-drift"):
        assert name in out
    assert "closed-form" in out and "hjb-oracle" in out


def test_validate_zoo_problem_writes_report(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["validate", "constant-reward", "--out-dir", str(out)]) == 0
    assert (out / "report.json").exists()
    assert (out / "summary.csv").exists()
    assert "validate" in capsys.readouterr().out


def test_validate_problem_file(tmp_path):
    path = write_json(tmp_path / "prob.json", OU_PROBLEM)
    out = tmp_path / "out"
    assert main(["validate", path, "--out-dir", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["problem"] == "inline"


def test_run_honors_flag_overrides(tmp_path):
    cfg = {"problem": "constant-reward", "seed": 3,
           "schedule": [[8.0, 2.0, 250], [8.0, 4.0, 250]], "dt": 0.05,
           "pipeline": ["validate", "solve-bsde"],
           "output_dir": str(tmp_path / "a")}
    path = write_json(tmp_path / "cfg.json", cfg)
    override = tmp_path / "b"
    assert main(["run", path, "--out-dir", str(override), "--seed", "9"]) == 0
    assert not (tmp_path / "a").exists()
    report = json.loads((override / "report.json").read_text())
    assert report["config"]["seed"]["value"] == 9
    assert report["config"]["output_dir"] == str(override)


def test_run_missing_config_exits_3(tmp_path, capsys):
    assert main(["run", str(tmp_path / "none.json")]) == 3
    assert "config error" in capsys.readouterr().err


def test_unknown_zoo_name_exits_3(tmp_path, capsys):
    code = main(["validate", "no-such-problem",
                 "--out-dir", str(tmp_path / "out")])
    assert code == 3
    assert "no-such-problem" in capsys.readouterr().err


def test_malformed_problem_file_exits_3(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code = main(["validate", str(bad), "--out-dir", str(tmp_path / "out")])
    assert code == 3
    assert "config error" in capsys.readouterr().err


def test_failed_comparison_exits_2(tmp_path):
    # horizon far too short for the 5% tolerance: truncation alone is 22%
    cfg = {"problem": "constant-reward", "seed": 3, "dt": 0.05,
           "schedule": [[3.0, 2.0, 200]],
           "pipeline": ["validate", "solve-bsde", "solve-hjb", "compare"],
           "output_dir": str(tmp_path / "out")}
    path = write_json(tmp_path / "cfg.json", cfg)
    assert main(["run", path]) == 2
