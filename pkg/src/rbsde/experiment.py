"""Config-driven pipelines: staged runs, invariant verdicts, report files.

A run reads one JSON config, executes the requested stages in order, and
leaves three kinds of artifact in the output directory: ``report.json``
with every number wrapped as ``{value, stderr}`` or ``{value, tag:
"exact"}``, ``summary.csv`` with one row per stage, and per-stage CSV
tables.  Rerunning the same config with the same seed reproduces
``summary.csv`` bit-exactly in single-threaded mode.
"""

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .bsde import (
    DEFAULT_SCHEDULE,
    dual_value_check,
    optimal_intensity,
    solve_constrained_limit,
    solve_penalized_bsde,
)
from .errors import AssumptionViolationError, ConfigError
from .hjb import compare_value, grid_to_csv, hjb_residual, solve_hjb_fd
from .problem import ProblemSpec, problem_from_dict, validate_problem
from .randomization import doleans_weights, random_intensity_controls
from .simulate import (
    TimeGrid,
    check_moment_bound,
    ensemble_to_csv,
    simulate_randomized_pair,
)
from .zoo import ZooProblem, zoo_get

STAGES = ("validate", "simulate", "solve-bsde", "solve-hjb", "compare",
          "invariants")

_CONFIG_KEYS = {
    "problem", "pipeline", "schedule", "dt", "seed", "lambda_total",
    "epsilon", "hjb_box", "hjb_dx", "compare_tolerance", "moment_p",
    "nu_samples", "tolerance", "output_dir", "threads", "full_invariants",
}


@dataclass(frozen=True)
class ExperimentConfig:
    problem: Union[str, dict]
    seed: int
    pipeline: Tuple[str, ...] = STAGES
    schedule: Tuple[Tuple[float, float, int], ...] = DEFAULT_SCHEDULE
    dt: float = 0.00625
    lambda_total: float = 1.0
    epsilon: float = 0.05
    hjb_box: Optional[Tuple] = None
    hjb_dx: Optional[float] = None
    compare_tolerance: float = 0.05
    moment_p: float = 2.0
    nu_samples: int = 5
    tolerance: float = 0.1
    output_dir: str = "rbsde-out"
    threads: int = 1
    full_invariants: bool = False

    def replace(self, **kw) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(kw)
        return experiment_config_from_dict(d)

    def to_dict(self) -> dict:
        return {
            "problem": self.problem,
            "seed": self.seed,
            "pipeline": list(self.pipeline),
            "schedule": [list(row) for row in self.schedule],
            "dt": self.dt,
            "lambda_total": self.lambda_total,
            "epsilon": self.epsilon,
            "hjb_box": None if self.hjb_box is None else list(self.hjb_box),
            "hjb_dx": self.hjb_dx,
            "compare_tolerance": self.compare_tolerance,
            "moment_p": self.moment_p,
            "nu_samples": self.nu_samples,
            "tolerance": self.tolerance,
            "output_dir": self.output_dir,
            "threads": self.threads,
            "full_invariants": self.full_invariants,
        }

    def build_problem(self) -> Tuple[ProblemSpec, Optional[ZooProblem]]:
        if isinstance(self.problem, str):
            entry = zoo_get(self.problem)
            return entry.build(), entry
        return problem_from_dict(self.problem), None


def experiment_config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("experiment config must be a JSON object")
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "problem" not in raw:
        raise ConfigError("config needs a 'problem' (zoo name or inline)")
    if "seed" not in raw:
        raise ConfigError("config needs an explicit integer 'seed'")
    seed = raw["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("'seed' must be an integer")

    pipeline = tuple(raw.get("pipeline", STAGES))
    bad = [s for s in pipeline if s not in STAGES]
    if bad:
        raise ConfigError(f"unknown pipeline stages {bad}; "
                          f"allowed: {list(STAGES)}")

    schedule = raw.get("schedule", DEFAULT_SCHEDULE)
    rows = []
    for row in schedule:
        if len(row) != 3:
            raise ConfigError("schedule rows must be (T, n, n_paths)")
        t_end, n_pen, n_paths = float(row[0]), float(row[1]), int(row[2])
        if t_end <= 0 or n_pen <= 0 or n_paths < 2:
            raise ConfigError(f"bad schedule row {row}")
        rows.append((t_end, n_pen, n_paths))

    problem = raw["problem"]
    if isinstance(problem, str):
        zoo_get(problem)
    elif not isinstance(problem, dict):
        raise ConfigError("'problem' must be a zoo name or an inline object")

    hjb_box = raw.get("hjb_box")
    cfg = ExperimentConfig(
        problem=problem,
        seed=seed,
        pipeline=pipeline,
        schedule=tuple(rows),
        dt=float(raw.get("dt", 0.025)),
        lambda_total=float(raw.get("lambda_total", 1.0)),
        epsilon=float(raw.get("epsilon", 0.05)),
        hjb_box=None if hjb_box is None else tuple(hjb_box),
        hjb_dx=None if raw.get("hjb_dx") is None else float(raw["hjb_dx"]),
        compare_tolerance=float(raw.get("compare_tolerance", 0.05)),
        moment_p=float(raw.get("moment_p", 2.0)),
        nu_samples=int(raw.get("nu_samples", 5)),
        tolerance=float(raw.get("tolerance", 0.1)),
        output_dir=str(raw.get("output_dir", "rbsde-out")),
        threads=int(raw.get("threads", 1)),
        full_invariants=bool(raw.get("full_invariants", False)),
    )
    if cfg.dt <= 0 or cfg.epsilon <= 0 or cfg.lambda_total <= 0:
        raise ConfigError("dt, epsilon and lambda_total must be positive")
    if cfg.threads < 1:
        raise ConfigError("threads must be at least 1")
    return cfg


def load_experiment_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"no config file at {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return experiment_config_from_dict(raw)


def exact(v):
    """Report entry for a number with no statistical error."""
    v = _jsonable(v)
    return {"value": v, "tag": "exact"}


def measured(v, stderr):
    """Report entry for a Monte Carlo estimate with its standard error."""
    return {"value": _jsonable(v), "stderr": _jsonable(stderr)}


def unwrap(entry):
    """Numeric value of a report entry written by exact() or measured()."""
    if isinstance(entry, dict) and "value" in entry:
        return entry["value"]
    return entry


def _jsonable(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def _wrap_tree(node):
    """Tag every bare number in a nested structure as exact."""
    if isinstance(node, dict):
        if "value" in node and ("stderr" in node or node.get("tag")):
            return node
        return {k: _wrap_tree(v) for k, v in node.items()}
    if isinstance(node, (list, tuple)):
        return [_wrap_tree(v) for v in node]
    if isinstance(node, bool) or node is None or isinstance(node, str):
        return node
    if isinstance(node, (int, float, np.integer, np.floating)):
        return exact(node)
    return node


@dataclass
class StageRecord:
    name: str
    status: str  # pass | fail | error | config-error | skipped
    detail: dict = field(default_factory=dict)
    artifacts: List[str] = field(default_factory=list)
    summary_value: Optional[float] = None
    summary_error: Optional[float] = None
    note: str = ""


@dataclass
class ExperimentResult:
    exit_code: int
    records: List[StageRecord]
    report: dict
    output_dir: Path

    def record(self, name: str) -> StageRecord:
        for r in self.records:
            if r.name == name:
                return r
        raise KeyError(name)


class _Run:
    """Mutable state shared by the stages of one experiment."""

    def __init__(self, config: ExperimentConfig, out_dir: Path):
        self.config = config
        self.out_dir = out_dir
        self.spec, self.zoo = config.build_problem()
        self.certificate = None
        self.stages = None
        self.solution = None
        self.ensemble = None
        self.hjb = None
        self.hjb_value = None
        self.hjb_error = None


def _fmt(x) -> str:
    return repr(float(x))


def _stage_validate(run: _Run, rec: StageRecord) -> None:
    rep = validate_problem(run.spec, seed=run.config.seed)
    detail = {
        "valid": rep.valid,
        "failures": list(rep.failures),
        "warnings": list(rep.warnings),
        "regime": run.spec.regime,
        "beta": exact(run.spec.beta),
        "empirical_lipschitz": exact(rep.empirical_lipschitz),
    }
    if rep.beta_margin is not None:
        detail["beta_margin"] = exact(rep.beta_margin)
    if rep.growth is not None:
        detail["growth"] = {"c_bar": exact(rep.growth.c_bar),
                            "beta_bar": exact(rep.growth.beta_bar)}
    rec.detail = detail
    rec.note = f"{len(rep.failures)} failures"
    if not rep.valid:
        rec.status = "config-error"
        return
    rec.status = "pass"


def _stage_simulate(run: _Run, rec: StageRecord) -> None:
    cfg = run.config
    t_end = max(row[0] for row in cfg.schedule)
    n_paths = min(min(row[2] for row in cfg.schedule), 10_000)
    grid = TimeGrid.with_dt(t_end, cfg.dt)
    ens = simulate_randomized_pair(run.spec, grid, n_paths, cfg.seed,
                                   lambda_total=cfg.lambda_total)
    moment = check_moment_bound(ens, p=cfg.moment_p, spec=run.spec)

    moments_csv = run.out_dir / "moments.csv"
    with open(moments_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "sup_moment", "stderr", "bound"])
        for k in range(moment.t_nodes.size):
            w.writerow([_fmt(moment.t_nodes[k]), _fmt(moment.empirical[k]),
                        _fmt(moment.stderr[k]), _fmt(moment.bound[k])])
    sample_csv = run.out_dir / "paths_sample.csv"
    ensemble_to_csv(ens, sample_csv, max_paths=25)

    with np.errstate(invalid="ignore", over="ignore"):
        ratio = np.where(moment.bound > 0,
                         moment.empirical / moment.bound, 0.0)
    worst = float(np.nanmax(ratio))
    rec.detail = {
        "moment_p": exact(cfg.moment_p),
        "n_paths": exact(ens.n_paths),
        "divergent": exact(int(ens.divergent.sum())),
        "moment_passed": moment.passed,
        "worst_bound_ratio": exact(worst),
        "terminal_sup_moment": measured(moment.empirical[-1],
                                        moment.stderr[-1]),
        "terminal_bound": exact(moment.bound[-1]),
    }
    rec.artifacts = [moments_csv.name, sample_csv.name]
    rec.summary_value = worst
    rec.status = "pass" if moment.passed else "fail"
    rec.note = f"p={cfg.moment_p:g}"


def _bsde_stage_rows(stages) -> List[dict]:
    rows = []
    prev_by_t: Dict[float, float] = {}
    for s in stages:
        gap = (abs(s.y0 - prev_by_t[s.horizon])
               if s.horizon in prev_by_t else None)
        prev_by_t[s.horizon] = s.y0
        rows.append({
            "T": s.horizon, "n": s.n_penalty, "n_paths": s.n_paths,
            "y0": s.y0, "stderr": s.y0_stderr, "t_tail": s.truncation,
            "n_gap": gap, "violation": s.violation,
            "violation_stderr": s.violation_stderr,
            "k_mean": s.k_mean, "k_stderr": s.k_stderr,
        })
    return rows


def _stage_solve_bsde(run: _Run, rec: StageRecord) -> None:
    cfg = run.config
    cert, stages, sol, ens = solve_constrained_limit(
        run.spec, cfg.schedule, dt_target=cfg.dt, seed=cfg.seed,
        lambda_total=cfg.lambda_total, tolerance=cfg.tolerance,
        keep_final=True)
    run.certificate, run.stages = cert, stages
    run.solution, run.ensemble = sol, ens

    rows = _bsde_stage_rows(stages)
    stages_csv = run.out_dir / "bsde_stages.csv"
    with open(stages_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["T", "n", "Y0", "stderr", "t_tail", "n_gap",
                    "constraint_violation", "K_T_mean"])
        for r in rows:
            w.writerow([_fmt(r["T"]), _fmt(r["n"]), _fmt(r["y0"]),
                        _fmt(r["stderr"]), _fmt(r["t_tail"]),
                        "" if r["n_gap"] is None else _fmt(r["n_gap"]),
                        _fmt(r["violation"]), _fmt(r["k_mean"])])

    feedback = run.out_dir / "feedback_table.npz"
    optimal_intensity(sol, run.spec, cfg.epsilon).save(feedback)

    gap_se = (stages[-1].y0_stderr + stages[-2].y0_stderr
              if len(stages) >= 2 else 0.0)
    rec.detail = {
        "value": measured(cert.value, cert.mc_error / 3.0),
        "mc_error": exact(cert.mc_error),
        "truncation_error": exact(cert.truncation_error),
        "penalization_gap": measured(cert.penalization_gap, gap_se),
        "total": exact(cert.total),
        "converged": cert.converged,
        "monotone_in_n": cert.monotone_in_n,
        "extrapolated": cert.extrapolated,
        "horizon": exact(cert.horizon),
        "n_penalty": exact(cert.n_penalty),
        "warnings": list(cert.warnings),
        "stages": [{
            "T": exact(r["T"]), "n": exact(r["n"]),
            "n_paths": exact(r["n_paths"]),
            "y0": measured(r["y0"], r["stderr"]),
            "t_tail": exact(r["t_tail"]),
            "n_gap": None if r["n_gap"] is None else exact(r["n_gap"]),
            "constraint_violation": measured(r["violation"],
                                             r["violation_stderr"]),
            "k_mean": measured(r["k_mean"], r["k_stderr"]),
        } for r in rows],
    }
    rec.artifacts = [stages_csv.name, feedback.name]
    rec.summary_value = cert.value
    rec.summary_error = cert.total
    rec.note = "converged" if cert.converged else "not-converged"
    rec.status = "pass" if cert.monotone_in_n else "fail"


def _stage_solve_hjb(run: _Run, rec: StageRecord) -> None:
    cfg = run.config
    if not run.spec.markovian:
        raise ConfigError("solve-hjb needs markovian dynamics")
    box = cfg.hjb_box or (run.zoo.hjb_box if run.zoo else None)
    dx = cfg.hjb_dx or (run.zoo.hjb_dx if run.zoo else None)
    if box is None or dx is None:
        raise ConfigError("solve-hjb needs hjb_box and hjb_dx (no zoo "
                          "defaults for this problem)")
    coarse = solve_hjb_fd(run.spec, box, 2.0 * dx)
    fine = solve_hjb_fd(run.spec, box, dx)
    v_fine = compare_value(fine, run.spec.x0)
    v_coarse = compare_value(coarse, run.spec.x0)
    disc = abs(v_fine - v_coarse)
    residual = hjb_residual(fine, run.spec)
    run.hjb, run.hjb_value, run.hjb_error = fine, v_fine, disc

    grid_csv = run.out_dir / "hjb_grid.csv"
    grid_to_csv(fine, grid_csv)

    scale = 1.0 + float(np.abs(fine.values).max())
    ok = fine.converged and residual <= 1e-6 * scale
    rec.detail = {
        "value_at_x0": measured(v_fine, disc),
        "coarse_value_at_x0": exact(v_coarse),
        "dx": exact(dx),
        "box": _wrap_tree(np.atleast_2d(
            np.asarray(box, dtype=float)).tolist()),
        "residual": exact(residual),
        "sweeps": exact(fine.sweeps),
        "converged": bool(fine.converged),
    }
    if fine.cross_monotone is not None:
        rec.detail["cross_monotone"] = bool(fine.cross_monotone)
    rec.artifacts = [grid_csv.name]
    rec.summary_value = v_fine
    rec.summary_error = disc
    rec.note = f"sweeps={fine.sweeps}"
    rec.status = "pass" if ok else "fail"


def _stage_compare(run: _Run, rec: StageRecord) -> None:
    cfg = run.config
    cert = run.certificate
    refs = []
    if run.hjb_value is not None:
        refs.append(("hjb-grid", run.hjb_value, run.hjb_error))
    if run.zoo is not None and run.zoo.known_value is not None:
        refs.append((run.zoo.provenance, run.zoo.known_value, 0.0))
    if not refs:
        rec.status = "skipped"
        rec.note = "no reference value available"
        return

    rows, all_ok = [], True
    for label, ref, ref_err in refs:
        abs_err = abs(cert.value - ref)
        rel_err = abs_err / max(abs(ref), 1e-12)
        within = rel_err <= cfg.compare_tolerance
        covered = abs_err <= cert.total + ref_err
        all_ok = all_ok and within
        rows.append({
            "reference": label,
            "reference_value": exact(ref),
            "estimate": measured(cert.value, cert.mc_error / 3.0),
            "abs_error": exact(abs_err),
            "rel_error": exact(rel_err),
            "tolerance": exact(cfg.compare_tolerance),
            "within_tolerance": within,
            "covered_by_certificate": covered,
        })
    rec.detail = {"rows": rows}
    rec.summary_value = max(unwrap(r["rel_error"]) for r in rows)
    rec.note = ";".join(r["reference"] for r in rows)
    rec.status = "pass" if all_ok else "fail"


def _verdict(name: str, passed: bool, **numbers) -> dict:
    v = {"name": name, "passed": bool(passed)}
    v.update(numbers)
    return v


def _stage_invariants(run: _Run, rec: StageRecord) -> None:
    cfg = run.config
    spec, sol, ens = run.spec, run.solution, run.ensemble
    cert, stages = run.certificate, run.stages
    verdicts = []

    bound = sol.bound_check(ens, spec)
    verdicts.append(_verdict(
        "value-bound", bound.passed,
        max_abs=exact(bound.max_abs), bound=exact(bound.bound),
        noise_floor=exact(bound.noise_floor),
        worst_node=exact(bound.worst_node)))

    k_floor = float(min(sol.k_profile.min(),
                        sol.k_per_path[sol.used_indices].min()))
    verdicts.append(_verdict(
        "penalty-nonnegative", k_floor >= -1e-12,
        min_increment=exact(k_floor), k_mean=measured(sol.k_mean,
                                                      sol.k_stderr)))

    nus = random_intensity_controls(spec.control_space,
                                    bound=sol.n_penalty, count=3,
                                    seed=cfg.seed + 11)
    mart_rows, mart_ok = [], True
    use = ens.valid_mask()
    for i, nu in enumerate(nus):
        kap = doleans_weights(spec, ens, nu)[use]
        m = float(kap.mean())
        se = float(kap.std(ddof=1) / math.sqrt(kap.size))
        ok = abs(m - 1.0) <= 3.0 * se
        mart_ok = mart_ok and ok
        mart_rows.append({"sample": exact(i), "mean": measured(m, se),
                          "ok": ok})
    verdicts.append(_verdict("density-martingale", mart_ok,
                             rows=mart_rows))

    verdicts.append(_verdict(
        "monotone-in-n", cert.monotone_in_n,
        y0_by_stage=[measured(s.y0, s.y0_stderr) for s in stages]))

    dual = dual_value_check(spec, sol, ens, count=cfg.nu_samples,
                            seed=cfg.seed + 13, epsilon=cfg.epsilon)
    verdicts.append(_verdict(
        "dual-sandwich", dual.passed,
        y0=measured(dual.y0, dual.y0_stderr),
        epsilon=exact(dual.epsilon),
        upper=[{"label": r.label, "value": measured(r.value, r.std_error),
                "ok": r.ok} for r in dual.upper_rows],
        lower={"label": dual.lower_row.label,
               "value": measured(dual.lower_row.value,
                                 dual.lower_row.std_error),
               "ok": dual.lower_row.ok}))

    verdicts.append(_tail_verdict(run))

    if cfg.full_invariants:
        verdicts.extend(_flip_verdicts(run))
    else:
        verdicts.append({"name": "start-action-invariance",
                         "passed": None, "skipped": True,
                         "reason": "full_invariants disabled"})
        verdicts.append({"name": "jump-rate-invariance",
                         "passed": None, "skipped": True,
                         "reason": "full_invariants disabled"})

    hard_failed = [v["name"] for v in verdicts if v["passed"] is False]
    rec.detail = {"verdicts": verdicts, "failed": hard_failed}
    rec.summary_value = float(len(hard_failed))
    rec.note = ";".join(hard_failed) if hard_failed else "all-pass"
    rec.status = "pass" if not hard_failed else "fail"


def _tail_verdict(run: _Run) -> dict:
    """Solve two horizons at one penalty level and check the tail bound."""
    cfg = run.config
    spec = run.spec
    t_short = min(row[0] for row in cfg.schedule)
    t_long = max(row[0] for row in cfg.schedule)
    if t_long <= t_short:
        t_long = 2.0 * t_short
    n_pen = cfg.schedule[0][1]
    n_paths = min(4000, max(row[2] for row in cfg.schedule))
    vals = {}
    for t_end in (t_short, t_long):
        grid = TimeGrid.with_dt(t_end, cfg.dt)
        e = simulate_randomized_pair(spec, grid, n_paths, cfg.seed + 17,
                                     lambda_total=cfg.lambda_total)
        s = solve_penalized_bsde(spec, e, n_pen)
        vals[t_end] = (s.y0, s.y0_stderr)
    (y1, se1), (y2, se2) = vals[t_short], vals[t_long]
    allowance = spec.truncation_bound(t_short) + 3.0 * (se1 + se2)
    gap = abs(y2 - y1)
    return _verdict(
        "tail-contraction", gap <= allowance,
        horizons=[exact(t_short), exact(t_long)],
        short_y0=measured(y1, se1), long_y0=measured(y2, se2),
        gap=exact(gap), allowance=exact(allowance))


def _flip_verdicts(run: _Run) -> List[dict]:
    """Re-solve with a flipped start action and a doubled jump rate."""
    cfg = run.config
    spec = run.spec
    base = run.certificate
    out = []

    actions = spec.control_space.actions
    if actions.size > 1:
        cert_a, _ = solve_constrained_limit(
            spec, cfg.schedule, dt_target=cfg.dt, seed=cfg.seed,
            lambda_total=cfg.lambda_total, a0=float(actions[-1]),
            tolerance=cfg.tolerance)
        gap = abs(cert_a.value - base.value)
        tol = base.total + cert_a.total
        out.append(_verdict(
            "start-action-invariance", gap <= tol,
            base=measured(base.value, base.mc_error / 3.0),
            flipped=measured(cert_a.value, cert_a.mc_error / 3.0),
            gap=exact(gap), allowance=exact(tol)))
    else:
        out.append({"name": "start-action-invariance", "passed": None,
                    "skipped": True, "reason": "single action"})

    cert_l, _ = solve_constrained_limit(
        spec, cfg.schedule, dt_target=cfg.dt, seed=cfg.seed,
        lambda_total=2.0 * cfg.lambda_total, tolerance=cfg.tolerance)
    gap = abs(cert_l.value - base.value)
    tol = base.total + cert_l.total
    out.append(_verdict(
        "jump-rate-invariance", gap <= tol,
        base=measured(base.value, base.mc_error / 3.0),
        doubled=measured(cert_l.value, cert_l.mc_error / 3.0),
        gap=exact(gap), allowance=exact(tol)))
    return out


_STAGE_FUNCS = {
    "validate": _stage_validate,
    "simulate": _stage_simulate,
    "solve-bsde": _stage_solve_bsde,
    "solve-hjb": _stage_solve_hjb,
    "compare": _stage_compare,
    "invariants": _stage_invariants,
}


def _deps(name: str, pipeline: Sequence[str]) -> Tuple[str, ...]:
    if name == "validate":
        return ()
    if name == "compare":
        deps = ["validate", "solve-bsde"]
        if "solve-hjb" in pipeline:
            deps.append("solve-hjb")
        return tuple(deps)
    if name == "invariants":
        return ("validate", "solve-bsde")
    return ("validate",)


def _write_summary(records: List[StageRecord], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "status", "value", "error", "note"])
        for r in records:
            w.writerow([
                r.name, r.status,
                "" if r.summary_value is None else _fmt(r.summary_value),
                "" if r.summary_error is None else _fmt(r.summary_error),
                r.note])


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Execute the configured stages and write the report files.

    Exit code 0 when every executed stage passes, 2 when an invariant or
    comparison fails (or a stage errors), 3 when the configuration or the
    problem itself is invalid.
    """
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    try:
        run = _Run(config, out_dir)
    except ConfigError as exc:
        records = [StageRecord(name="validate", status="config-error",
                               detail={"error": str(exc)})]
        report = _final_report(config, records, 3)
        _emit(records, report, out_dir)
        return ExperimentResult(3, records, report, out_dir)

    pipeline = list(config.pipeline)
    if "validate" not in pipeline:
        pipeline.insert(0, "validate")
    elif pipeline[0] != "validate":
        pipeline.remove("validate")
        pipeline.insert(0, "validate")

    records: List[StageRecord] = []
    status_by_name: Dict[str, str] = {}
    limiter = _thread_limiter(config.threads)
    with limiter:
        for name in pipeline:
            rec = StageRecord(name=name, status="pass")
            records.append(rec)
            deps = _deps(name, pipeline)
            absent = [d for d in deps if d not in pipeline]
            if absent:
                rec.status = "config-error"
                rec.detail = {"error": f"stage {name!r} needs "
                              f"{absent} in the pipeline"}
                status_by_name[name] = rec.status
                continue
            unmet = [d for d in deps if status_by_name.get(d) != "pass"]
            if unmet:
                rec.status = "skipped"
                rec.note = "unmet " + ",".join(unmet)
                status_by_name[name] = rec.status
                continue
            try:
                _STAGE_FUNCS[name](run, rec)
            except (ConfigError, AssumptionViolationError) as exc:
                rec.status = "config-error"
                rec.detail = {"error": str(exc)}
            except Exception as exc:  # recorded, dependents skipped
                rec.status = "error"
                rec.detail = {"error": f"{type(exc).__name__}: {exc}"}
            status_by_name[name] = rec.status

    statuses = {r.status for r in records}
    if "config-error" in statuses:
        exit_code = 3
    elif statuses & {"fail", "error"}:
        exit_code = 2
    else:
        exit_code = 0

    report = _final_report(config, records, exit_code)
    _emit(records, report, out_dir)
    return ExperimentResult(exit_code, records, report, out_dir)


def _final_report(config: ExperimentConfig, records: List[StageRecord],
                  exit_code: int) -> dict:
    problem = config.problem if isinstance(config.problem, str) else "inline"
    return {
        "problem": problem,
        "config": _wrap_tree(config.to_dict()),
        "stages": [{
            "name": r.name,
            "status": r.status,
            "artifacts": list(r.artifacts),
            "note": r.note,
            "detail": r.detail,
        } for r in records],
        "exit_code": exact(exit_code),
    }


def _emit(records: List[StageRecord], report: dict, out_dir: Path) -> None:
    with open(out_dir / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_summary(records, out_dir / "summary.csv")


def _thread_limiter(threads: int):
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)
