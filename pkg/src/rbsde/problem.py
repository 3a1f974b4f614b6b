"""Problem definitions for discounted control on an infinite horizon.

A problem is a controlled SDE dX = b(t, path, a) dt + sigma(t, path, a) dW
together with a running reward f and a discount rate beta; the target
quantity is sup over controls of E integral_0^inf e^{-beta t} f dt.
Coefficients receive whole path batches so that path-dependent features
(running sup, running mean) cost nothing extra.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import AssumptionViolationError, ConfigError

Coefficient = Callable[[float, "PathFeatures", object], np.ndarray]


@dataclass
class PathFeatures:
    """Summary of a batch of paths up to time t.

    state:   (n_paths, dim_state) current value
    sup_abs: (n_paths,) running sup of the Euclidean norm over [0, t]
    mean:    (n_paths, dim_state) running time average over [0, t]
    """

    t: float
    state: np.ndarray
    sup_abs: np.ndarray
    mean: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.state.shape[0]


@dataclass(frozen=True)
class ControlSpace:
    """Action set: an explicit finite list or a closed interval."""

    kind: str
    actions: Optional[np.ndarray] = None
    lo: float = 0.0
    hi: float = 0.0

    @classmethod
    def finite(cls, actions: Sequence[float]) -> "ControlSpace":
        arr = np.asarray(actions, dtype=float)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("finite control space needs at least one action")
        if np.unique(arr).size != arr.size:
            raise ValueError("duplicate actions")
        return cls(kind="finite", actions=arr)

    @classmethod
    def interval(cls, lo: float, hi: float) -> "ControlSpace":
        if not (hi > lo):
            raise ValueError(f"empty interval [{lo}, {hi}]")
        return cls(kind="interval", lo=float(lo), hi=float(hi))

    @property
    def is_finite(self) -> bool:
        return self.kind == "finite"

    @property
    def n_actions(self) -> int:
        if not self.is_finite:
            raise ValueError("interval control space has no action count")
        return int(self.actions.size)

    def discretize(self, n: int = 33) -> np.ndarray:
        """Actions used by grid solvers: the list itself, or n interval nodes."""
        if self.is_finite:
            return self.actions.copy()
        return np.linspace(self.lo, self.hi, n)


def default_bdg_constant(p: float) -> float:
    """Burkholder-Davis-Gundy constant used when none is supplied.

    Pinned to 2 for p <= 2; (p/(p-1))^p * p^(p/2) above that.
    """
    if p <= 0:
        raise ValueError("moment order must be positive")
    if p <= 2.0:
        return 2.0
    return (p / (p - 1.0)) ** p * p ** (p / 2.0)


@dataclass(frozen=True)
class GrowthConstants:
    """Constants (c_bar, beta_bar) in the conditional moment bound

    E[sup_{s<=T} |X_s|^p | F_t] <= c_bar * e^{beta_bar (T-t)} * (1 + sup_{s<=t} |X_s|^p).
    """

    p: float
    lipschitz: float
    c_bdg: float
    c_bar: float
    beta_bar: float


def growth_constants(p: float, lipschitz: float,
                     c_bdg: Optional[float] = None) -> GrowthConstants:
    """Closed-form moment-growth constants for a Lipschitz-coefficient SDE."""
    if p <= 0:
        raise ValueError("moment order must be positive")
    if lipschitz < 0:
        raise ValueError("Lipschitz bound must be nonnegative")
    L = float(lipschitz)
    if p >= 2.0:
        c_p = default_bdg_constant(p) if c_bdg is None else float(c_bdg)
        c_bar = 2.0 ** (p + p / 2.0 - 1.0) * max(1.0, (1.0 + c_p) ** p * L ** p)
        beta_bar = (p / 2.0) * (1.0 + 4.0 * (1.0 + c_p ** 2) * L ** 2)
        return GrowthConstants(p, L, c_p, c_bar, beta_bar)
    # below p = 2 everything routes through the p = 2 constants via Jensen
    c_2 = default_bdg_constant(2.0) if c_bdg is None else float(c_bdg)
    c_bar2 = 4.0 * max(1.0, (1.0 + c_2) ** 2 * L ** 2)
    c_bar = c_bar2 ** (p / 2.0)
    beta_bar = (p / 2.0) * (1.0 + 4.0 * (1.0 + c_2 ** 2) * L ** 2)
    return GrowthConstants(p, L, c_2, c_bar, beta_bar)


@dataclass
class ProblemSpec:
    """A discounted control problem.

    regime "A" means bounded rewards (reward_bound = sup |f|); regime "A'"
    means polynomially growing rewards, reward_growth = (M, r) with
    |f| <= M (1 + sup_s |X_s|^r), and requires beta to beat the moment
    growth rate of order r.
    """

    dim_state: int
    dim_noise: int
    drift: Coefficient
    diffusion: Coefficient
    running_reward: Coefficient
    beta: float
    x0: np.ndarray
    control_space: ControlSpace
    regime: str = "A"
    reward_bound: Optional[float] = None
    reward_growth: Optional[tuple] = None
    lipschitz: float = 1.0
    markovian: bool = True
    c_bdg: Optional[float] = None
    name: str = ""

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("discount rate must be positive")
        if self.dim_state < 1 or self.dim_noise < 1:
            raise ValueError("state and noise dimensions must be at least 1")
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if self.x0.shape != (self.dim_state,):
            raise ValueError(f"x0 must have shape ({self.dim_state},)")
        if self.regime not in ("A", "A'"):
            raise ValueError("regime must be 'A' or 'A''")
        if self.regime == "A" and self.reward_bound is None:
            raise ValueError("regime 'A' needs reward_bound = sup |f|")
        if self.regime == "A'":
            if self.reward_growth is None:
                raise ValueError("regime 'A'' needs reward_growth = (M, r)")
            m, r = self.reward_growth
            if m <= 0 or r <= 0:
                raise ValueError("reward growth constants must be positive")
        if self.lipschitz < 0:
            raise ValueError("Lipschitz bound must be nonnegative")

    def growth(self, p: Optional[float] = None) -> GrowthConstants:
        """Moment-growth constants at order p (default: the reward order r)."""
        if p is None:
            if self.regime != "A'":
                raise ValueError("specify p explicitly for bounded-reward problems")
            p = self.reward_growth[1]
        return growth_constants(p, self.lipschitz, self.c_bdg)

    def tail_rate(self) -> float:
        """Effective decay rate of horizon-truncation error.

        beta for bounded rewards; beta - beta_bar under polynomial growth.
        """
        if self.regime == "A":
            return self.beta
        margin = self.beta - self.growth().beta_bar
        if margin <= 0:
            raise AssumptionViolationError(
                f"discount rate {self.beta} does not beat the moment growth "
                f"rate {self.growth().beta_bar}")
        return margin

    def value_bound(self, x: Optional[np.ndarray] = None) -> float:
        """Analytic bound on |V| (at x, default the initial point)."""
        if self.regime == "A":
            return self.reward_bound / self.beta
        m, r = self.reward_growth
        g = self.growth()
        rate = self.tail_rate()
        xx = self.x0 if x is None else np.atleast_1d(np.asarray(x, dtype=float))
        return 2.0 * m * (1.0 + g.c_bar) / rate * (1.0 + np.linalg.norm(xx) ** r)

    def truncation_bound(self, horizon: float) -> float:
        """Bound on |V - V_T| for the finite-horizon value V_T."""
        if self.regime == "A":
            return self.reward_bound * math.exp(-self.beta * horizon) / self.beta
        m, r = self.reward_growth
        g = self.growth()
        rate = self.tail_rate()
        pol = 1.0 + np.linalg.norm(self.x0) ** r
        return (m * math.exp(-self.beta * horizon) / self.beta
                + m * g.c_bar * pol * math.exp(-rate * horizon) / rate)

    def point_features(self, x: np.ndarray, t: float = 0.0) -> PathFeatures:
        """Features of paths frozen at the states x, shape (n_paths, dim_state)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return PathFeatures(t=t, state=x,
                            sup_abs=np.linalg.norm(x, axis=1),
                            mean=x.copy())


@dataclass
class ValidationReport:
    valid: bool
    failures: list
    warnings: list
    empirical_lipschitz: float
    beta_margin: Optional[float] = None
    growth: Optional[GrowthConstants] = None


def _coeff_norms(spec: ProblemSpec, feats: PathFeatures, actions: np.ndarray):
    """Per-path norms |b| and Frobenius |sigma| with shape normalization."""
    n_p = feats.n_paths
    b = np.broadcast_to(np.asarray(spec.drift(feats.t, feats, actions), dtype=float)
                        .reshape(n_p, -1), (n_p, spec.dim_state))
    sg = np.asarray(spec.diffusion(feats.t, feats, actions), dtype=float)
    if sg.ndim <= 1 or sg.shape == (n_p, spec.dim_state):
        # scalar / per-path scalar(s): diagonal convention
        sg = np.broadcast_to(sg.reshape(n_p, -1) if sg.ndim else sg,
                             (n_p, spec.dim_state))
        s_norm = np.linalg.norm(sg, axis=1)
    else:
        sg = np.broadcast_to(sg, (n_p, spec.dim_state, spec.dim_noise))
        s_norm = np.linalg.norm(sg.reshape(n_p, -1), axis=1)
    return np.linalg.norm(b, axis=1), s_norm, b, sg


def validate_problem(spec: ProblemSpec, n_probe: int = 256,
                     seed: int = 0) -> ValidationReport:
    """Check the declared assumptions against random probes.

    Never raises on a violation; everything lands in the report so a caller
    can decide what is fatal.
    """
    failures, warnings = [], []
    beta_margin, growth = None, None

    if spec.regime == "A'":
        growth = spec.growth()
        beta_margin = spec.beta - growth.beta_bar
        if beta_margin <= 0:
            failures.append(
                f"beta = {spec.beta} must exceed the growth rate "
                f"beta_bar = {growth.beta_bar} of order-r moments")

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    scale = 2.0 * (1.0 + np.linalg.norm(spec.x0))
    xs = spec.x0 + scale * rng.standard_normal((n_probe, spec.dim_state))
    ys = spec.x0 + scale * rng.standard_normal((n_probe, spec.dim_state))
    ts = rng.uniform(0.0, 10.0, n_probe)
    if spec.control_space.is_finite:
        acts = rng.choice(spec.control_space.actions, n_probe)
    else:
        acts = rng.uniform(spec.control_space.lo, spec.control_space.hi, n_probe)

    emp_l = 0.0
    max_f_ratio = 0.0
    for t in np.unique(np.round(ts, 1)):
        sel = np.round(ts, 1) == t
        fx = spec.point_features(xs[sel], t=float(t))
        fy = spec.point_features(ys[sel], t=float(t))
        a = acts[sel]
        bx, sx, bvx, svx = _coeff_norms(spec, fx, a)
        by, sy, bvy, svy = _coeff_norms(spec, fy, a)
        dx = np.linalg.norm(xs[sel] - ys[sel], axis=1)
        num = (np.linalg.norm(bvx - bvy, axis=1)
               + np.linalg.norm((svx - svy).reshape(len(a), -1), axis=1))
        ok = dx > 1e-9
        if ok.any():
            emp_l = max(emp_l, float(np.max(num[ok] / dx[ok])))
        f = np.asarray(spec.running_reward(float(t), fx, a), dtype=float)
        f = np.broadcast_to(f, (len(a),))
        if spec.regime == "A":
            max_f_ratio = max(max_f_ratio,
                              float(np.max(np.abs(f))) / spec.reward_bound)
        else:
            m, r = spec.reward_growth
            max_f_ratio = max(max_f_ratio, float(np.max(
                np.abs(f) / (m * (1.0 + fx.sup_abs ** r)))))

    if emp_l > 1.05 * spec.lipschitz:
        failures.append(
            f"empirical Lipschitz ratio {emp_l:.4g} exceeds the declared "
            f"bound {spec.lipschitz} (use at least {emp_l:.4g})")
    origin = spec.point_features(np.zeros((1, spec.dim_state)))
    ob, os_, _, _ = _coeff_norms(spec, origin, acts[:1])
    if float(ob[0] + os_[0]) > 1.05 * spec.lipschitz:
        failures.append(
            f"|b(0,a)| + |sigma(0,a)| = {float(ob[0] + os_[0]):.4g} exceeds "
            f"the declared Lipschitz bound {spec.lipschitz}")
    if max_f_ratio > 1.02:
        failures.append(
            f"running reward exceeds its declared envelope by factor "
            f"{max_f_ratio:.4g}")
    elif max_f_ratio > 0.999:
        warnings.append("running reward sits on its declared envelope")

    return ValidationReport(valid=not failures, failures=failures,
                            warnings=warnings, empirical_lipschitz=emp_l,
                            beta_margin=beta_margin, growth=growth)


def _compile_expression(expr: str, what: str) -> Coefficient:
    """Turn a 1-d coefficient expression in (t, x, xsup, xmean, a) into a callable."""
    try:
        code = compile(expr, f"<{what}>", "eval")
    except SyntaxError as e:
        raise ConfigError(f"cannot parse {what} expression {expr!r}: {e}") from e

    def coeff(t, feats, a, _code=code):
        env = {"np": np, "t": t, "x": feats.state[:, 0],
               "xsup": feats.sup_abs, "xmean": feats.mean[:, 0], "a": a,
               "abs": abs, "min": min, "max": max}
        out = eval(_code, {"__builtins__": {}}, env)
        return np.asarray(out, dtype=float)

    return coeff


def _control_space_from_config(cfg: dict) -> ControlSpace:
    kind = cfg.get("kind")
    if kind == "finite":
        return ControlSpace.finite(cfg["actions"])
    if kind == "interval":
        lo, hi = cfg["bounds"] if "bounds" in cfg else (cfg["lo"], cfg["hi"])
        return ControlSpace.interval(lo, hi)
    raise ConfigError(f"unknown control space kind {kind!r}")


def load_problem_config(path) -> ProblemSpec:
    """Load a problem from a JSON file.

    Coefficients are either {"zoo": "<name>"} or expression strings in
    t, x, xsup, xmean, a (one-dimensional problems only).
    """
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read problem config {path}: {e}") from e
    return problem_from_dict(cfg)


def problem_from_dict(cfg: dict) -> ProblemSpec:
    try:
        coeffs = cfg["coefficients"]
        if "zoo" in coeffs:
            from .zoo import zoo_get   # deferred: zoo builds on this module

            return zoo_get(coeffs["zoo"]).build()
        regime = cfg["regime"]
        if regime not in ("A", "A'"):
            raise ConfigError(f"unknown regime {regime!r}")
        dim_state = int(cfg["dim_state"])
        if dim_state != 1:
            raise ConfigError("expression coefficients support dim_state = 1 only")
        reward_bound = None
        reward_growth = None
        if regime == "A":
            reward_bound = float(cfg["M"])
        else:
            reward_growth = (float(cfg["M"]), float(cfg["r"]))
        return ProblemSpec(
            dim_state=dim_state,
            dim_noise=int(cfg["dim_noise"]),
            drift=_compile_expression(coeffs["drift"], "drift"),
            diffusion=_compile_expression(coeffs["diffusion"], "diffusion"),
            running_reward=_compile_expression(coeffs["running_reward"],
                                               "running_reward"),
            beta=float(cfg["beta"]),
            x0=np.asarray(cfg["x0"], dtype=float),
            control_space=_control_space_from_config(cfg["control_space"]),
            regime=regime,
            reward_bound=reward_bound,
            reward_growth=reward_growth,
            lipschitz=float(cfg.get("L", 1.0)),
            markovian=bool(cfg.get("markovian", True)),
            name=cfg.get("name", ""),
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad problem config: {e}") from e
