"""Backward regression solver for the penalized value process.

The forward leg simulates state paths together with a pure-jump action
process.  This module walks the value backward on that ensemble with
per-action least squares, accumulating the penalty increments that push
the action process toward the favourable side, and wraps the result in
certificates: truncation tail, penalization gap, Monte Carlo error, and
dual upper/lower bounds from admissible intensity controls.
"""

import json
import math
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ConstraintViolationError
from .problem import PathFeatures, ProblemSpec
from .randomization import (
    IntensityControl,
    action_quadrature,
    estimate_reward,
    random_intensity_controls,
    simulate_intensity_pair,
)
from .simulate import PathEnsemble, TimeGrid, _diffusion_array, _drift_array, \
    simulate_randomized_pair

DEFAULT_SCHEDULE: Tuple[Tuple[float, float, int], ...] = (
    (10.0, 5.0, 10_000),
    (10.0, 10.0, 30_000),
    (10.0, 20.0, 30_000),
    (10.0, 40.0, 30_000),
    (10.0, 80.0, 30_000),
)

_GH_NODES = 7
_COND_WARN = 1e8


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomial state features, optionally with |x| and Gaussian bumps.

    The absolute-value columns pick up the kinks that low-degree
    polynomials smooth over; bumps = (lo, hi, count, width) adds local
    Gaussians on [lo, hi] for 1-d states.  With a window the inputs are
    winsorized to [window[0], window[1]] first, so predictions saturate
    instead of extrapolating outside the visited range.
    """

    state_degree: int = 3
    include_abs: bool = True
    bumps: Optional[Tuple[float, float, int, float]] = None
    window: Optional[Tuple[float, float]] = None

    def state_features(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.window is not None:
            x = np.clip(x, self.window[0], self.window[1])
        n, dim = x.shape
        cols = [np.ones(n)]
        for j in range(dim):
            for k in range(1, self.state_degree + 1):
                cols.append(x[:, j] ** k)
        if dim > 1 and self.state_degree >= 2:
            for i in range(dim):
                for j in range(i + 1, dim):
                    cols.append(x[:, i] * x[:, j])
        if self.include_abs:
            for j in range(dim):
                cols.append(np.abs(x[:, j]))
        if self.bumps is not None:
            if dim != 1:
                raise ConfigError("bump features support 1-d states only")
            lo, hi, count, width = self.bumps
            for c in np.linspace(lo, hi, int(count)):
                cols.append(np.exp(-((x[:, 0] - c) / width) ** 2))
        return np.column_stack(cols)

    def to_config(self) -> dict:
        return {"state_degree": self.state_degree,
                "include_abs": self.include_abs,
                "bumps": None if self.bumps is None else list(self.bumps),
                "window": None if self.window is None else list(self.window)}

    @classmethod
    def from_config(cls, cfg: dict) -> "RegressionBasis":
        bumps = cfg.get("bumps")
        window = cfg.get("window")
        return cls(state_degree=int(cfg["state_degree"]),
                   include_abs=bool(cfg["include_abs"]),
                   bumps=None if bumps is None else tuple(bumps),
                   window=None if window is None else tuple(window))


def _default_scalar_basis(ensemble: PathEnsemble, n_actions: int
                          ) -> RegressionBasis:
    """Pick the regression basis for a scalar markovian state.

    Multi-action problems get Gaussian bumps spread over the visited
    state range on top of the cubic core: the penalty term bends the
    value surface in ways low-degree polynomials cannot track.  With a
    single action the surface is smooth and the core basis fits it.
    """
    core = RegressionBasis(state_degree=3, include_abs=True)
    if n_actions < 2:
        return core
    states = ensemble.states[ensemble.valid_mask(), :, 0]
    lo, hi = np.quantile(states, (0.005, 0.995))
    span = float(hi - lo)
    if not math.isfinite(span) or span <= 1e-8:
        return core
    count = 9
    width = 1.5 * span / (count - 1)
    return RegressionBasis(state_degree=3, include_abs=True,
                           bumps=(float(lo), float(hi), count, width))


def _design_inputs(feats: PathFeatures, use_path_features: bool) -> np.ndarray:
    if use_path_features:
        return np.column_stack([feats.state, feats.mean,
                                np.asarray(feats.sup_abs)])
    return feats.state


def _subset_feats(feats: PathFeatures, idx) -> PathFeatures:
    return PathFeatures(t=feats.t, state=feats.state[idx],
                        sup_abs=feats.sup_abs[idx], mean=feats.mean[idx])


def _lstsq(phi: np.ndarray, y: np.ndarray):
    """Least squares with condition number and residual spread."""
    theta, _, rank, sv = np.linalg.lstsq(phi, y, rcond=None)
    cond = float(sv[0] / sv[rank - 1]) if rank >= 1 else math.inf
    resid = y - phi @ theta
    return theta, cond, float(resid.std())


def _gh_rule(dim: int):
    nodes, w = np.polynomial.hermite_e.hermegauss(_GH_NODES)
    w = w / w.sum()
    if dim == 1:
        return nodes.reshape(-1, 1), w
    xa, xb = np.meshgrid(nodes, nodes, indexing="ij")
    wa, wb = np.meshgrid(w, w, indexing="ij")
    return np.column_stack([xa.ravel(), xb.ravel()]), (wa * wb).ravel()


@dataclass
class BoundReport:
    max_abs: float
    bound: float
    noise_floor: float
    passed: bool
    worst_node: int


def _mean_stderr(v: np.ndarray) -> Tuple[float, float]:
    if v.size == 0:
        return 0.0, 0.0
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


class BSDESolution:
    """Fitted value table of the backward scheme.

    coeffs[k, j] are the regression coefficients of the continuation
    value at node k for the j-th action; everything downstream (optimal
    intensities, dual checks, restart residuals) evaluates this table.
    """

    def __init__(self, *, grid: TimeGrid, n_penalty: float,
                 basis: RegressionBasis, use_path_features: bool,
                 action_values: np.ndarray, action_weights: np.ndarray,
                 lambda_total: float, beta: float, coeffs: np.ndarray,
                 cond_numbers: np.ndarray, cell_counts: np.ndarray,
                 synthesized: np.ndarray, node_se: np.ndarray,
                 k_profile: np.ndarray, k_per_path: np.ndarray,
                 violation_profile: np.ndarray, violation_table: np.ndarray,
                 violation_per_path: np.ndarray, used_indices: np.ndarray,
                 y0: float, y0_stderr: float,
                 n_paths: int, n_used: int, pooled_cells: int,
                 warnings: List[str], z_coeffs: Optional[np.ndarray] = None,
                 windows: Optional[np.ndarray] = None):
        self.grid = grid
        self.horizon = grid.t_end
        self.n_penalty = n_penalty
        self.basis = basis
        self.use_path_features = use_path_features
        self.action_values = action_values
        self.action_weights = action_weights
        self.lambda_total = lambda_total
        self.beta = beta
        self.coeffs = coeffs
        self.cond_numbers = cond_numbers
        self.cell_counts = cell_counts
        self.synthesized = synthesized
        self.node_se = node_se
        self.k_profile = k_profile
        self.k_per_path = k_per_path
        self.violation_profile = violation_profile
        self.violation_table = violation_table
        self.violation_per_path = violation_per_path
        self.used_indices = used_indices
        self.y0 = y0
        self.y0_stderr = y0_stderr
        self.n_paths = n_paths
        self.n_used = n_used
        self.pooled_cells = pooled_cells
        self.warnings = warnings
        self.z_coeffs = z_coeffs
        self.windows = windows

    @property
    def violation(self) -> float:
        """Empirical E of the time integral of int ((u)^+)^2 dlambda."""
        return float(self.violation_profile.sum() * self.grid.dt)

    @property
    def violation_stderr(self) -> float:
        return _mean_stderr(self.violation_per_path[self.used_indices])[1]

    @property
    def k_mean(self) -> float:
        return _mean_stderr(self.k_per_path[self.used_indices])[0]

    @property
    def k_stderr(self) -> float:
        return _mean_stderr(self.k_per_path[self.used_indices])[1]

    def _own_index(self, actions: np.ndarray) -> np.ndarray:
        actions = np.asarray(actions, dtype=float)
        eq = np.abs(actions[:, None] - self.action_values[None, :]) <= 1e-12
        if not eq.any(axis=1).all():
            bad = actions[~eq.any(axis=1)][:3]
            raise ConstraintViolationError(
                f"actions {bad} are not in the solved action set")
        return eq.argmax(axis=1)

    def continuation_matrix(self, k: int, feats: PathFeatures) -> np.ndarray:
        """Fitted continuation values, one column per action."""
        xd = _design_inputs(feats, self.use_path_features)
        if self.windows is not None:
            xd = np.clip(xd, self.windows[k, 0], self.windows[k, 1])
        return self.basis.state_features(xd) @ self.coeffs[k].T

    def value_at(self, spec: ProblemSpec, k: int, feats: PathFeatures,
                 actions: np.ndarray) -> np.ndarray:
        """y at node k on the given states/actions via the scheme's update."""
        n = feats.n_paths
        if k >= self.grid.n_steps:
            return np.zeros(n)
        actions = np.broadcast_to(np.asarray(actions, dtype=float), (n,))
        c_all = self.continuation_matrix(k, feats)
        clip = spec.value_bound() if spec.regime == "A" else None
        if clip is not None:
            np.clip(c_all, -clip, clip, out=c_all)
        own = c_all[np.arange(n), self._own_index(actions)]
        u = c_all - own[:, None]
        pen = ((self.n_penalty * np.clip(u, 0.0, None) - u)
               @ self.action_weights)
        f = np.broadcast_to(np.asarray(
            spec.running_reward(self.grid.nodes[k], feats, actions),
            dtype=float), (n,))
        y = own + self.grid.dt * (-self.beta * own + f + pen)
        if clip is not None:
            np.clip(y, -clip, clip, out=y)
        return y

    def bound_check(self, ensemble: PathEnsemble,
                    spec: ProblemSpec) -> BoundReport:
        """Largest |y| over paths and nodes against the analytic bound."""
        mask = ensemble.valid_mask()
        worst, worst_node = 0.0, 0
        for k in range(self.grid.n_steps):
            feats = _subset_feats(ensemble.features_at(k), mask)
            y = self.value_at(spec, k, feats, ensemble.controls[mask, k])
            m = float(np.abs(y).max()) if y.size else 0.0
            if m > worst:
                worst, worst_node = m, k
        floor = 3.0 * float(self.node_se.max())
        bound = spec.value_bound()
        return BoundReport(max_abs=worst, bound=bound, noise_floor=floor,
                           passed=worst <= bound + floor,
                           worst_node=worst_node)


def constraint_violation(solution: BSDESolution,
                         lambda_total: Optional[float] = None,
                         mark_dist: Optional[np.ndarray] = None) -> float:
    """Empirical E int_0^T int ((u_t(a))^+)^2 lambda(da) dt.

    With no arguments the jump measure the solution was solved under is
    used; passing lambda_total / mark_dist re-weights the stored squared
    positive parts under a different measure on the same action nodes.
    """
    if lambda_total is None and mark_dist is None:
        return solution.violation
    scale = (1.0 if lambda_total is None
             else float(lambda_total) / solution.lambda_total)
    if mark_dist is None:
        weights = solution.action_weights * scale
    else:
        probs = np.asarray(mark_dist, dtype=float)
        if probs.shape != solution.action_values.shape:
            raise ConfigError("mark_dist length does not match the action set")
        total = solution.lambda_total * scale
        weights = total * probs
    return float((solution.violation_table @ weights).sum()
                 * solution.grid.dt)


def _synth_combo(coeff_next: np.ndarray, j: int, weights: np.ndarray,
                 lambda_total: float, dt: float) -> np.ndarray:
    # one-step jump expansion: stay with 1 - lambda dt, jump to mark l
    # with dt * w_l (w already carries lambda times the mark law)
    return ((1.0 - lambda_total * dt) * coeff_next[j]
            + dt * (weights[:, None] * coeff_next).sum(axis=0))


def _synthesize_cell(spec: ProblemSpec, basis: RegressionBasis, t: float,
                     feats: PathFeatures, phi: np.ndarray, a_j: float,
                     coeff_next: np.ndarray, j: int, weights: np.ndarray,
                     lambda_total: float, dt: float,
                     window_next: Optional[np.ndarray] = None):
    """Continuation coefficients for an action cell too thin to regress.

    Propagates every path one Euler step under action a_j, integrates the
    next node's fitted table over the Gaussian increment, and fits the
    result on the full cloud.  Exact up to O(dt^2) in the jump channel and
    the quadrature error of the Gauss-Hermite rule in the noise.
    """
    combo = _synth_combo(coeff_next, j, weights, lambda_total, dt)
    b = _drift_array(spec, t, feats, a_j)
    sg = _diffusion_array(spec, t, feats, a_j)
    nodes, w = _gh_rule(spec.dim_noise)
    drifted = feats.state + b * dt
    vals = np.zeros(feats.n_paths)
    for g in range(nodes.shape[0]):
        x_g = drifted + math.sqrt(dt) * np.einsum("pnd,d->pn", sg, nodes[g])
        if window_next is not None:
            x_g = np.clip(x_g, window_next[0], window_next[1])
        vals += w[g] * (basis.state_features(x_g) @ combo)
    return _lstsq(phi, vals)


def solve_penalized_bsde(spec: ProblemSpec, ensemble: PathEnsemble,
                         n_penalty: float,
                         basis: Optional[RegressionBasis] = None,
                         picard_sweeps: int = 1,
                         compute_z: bool = False,
                         min_cell: Optional[int] = None,
                         comparison_window: float = 0.25) -> BSDESolution:
    """Backward pass for the intensity-bound-n penalized value.

    Explicit in time: at each node the continuation value is regressed
    per action cell on the state features, the penalty integral is taken
    against the mark measure, and the jump-channel compensator is
    subtracted so that only the penalty's positive part accumulates in K.
    picard_sweeps > 1 re-evaluates the discount and penalty terms on the
    updated table, for stiff products n * lambda * dt.

    The action comparison that feeds the penalty reads a moving average
    of the fitted tables over `comparison_window` time units: the value
    surface drifts on the 1/beta scale while per-node fit noise is
    independent, and the positive part would otherwise rectify that
    noise at rate n wherever actions are close to indifferent.  Zero
    disables the averaging.
    """
    if ensemble.mode != "randomized":
        raise ConfigError("the backward solve needs a randomized ensemble")
    cs = spec.control_space
    if not cs.is_finite:
        raise ConfigError("finite action sets only; discretize the interval "
                          "first (ControlSpace.discretize)")
    if n_penalty <= 0:
        raise ConfigError("the penalty level must be positive")
    avals, weights = action_quadrature(cs, ensemble.lambda_total,
                                       ensemble.mark_dist)
    m = avals.size
    grid = ensemble.grid
    dt, nodes, n_steps = grid.dt, grid.nodes, grid.n_steps
    use_pf = not spec.markovian
    if basis is None:
        if spec.dim_state == 1 and not use_pf:
            basis = _default_scalar_basis(ensemble, m)
        else:
            basis = RegressionBasis(state_degree=2, include_abs=False)
    clip = spec.value_bound() if spec.regime == "A" else None

    mask = ensemble.valid_mask()
    vidx = np.flatnonzero(mask)
    n_used = vidx.size
    if n_used == 0:
        raise ConfigError("no usable paths in the ensemble")
    n_feat = basis.state_features(
        _design_inputs(_subset_feats(ensemble.features_at(0), vidx[:1]),
                       use_pf)).shape[1]
    if min_cell is None:
        min_cell = max(2 * n_feat + 4, 20)

    coeffs = np.zeros((n_steps, m, n_feat))
    cond_numbers = np.full((n_steps, m), np.nan)
    cell_counts = np.zeros((n_steps, m), dtype=np.int64)
    synthesized = np.zeros((n_steps, m), dtype=bool)
    node_se = np.zeros(n_steps)
    k_profile = np.zeros(n_steps)
    violation_profile = np.zeros(n_steps)
    violation_table = np.zeros((n_steps, m))
    k_per_path = np.zeros(ensemble.n_paths)
    violation_per_path = np.zeros(ensemble.n_paths)
    z_coeffs = (np.zeros((n_steps, m, n_feat, spec.dim_noise))
                if compute_z else None)
    warnings: List[str] = []
    pooled_cells = 0
    can_synthesize = spec.markovian and spec.dim_noise <= 2
    cond_bad = 0
    stiffness = n_penalty * ensemble.lambda_total * dt
    if stiffness > 1.0:
        warnings.append(
            f"n * lambda * dt = {stiffness:.2f} > 1: the explicit penalty "
            "step is outside its stability range; refine dt or use "
            "picard_sweeps")

    y_next = np.zeros(n_used)
    coeff_next = np.zeros((m, n_feat))
    y0 = y0_stderr = 0.0
    rng_idx = np.arange(n_used)
    rho = 1.0 if comparison_window <= 0 else min(1.0, dt / comparison_window)
    theta_bar: Optional[np.ndarray] = None
    d_in = _design_inputs(_subset_feats(ensemble.features_at(0), vidx[:1]),
                          use_pf).shape[1]
    # fits are only trusted where the node has data: inputs saturate at
    # each node's 0.1%-99.9% band, so tail queries read the edge fit
    # instead of extrapolating
    windows = np.zeros((n_steps, 2, d_in))
    window_next = None

    for k in range(n_steps - 1, -1, -1):
        feats = _subset_feats(ensemble.features_at(k), vidx)
        xd = _design_inputs(feats, use_pf)
        windows[k, 0] = np.quantile(xd, 0.001, axis=0)
        windows[k, 1] = np.quantile(xd, 0.999, axis=0)
        phi = basis.state_features(np.clip(xd, windows[k, 0], windows[k, 1]))
        ctr = ensemble.controls[vidx, k]
        eq = np.abs(ctr[:, None] - avals[None, :]) <= 1e-12
        if not eq.any(axis=1).all():
            raise ConstraintViolationError(
                "ensemble actions do not match the action set")
        j_idx = eq.argmax(axis=1)

        coeff_k = np.zeros((m, n_feat))
        se_k = 0.0
        se_a0 = None
        for j in range(m):
            cell = j_idx == j
            cnt = int(cell.sum())
            cell_counts[k, j] = cnt
            if cnt >= min_cell or cnt == n_used:
                theta, cond, rstd = _lstsq(phi[cell], y_next[cell])
                se_cell = rstd / math.sqrt(cnt)
                se_k = max(se_k, se_cell)
                if k == 0:
                    se_a0 = se_cell
                if cond > _COND_WARN:
                    cond_bad += 1
                if compute_z and k < n_steps:
                    dw = ensemble.brownian_increments[vidx, k, :]
                    for d in range(spec.dim_noise):
                        z_coeffs[k, j, :, d] = _lstsq(
                            phi[cell], y_next[cell] * dw[cell, d] / dt)[0]
            elif can_synthesize:
                theta, cond, _ = _synthesize_cell(
                    spec, basis, nodes[k], feats, phi, float(avals[j]),
                    coeff_next, j, weights, ensemble.lambda_total, dt,
                    window_next)
                synthesized[k, j] = True
            else:
                theta, cond, _ = _lstsq(phi, y_next)
                synthesized[k, j] = True
                pooled_cells += 1
            coeff_k[j] = theta
            cond_numbers[k, j] = cond
        node_se[k] = se_k

        theta_bar = (coeff_k if theta_bar is None
                     else (1.0 - rho) * theta_bar + rho * coeff_k)
        c_all = phi @ coeff_k.T
        if clip is not None:
            np.clip(c_all, -clip, clip, out=c_all)
        c_own = c_all[rng_idx, j_idx]
        f_own = np.broadcast_to(np.asarray(
            spec.running_reward(nodes[k], feats, ctr), dtype=float), (n_used,))
        if picard_sweeps <= 1:
            if rho < 1.0:
                c_cmp = phi @ theta_bar.T
                if clip is not None:
                    np.clip(c_cmp, -clip, clip, out=c_cmp)
            else:
                c_cmp = c_all
            u = c_cmp - c_cmp[rng_idx, j_idx][:, None]
            u_pos = np.clip(u, 0.0, None)
            pen_pos = u_pos @ weights
            pen = n_penalty * pen_pos - u @ weights
            y_k = c_own + dt * (-spec.beta * c_own + f_own + pen)
            if clip is not None:
                np.clip(y_k, -clip, clip, out=y_k)
        else:
            f_all = np.empty((n_used, m))
            for j in range(m):
                f_all[:, j] = np.broadcast_to(np.asarray(spec.running_reward(
                    nodes[k], feats, np.full(n_used, avals[j])),
                    dtype=float), (n_used,))
            table = c_all.copy()
            for _ in range(picard_sweeps):
                new = np.empty_like(table)
                for j in range(m):
                    d_j = table - table[:, j:j + 1]
                    pen_j = (n_penalty * np.clip(d_j, 0.0, None) - d_j) @ weights
                    new[:, j] = c_all[:, j] + dt * (
                        -spec.beta * table[:, j] + f_all[:, j] + pen_j)
                if clip is not None:
                    np.clip(new, -clip, clip, out=new)
                table = new
            u = table - table[rng_idx, j_idx][:, None]
            u_pos = np.clip(u, 0.0, None)
            pen_pos = u_pos @ weights
            y_k = table[rng_idx, j_idx]

        k_inc = dt * n_penalty * pen_pos
        k_per_path[vidx] += k_inc
        k_profile[k] = float(k_inc.mean())
        sq = u_pos ** 2
        violation_per_path[vidx] += dt * (sq @ weights)
        violation_table[k] = sq.mean(axis=0)
        violation_profile[k] = float(violation_table[k] @ weights)
        coeffs[k] = coeff_k
        coeff_next = coeff_k
        window_next = windows[k]
        y_next = y_k
        if k == 0:
            y0 = float(y_k.mean())
            y0_stderr = float(se_a0) if se_a0 is not None else 0.0

    if cond_bad:
        warnings.append(f"{cond_bad} regressions had condition number "
                        f"above {_COND_WARN:.0e}")
    if pooled_cells:
        warnings.append(f"{pooled_cells} thin action cells fell back to a "
                        "pooled fit (action dependence ignored there)")
    div = int(ensemble.divergent.sum())
    if div:
        warnings.append(f"excluded {div} divergent paths")

    return BSDESolution(grid=grid, n_penalty=float(n_penalty), basis=basis,
                        use_path_features=use_pf, action_values=avals,
                        action_weights=weights,
                        lambda_total=float(ensemble.lambda_total),
                        beta=spec.beta, coeffs=coeffs,
                        cond_numbers=cond_numbers, cell_counts=cell_counts,
                        synthesized=synthesized, node_se=node_se,
                        k_profile=k_profile, k_per_path=k_per_path,
                        violation_profile=violation_profile,
                        violation_table=violation_table,
                        violation_per_path=violation_per_path,
                        used_indices=vidx, y0=y0,
                        y0_stderr=y0_stderr, n_paths=ensemble.n_paths,
                        n_used=n_used, pooled_cells=pooled_cells,
                        warnings=warnings, z_coeffs=z_coeffs,
                        windows=windows)


class FeedbackIntensity(IntensityControl):
    """Near-optimal intensity read off a solved value table.

    Jumps that increase the fitted value get the full budget n; the rest
    get the small allowance eps / (T lambda(A)), shrunk by |u| when the
    drop is worse than one unit, and clamped below at `clamp` to stay
    admissible.
    """

    def __init__(self, *, coeffs: np.ndarray, action_values: np.ndarray,
                 grid: TimeGrid, n_penalty: float, epsilon: float,
                 lambda_area: float, basis: RegressionBasis,
                 use_path_features: bool, clamp: float = 1e-6,
                 value_clip: Optional[float] = None,
                 windows: Optional[np.ndarray] = None):
        self.windows = windows
        self.coeffs = coeffs
        self.action_values = np.asarray(action_values, dtype=float)
        self.grid = grid
        self.n_penalty = float(n_penalty)
        self.epsilon = float(epsilon)
        self.lambda_area = float(lambda_area)
        self.basis = basis
        self.use_path_features = use_path_features
        self.clamp = float(clamp)
        self.value_clip = None if value_clip is None else float(value_clip)
        self.bound = float(n_penalty)
        self.clamp_count = 0

    def _column(self, value: float) -> int:
        d = np.abs(self.action_values - value)
        j = int(d.argmin())
        if d[j] > 1e-12:
            raise ConstraintViolationError(
                f"action {value} is not in the feedback table")
        return j

    def rate(self, t, feats, current, candidate):
        k = min(int(t / self.grid.dt + 1e-9), self.coeffs.shape[0] - 1)
        xd = _design_inputs(feats, self.use_path_features)
        if self.windows is not None:
            xd = np.clip(xd, self.windows[k, 0], self.windows[k, 1])
        vals = self.basis.state_features(xd) @ self.coeffs[k].T
        if self.value_clip is not None:
            np.clip(vals, -self.value_clip, self.value_clip, out=vals)
        n = vals.shape[0]
        cur = np.broadcast_to(np.asarray(current, dtype=float), (n,))
        eq = np.abs(cur[:, None] - self.action_values[None, :]) <= 1e-12
        if not eq.any(axis=1).all():
            raise ConstraintViolationError(
                "current action is not in the feedback table")
        own = vals[np.arange(n), eq.argmax(axis=1)]
        u = vals[:, self._column(float(candidate))] - own
        small = self.epsilon / (self.grid.t_end * self.lambda_area)
        shrunk = small / np.maximum(np.abs(u), 1.0)
        out = np.where(u >= 0.0, self.bound,
                       np.where(u >= -1.0, small, shrunk))
        low = out < self.clamp
        if low.any():
            self.clamp_count += int(low.sum())
            out = np.maximum(out, self.clamp)
        return out

    def save(self, path) -> None:
        meta = {"t_end": self.grid.t_end, "n_steps": self.grid.n_steps,
                "n_penalty": self.n_penalty, "epsilon": self.epsilon,
                "lambda_area": self.lambda_area, "clamp": self.clamp,
                "use_path_features": self.use_path_features,
                "value_clip": self.value_clip,
                "basis": self.basis.to_config()}
        arrays = {"coeffs": self.coeffs,
                  "action_values": self.action_values,
                  "meta": np.array(json.dumps(meta))}
        if self.windows is not None:
            arrays["windows"] = self.windows
        np.savez(path, **arrays)


def feedback_intensity_from_file(path) -> FeedbackIntensity:
    with np.load(path, allow_pickle=False) as data:
        try:
            meta = json.loads(str(data["meta"].item()))
            coeffs = np.array(data["coeffs"])
            action_values = np.array(data["action_values"])
        except KeyError as e:
            raise ConfigError(f"not a feedback table file: missing {e}") from e
        windows = np.array(data["windows"]) if "windows" in data else None
    return FeedbackIntensity(
        coeffs=coeffs, action_values=action_values,
        grid=TimeGrid(t_end=float(meta["t_end"]),
                      n_steps=int(meta["n_steps"])),
        n_penalty=meta["n_penalty"], epsilon=meta["epsilon"],
        lambda_area=meta["lambda_area"],
        basis=RegressionBasis.from_config(meta["basis"]),
        use_path_features=bool(meta["use_path_features"]),
        clamp=meta["clamp"], value_clip=meta.get("value_clip"),
        windows=windows)


def optimal_intensity(solution: BSDESolution, spec: ProblemSpec,
                      epsilon: float, clamp: float = 1e-6
                      ) -> FeedbackIntensity:
    """eps-optimal feedback intensity for the solved penalty level."""
    if epsilon <= 0:
        raise ConfigError("epsilon must be positive")
    lambda_area = float(solution.action_weights.sum())
    value_clip = spec.value_bound() if spec.regime == "A" else None
    return FeedbackIntensity(coeffs=solution.coeffs,
                             action_values=solution.action_values,
                             grid=solution.grid,
                             n_penalty=solution.n_penalty, epsilon=epsilon,
                             lambda_area=lambda_area, basis=solution.basis,
                             use_path_features=solution.use_path_features,
                             clamp=clamp, value_clip=value_clip,
                             windows=solution.windows)


@dataclass
class DualRow:
    label: str
    value: float
    std_error: float
    n_eff: Optional[float]
    ok: bool


@dataclass
class DualReport:
    """Upper bounds from sampled controls, lower bound from the feedback one."""

    y0: float
    y0_stderr: float
    epsilon: float
    upper_rows: List[DualRow]
    lower_row: DualRow
    passed: bool
    warnings: List[str] = field(default_factory=list)


def _same_horizon(solution: BSDESolution, ensemble: PathEnsemble) -> None:
    if abs(ensemble.grid.t_end - solution.horizon) > 1e-9:
        raise ConfigError("ensemble horizon differs from the solved horizon")


def dual_value_check(spec: ProblemSpec, solution: BSDESolution,
                     ensemble: PathEnsemble, count: int = 8, seed: int = 0,
                     epsilon: float = 0.05,
                     nus: Optional[Sequence[IntensityControl]] = None,
                     n_paths: Optional[int] = None) -> DualReport:
    """Sandwich the solved value between controlled-intensity evaluations.

    Every admissible intensity bounded by the penalty level must estimate
    at or below y0; the feedback intensity built from the solution must
    come within epsilon from below (all up to 3 combined stderr plus a
    roundoff allowance).  Each intensity runs on fresh paths simulated
    under its own measure: reweighting a single nominal ensemble looks
    cheaper, but its effective sample size collapses exponentially in the
    horizon once the intensity sits far from the nominal rates, which is
    exactly where the feedback control lives.
    """
    _same_horizon(solution, ensemble)
    if nus is None:
        nus = random_intensity_controls(spec.control_space,
                                        bound=solution.n_penalty,
                                        count=count, seed=seed)
    if n_paths is None:
        n_paths = min(ensemble.n_paths, 10_000)
    lam = 1.0 if ensemble.lambda_total is None else ensemble.lambda_total
    slack = 1e-9 * (1.0 + abs(solution.y0))

    def evaluate(nu, i):
        ens = simulate_intensity_pair(spec, ensemble.grid, nu, n_paths,
                                      seed=seed + 7919 * (i + 1),
                                      a0=ensemble.a0, lambda_total=lam,
                                      mark_dist=ensemble.mark_dist)
        return estimate_reward(spec, ens)

    warnings: List[str] = []
    rows = []
    for i, nu in enumerate(nus):
        est = evaluate(nu, i)
        comb = est.std_error + solution.y0_stderr
        rows.append(DualRow(label=f"sample-{i}", value=est.value,
                            std_error=est.std_error, n_eff=None,
                            ok=est.value <= solution.y0 + 3.0 * comb + slack))
        warnings.extend(est.warnings)
    est = evaluate(optimal_intensity(solution, spec, epsilon), len(nus))
    comb = est.std_error + solution.y0_stderr
    lower = DualRow(label="feedback", value=est.value,
                    std_error=est.std_error, n_eff=None,
                    ok=est.value >= solution.y0 - epsilon - 3.0 * comb - slack)
    warnings.extend(est.warnings)
    return DualReport(y0=solution.y0, y0_stderr=solution.y0_stderr,
                      epsilon=epsilon, upper_rows=rows, lower_row=lower,
                      passed=all(r.ok for r in rows) and lower.ok,
                      warnings=warnings)


@dataclass
class DppRow:
    label: str
    value: float
    residual: float
    std_error: float
    ok: bool


@dataclass
class DppReport:
    """Restart consistency at a stopping node, per intensity control."""

    y0: float
    epsilon: float
    mean_tau: float
    rows: List[DppRow]
    optimal_row: DppRow
    passed: bool


def _tau_nodes(ensemble: PathEnsemble, tau: dict) -> np.ndarray:
    grid = ensemble.grid
    if "node" in tau:
        k = int(tau["node"])
        if not (0 <= k <= grid.n_steps):
            raise ConfigError(f"stopping node {k} outside the grid")
        return np.full(ensemble.n_paths, k, dtype=np.int64)
    if "box" not in tau:
        raise ConfigError("stopping rule needs either 'node' or 'box'")
    lo, hi = tau["box"]
    cap = float(tau.get("cap", grid.t_end))
    cap_node = min(int(round(cap / grid.dt)), grid.n_steps)
    outside = ((ensemble.states < lo) | (ensemble.states > hi)).any(axis=2)
    has_exit = outside.any(axis=1)
    first = outside.argmax(axis=1)
    return np.where(has_exit, np.minimum(first, cap_node),
                    cap_node).astype(np.int64)


def _restart_payoff(spec: ProblemSpec, solution: BSDESolution,
                    ensemble: PathEnsemble, tau_idx: np.ndarray):
    """Per-path G_tau, discount factor at tau, and fitted value at tau.

    Discounting compounds (1 - beta dt) to match the backward scheme.
    """
    grid = ensemble.grid
    n_paths = ensemble.n_paths
    g_tau = np.zeros(n_paths)
    y_tau = np.zeros(n_paths)
    g_run = np.zeros(n_paths)
    step = 1.0 - spec.beta * grid.dt
    d_run = 1.0
    disc = np.zeros(n_paths)
    for k in range(grid.n_steps + 1):
        sel = tau_idx == k
        if sel.any():
            g_tau[sel] = g_run[sel]
            disc[sel] = d_run
            y_tau[sel] = solution.value_at(
                spec, k, _subset_feats(ensemble.features_at(k), sel),
                ensemble.controls[sel, k])
        if k < grid.n_steps:
            feats = ensemble.features_at(k)
            f = np.broadcast_to(np.asarray(spec.running_reward(
                grid.nodes[k], feats, ensemble.controls[:, k]),
                dtype=float), (n_paths,))
            g_run = g_run + d_run * f * grid.dt
            d_run *= step
    return g_tau, disc, y_tau


def dpp_residual(spec: ProblemSpec, solution: BSDESolution,
                 ensemble: PathEnsemble, tau: dict, count: int = 3,
                 seed: int = 0, epsilon: float = 0.02,
                 nus: Optional[Sequence[IntensityControl]] = None,
                 n_paths: Optional[int] = None) -> DppReport:
    """Check the restart identity E_nu[G_tau + disc_tau y_tau] vs y0.

    Sampled controls must come out at or below y0; the feedback control
    must reproduce y0 within its epsilon allowance.  Every control is
    simulated directly on fresh paths (reweighting degenerates for
    controls far from the nominal rates).  tau is either {"node": k} or
    {"box": (lo, hi), "cap": t} for the first exit.
    """
    _same_horizon(solution, ensemble)
    if nus is None:
        nus = random_intensity_controls(spec.control_space,
                                        bound=solution.n_penalty,
                                        count=count, seed=seed)
    if n_paths is None:
        n_paths = min(ensemble.n_paths, 10_000)
    lam = 1.0 if ensemble.lambda_total is None else ensemble.lambda_total
    slack = 1e-9 * (1.0 + abs(solution.y0))

    def run(nu, label, optimal, i):
        ens = simulate_intensity_pair(spec, ensemble.grid, nu, n_paths,
                                      seed=seed + 60013 * (i + 1),
                                      a0=ensemble.a0, lambda_total=lam,
                                      mark_dist=ensemble.mark_dist)
        tau_idx = _tau_nodes(ens, tau)
        g_tau, disc, y_tau = _restart_payoff(spec, solution, ens, tau_idx)
        vals = (g_tau + disc * y_tau)[ens.valid_mask()]
        value = float(vals.mean())
        se = float(vals.std(ddof=1) / math.sqrt(vals.size))
        resid = value - solution.y0
        if optimal:
            ok = abs(resid) <= epsilon + 5.0 * (se + solution.y0_stderr) + slack
        else:
            ok = resid <= 3.0 * (se + solution.y0_stderr) + slack
        return DppRow(label=label, value=value, residual=resid,
                      std_error=se, ok=ok), tau_idx, ens

    rows = [run(nu, f"sample-{i}", False, i)[0] for i, nu in enumerate(nus)]
    star, tau_idx, ens_star = run(optimal_intensity(solution, spec, epsilon),
                                  "feedback", True, len(nus))
    mean_tau = float(ens_star.grid.nodes[tau_idx][ens_star.valid_mask()].mean())
    return DppReport(y0=solution.y0, epsilon=epsilon, mean_tau=mean_tau,
                     rows=rows, optimal_row=star,
                     passed=all(r.ok for r in rows) and star.ok)


@dataclass
class StageResult:
    horizon: float
    n_penalty: float
    n_paths: int
    y0: float
    y0_stderr: float
    truncation: float
    violation: float
    violation_stderr: float
    k_mean: float
    k_stderr: float
    divergent: int
    seed: int
    wall_time: float


@dataclass
class ValueCertificate:
    """Value estimate with every remaining gap bounded explicitly."""

    value: float
    mc_error: float
    truncation_error: float
    penalization_gap: float
    total: float
    converged: bool
    monotone_in_n: bool
    horizon: float
    n_penalty: float
    tolerance: float
    extrapolated: bool = False
    warnings: List[str] = field(default_factory=list)


def solve_constrained_limit(spec: ProblemSpec,
                            schedule: Sequence[Tuple[float, float, int]]
                            = DEFAULT_SCHEDULE,
                            dt_target: float = 0.00625, seed: int = 0,
                            basis: Optional[RegressionBasis] = None,
                            lambda_total: float = 1.0,
                            a0: Optional[float] = None,
                            mark_dist: Optional[np.ndarray] = None,
                            tolerance: float = 0.1,
                            picard_sweeps: int = 1,
                            keep_final: bool = False):
    """Run the (horizon, penalty) schedule and certify the limit value.

    schedule rows are (t_end, n_penalty, n_paths); rows sharing t_end and
    n_paths reuse one ensemble, so consecutive penalty levels see common
    random numbers and their comparison is almost noise-free.

    Returns (certificate, stages); with keep_final also the last stage's
    solution and ensemble, for downstream checks that need the table.
    """
    if not schedule:
        raise ConfigError("empty schedule")
    stages: List[StageResult] = []
    warnings: List[str] = []
    cache_key, cached = None, None
    sol = None
    for t_end, n_pen, n_paths in schedule:
        t0 = time.perf_counter()
        key = (round(float(t_end), 9), int(n_paths))
        if key != cache_key:
            grid = TimeGrid.with_dt(float(t_end), dt_target)
            cached = simulate_randomized_pair(spec, grid, int(n_paths), seed,
                                              a0=a0, lambda_total=lambda_total,
                                              mark_dist=mark_dist)
            cache_key = key
        sol = solve_penalized_bsde(spec, cached, float(n_pen), basis=basis,
                                   picard_sweeps=picard_sweeps)
        warnings.extend(f"T={t_end} n={n_pen}: {w}" for w in sol.warnings)
        stages.append(StageResult(
            horizon=float(t_end), n_penalty=float(n_pen),
            n_paths=int(n_paths), y0=sol.y0, y0_stderr=sol.y0_stderr,
            truncation=spec.truncation_bound(float(t_end)),
            violation=sol.violation, violation_stderr=sol.violation_stderr,
            k_mean=sol.k_mean, k_stderr=sol.k_stderr,
            divergent=int(cached.divergent.sum()), seed=seed,
            wall_time=time.perf_counter() - t0))

    monotone = True
    for a, b in zip(stages, stages[1:]):
        if a.horizon == b.horizon and b.n_penalty > a.n_penalty:
            if b.y0 < a.y0 - 3.0 * (a.y0_stderr + b.y0_stderr) - 1e-9:
                monotone = False
    final_t = stages[-1].horizon
    at_final = [s for s in stages if s.horizon == final_t]
    if len(at_final) >= 2:
        gap = abs(at_final[-1].y0 - at_final[-2].y0)
    elif len(stages) >= 2:
        gap = abs(stages[-1].y0 - stages[-2].y0)
        warnings.append("single penalty level at the final horizon; the "
                        "penalization gap mixes in the horizon change")
    else:
        gap = math.inf
        warnings.append("one-stage schedule: no penalization gap estimate")

    # The penalized values rise toward the constrained limit as the
    # budget n grows.  When the last three stages share one ensemble
    # (common random numbers) and the upward gaps shrink at a stable
    # ratio r, the leftover tail is close to the geometric sum
    # g * r / (1 - r); fold it into the value and book its size as the
    # remaining penalization error.
    value = stages[-1].y0
    extrapolated = False
    if len(stages) >= 3:
        s1, s2, s3 = stages[-3:]
        shared = (s1.horizon == s2.horizon == s3.horizon
                  and s1.n_paths == s2.n_paths == s3.n_paths
                  and s1.n_penalty < s2.n_penalty < s3.n_penalty)
        if shared:
            g1, g2 = s2.y0 - s1.y0, s3.y0 - s2.y0
            noise = s2.y0_stderr + s3.y0_stderr
            if g1 > 0.0 and g2 > 3.0 * noise and 0.05 <= g2 / g1 <= 0.9:
                ratio = g2 / g1
                tail_n = g2 * ratio / (1.0 - ratio)
                value = s3.y0 + tail_n
                gap = tail_n
                extrapolated = True

    mc = 3.0 * stages[-1].y0_stderr
    tail = stages[-1].truncation
    total = mc + tail + gap
    cert = ValueCertificate(value=value, mc_error=mc,
                            truncation_error=tail, penalization_gap=gap,
                            total=total, converged=total <= tolerance,
                            monotone_in_n=monotone, horizon=final_t,
                            n_penalty=stages[-1].n_penalty,
                            tolerance=tolerance, extrapolated=extrapolated,
                            warnings=warnings)
    if keep_final:
        return cert, stages, sol, cached
    return cert, stages
