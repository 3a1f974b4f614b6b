"""Change of measure for the randomized action channel.

The nominal measure gives the action process a Poisson jump structure with
intensity kernel lambda(da) = lambda_total * mark_dist(da).  An intensity
control nu tilts that kernel to nu_t(a) lambda(da); its Doleans exponential
is the likelihood ratio, so discounted rewards under the tilted measure are
plain weighted averages.  Everything here is discretized on the simulation
grid with one exception: jump times inside a grid cell are handled exactly
(the cell's compensator integral is re-split at the jumps and the product
factor uses the pre-jump action), which keeps the weights mean-one for any
admissible control, not just up to O(dt).
"""

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, ConstraintViolationError
from .problem import ControlSpace, PathFeatures, ProblemSpec
from .simulate import (_STREAM_JUMPS, JumpTrajectory, PathEnsemble, TimeGrid,
                       _euler, path_rng)

ESS_FLOOR = 50.0
_INTERVAL_QUAD_NODES = 32


def action_quadrature(control_space: ControlSpace, lambda_total: float,
                      mark_dist: Optional[np.ndarray]):
    """Nodes a_j and weights w_j with sum_j w_j f(a_j) ~ integral f d lambda."""
    if control_space.is_finite:
        m = control_space.n_actions
        probs = (np.full(m, 1.0 / m) if mark_dist is None
                 else np.asarray(mark_dist, dtype=float))
        return control_space.actions, lambda_total * probs
    if mark_dist is not None:
        raise ValueError("interval action sets use the uniform mark density")
    x, w = np.polynomial.legendre.leggauss(_INTERVAL_QUAD_NODES)
    half = 0.5 * (control_space.hi - control_space.lo)
    mid = 0.5 * (control_space.hi + control_space.lo)
    return mid + half * x, lambda_total * 0.5 * w


class IntensityControl:
    """Positive intensity rates bounded by `bound`.

    rate(t, feats, current, candidate) returns per-path rates for jumping
    to the candidate action; `current` is the per-path action in force and
    `candidate` a scalar.  Implementations must stay in (0, bound].
    """

    bound: float

    def rate(self, t: float, feats: Optional[PathFeatures],
             current: np.ndarray, candidate: float):
        raise NotImplementedError


@dataclass
class ConstantIntensity(IntensityControl):
    value: float
    bound: Optional[float] = None

    def __post_init__(self):
        if self.value <= 0:
            raise ValueError("intensity must be positive")
        if self.bound is None:
            self.bound = self.value

    def rate(self, t, feats, current, candidate):
        return self.value


@dataclass
class TwoLevelIntensity(IntensityControl):
    """`high` toward a target set of actions, `low` elsewhere."""

    high: float
    low: float
    target_actions: Optional[Sequence[float]] = None
    target_range: Optional[Sequence[float]] = None
    bound: Optional[float] = None

    def __post_init__(self):
        if min(self.high, self.low) <= 0:
            raise ValueError("intensities must be positive")
        if (self.target_actions is None) == (self.target_range is None):
            raise ValueError("give exactly one of target_actions / target_range")
        if self.bound is None:
            self.bound = max(self.high, self.low)

    def _hits_target(self, candidate: float) -> bool:
        if self.target_actions is not None:
            return bool(np.any(np.abs(np.asarray(self.target_actions, float)
                                      - candidate) <= 1e-12))
        lo, hi = self.target_range
        return lo <= candidate <= hi

    def rate(self, t, feats, current, candidate):
        return self.high if self._hits_target(candidate) else self.low


@dataclass
class FunctionIntensity(IntensityControl):
    fn: Callable
    bound: float = 1.0

    def rate(self, t, feats, current, candidate):
        return self.fn(t, feats, current, candidate)


def _checked_rate(nu: IntensityControl, t: float, feats, current, candidate,
                  n_paths: int, mask: Optional[np.ndarray]) -> np.ndarray:
    arr = np.broadcast_to(
        np.asarray(nu.rate(t, feats, current, candidate), dtype=float),
        (n_paths,))
    probe = arr if mask is None else arr[mask]
    if probe.size and (not np.all(np.isfinite(probe)) or np.any(probe <= 0.0)
                       or np.any(probe > nu.bound * (1.0 + 1e-9))):
        bad = probe[~(np.isfinite(probe) & (probe > 0)
                      & (probe <= nu.bound * (1.0 + 1e-9)))]
        raise ConstraintViolationError(
            f"intensity at t={t:.6g}, candidate={candidate:.6g} left "
            f"(0, {nu.bound}]: e.g. {bad[:3]}")
    return arr


def _slice_features(feats: PathFeatures, p: int) -> PathFeatures:
    return PathFeatures(t=feats.t, state=feats.state[p:p + 1],
                        sup_abs=feats.sup_abs[p:p + 1],
                        mean=feats.mean[p:p + 1])


def _take_features(feats: PathFeatures, idx: np.ndarray) -> PathFeatures:
    return PathFeatures(t=feats.t, state=feats.state[idx],
                        sup_abs=feats.sup_abs[idx], mean=feats.mean[idx])


def _node_index(ensemble: PathEnsemble, t_end: Optional[float]) -> int:
    if t_end is None:
        return ensemble.grid.n_steps
    k = int(round(t_end / ensemble.grid.dt))
    if not (0 < k <= ensemble.grid.n_steps) \
            or abs(ensemble.grid.nodes[k] - t_end) > 1e-9:
        raise ValueError(f"t_end={t_end} is not a grid node")
    return k


def doleans_weights(spec: ProblemSpec, ensemble: PathEnsemble,
                    nu: IntensityControl, t_end: Optional[float] = None,
                    cumulative: bool = False) -> np.ndarray:
    """Likelihood ratios kappa for every path of a randomized ensemble.

    Returns kappa at t_end (default: the full horizon), or the whole
    per-node profile (n_paths, k+1) when cumulative is set.  Exact in the
    jump channel: mean-one for any admissible nu up to Monte Carlo error.
    """
    if ensemble.jumps is None or ensemble.mode != "randomized":
        raise ValueError("doleans_weights needs an ensemble simulated under "
                         "the nominal jump kernel (mode 'randomized')")
    k_end = _node_index(ensemble, t_end)
    grid = ensemble.grid
    nodes, dt = grid.nodes, grid.dt
    n_paths = ensemble.n_paths
    mask = ensemble.valid_mask()
    a_nodes, a_w = action_quadrature(spec.control_space,
                                     ensemble.lambda_total, ensemble.mark_dist)

    # group jump events by grid cell: cell k covers (t_k, t_{k+1}]
    events = [{} for _ in range(k_end)]
    for p, traj in enumerate(ensemble.jumps):
        prev = traj.a0
        for tau, mark in zip(traj.times, traj.marks):
            k = min(int(np.searchsorted(nodes, tau, side="left")) - 1, k_end - 1)
            if 0 <= k < k_end and tau <= nodes[k_end] + 1e-12:
                events[k].setdefault(p, []).append((tau, mark, prev))
            prev = mark

    log_cells = np.zeros((n_paths, k_end))
    for k in range(k_end):
        t_k = nodes[k]
        feats = ensemble.features_at(k)
        cur = ensemble.controls[:, k]
        rates = np.empty((n_paths, a_nodes.size))
        for j, a_j in enumerate(a_nodes):
            rates[:, j] = _checked_rate(nu, t_k, feats, cur, float(a_j),
                                        n_paths, mask)
        log_cells[:, k] = (ensemble.lambda_total - rates @ a_w) * dt
        if not events[k]:
            continue
        # exact treatment of cells containing jumps: re-split the compensator
        # integral at the jump times and take the product factors with the
        # pre-jump action; everything batched over this cell's events
        seg_pidx, seg_act, seg_len = [], [], []
        jmp_pidx, jmp_prev, jmp_mark = [], [], []
        for p, evs in events[k].items():
            if not mask[p]:
                continue
            bounds = [t_k] + [e[0] for e in evs] + [nodes[k + 1]]
            acts = [cur[p]] + [e[1] for e in evs]
            for i, a_seg in enumerate(acts):
                seg_pidx.append(p)
                seg_act.append(a_seg)
                seg_len.append(bounds[i + 1] - bounds[i])
            for tau, mark, prev in evs:
                jmp_pidx.append(p)
                jmp_prev.append(prev)
                jmp_mark.append(mark)
        if not jmp_pidx:
            continue
        seg_pidx = np.asarray(seg_pidx, dtype=np.intp)
        seg_act = np.asarray(seg_act, dtype=float)
        seg_len = np.asarray(seg_len, dtype=float)
        jmp_pidx = np.asarray(jmp_pidx, dtype=np.intp)
        jmp_prev = np.asarray(jmp_prev, dtype=float)
        jmp_mark = np.asarray(jmp_mark, dtype=float)

        feats_seg = _take_features(feats, seg_pidx)
        integ = np.zeros(seg_pidx.size)
        for a_j, w in zip(a_nodes, a_w):
            integ += w * _checked_rate(nu, t_k, feats_seg, seg_act,
                                       float(a_j), seg_pidx.size, None)
        corr = np.zeros(n_paths)
        np.add.at(corr, seg_pidx,
                  seg_len * (ensemble.lambda_total - integ))

        feats_jmp = _take_features(feats, jmp_pidx)
        if spec.control_space.is_finite:
            logs = np.empty(jmp_pidx.size)
            for a_j in a_nodes:
                sel = jmp_mark == a_j
                if sel.any():
                    logs[sel] = np.log(_checked_rate(
                        nu, t_k, _take_features(feats_jmp, sel),
                        jmp_prev[sel], float(a_j), int(sel.sum()), None))
        else:
            logs = np.array([math.log(float(np.asarray(_checked_rate(
                nu, t_k, _slice_features(feats_jmp, i),
                jmp_prev[i:i + 1], float(m), 1, None))[0]))
                for i, m in enumerate(jmp_mark)])
        np.add.at(corr, jmp_pidx, logs)
        touched = np.unique(jmp_pidx)
        log_cells[touched, k] = corr[touched]

    if cumulative:
        out = np.empty((n_paths, k_end + 1))
        out[:, 0] = 0.0
        np.cumsum(log_cells, axis=1, out=out[:, 1:])
        return np.exp(out)
    return np.exp(log_cells.sum(axis=1))


def doleans_exponential(nu: IntensityControl, jumps: JumpTrajectory,
                        path_summary_stream: Optional[Callable],
                        lambda_total: float, mark_dist: Optional[np.ndarray],
                        t_end: float, control_space: ControlSpace,
                        n_time_cells: int = 256) -> float:
    """Likelihood ratio of one jump trajectory.

    path_summary_stream: t -> PathFeatures (left limit) for feedback
    controls; None for controls that ignore the state.  Time variation of
    nu is resolved on n_time_cells internal cells; jump times are exact.
    """
    a_nodes, a_w = action_quadrature(control_space, lambda_total, mark_dist)
    dummy = PathFeatures(t=0.0, state=np.zeros((1, 1)), sup_abs=np.zeros(1),
                         mean=np.zeros((1, 1)))

    def feats_at(t: float) -> PathFeatures:
        return dummy if path_summary_stream is None else path_summary_stream(t)

    times = jumps.times[jumps.times <= t_end + 1e-12]
    marks = jumps.marks[: times.size]
    bounds = np.unique(np.concatenate([np.linspace(0.0, t_end, n_time_cells + 1),
                                       times]))
    log_k = 0.0
    a_cur = jumps.a0
    next_jump = 0
    for i in range(bounds.size - 1):
        s, e = bounds[i], bounds[i + 1]
        feats = feats_at(s)
        integral = sum(w * float(np.asarray(_checked_rate(
            nu, s, feats, np.array([a_cur]), float(a_j), 1, None))[0])
            for a_j, w in zip(a_nodes, a_w))
        log_k += (e - s) * (lambda_total - integral)
        if next_jump < times.size and abs(e - times[next_jump]) <= 1e-12:
            log_k += math.log(float(np.asarray(_checked_rate(
                nu, e, feats_at(e), np.array([a_cur]),
                float(marks[next_jump]), 1, None))[0]))
            a_cur = marks[next_jump]
            next_jump += 1
    return math.exp(log_k)


@dataclass
class ValueEstimate:
    """Monte Carlo estimate of a discounted reward over a finite horizon."""

    value: float
    std_error: float
    horizon: float
    truncation_bound: float
    n_used: int
    n_eff: Optional[float] = None
    degenerate: bool = False
    warnings: List[str] = field(default_factory=list)

    def total_error(self, z: float = 3.0) -> float:
        return z * self.std_error + self.truncation_bound


def discounted_reward_paths(spec: ProblemSpec, ensemble: PathEnsemble,
                            t_end: Optional[float] = None) -> np.ndarray:
    """Per-path left-endpoint quadrature of the discounted running reward.

    Discounting compounds (1 - beta dt) per step, matching the explicit
    backward scheme exactly, so value comparisons between forward
    estimates and solved tables carry no O(dt) discounting mismatch.
    """
    k_end = _node_index(ensemble, t_end)
    dt = ensemble.grid.dt
    nodes = ensemble.grid.nodes
    out = np.zeros(ensemble.n_paths)
    disc = 1.0
    for k in range(k_end):
        feats = ensemble.features_at(k)
        f = np.broadcast_to(np.asarray(
            spec.running_reward(nodes[k], feats, ensemble.controls[:, k]),
            dtype=float), (ensemble.n_paths,))
        out += disc * f * dt
        disc *= 1.0 - spec.beta * dt
    return out


def _finish_estimate(spec, ensemble, weighted, mask, horizon, n_eff=None):
    n_used = int(mask.sum())
    vals = weighted[mask]
    value = float(vals.mean())
    stderr = float(vals.std(ddof=1) / math.sqrt(n_used)) if n_used > 1 else 0.0
    warnings = []
    if int(ensemble.divergent.sum()):
        warnings.append(f"excluded {int(ensemble.divergent.sum())} divergent paths")
    degenerate = False
    if n_eff is not None and n_eff < ESS_FLOOR:
        degenerate = True
        warnings.append(
            f"effective sample size {n_eff:.1f} below {ESS_FLOOR:.0f}: "
            "weights are degenerate, estimate unreliable")
    return ValueEstimate(value=value, std_error=stderr, horizon=horizon,
                         truncation_bound=spec.truncation_bound(horizon),
                         n_used=n_used, n_eff=n_eff, degenerate=degenerate,
                         warnings=warnings)


def estimate_randomized_reward(spec: ProblemSpec, ensemble: PathEnsemble,
                               nu: IntensityControl,
                               t_end: Optional[float] = None) -> ValueEstimate:
    """Discounted reward under the measure tilted by nu (importance weights)."""
    k_end = _node_index(ensemble, t_end)
    horizon = ensemble.grid.nodes[k_end]
    g = discounted_reward_paths(spec, ensemble, horizon)
    kappa = doleans_weights(spec, ensemble, nu, horizon)
    mask = ensemble.valid_mask()
    ks = kappa[mask]
    n_eff = float(ks.sum() ** 2 / (ks ** 2).sum()) if ks.size else 0.0
    return _finish_estimate(spec, ensemble, kappa * g, mask, horizon, n_eff)


def estimate_reward(spec: ProblemSpec, ensemble: PathEnsemble,
                    t_end: Optional[float] = None) -> ValueEstimate:
    """Unweighted discounted reward along the recorded controls."""
    k_end = _node_index(ensemble, t_end)
    horizon = ensemble.grid.nodes[k_end]
    g = discounted_reward_paths(spec, ensemble, horizon)
    return _finish_estimate(spec, ensemble, g, ensemble.valid_mask(), horizon)


def simulate_intensity_pair(spec: ProblemSpec, grid: TimeGrid,
                            nu: IntensityControl, n_paths: int, seed: int,
                            a0: Optional[float] = None,
                            lambda_total: float = 1.0,
                            mark_dist: Optional[np.ndarray] = None
                            ) -> PathEnsemble:
    """Joint simulation of the state and the action process driven by nu.

    The action jumps with kernel nu_t(a) lambda(da); a dominating Poisson
    stream of rate bound * lambda_total is thinned cell by cell, with the
    acceptance rates frozen at each cell's left node (the convention
    doleans_weights uses), so a jump in (t_k, t_{k+1}] reads the node-k
    features and takes effect at node k+1.

    Use this instead of reweighting a nominal ensemble whenever nu sits far
    from the nominal rates: the Doleans weights then degenerate
    exponentially in the horizon (a feedback control at the penalty bound
    is the canonical case) while the direct estimate stays well
    conditioned.  Consumes the jump stream differently from
    simulate_randomized_pair, so give it a seed of its own when
    independence from a nominal ensemble matters.
    """
    cs = spec.control_space
    if a0 is None:
        a0 = float(cs.actions[0]) if cs.is_finite else 0.5 * (cs.lo + cs.hi)
    bound = float(nu.bound)
    if not (math.isfinite(bound) and bound > 0):
        raise ConfigError("intensity control needs a positive finite bound")
    if lambda_total <= 0:
        raise ConfigError("jump intensity must be positive")
    probs = None
    if cs.is_finite:
        probs = (np.full(cs.n_actions, 1.0 / cs.n_actions)
                 if mark_dist is None else np.asarray(mark_dist, dtype=float))
        if probs.shape != (cs.n_actions,) or abs(probs.sum() - 1.0) > 1e-9 \
                or np.any(probs < 0):
            raise ConfigError("mark_dist must be a probability vector over "
                              "the actions")
    elif mark_dist is not None:
        raise ConfigError("interval action sets support the uniform mark "
                          "density only")

    rate_total = bound * float(lambda_total)
    nodes = grid.nodes
    pidx_l, time_l, mark_l, u_l, cell_l, occ_l = [], [], [], [], [], []
    for p in range(n_paths):
        rng = path_rng(seed, p, _STREAM_JUMPS)
        count = int(rng.poisson(rate_total * grid.t_end))
        times = np.sort(rng.uniform(0.0, grid.t_end, count))
        if cs.is_finite:
            marks = rng.choice(cs.actions, size=count, p=probs)
        else:
            marks = rng.uniform(cs.lo, cs.hi, count)
        accept_u = rng.uniform(size=count)
        if count == 0:
            continue
        cells = np.searchsorted(nodes, times, side="left") - 1
        np.clip(cells, 0, grid.n_steps - 1, out=cells)
        pidx_l.append(np.full(count, p, dtype=np.intp))
        time_l.append(times)
        mark_l.append(np.asarray(marks, dtype=float))
        u_l.append(accept_u)
        cell_l.append(cells)
        # position of each arrival among its path's arrivals in the cell
        occ_l.append(np.arange(count) - np.searchsorted(cells, cells,
                                                        side="left"))
    if pidx_l:
        pidx_all = np.concatenate(pidx_l)
        time_all = np.concatenate(time_l)
        mark_all = np.concatenate(mark_l)
        u_all = np.concatenate(u_l)
        cell_all = np.concatenate(cell_l)
        occ_all = np.concatenate(occ_l)
    else:
        pidx_all = np.empty(0, dtype=np.intp)
        time_all = mark_all = u_all = np.empty(0)
        cell_all = occ_all = np.empty(0, dtype=np.intp)
    order = np.lexsort((occ_all, cell_all))
    bounds = np.searchsorted(cell_all[order], np.arange(grid.n_steps + 1))

    current = np.full(n_paths, float(a0))
    acc_times = [[] for _ in range(n_paths)]
    acc_marks = [[] for _ in range(n_paths)]

    def node_actions(k: int, feats: PathFeatures) -> np.ndarray:
        snapshot = current.copy()
        if k >= grid.n_steps:
            return snapshot
        idx = order[bounds[k]:bounds[k + 1]]
        if idx.size:
            # paths that already blew up get no further jumps; they are
            # flagged divergent afterwards and excluded downstream, and
            # their states would only feed garbage into the rate check
            alive = np.isfinite(feats.state).all(axis=1)
            idx = idx[alive[pidx_all[idx]]]
        r = 0
        while True:
            round_idx = idx[occ_all[idx] == r]
            if round_idx.size == 0:
                break
            paths = pidx_all[round_idx]
            cand = mark_all[round_idx]
            rates = np.empty(round_idx.size)
            if cs.is_finite:
                for a_j in cs.actions:
                    sel = cand == a_j
                    if sel.any():
                        sub = paths[sel]
                        rates[sel] = _checked_rate(
                            nu, feats.t, _take_features(feats, sub),
                            current[sub], float(a_j), sub.size, None)
            else:
                for i_e in range(round_idx.size):
                    p = int(paths[i_e])
                    rates[i_e] = float(np.asarray(_checked_rate(
                        nu, feats.t, _slice_features(feats, p),
                        current[p:p + 1], float(cand[i_e]), 1, None))[0])
            accept = u_all[round_idx] * bound < rates
            if accept.any():
                acc = paths[accept]
                current[acc] = cand[accept]
                for i_e in np.flatnonzero(accept):
                    p = int(paths[i_e])
                    acc_times[p].append(float(time_all[round_idx[i_e]]))
                    acc_marks[p].append(float(cand[i_e]))
            r += 1
        return snapshot

    states, dw, controls, divergent, sup_h, mean_h = _euler(
        spec, grid, n_paths, seed, node_actions,
        store_features=not spec.markovian)
    jumps = [JumpTrajectory(times=np.asarray(acc_times[p], dtype=float),
                            marks=np.asarray(acc_marks[p], dtype=float),
                            t_end=float(grid.t_end), a0=float(a0))
             for p in range(n_paths)]
    return PathEnsemble(grid=grid, states=states, brownian_increments=dw,
                        controls=controls, divergent=divergent,
                        mode="intensity", seed=seed, jumps=jumps,
                        a0=float(a0), lambda_total=float(lambda_total),
                        mark_dist=None if mark_dist is None
                        else np.asarray(mark_dist, dtype=float),
                        sup_abs=sup_h, mean=mean_h)


def random_intensity_controls(control_space: ControlSpace, bound: float,
                              count: int, seed: int,
                              state_feedback: bool = False
                              ) -> List[FunctionIntensity]:
    """Reproducible admissible controls for martingale and dual spot checks.

    Rates live in [0.05 bound, 0.95 bound]; smooth in time and candidate,
    optionally reading the current state.
    """
    rng = np.random.Generator(np.random.Philox(
        key=np.array([seed & 0xFFFFFFFFFFFFFFFF, 0x52414E44], dtype=np.uint64)))
    out = []
    for _ in range(count):
        lo_frac = rng.uniform(0.05, 0.3)
        span = rng.uniform(0.1, min(0.9 - lo_frac, 0.6))
        om = rng.uniform(0.0, 3.0)
        al = rng.uniform(0.0, 2.0)
        ga = rng.uniform(0.0, 1.0)
        sd = rng.uniform(0.2, 0.8) if state_feedback else 0.0

        def fn(t, feats, cur, cand, _p=(lo_frac, span, om, al, ga, sd)):
            lo_frac, span, om, al, ga, sd = _p
            phase = om * t + al * cand + ga * np.asarray(cur, dtype=float)
            if sd:
                phase = phase + sd * feats.state[:, 0]
            u = 0.5 * (1.0 + np.sin(phase))
            return bound * (lo_frac + span * u)

        out.append(FunctionIntensity(fn, bound=bound))
    return out


def intensity_from_config(cfg: dict, control_space: ControlSpace
                          ) -> IntensityControl:
    """Build an intensity control from its JSON form."""
    kind = cfg.get("kind")
    try:
        if kind == "constant":
            return ConstantIntensity(float(cfg["value"]),
                                     bound=cfg.get("bound"))
        if kind == "two_level":
            return TwoLevelIntensity(high=float(cfg["high"]),
                                     low=float(cfg["low"]),
                                     target_actions=cfg.get("target_actions"),
                                     target_range=cfg.get("target_range"),
                                     bound=cfg.get("bound"))
        if kind == "feedback_table":
            from .bsde import feedback_intensity_from_file

            return feedback_intensity_from_file(cfg["path"])
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad intensity config: {e}") from e
    raise ConfigError(f"unknown intensity kind {kind!r}")
