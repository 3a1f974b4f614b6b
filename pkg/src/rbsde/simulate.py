"""Forward simulation: controlled SDE paths and randomized state/action pairs.

Randomness contract: every path owns two counter-based streams (Philox),
keyed by (master seed, path index, stream tag) with tag 0 for the Brownian
increments and tag 1 for the jump data.  Per-path output therefore never
depends on the ensemble size or the number of worker threads, and ensembles
of different sizes share their common prefix bit-for-bit.
"""

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Union

import numpy as np

from .errors import ConfigError, DivergentPathsError
from .problem import ControlSpace, GrowthConstants, PathFeatures, ProblemSpec, growth_constants

_STREAM_BROWNIAN = 0
_STREAM_JUMPS = 1
_DIVERGENCE_CUTOFF = 1e12
_MAX_DIVERGENT_FRACTION = 1e-3

_MAGIC = b"RBSDE-ENS-v1\x00\x00\x00\x00"


def path_rng(seed: int, path_index: int, stream: int) -> np.random.Generator:
    """The dedicated generator for one path and one stream tag."""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF,
                    (path_index << 1) | stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < ... < t_N = t_end."""

    t_end: float
    n_steps: int

    def __post_init__(self):
        if self.t_end <= 0 or self.n_steps < 1:
            raise ValueError("need t_end > 0 and at least one step")

    @classmethod
    def with_dt(cls, t_end: float, dt_target: float) -> "TimeGrid":
        """Round the step count up so the actual dt never exceeds the target."""
        return cls(t_end=float(t_end),
                   n_steps=max(1, math.ceil(t_end / dt_target - 1e-12)))

    @property
    def dt(self) -> float:
        return self.t_end / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.t_end, self.n_steps + 1)


@dataclass
class JumpTrajectory:
    """One realization of the marked point process driving the action."""

    times: np.ndarray
    marks: np.ndarray
    t_end: float
    a0: float

    def actions_at(self, t: np.ndarray) -> np.ndarray:
        """Right-continuous action value in force at each query time."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.times.size == 0:
            return np.full(t.shape, self.a0)
        idx = np.searchsorted(self.times, t, side="right") - 1
        return np.where(idx < 0, self.a0, self.marks[np.clip(idx, 0, None)])


@dataclass
class PathEnsemble:
    """Simulated batch of paths on a common grid.

    states:              (n_paths, n_steps + 1, dim_state)
    brownian_increments: (n_paths, n_steps, dim_noise)
    controls:            (n_paths, n_steps + 1) action value in force per node
    jumps:               per-path JumpTrajectory (randomized mode only)
    sup_abs / mean:      per-node running features; stored only for
                         path-dependent problems, otherwise rebuilt from the
                         current state on demand
    """

    grid: TimeGrid
    states: np.ndarray
    brownian_increments: np.ndarray
    controls: np.ndarray
    divergent: np.ndarray
    mode: str
    seed: int
    jumps: Optional[List[JumpTrajectory]] = None
    a0: Optional[float] = None
    lambda_total: Optional[float] = None
    mark_dist: Optional[np.ndarray] = None
    sup_abs: Optional[np.ndarray] = None
    mean: Optional[np.ndarray] = None

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def dim_state(self) -> int:
        return self.states.shape[2]

    def features_at(self, k: int) -> PathFeatures:
        x = self.states[:, k, :]
        if self.sup_abs is not None:
            return PathFeatures(t=self.grid.nodes[k], state=x,
                                sup_abs=self.sup_abs[:, k],
                                mean=self.mean[:, k, :])
        return PathFeatures(t=self.grid.nodes[k], state=x,
                            sup_abs=np.linalg.norm(x, axis=1), mean=x)

    def valid_mask(self) -> np.ndarray:
        return ~self.divergent


def _drift_array(spec: ProblemSpec, t: float, feats: PathFeatures,
                 actions) -> np.ndarray:
    out = np.asarray(spec.drift(t, feats, actions), dtype=float)
    n_p, n = feats.n_paths, spec.dim_state
    if out.ndim == 0:
        return np.full((n_p, n), float(out))
    if out.ndim == 1:
        if n == 1:
            return out.reshape(n_p, 1)
        raise ValueError("1-d drift output needs dim_state = 1")
    return np.broadcast_to(out, (n_p, n))


def _diffusion_array(spec: ProblemSpec, t: float, feats: PathFeatures,
                     actions) -> np.ndarray:
    """Normalize to (n_paths, dim_state, dim_noise); 2-d output is diagonal."""
    out = np.asarray(spec.diffusion(t, feats, actions), dtype=float)
    n_p, n, d = feats.n_paths, spec.dim_state, spec.dim_noise
    if out.ndim == 0:
        out = np.full(n_p, float(out))
    if out.ndim == 1:
        if not (n == d == 1):
            raise ValueError("1-d diffusion output needs dim_state = dim_noise = 1")
        return out.reshape(n_p, 1, 1)
    if out.ndim == 2:
        if n != d:
            raise ValueError("diagonal diffusion output needs dim_state = dim_noise")
        diag = np.broadcast_to(out, (n_p, n))
        full = np.zeros((n_p, n, d))
        idx = np.arange(n)
        full[:, idx, idx] = diag
        return full
    return np.broadcast_to(out, (n_p, n, d))


def simulate_marked_point_process(control_space: ControlSpace,
                                  lambda_total: float,
                                  mark_dist: Optional[np.ndarray],
                                  t_end: float, seed: int, n_paths: int,
                                  a0: float) -> List[JumpTrajectory]:
    """Poisson jump times on (0, t_end] with i.i.d. marks in the action set.

    mark_dist: probability vector over the finite actions (None = uniform).
    Interval action sets use the uniform density; other densities are not
    supported.
    """
    if lambda_total <= 0:
        raise ValueError("jump intensity must be positive")
    if control_space.is_finite:
        probs = (np.full(control_space.n_actions, 1.0 / control_space.n_actions)
                 if mark_dist is None else np.asarray(mark_dist, dtype=float))
        if probs.shape != (control_space.n_actions,) or abs(probs.sum() - 1.0) > 1e-9 \
                or np.any(probs < 0):
            raise ValueError("mark_dist must be a probability vector over the actions")
    elif mark_dist is not None:
        raise ValueError("interval action sets support the uniform mark density only")

    out = []
    for p in range(n_paths):
        rng = path_rng(seed, p, _STREAM_JUMPS)
        count = rng.poisson(lambda_total * t_end)
        times = np.sort(rng.uniform(0.0, t_end, count))
        if control_space.is_finite:
            marks = rng.choice(control_space.actions, size=count, p=probs)
        else:
            marks = rng.uniform(control_space.lo, control_space.hi, count)
        out.append(JumpTrajectory(times=times, marks=marks,
                                  t_end=float(t_end), a0=float(a0)))
    return out


def _draw_brownian(n_paths: int, grid: TimeGrid, dim_noise: int,
                   seed: int) -> np.ndarray:
    dw = np.empty((n_paths, grid.n_steps, dim_noise))
    for p in range(n_paths):
        dw[p] = path_rng(seed, p, _STREAM_BROWNIAN).standard_normal(
            (grid.n_steps, dim_noise))
    dw *= math.sqrt(grid.dt)
    return dw


def _euler(spec: ProblemSpec, grid: TimeGrid, n_paths: int, seed: int,
           node_actions: Callable[[int, PathFeatures], np.ndarray],
           store_features: bool):
    n, d = spec.dim_state, spec.dim_noise
    n_steps = grid.n_steps
    dw = _draw_brownian(n_paths, grid, d, seed)
    states = np.empty((n_paths, n_steps + 1, n))
    controls = np.empty((n_paths, n_steps + 1))
    x = np.tile(spec.x0, (n_paths, 1))
    states[:, 0] = x
    sup = np.linalg.norm(x, axis=1)
    mean = x.copy()
    sup_hist = mean_hist = None
    if store_features:
        sup_hist = np.empty((n_paths, n_steps + 1))
        mean_hist = np.empty((n_paths, n_steps + 1, n))
        sup_hist[:, 0], mean_hist[:, 0] = sup, mean
    nodes = grid.nodes
    dt = grid.dt
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_steps):
            feats = PathFeatures(t=nodes[k], state=x, sup_abs=sup, mean=mean)
            a = np.broadcast_to(np.asarray(node_actions(k, feats), dtype=float),
                                (n_paths,))
            controls[:, k] = a
            b = _drift_array(spec, nodes[k], feats, a)
            sg = _diffusion_array(spec, nodes[k], feats, a)
            x = x + b * dt + np.einsum("pnd,pd->pn", sg, dw[:, k])
            states[:, k + 1] = x
            sup = np.maximum(sup, np.linalg.norm(x, axis=1))
            mean = mean + (x - mean) / (k + 2)
            if store_features:
                sup_hist[:, k + 1], mean_hist[:, k + 1] = sup, mean
        feats = PathFeatures(t=nodes[-1], state=x, sup_abs=sup, mean=mean)
        controls[:, n_steps] = np.broadcast_to(
            np.asarray(node_actions(n_steps, feats), dtype=float), (n_paths,))

    finite = np.isfinite(states).all(axis=(1, 2))
    small = np.nanmax(np.abs(np.where(np.isfinite(states), states, 0.0)),
                      axis=(1, 2)) <= _DIVERGENCE_CUTOFF
    divergent = ~(finite & small)
    frac = divergent.mean()
    if frac > _MAX_DIVERGENT_FRACTION:
        raise DivergentPathsError(
            f"{int(divergent.sum())} of {n_paths} paths left the representable "
            f"range ({frac:.2%} > {_MAX_DIVERGENT_FRACTION:.2%})")
    return states, dw, controls, divergent, sup_hist, mean_hist


def simulate_controlled_paths(spec: ProblemSpec, grid: TimeGrid,
                              policy, n_paths: int, seed: int) -> PathEnsemble:
    """Euler scheme under a feedback policy.

    policy: action value, or callable (t, PathFeatures) -> per-path actions.
    The policy is evaluated on the node features before the step's noise is
    applied, so the control on [t_k, t_{k+1}) is predictable.
    """
    if callable(policy):
        node_actions = lambda k, feats: policy(feats.t, feats)
    else:
        const = float(policy)
        node_actions = lambda k, feats: const
    states, dw, controls, divergent, sup_h, mean_h = _euler(
        spec, grid, n_paths, seed, node_actions,
        store_features=not spec.markovian)
    return PathEnsemble(grid=grid, states=states, brownian_increments=dw,
                        controls=controls, divergent=divergent,
                        mode="controlled", seed=seed,
                        sup_abs=sup_h, mean=mean_h)


def simulate_randomized_pair(spec: ProblemSpec, grid: TimeGrid, n_paths: int,
                             seed: int, a0: Optional[float] = None,
                             lambda_total: float = 1.0,
                             mark_dist: Optional[np.ndarray] = None) -> PathEnsemble:
    """Joint simulation of the state and the pure-jump action process.

    The action at node k is the mark of the last jump at or before t_k
    (a0 before the first jump); jump times between nodes take effect at the
    next node.  Jumps never see the Brownian stream and vice versa.
    """
    cs = spec.control_space
    if a0 is None:
        a0 = float(cs.actions[0]) if cs.is_finite else 0.5 * (cs.lo + cs.hi)
    jumps = simulate_marked_point_process(cs, lambda_total, mark_dist,
                                          grid.t_end, seed, n_paths, a0)
    node_vals = np.empty((n_paths, grid.n_steps + 1))
    nodes = grid.nodes
    for p, traj in enumerate(jumps):
        node_vals[p] = traj.actions_at(nodes)
    states, dw, controls, divergent, sup_h, mean_h = _euler(
        spec, grid, n_paths, seed, lambda k, feats: node_vals[:, k],
        store_features=not spec.markovian)
    return PathEnsemble(grid=grid, states=states, brownian_increments=dw,
                        controls=controls, divergent=divergent,
                        mode="randomized", seed=seed, jumps=jumps, a0=a0,
                        lambda_total=float(lambda_total),
                        mark_dist=None if mark_dist is None
                        else np.asarray(mark_dist, dtype=float),
                        sup_abs=sup_h, mean=mean_h)


@dataclass
class MomentReport:
    """Empirical running-sup moments against the analytic envelope."""

    passed: bool
    p: float
    t_nodes: np.ndarray
    empirical: np.ndarray
    stderr: np.ndarray
    bound: np.ndarray
    growth: GrowthConstants
    n_used: int


def check_moment_bound(ensemble: PathEnsemble, p: float, spec: ProblemSpec,
                       c_bdg: Optional[float] = None) -> MomentReport:
    """Compare E[sup_{s<=t} |X_s|^p] to c_bar e^{beta_bar t}(1 + |x0|^p).

    Divergent paths are excluded.  The bound may overflow to +inf for large
    beta_bar t; the comparison stays meaningful (everything passes there).
    """
    g = growth_constants(p, spec.lipschitz,
                         spec.c_bdg if c_bdg is None else c_bdg)
    ok = ensemble.valid_mask()
    states = ensemble.states[ok]
    n_used = states.shape[0]
    if n_used == 0:
        raise DivergentPathsError("no usable paths")
    norms = np.linalg.norm(states, axis=2)
    sup_p = np.maximum.accumulate(norms, axis=1) ** p
    empirical = sup_p.mean(axis=0)
    stderr = sup_p.std(axis=0, ddof=1) / math.sqrt(n_used) if n_used > 1 \
        else np.zeros_like(empirical)
    x0_norm = np.linalg.norm(spec.x0)
    t = ensemble.grid.nodes
    with np.errstate(over="ignore"):
        bound = g.c_bar * np.exp(g.beta_bar * t) * (1.0 + x0_norm ** p)
    passed = bool(np.all(empirical - 3.0 * stderr <= bound))
    return MomentReport(passed=passed, p=p, t_nodes=t, empirical=empirical,
                        stderr=stderr, bound=bound, growth=g, n_used=n_used)


def ensemble_to_csv(ensemble: PathEnsemble, path,
                    max_paths: Optional[int] = None) -> None:
    """One row per (path, node): path, node, t, x0..x{n-1}, control."""
    nodes = ensemble.grid.nodes
    n = ensemble.dim_state
    n_rows = ensemble.n_paths if max_paths is None \
        else min(ensemble.n_paths, int(max_paths))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "node", "t"] + [f"x{i}" for i in range(n)]
                   + ["control"])
        for p in range(n_rows):
            for k in range(nodes.size):
                w.writerow([p, k, repr(float(nodes[k]))]
                           + [repr(float(v)) for v in ensemble.states[p, k]]
                           + [repr(float(ensemble.controls[p, k]))])


def save_ensemble(ensemble: PathEnsemble, path) -> None:
    """Compact binary cache; array payloads are raw little-endian float64/int64."""
    arrays = [("states", ensemble.states),
              ("brownian_increments", ensemble.brownian_increments),
              ("controls", ensemble.controls),
              ("divergent", ensemble.divergent.astype(np.int64))]
    if ensemble.sup_abs is not None:
        arrays += [("sup_abs", ensemble.sup_abs), ("mean", ensemble.mean)]
    if ensemble.jumps is not None:
        offsets = np.zeros(len(ensemble.jumps) + 1, dtype=np.int64)
        for i, j in enumerate(ensemble.jumps):
            offsets[i + 1] = offsets[i] + j.times.size
        times = np.concatenate([j.times for j in ensemble.jumps]) \
            if offsets[-1] else np.zeros(0)
        marks = np.concatenate([j.marks for j in ensemble.jumps]) \
            if offsets[-1] else np.zeros(0)
        arrays += [("jump_offsets", offsets), ("jump_times", times),
                   ("jump_marks", marks)]
    header = {
        "mode": ensemble.mode, "seed": ensemble.seed, "a0": ensemble.a0,
        "lambda_total": ensemble.lambda_total,
        "mark_dist": None if ensemble.mark_dist is None
        else [float(v) for v in ensemble.mark_dist],
        "grid": {"t_end": ensemble.grid.t_end, "n_steps": ensemble.grid.n_steps},
        "arrays": [{"name": name, "shape": list(arr.shape),
                    "dtype": str(arr.dtype)} for name, arr in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_ensemble(path) -> PathEnsemble:
    with open(path, "rb") as fh:
        magic = fh.read(16)
        if magic != _MAGIC:
            raise ConfigError(f"{path} is not an ensemble cache "
                              f"(magic {magic!r})")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        data = {}
        for meta in header["arrays"]:
            count = int(np.prod(meta["shape"])) if meta["shape"] else 1
            arr = np.frombuffer(fh.read(count * np.dtype(meta["dtype"]).itemsize),
                                dtype=meta["dtype"]).reshape(meta["shape"])
            data[meta["name"]] = arr.copy()
    grid = TimeGrid(**header["grid"])
    jumps = None
    if "jump_offsets" in data:
        offsets = data["jump_offsets"]
        jumps = [JumpTrajectory(times=data["jump_times"][offsets[i]:offsets[i + 1]],
                                marks=data["jump_marks"][offsets[i]:offsets[i + 1]],
                                t_end=grid.t_end, a0=header["a0"])
                 for i in range(len(offsets) - 1)]
    return PathEnsemble(grid=grid, states=data["states"],
                        brownian_increments=data["brownian_increments"],
                        controls=data["controls"],
                        divergent=data["divergent"].astype(bool),
                        mode=header["mode"], seed=header["seed"],
                        jumps=jumps, a0=header["a0"],
                        lambda_total=header["lambda_total"],
                        mark_dist=None if header["mark_dist"] is None
                        else np.asarray(header["mark_dist"]),
                        sup_abs=data.get("sup_abs"), mean=data.get("mean"))
