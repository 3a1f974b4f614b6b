"""Stationary grid solver used as an independent oracle for the values.

Policy iteration on a uniform box with a monotone upwind discretization:
first-order one-sided differences for the drift, central second
differences for the diffusion, and the sign-split seven-point cross
stencil for the mixed term in two dimensions.  The boundary is Dirichlet
at the myopic value max_a f(x, a) / beta, so boxes must be wide enough
for the boundary error to wash out before the points of interest.
"""

import csv
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .errors import ConfigError
from .problem import ProblemSpec
from .simulate import _diffusion_array, _drift_array

_MARGIN = 0.2


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform tensor grid on a box, flattened in C order."""

    lo: Tuple[float, ...]
    hi: Tuple[float, ...]
    shape: Tuple[int, ...]

    @classmethod
    def from_box(cls, box, dx) -> "SpatialGrid":
        box = np.atleast_2d(np.asarray(box, dtype=float))
        if box.ndim != 2 or box.shape[1] != 2:
            raise ConfigError("box must be (lo, hi) or a sequence of pairs")
        dim = box.shape[0]
        if dim > 2:
            raise ConfigError("grids support one or two dimensions")
        dxs = np.broadcast_to(np.asarray(dx, dtype=float), (dim,))
        shape = []
        for (lo, hi), h in zip(box, dxs):
            if hi <= lo or h <= 0:
                raise ConfigError("box sides and spacing must be positive")
            n = int(round((hi - lo) / h)) + 1
            if n < 5:
                raise ConfigError("fewer than 5 nodes along one side")
            shape.append(n)
        return cls(lo=tuple(box[:, 0]), hi=tuple(box[:, 1]),
                   shape=tuple(shape))

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def spacing(self) -> Tuple[float, ...]:
        return tuple((h - l) / (n - 1)
                     for l, h, n in zip(self.lo, self.hi, self.shape))

    @property
    def axes(self) -> List[np.ndarray]:
        return [np.linspace(l, h, n)
                for l, h, n in zip(self.lo, self.hi, self.shape)]

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack(mesh, axis=-1).reshape(-1, self.dim)

    def interp(self, values: np.ndarray, x) -> float:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if x.shape != (self.dim,):
            raise ConfigError(f"point has dimension {x.shape}, "
                              f"grid has {self.dim}")
        if self.dim == 1:
            return float(np.interp(x[0], self.axes[0], values.ravel()))
        from scipy.interpolate import RegularGridInterpolator

        f = RegularGridInterpolator(self.axes, values.reshape(self.shape))
        return float(f(x)[0])


@dataclass
class HJBSolution:
    grid: SpatialGrid
    values: np.ndarray
    policy_idx: np.ndarray
    actions: np.ndarray
    beta: float
    sweeps: int
    sweep_means: List[float]
    converged: bool
    cross_monotone: Optional[bool]

    def value_at(self, x) -> float:
        return self.grid.interp(self.values, x)


def compare_value(solution: HJBSolution, x) -> float:
    """Interpolated grid value at x (for checks against path estimates)."""
    return solution.value_at(x)


def _coefficient_tables(spec: ProblemSpec, grid: SpatialGrid,
                        actions: np.ndarray):
    pts = grid.points()
    feats = spec.point_features(pts)
    drifts, amats, rewards = [], [], []
    for a in actions:
        drifts.append(_drift_array(spec, 0.0, feats, float(a)))
        sg = _diffusion_array(spec, 0.0, feats, float(a))
        amats.append(np.einsum("pij,pkj->pik", sg, sg))
        rewards.append(np.broadcast_to(np.asarray(
            spec.running_reward(0.0, feats, float(a)), dtype=float),
            (pts.shape[0],)).copy())
    return np.stack(drifts), np.stack(amats), np.stack(rewards)


def _interior_and_boundary(grid: SpatialGrid):
    shape = grid.shape
    if grid.dim == 1:
        n = shape[0]
        q = np.arange(1, n - 1)
        bd = np.array([0, n - 1])
        return q, bd
    nx, ny = shape
    ii, jj = np.meshgrid(np.arange(1, nx - 1), np.arange(1, ny - 1),
                         indexing="ij")
    q = (ii * ny + jj).ravel()
    mask = np.ones(shape, dtype=bool)
    mask[1:-1, 1:-1] = False
    return q, np.flatnonzero(mask.ravel())


def _stencil_1d(grid, beta, drift, amat, q):
    h = grid.spacing[0]
    s = amat[:, q, 0, 0]
    b = drift[:, q, 0]
    bp = np.maximum(b, 0.0)
    bm = np.maximum(-b, 0.0)
    center = beta + s / h ** 2 + (bp + bm) / h
    east = -(s / (2 * h ** 2) + bp / h)
    west = -(s / (2 * h ** 2) + bm / h)
    cols = [q, q + 1, q - 1]
    return [center, east, west], cols, None


def _stencil_2d(grid, beta, drift, amat, q):
    h1, h2 = grid.spacing
    ny = grid.shape[1]
    a11 = amat[:, q, 0, 0]
    a22 = amat[:, q, 1, 1]
    a12 = amat[:, q, 0, 1]
    b1 = drift[:, q, 0]
    b2 = drift[:, q, 1]
    b1p, b1m = np.maximum(b1, 0.0), np.maximum(-b1, 0.0)
    b2p, b2m = np.maximum(b2, 0.0), np.maximum(-b2, 0.0)
    cp = np.abs(a12) / (2 * h1 * h2)
    pos = a12 >= 0

    center = (beta + a11 / h1 ** 2 + a22 / h2 ** 2 - 2 * cp
              + (b1p + b1m) / h1 + (b2p + b2m) / h2)
    east = -(a11 / (2 * h1 ** 2) + b1p / h1 - cp)
    west = -(a11 / (2 * h1 ** 2) + b1m / h1 - cp)
    north = -(a22 / (2 * h2 ** 2) + b2p / h2 - cp)
    south = -(a22 / (2 * h2 ** 2) + b2m / h2 - cp)
    ne = np.where(pos, -cp, 0.0)
    sw = np.where(pos, -cp, 0.0)
    nw = np.where(pos, 0.0, -cp)
    se = np.where(pos, 0.0, -cp)
    vals = [center, east, west, north, south, ne, sw, nw, se]
    cols = [q, q + ny, q - ny, q + 1, q - 1,
            q + ny + 1, q - ny - 1, q - ny + 1, q + ny - 1]
    monotone = bool(np.all(a11 / (2 * h1 ** 2) - cp >= -1e-12)
                    and np.all(a22 / (2 * h2 ** 2) - cp >= -1e-12))
    return vals, cols, monotone


def _action_matrices(spec, grid, actions, drift, amat, q, bd):
    """One (beta I - L_a) matrix per action, identity on the boundary."""
    n = grid.n_nodes
    if grid.dim == 1:
        vals, cols, monotone = _stencil_1d(grid, spec.beta, drift, amat, q)
    else:
        vals, cols, monotone = _stencil_2d(grid, spec.beta, drift, amat, q)
    rows = np.concatenate([q] * len(cols))
    cols_flat = np.concatenate(cols)
    bd_rows = bd
    out = []
    for a in range(len(actions)):
        data = np.concatenate([v[a] for v in vals])
        mat = sparse.coo_matrix(
            (np.concatenate([data, np.ones(bd_rows.size)]),
             (np.concatenate([rows, bd_rows]),
              np.concatenate([cols_flat, bd_rows]))),
            shape=(n, n)).tocsr()
        out.append(mat)
    return out, monotone


def solve_hjb_fd(spec: ProblemSpec, box, dx,
                 actions: Optional[Sequence[float]] = None,
                 max_sweeps: int = 60, n_interval_actions: int = 33
                 ) -> HJBSolution:
    """Policy iteration for the stationary equation on a box.

    Coefficients are read at t = 0, so drift, diffusion and reward must
    not depend on time or path history.  The box has to contain the
    problem's initial point with at least a 20% margin per side.
    """
    if not spec.markovian:
        raise ConfigError("grid solves need state-dependent coefficients only")
    grid = SpatialGrid.from_box(box, dx)
    if grid.dim != spec.dim_state:
        raise ConfigError(f"grid dimension {grid.dim} does not match "
                          f"the state dimension {spec.dim_state}")
    for x0_d, lo, hi in zip(spec.x0, grid.lo, grid.hi):
        if min(x0_d - lo, hi - x0_d) < _MARGIN * (hi - lo) - 1e-12:
            raise ConfigError(
                f"x0={x0_d:g} sits within {100 * _MARGIN:.0f}% of the "
                f"boundary of [{lo:g}, {hi:g}]; widen the box")

    cs = spec.control_space
    if actions is None:
        acts = cs.actions if cs.is_finite else cs.discretize(
            n_interval_actions)
    else:
        acts = np.asarray(actions, dtype=float)
    drift, amat, reward = _coefficient_tables(spec, grid, acts)
    q, bd = _interior_and_boundary(grid)
    mats, monotone = _action_matrices(spec, grid, acts, drift, amat, q, bd)

    u_bd = reward.max(axis=0) / spec.beta
    pol = reward[:, q].argmax(axis=0)
    rhs = np.empty(grid.n_nodes)
    rhs[bd] = u_bd[bd]

    sweep_means: List[float] = []
    converged = False
    u = np.zeros(grid.n_nodes)
    u_prev = None
    sweeps = 0
    for _ in range(max_sweeps):
        sweeps += 1
        m_pol = sparse.vstack(
            [mats[a][q[pol == a]] for a in range(len(acts))]).tocsr()
        order = np.concatenate(
            [q[pol == a] for a in range(len(acts))])
        m_coo = m_pol.tocoo()
        row_map = order[m_coo.row]
        mat = sparse.coo_matrix(
            (np.concatenate([m_coo.data, np.ones(bd.size)]),
             (np.concatenate([row_map, bd]),
              np.concatenate([m_coo.col, bd]))),
            shape=(grid.n_nodes, grid.n_nodes)).tocsc()
        rhs[q] = reward[pol, q]
        u = spsolve(mat, rhs)
        sweep_means.append(float(u.mean()))
        # ties at symmetry points make the policy flip forever while the
        # value is already fixed, so value stagnation also counts as done
        if u_prev is not None and np.max(np.abs(u - u_prev)) \
                <= 1e-11 * (1.0 + np.max(np.abs(u))):
            converged = True
            break
        u_prev = u
        scores = np.stack([reward[a, q] - mats[a][q] @ u
                           for a in range(len(acts))])
        new_pol = scores.argmax(axis=0)
        if np.array_equal(new_pol, pol):
            converged = True
            break
        pol = new_pol

    policy_full = np.zeros(grid.n_nodes, dtype=np.int64)
    policy_full[q] = pol
    policy_full[bd] = reward[:, bd].argmax(axis=0)
    return HJBSolution(grid=grid, values=u.reshape(grid.shape),
                       policy_idx=policy_full.reshape(grid.shape),
                       actions=np.asarray(acts, dtype=float), beta=spec.beta,
                       sweeps=sweeps, sweep_means=sweep_means,
                       converged=converged,
                       cross_monotone=monotone)


def grid_to_csv(solution: HJBSolution, path) -> None:
    """One row per node: coordinates, value, argmax action."""
    grid = solution.grid
    pts = grid.points()
    vals = solution.values.ravel()
    acts = solution.actions[solution.policy_idx.ravel()]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(grid.dim)] + ["value", "action"])
        for p in range(pts.shape[0]):
            w.writerow([repr(float(c)) for c in pts[p]]
                       + [repr(float(vals[p])), repr(float(acts[p]))])


def hjb_residual(solution: HJBSolution, spec: ProblemSpec) -> float:
    """Sup-norm of beta u - max_a (f + L_a u) over the interior."""
    grid = solution.grid
    acts = solution.actions
    drift, amat, reward = _coefficient_tables(spec, grid, acts)
    q, bd = _interior_and_boundary(grid)
    mats, _ = _action_matrices(spec, grid, acts, drift, amat, q, bd)
    u = solution.values.ravel()
    defect = np.stack([mats[a][q] @ u - reward[a, q]
                       for a in range(len(acts))])
    return float(np.abs(defect.min(axis=0)).max())
