import numpy as np
import pytest
import scipy.stats

from rbsde.errors import ConfigError, DivergentPathsError
from rbsde.problem import ControlSpace, ProblemSpec
from rbsde.simulate import (
    PathEnsemble,
    TimeGrid,
    check_moment_bound,
    ensemble_to_csv,
    load_ensemble,
    save_ensemble,
    simulate_controlled_paths,
    simulate_marked_point_process,
    simulate_randomized_pair,
)


def make_spec(drift, diffusion, reward=None, dim=1, beta=1.0, bound=10.0,
              actions=(0.0,), x0=None, lipschitz=2.0, markovian=True):
    reward = reward or (lambda t, s, a: np.zeros(s.n_paths))
    return ProblemSpec(
        dim_state=dim, dim_noise=dim,
        drift=drift, diffusion=diffusion, running_reward=reward,
        beta=beta, x0=np.zeros(dim) if x0 is None else np.asarray(x0, float),
        control_space=ControlSpace.finite(list(actions)),
        reward_bound=bound, lipschitz=lipschitz, markovian=markovian)


OU = dict(drift=lambda t, s, a: -s.state[:, 0],
          diffusion=lambda t, s, a: np.ones(s.n_paths))


def test_time_grid_rounds_step_count_up():
    g = TimeGrid.with_dt(1.0, 0.3)
    assert g.n_steps == 4
    assert g.dt == pytest.approx(0.25)
    np.testing.assert_allclose(g.nodes, [0.0, 0.25, 0.5, 0.75, 1.0])
    with pytest.raises(ValueError):
        TimeGrid(t_end=-1.0, n_steps=3)


def test_deterministic_euler_matches_closed_product():
    # dX = -X dt with sigma = 0 is exactly the product (1 - dt)^k
    spec = make_spec(drift=lambda t, s, a: -s.state[:, 0],
                     diffusion=lambda t, s, a: np.zeros(s.n_paths),
                     x0=[1.0])
    grid = TimeGrid(t_end=1.0, n_steps=10)
    ens = simulate_controlled_paths(spec, grid, policy=0.0, n_paths=3, seed=5)
    expected = (1.0 - 0.1) ** np.arange(11)
    for p in range(3):
        np.testing.assert_allclose(ens.states[p, :, 0], expected, rtol=1e-14)


def test_stored_increments_reproduce_the_paths():
    # re-running Euler in the test from the stored increments must be bit-exact
    spec = make_spec(**OU, x0=[0.7])
    grid = TimeGrid(t_end=2.0, n_steps=40)
    ens = simulate_controlled_paths(spec, grid, policy=0.0, n_paths=8, seed=21)
    x = np.full(8, 0.7)
    for k in range(grid.n_steps):
        x = x + (-x) * grid.dt + ens.brownian_increments[:, k, 0]
        np.testing.assert_array_equal(x, ens.states[:, k + 1, 0])


def test_brownian_increments_match_declared_law():
    spec = make_spec(**OU)
    grid = TimeGrid(t_end=1.0, n_steps=20)
    ens = simulate_controlled_paths(spec, grid, policy=0.0, n_paths=4000, seed=1)
    dw = ens.brownian_increments[:, :, 0].ravel()
    n = dw.size
    assert abs(dw.mean()) < 4.0 * np.sqrt(grid.dt / n)
    assert abs(dw.var() - grid.dt) < 4.0 * grid.dt * np.sqrt(2.0 / n)
    # normality of the standardized sample
    p = scipy.stats.kstest(dw / np.sqrt(grid.dt), "norm").pvalue
    assert p > 1e-3


def test_path_prefix_is_independent_of_ensemble_size():
    spec = make_spec(**OU)
    grid = TimeGrid(t_end=1.0, n_steps=12)
    big = simulate_randomized_pair(spec, grid, n_paths=60, seed=9)
    small = simulate_randomized_pair(spec, grid, n_paths=25, seed=9)
    np.testing.assert_array_equal(big.states[:25], small.states)
    np.testing.assert_array_equal(big.controls[:25], small.controls)
    for a, b in zip(big.jumps[:25], small.jumps):
        np.testing.assert_array_equal(a.times, b.times)
        np.testing.assert_array_equal(a.marks, b.marks)


def test_strong_refinement_of_the_scheme():
    # multiplicative noise: strong error should shrink by >= ~sqrt(2) per halving
    rng_spec = make_spec(drift=lambda t, s, a: -s.state[:, 0],
                         diffusion=lambda t, s, a: 0.5 * s.state[:, 0],
                         x0=[1.0])
    fine = TimeGrid(t_end=1.0, n_steps=160)
    ens = simulate_controlled_paths(rng_spec, fine, policy=0.0, n_paths=3000, seed=3)
    dw = ens.brownian_increments[:, :, 0]

    def euler(increments, n_steps):
        dt = 1.0 / n_steps
        x = np.ones(increments.shape[0])
        for k in range(n_steps):
            x = x - x * dt + 0.5 * x * increments[:, k]
        return x

    x_fine = ens.states[:, -1, 0]
    levels = {}
    for n_steps in (40, 80):
        block = 160 // n_steps
        agg = dw.reshape(-1, n_steps, block).sum(axis=2)
        levels[n_steps] = np.mean(np.abs(euler(agg, n_steps) - x_fine))
    ratio = levels[40] / levels[80]
    assert 1.25 <= ratio <= 3.0


def test_marked_point_process_statistics():
    cs = ControlSpace.finite([-1.0, 1.0])
    lam, t_end, n = 2.0, 3.0, 4000
    jumps = simulate_marked_point_process(cs, lam, np.array([0.3, 0.7]),
                                          t_end, seed=13, n_paths=n, a0=-1.0)
    counts = np.array([j.times.size for j in jumps])
    mean, var = counts.mean(), counts.var()
    assert abs(mean - lam * t_end) < 4.0 * np.sqrt(lam * t_end / n)
    assert abs(var / (lam * t_end) - 1.0) < 0.15
    all_times = np.concatenate([j.times for j in jumps])
    assert np.all((all_times > 0) & (all_times <= t_end))
    for j in jumps[:50]:
        assert np.all(np.diff(j.times) >= 0)
    # conditional on the count, times are uniform order statistics
    p = scipy.stats.kstest(all_times / t_end, "uniform").pvalue
    assert p > 1e-3
    all_marks = np.concatenate([j.marks for j in jumps])
    frac = np.mean(all_marks > 0)
    se = np.sqrt(0.3 * 0.7 / all_marks.size)
    assert abs(frac - 0.7) < 4 * se


def test_interval_marks_are_uniform():
    cs = ControlSpace.interval(2.0, 4.0)
    jumps = simulate_marked_point_process(cs, 1.0, None, 5.0, seed=4,
                                          n_paths=800, a0=3.0)
    marks = np.concatenate([j.marks for j in jumps])
    assert np.all((marks >= 2.0) & (marks <= 4.0))
    p = scipy.stats.kstest((marks - 2.0) / 2.0, "uniform").pvalue
    assert p > 1e-3


def test_randomized_actions_follow_the_jump_record():
    spec = make_spec(**OU, actions=(-1.0, 1.0))
    grid = TimeGrid(t_end=2.0, n_steps=25)
    ens = simulate_randomized_pair(spec, grid, n_paths=40, seed=7, a0=-1.0)
    for p in range(40):
        traj = ens.jumps[p]
        for k, t in enumerate(grid.nodes):
            idx = np.searchsorted(traj.times, t, side="right") - 1
            want = -1.0 if idx < 0 else traj.marks[idx]
            assert ens.controls[p, k] == want
    assert np.all(ens.controls[:, 0] == -1.0)


def test_jumps_and_brownian_are_uncorrelated():
    spec = make_spec(**OU, actions=(-1.0, 1.0))
    grid = TimeGrid(t_end=2.0, n_steps=20)
    ens = simulate_randomized_pair(spec, grid, n_paths=4000, seed=17,
                                   lambda_total=2.0)
    counts = np.array([j.times.size for j in ens.jumps], dtype=float)
    w_end = ens.brownian_increments[:, :, 0].sum(axis=1)
    corr = np.corrcoef(counts, w_end)[0, 1]
    assert abs(corr) < 3.5 / np.sqrt(4000)


def test_moment_bound_holds_for_honest_ou():
    spec = make_spec(**OU, x0=[1.0], lipschitz=1.0)
    grid = TimeGrid(t_end=3.0, n_steps=60)
    ens = simulate_controlled_paths(spec, grid, policy=0.0, n_paths=2000, seed=2)
    for p in (1.0, 2.0, 4.0):
        rep = check_moment_bound(ens, p, spec)
        assert rep.passed, rep
        assert rep.empirical.shape == rep.bound.shape


def test_moment_bound_detects_understated_growth():
    # drift 2x blows up but the spec claims L = 0 (no growth)
    spec = make_spec(drift=lambda t, s, a: 2.0 * s.state[:, 0],
                     diffusion=lambda t, s, a: np.zeros(s.n_paths),
                     x0=[1.0], lipschitz=0.0)
    grid = TimeGrid(t_end=3.0, n_steps=60)
    ens = simulate_controlled_paths(spec, grid, policy=0.0, n_paths=200, seed=2)
    rep = check_moment_bound(ens, 2.0, spec)
    assert not rep.passed


def test_divergent_ensembles_abort():
    spec = make_spec(drift=lambda t, s, a: s.state[:, 0] ** 3,
                     diffusion=lambda t, s, a: np.zeros(s.n_paths),
                     x0=[2.0])
    grid = TimeGrid(t_end=5.0, n_steps=10)
    with pytest.raises(DivergentPathsError):
        simulate_controlled_paths(spec, grid, policy=0.0, n_paths=50, seed=1)


def test_binary_cache_roundtrip(tmp_path):
    spec = make_spec(**OU, actions=(-1.0, 1.0))
    grid = TimeGrid(t_end=1.0, n_steps=8)
    ens = simulate_randomized_pair(spec, grid, n_paths=12, seed=3)
    path = tmp_path / "ens.bin"
    save_ensemble(ens, path)
    raw = path.read_bytes()
    assert raw[:16] == b"RBSDE-ENS-v1\x00\x00\x00\x00"
    back = load_ensemble(path)
    np.testing.assert_array_equal(back.states, ens.states)
    np.testing.assert_array_equal(back.brownian_increments,
                                  ens.brownian_increments)
    np.testing.assert_array_equal(back.controls, ens.controls)
    assert back.grid == ens.grid
    assert back.mode == ens.mode and back.seed == ens.seed
    for a, b in zip(back.jumps, ens.jumps):
        np.testing.assert_array_equal(a.times, b.times)
        np.testing.assert_array_equal(a.marks, b.marks)

    (tmp_path / "junk.bin").write_bytes(b"NOT-A-CACHE" + raw[11:])
    with pytest.raises(ConfigError):
        load_ensemble(tmp_path / "junk.bin")


def test_csv_export_rows(tmp_path):
    spec = make_spec(**OU)
    grid = TimeGrid(t_end=0.5, n_steps=5)
    ens = simulate_controlled_paths(spec, grid, policy=0.0, n_paths=3, seed=3)
    out = tmp_path / "ens.csv"
    ensemble_to_csv(ens, out)
    lines = out.read_text().strip().splitlines()
    assert lines[0].split(",")[:4] == ["path", "node", "t", "x0"]
    assert len(lines) == 1 + 3 * 6


def test_policy_receives_running_features():
    seen = {}

    def policy(t, feats):
        seen.setdefault("n", feats.n_paths)
        return np.where(feats.state[:, 0] > 0, -1.0, 1.0)

    spec = make_spec(**OU, actions=(-1.0, 1.0))
    grid = TimeGrid(t_end=1.0, n_steps=10)
    ens = simulate_controlled_paths(spec, grid, policy, n_paths=30, seed=8)
    assert seen["n"] == 30
    # recorded controls at node k match the policy applied to the node state
    want = np.where(ens.states[:, :-1, 0] > 0, -1.0, 1.0)
    np.testing.assert_array_equal(ens.controls[:, :-1], want)
