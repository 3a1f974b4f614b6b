import numpy as np
import pytest

from rbsde.errors import ConfigError
from rbsde.hjb import compare_value, solve_hjb_fd
from rbsde.problem import problem_from_dict, validate_problem
from rbsde.simulate import TimeGrid, check_moment_bound, \
    simulate_randomized_pair
from rbsde.zoo import zoo_get, zoo_list


def test_catalogue_names():
    names = zoo_list()
    assert names == ["constant-reward", "singleton-ou", "bangbang-1d",
                     "controlled-vol-1d", "memory-drift"]


def test_unknown_name_rejected():
    with pytest.raises(ConfigError):
        zoo_get("no-such-problem")


@pytest.mark.parametrize("name", zoo_list())
def test_every_problem_validates(name):
    spec = zoo_get(name).build()
    report = validate_problem(spec, seed=2)
    assert report.valid, report.failures


def test_known_values_and_provenance():
    assert zoo_get("constant-reward").known_value == 2.0
    assert zoo_get("constant-reward").provenance == "closed-form"
    assert zoo_get("singleton-ou").known_value == pytest.approx(-2.0 / 3.0)
    assert zoo_get("controlled-vol-1d").known_value == pytest.approx(
        -0.5, abs=1e-6)
    assert zoo_get("controlled-vol-1d").provenance == "hjb-oracle"
    assert zoo_get("bangbang-1d").provenance == "hjb-oracle"
    for name in zoo_list():
        prob = zoo_get(name)
        if prob.known_value is not None:
            assert prob.oracle


def test_memory_drift_is_marked_as_summary_regression():
    prob = zoo_get("memory-drift")
    assert prob.bsde_stage == "summary-regression"
    assert prob.caveat
    assert prob.known_value is None


def test_singleton_ou_grid_agrees_with_closed_form():
    prob = zoo_get("singleton-ou")
    sol = solve_hjb_fd(prob.build(), box=prob.hjb_box, dx=prob.hjb_dx)
    assert compare_value(sol, 1.0) == pytest.approx(prob.known_value,
                                                    abs=5e-3)


def test_controlled_vol_grid_agrees_with_closed_form():
    prob = zoo_get("controlled-vol-1d")
    sol = solve_hjb_fd(prob.build(), box=prob.hjb_box, dx=prob.hjb_dx)
    assert compare_value(sol, 0.5) == pytest.approx(-0.5, abs=5e-3)


def test_reward_caps_bound_the_tails():
    spec = zoo_get("bangbang-1d").build()
    far = spec.point_features(np.array([[10.0], [-9.0]]))
    np.testing.assert_allclose(
        spec.running_reward(0.0, far, np.array([1.0, 1.0])), -6.0)


def test_memory_drift_simulates_and_respects_moments():
    prob = zoo_get("memory-drift")
    spec = prob.build()
    assert not spec.markovian
    ens = simulate_randomized_pair(spec, TimeGrid.with_dt(4.0, 0.02),
                                   n_paths=2000, seed=9)
    assert ens.sup_abs is not None
    rep = check_moment_bound(ens, p=2, spec=spec)
    assert rep.passed


def test_config_loader_reaches_the_catalogue():
    spec = problem_from_dict({"coefficients": {"zoo": "bangbang-1d"}})
    assert spec.name == "bangbang-1d"
    assert spec.control_space.n_actions == 2
