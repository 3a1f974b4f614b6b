import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rbsde.problem import (
    ControlSpace,
    ProblemSpec,
    default_bdg_constant,
    growth_constants,
    load_problem_config,
    validate_problem,
)


def test_default_bdg_constant_pinned_at_two():
    assert default_bdg_constant(2.0) == 2.0
    assert default_bdg_constant(1.0) == 2.0  # p < 2 routes through the p = 2 constant
    # p = 4: (4/3)^4 * 4^2
    assert default_bdg_constant(4.0) == pytest.approx((4 / 3) ** 4 * 16.0)


# Hand-checked reference pairs (C_bar, beta_bar) for C_2 = 2.
GROWTH_CASES = [
    (2.0, 0.0, 4.0, 1.0),
    (2.0, 1.0, 36.0, 21.0),
    (1.0, 1.0, 6.0, 10.5),
]


@pytest.mark.parametrize("p,L,c_bar,beta_bar", GROWTH_CASES)
def test_growth_constants_reference_values(p, L, c_bar, beta_bar):
    g = growth_constants(p, L, c_bdg=2.0)
    assert g.c_bar == pytest.approx(c_bar, rel=1e-12)
    assert g.beta_bar == pytest.approx(beta_bar, rel=1e-12)


def test_growth_constants_p_below_two_is_power_of_p2_constant():
    # The p < 2 constant is the p = 2 constant raised to p/2.
    g2 = growth_constants(2.0, 1.5, c_bdg=2.0)
    g1 = growth_constants(1.0, 1.5, c_bdg=2.0)
    assert g1.c_bar == pytest.approx(g2.c_bar ** 0.5, rel=1e-12)
    # but the decay exponent keeps the p/2 prefactor
    assert g1.beta_bar == pytest.approx(0.5 * (1 + 4 * (1 + 4) * 1.5 ** 2), rel=1e-12)


def test_growth_constants_rejects_bad_p():
    with pytest.raises(ValueError):
        growth_constants(0.0, 1.0)
    with pytest.raises(ValueError):
        growth_constants(-1.0, 1.0)


@given(
    p=st.floats(min_value=0.25, max_value=6.0),
    l1=st.floats(min_value=0.0, max_value=4.0),
    dl=st.floats(min_value=0.0, max_value=3.0),
)
@settings(max_examples=60, deadline=None)
def test_growth_constants_monotone_in_lipschitz_bound(p, l1, dl):
    a = growth_constants(p, l1)
    b = growth_constants(p, l1 + dl)
    assert b.c_bar >= a.c_bar - 1e-12
    assert b.beta_bar >= a.beta_bar - 1e-12


@given(p=st.floats(min_value=0.25, max_value=6.0))
@settings(max_examples=40, deadline=None)
def test_growth_constants_driftless_decay_is_half_p(p):
    # L = 0 kills the Lipschitz contribution: beta_bar = p/2 exactly.
    g = growth_constants(p, 0.0)
    assert g.beta_bar == pytest.approx(p / 2, rel=1e-12)


def _ou_spec(beta=1.0, regime="A", **kw):
    base = dict(
        dim_state=1,
        dim_noise=1,
        x0=np.array([1.0]),
        control_space=ControlSpace.finite([0.0]),
        drift=lambda t, s, a: -s.state[:, 0],
        diffusion=lambda t, s, a: np.ones(s.state.shape[0]),
        running_reward=lambda t, s, a: -np.minimum(s.state[:, 0] ** 2, 36.0),
        beta=beta,
        regime=regime,
        lipschitz=1.0,
    )
    if regime == "A":
        base["reward_bound"] = 36.0
    base.update(kw)
    return ProblemSpec(**base)


def test_problem_rejects_nonpositive_discount():
    with pytest.raises(ValueError):
        _ou_spec(beta=0.0)


def test_value_bound_exposed_under_bounded_rewards():
    spec = _ou_spec(beta=0.5)
    assert spec.value_bound() == pytest.approx(72.0)


def test_tail_rate_positive_only_when_discount_beats_growth():
    # r = 2, L = 1, C_2 = 2 gives beta_bar = 21; beta = 10 is not enough.
    bad = _ou_spec(beta=10.0, regime="A'", reward_bound=None,
                   reward_growth=(1.0, 2.0))
    report = validate_problem(bad, n_probe=64, seed=7)
    assert not report.valid
    assert any("beta" in m for m in report.failures)
    ok = _ou_spec(beta=22.0, regime="A'", reward_bound=None,
                  reward_growth=(1.0, 2.0))
    assert ok.tail_rate() == pytest.approx(1.0)
    assert validate_problem(ok, n_probe=64, seed=7).valid


def test_validate_flags_understated_lipschitz_constant():
    # drift slope is 3 but the spec claims 1
    spec = _ou_spec(drift=lambda t, s, a: -3.0 * s.state[:, 0])
    report = validate_problem(spec, n_probe=256, seed=11)
    assert not report.valid
    assert report.empirical_lipschitz > 1.05
    assert any("lipschitz" in m.lower() for m in report.failures)


def test_validate_flags_reward_outside_declared_bound():
    spec = _ou_spec(running_reward=lambda t, s, a: -s.state[:, 0] ** 2)
    report = validate_problem(spec, n_probe=256, seed=11)
    assert not report.valid


def test_validate_passes_honest_spec():
    report = validate_problem(_ou_spec(), n_probe=256, seed=11)
    assert report.valid
    assert report.failures == []


def test_control_space_finite_requires_actions():
    with pytest.raises(ValueError):
        ControlSpace.finite([])
    cs = ControlSpace.finite([-1.0, 1.0])
    assert cs.n_actions == 2
    assert cs.is_finite


def test_control_space_interval_orientation():
    with pytest.raises(ValueError):
        ControlSpace.interval(1.0, -1.0)
    cs = ControlSpace.interval(-1.0, 1.0)
    assert not cs.is_finite


def test_problem_config_roundtrip(tmp_path):
    cfg = {
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
    path = tmp_path / "prob.json"
    path.write_text(json.dumps(cfg))
    spec = load_problem_config(path)
    assert spec.beta == 1.0
    assert spec.control_space.n_actions == 2
    assert spec.value_bound() == pytest.approx(6.0)

    # expression coefficients are evaluated on path batches
    from rbsde.problem import PathFeatures

    s = PathFeatures(t=0.0, state=np.array([[2.0], [-3.0]]),
                     sup_abs=np.array([2.0, 3.0]),
                     mean=np.array([[2.0], [-3.0]]))
    np.testing.assert_allclose(spec.drift(0.0, s, np.array([1.0, -1.0])), [1.0, -1.0])
    np.testing.assert_allclose(spec.running_reward(0.0, s, None), [-2.0, -3.0])


def test_problem_config_rejects_unknown_regime(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"dim_state": 1, "dim_noise": 1, "beta": 1.0,
                                "x0": [0.0], "regime": "B",
                                "control_space": {"kind": "finite", "actions": [0.0]},
                                "coefficients": {"drift": "0.0", "diffusion": "1.0",
                                                 "running_reward": "1.0"}}))
    from rbsde.errors import ConfigError

    with pytest.raises(ConfigError):
        load_problem_config(path)
