import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import interior_state
from netobserve.integrators import reference_simulate
from netobserve.models import (ContractError, HillNetworkConfig, HillNode, MassSpringConfig, ModelConfigError,
                               SingularGeometryError, Spring, eval_field, eval_field_jacobian,
                               finite_difference_jacobian, hill, linear_model, load_model, make_hill_model,
                               make_mass_spring_model, mass_spring_energy)

BUNDLED = ["h2o2_mini", "hill5", "hill6", "cd_toy", "mass_spring_chain", "linear_diag"]


def test_linear_field_and_jacobian():
    m = linear_model(-np.eye(2))
    np.testing.assert_array_equal(eval_field(m, [1.0, 2.0]), [-1.0, -2.0])
    np.testing.assert_array_equal(eval_field_jacobian(m, [3.0, -7.0]), -np.eye(2))


def test_logistic_field_and_jacobian(logistic):
    assert eval_field(logistic, [0.5])[0] == pytest.approx(0.25)
    assert eval_field_jacobian(logistic, [0.5])[0, 0] == pytest.approx(0.0)


def test_dimension_mismatch_is_contract_error(logistic):
    with pytest.raises(ContractError):
        eval_field(logistic, [0.1, 0.2])
    with pytest.raises(ContractError):
        eval_field_jacobian(logistic, [np.nan])


def test_harmonic_oscillator_limit():
    cfg = MassSpringConfig(masses=((2.0, 0.0, 0.0),), springs=(Spring(0, None, 1.0, 0.0, 0.0),),
                           friction=(0.0,))
    m = make_mass_spring_model(cfg)
    x = np.array([0.3, -0.7])
    np.testing.assert_allclose(eval_field(m, x), [-0.7, -0.5 * 0.3], rtol=0, atol=1e-15)


def test_spring_at_rest_length_exerts_no_force():
    s = Spring(0, None, 5.0, 0.5, 0.3)
    dy = -math.sqrt(0.5 ** 2 - 0.3 ** 2)
    cfg = MassSpringConfig(masses=((1.0, dy, 0.0),), springs=(s,), friction=(0.0,))
    m = make_mass_spring_model(cfg)
    assert eval_field(m, [dy, 0.0])[1] == pytest.approx(0.0, abs=1e-14)


def test_coincident_spring_endpoints_raise():
    cfg = MassSpringConfig(masses=((1.0, 0.0, 0.0),), springs=(Spring(0, None, 1.0, 0.5, 0.0),),
                           friction=(0.0,))
    m = make_mass_spring_model(cfg)
    with pytest.raises(SingularGeometryError):
        eval_field(m, [0.0, 0.0])


def test_mass_spring_field_matches_energy_gradient(mass_spring):
    cfg = mass_spring.meta["config"]
    masses = np.array([mm for mm, _, _ in cfg.masses])
    rng = np.random.default_rng(3)
    k = len(masses)
    for _ in range(5):
        pos = cfg.nominal_state()[:k] + rng.uniform(-0.2, 0.2, k)
        x = np.concatenate([pos, np.zeros(k)])
        grad = np.zeros(k)
        for i in range(k):
            step = 1e-6 * (1 + abs(pos[i]))
            xp, xm = x.copy(), x.copy()
            xp[i] += step
            xm[i] -= step
            grad[i] = (mass_spring_energy(cfg, xp) - mass_spring_energy(cfg, xm)) / (2 * step)
        accel = eval_field(mass_spring, x)[k:]
        np.testing.assert_allclose(masses * accel, -grad, rtol=1e-6, atol=1e-8)


def test_mass_spring_energy_non_increasing(mass_spring):
    cfg = mass_spring.meta["config"]
    x0 = cfg.nominal_state() + np.array([0.1, -0.15, 0.3, 0.0])
    traj = reference_simulate(mass_spring, x0, np.linspace(0.0, 3.0, 61))
    energy = np.array([mass_spring_energy(cfg, x) for x in traj.states])
    assert np.all(np.diff(energy) <= 1e-6 * energy[0])
    assert energy[-1] < energy[0]


def test_mass_spring_config_validation():
    with pytest.raises(ModelConfigError):
        MassSpringConfig(masses=((0.0, 0.0, 0.0),), springs=(), friction=(0.0,))
    with pytest.raises(ModelConfigError):
        MassSpringConfig(masses=((1.0, 0.0, 0.0),), springs=(Spring(0, None, -1.0, 0.0),), friction=(0.0,))


def test_self_decaying_hill_node():
    m = make_hill_model(HillNetworkConfig((HillNode(decay=0.7),)))
    assert eval_field(m, [0.4])[0] == pytest.approx(-0.28)


@pytest.mark.parametrize("m", [0.5, 1.0, 2.0, 7.0])
def test_hill_term_at_threshold_is_half(m):
    assert hill(0.3, m, 0.3)[0] == pytest.approx(0.5)


def test_hill_config_validation():
    with pytest.raises(ModelConfigError):
        HillNetworkConfig((HillNode(threshold=1.0),))
    with pytest.raises(ModelConfigError):
        HillNetworkConfig((HillNode(exponent=0.0),))
    with pytest.raises(ModelConfigError):
        HillNetworkConfig((HillNode(decay=0.0),))


def test_hill5_field_at_half_matches_scalar_evaluation(hill5):
    def h(u, m, th):
        return u ** m / (u ** m + th ** m)

    u = 0.5
    expected = [
        (1 - h(u, 2.0, 0.5)) - 1.0 * u,                 # A: inhibited by E
        h(u, 3.0, 0.4) - 0.8 * u,                       # B: activated by A
        h(u, 2.0, 0.5) * (1 - h(u, 2.0, 0.5)) - 1.2 * u,  # C: by B, inhibited by A
        h(u, 4.0, 0.6) - 1.0 * u,                       # D: activated by C
        h(u, 2.0, 0.3) * h(u, 2.0, 0.3) - 0.5 * u,      # E: activated by D and B
    ]
    np.testing.assert_allclose(eval_field(hill5, np.full(5, 0.5)), expected, rtol=1e-14)


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_jacobians_match_finite_differences(name):
    model = load_model(name)
    rng = np.random.default_rng(11)
    for _ in range(100):
        x = interior_state(model, rng)
        J = eval_field_jacobian(model, x)
        F = finite_difference_jacobian(model, x)
        scale = max(np.max(np.abs(F)), 1e-12)
        assert np.max(np.abs(J - F)) / scale < 1e-5


@pytest.mark.parametrize("name", BUNDLED)
def test_bounds_ordered(name):
    model = load_model(name)
    assert np.all(model.lower <= model.upper)


@given(st.lists(st.floats(0.01, 0.99), min_size=5, max_size=5))
def test_field_is_pure(xs):
    model = load_model("hill5")
    x = np.array(xs)
    a = eval_field(model, x)
    b = eval_field(model, x.copy())
    assert a.tobytes() == b.tobytes()


@given(st.integers(0, 2**32 - 1))
def test_hill6_jacobian_property(seed):
    model = load_model("hill6")
    x = interior_state(model, np.random.default_rng(seed))
    F = finite_difference_jacobian(model, x)
    J = eval_field_jacobian(model, x)
    assert np.max(np.abs(J - F)) <= 1e-5 * max(np.max(np.abs(F)), 1e-12)


def test_unknown_bundled_model():
    with pytest.raises(FileNotFoundError):
        load_model("no_such_model")
