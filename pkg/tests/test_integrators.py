import csv
import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, strategies as st

from netobserve.estimation import trajectory_error
from netobserve.integrators import (IRK_A, IRK_B, NEWTON_ATOL, NEWTON_RTOL, DiscreteModel,
                                    IntegrationFailure, Scheme, StepFailure, count_simulations,
                                    linear_step_matrix, reference_simulate, simulate, simulate_states, step,
                                    write_trajectory_csv)
from netobserve.models import ContinuousModel, ContractError, linear_model, logistic_model


def scalar(lam):
    return linear_model([[lam]])


def irk_scalar_oracle(z):
    """One IRK step of dx/dt = lam x from x=1 with z = h lam, via the 2x2 stage system."""
    zeta = np.linalg.solve(np.eye(2) - z * IRK_A, np.ones(2))
    return 1.0 + z * IRK_B @ zeta


def test_closed_form_single_steps():
    m = scalar(-1.0)
    assert step(DiscreteModel(m, "be", 0.1), [1.0]).x_next[0] == pytest.approx(1 / 1.1, rel=1e-14)
    assert step(DiscreteModel(m, "ti", 0.1), [1.0]).x_next[0] == pytest.approx(0.95 / 1.05, rel=1e-14)
    irk = step(DiscreteModel(m, "irk", 0.1), [1.0]).x_next[0]
    assert irk == pytest.approx(irk_scalar_oracle(-0.1), rel=1e-13)


def test_irk_is_a_third_order_rational_approximation():
    z = -0.1
    pade = (1 + z / 3) / (1 - 2 * z / 3 + z * z / 6)
    assert irk_scalar_oracle(z) == pytest.approx(pade, rel=1e-14)
    assert abs(pade - math.exp(z)) < 1e-5


def test_simulate_single_sample_and_geometric_sequence():
    dm = DiscreteModel(scalar(-1.0), "be", 0.1)
    np.testing.assert_array_equal(simulate(dm, [2.0], 1).states, [[2.0]])
    np.testing.assert_allclose(simulate(dm, [1.0], 3).states[:, 0], [1, 1 / 1.1, 1 / 1.1 ** 2], rtol=1e-14)


def test_invalid_inputs():
    with pytest.raises(ContractError):
        DiscreteModel(scalar(-1.0), "be", 0.0)
    with pytest.raises(ContractError):
        DiscreteModel(scalar(-1.0), "be", math.inf)
    with pytest.raises(ContractError):
        simulate(DiscreteModel(scalar(-1.0), "be", 0.1), [1.0], 0)
    with pytest.raises(ValueError):
        Scheme.parse("rk4")


def _logistic_errors(scheme):
    m = logistic_model()
    exact = 1.0 / (1.0 + math.exp(-1.0))
    errs = []
    for h in (0.1, 0.05, 0.025, 0.0125):
        N = int(round(1.0 / h)) + 1
        errs.append(abs(simulate(DiscreteModel(m, scheme, h), [0.5], N).states[-1, 0] - exact))
    return np.log2(np.array(errs[:-1]) / np.array(errs[1:]))


@pytest.mark.parametrize("scheme,order,tol", [("be", 1, 0.15), ("ti", 2, 0.15), ("irk", 3, 0.25)])
def test_convergence_orders(scheme, order, tol):
    orders = _logistic_errors(scheme)
    assert np.all(np.abs(orders - order) < tol), orders


@pytest.mark.parametrize("scheme", ["be", "ti", "irk"])
def test_a_stability_probe(scheme):
    x1 = step(DiscreteModel(scalar(-1e6), scheme, 1.0), [1.0]).x_next[0]
    assert abs(x1) < 1.0


@pytest.mark.parametrize("scheme", ["be", "ti", "irk"])
def test_linear_step_matches_rational_map(scheme):
    rng = np.random.default_rng(2)
    Q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    A = Q @ np.diag([-0.5, -2.0, -7.0]) @ Q.T + 0.3 * (rng.standard_normal((3, 3)))
    h = 0.05
    I = np.eye(3)
    if scheme == "be":
        R = np.linalg.inv(I - h * A)
    elif scheme == "ti":
        R = np.linalg.inv(I - h / 2 * A) @ (I + h / 2 * A)
    else:
        # stability matrix of the tableau: I + h (b^T kron A) (I - h A_irk kron A)^{-1} (1 kron I)
        big = np.linalg.inv(np.eye(6) - h * np.kron(IRK_A, A))
        R = I + h * np.kron(IRK_B[None, :], A) @ big @ np.kron(np.ones((2, 1)), I)
    x = rng.standard_normal(3)
    got = step(DiscreteModel(linear_model(A), scheme, h), x).x_next
    np.testing.assert_allclose(got, R @ x, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(linear_step_matrix(A, scheme, h), R, rtol=1e-12, atol=1e-14)


def test_irk_stage_residuals(h2o2):
    dm = DiscreteModel(h2o2, "irk", 1e-3)
    x = np.asarray(h2o2.meta["nominal_state"], dtype=float)
    traj = simulate(dm, x, 10)
    for k in range(9):
        xk = traj.states[k]
        z = traj.stages[k]
        q1, q2 = h2o2.field(z[0]), h2o2.field(z[1])
        for i in range(2):
            res = z[i] - xk - dm.h * (IRK_A[i, 0] * q1 + IRK_A[i, 1] * q2)
            scale = NEWTON_ATOL + NEWTON_RTOL * np.maximum(np.abs(z[i]), np.abs(xk))
            # one extra Newton update may be applied after the last residual check
            assert np.max(np.abs(res) / scale) < 10.0
        np.testing.assert_allclose(traj.states[k + 1], xk + dm.h * (IRK_B[0] * q1 + IRK_B[1] * q2), rtol=1e-15)


def test_step_failure_carries_index_and_residual():
    blow = ContinuousModel(1, ("x",), lambda x: x * x, lambda x: np.diag(2 * x),
                           np.full(1, -np.inf), np.full(1, np.inf))
    dm = DiscreteModel(blow, "be", 0.1)
    with pytest.raises(StepFailure) as err:
        simulate(dm, [100.0], 3)
    assert err.value.index == 1
    assert not math.isnan(err.value.residual)


def test_reference_integrator_analytic_cases(logistic):
    traj = reference_simulate(scalar(-1.0), [1.0], [0.0, 1.0])
    assert abs(traj.states[-1, 0] - math.exp(-1.0)) < 1e-9
    traj = reference_simulate(logistic, [0.5], [0.0, 0.5, 1.0])
    assert abs(traj.states[-1, 0] - 1.0 / (1.0 + math.exp(-1.0))) < 1e-9


def test_reference_integrator_stiff_diagonal():
    A = np.diag([-1.0, -1e6])
    traj = reference_simulate(linear_model(A), [1.0, 1.0], [0.0, 1e-3])
    exact = scipy.linalg.expm(A * 1e-3) @ np.ones(2)
    np.testing.assert_allclose(traj.states[-1], exact, rtol=0, atol=1e-8)


def test_reference_integrator_rejects_bad_grid():
    with pytest.raises(ValueError):
        reference_simulate(scalar(-1.0), [1.0], [0.0, 0.5, 0.5])
    with pytest.raises(ValueError):
        reference_simulate(scalar(-1.0), [1.0], [0.1, 0.5])


def test_reference_integrator_failure():
    blow = ContinuousModel(1, ("x",), lambda x: x * x, lambda x: np.diag(2 * x),
                           np.full(1, -np.inf), np.full(1, np.inf))
    with pytest.raises(IntegrationFailure):
        reference_simulate(blow, [1.0], [0.0, 2.0])


def test_h2o2_irk_matches_reference(h2o2):
    h = h2o2.meta["recommended_h"]
    x0 = np.asarray(h2o2.meta["nominal_state"], dtype=float)
    traj = simulate(DiscreteModel(h2o2, "irk", h), x0, 200)
    ref = reference_simulate(h2o2, x0, h * np.arange(200))
    assert trajectory_error(traj, ref)[-1] < 1e-3


def test_simulate_states_linear_fast_path():
    A = np.array([[-1.0, 0.5], [0.0, -3.0]])
    dm = DiscreteModel(linear_model(A), "irk", 0.05)
    X0 = np.array([[1.0, 2.0], [-0.5, 0.3], [0.0, 1.0]])
    with count_simulations() as c:
        batch = simulate_states(dm, X0, 30)
    assert c.count == 3
    for k, x in enumerate(X0):
        np.testing.assert_allclose(batch[k], simulate(dm, x, 30).states, rtol=1e-12, atol=1e-15)


def test_trajectory_csv(tmp_path):
    dm = DiscreteModel(scalar(-1.0), "be", 0.1)
    traj = simulate(dm, [1.0 / 3.0], 3)
    p = tmp_path / "t.csv"
    write_trajectory_csv(traj, ["x"], p)
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["t", "x"]
    assert len(rows) == 4
    assert float(rows[1][1]) == 1.0 / 3.0
    assert float(rows[3][1]) == traj.states[2, 0]


@given(st.floats(-50.0, -0.01), st.floats(1e-3, 1.0))
def test_step_sequence_property_scalar(lam, h):
    dm = DiscreteModel(scalar(lam), "be", h)
    traj = simulate(dm, [1.0], 4)
    np.testing.assert_allclose(traj.states[:, 0], (1.0 / (1.0 - h * lam)) ** np.arange(4), rtol=1e-12)
