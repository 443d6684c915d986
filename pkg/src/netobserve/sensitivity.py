"""Analytic step sensitivities and stacked output Jacobians.

For a trajectory ``x_0 .. x_{N-1}`` of a discrete model, the step factor
``S_j = dx_j/dx_{j-1}`` follows from implicit differentiation of the
scheme's defining equation.  The free stack ``J2`` collects the cumulative
products ``I, S_1, S_2 S_1, ...``; output Jacobians apply ``C`` (or the
diagonal mask ``diag(b)``) blockwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .integrators import IRK_A, IRK_B, DiscreteModel, Scheme, StepResult, Trajectory, simulate


class SingularSensitivityError(ArithmeticError):
    """The implicit-function-theorem matrix of a step is singular."""


@dataclass(frozen=True)
class StepJacobian:
    matrix: np.ndarray
    index: int
    scheme: str


@dataclass(frozen=True)
class JacobianStack:
    """Stacked output Jacobian and the pieces it was assembled from.

    ``full`` is ``-(I_N kron C) J2`` when ``signed`` and ``(I_N kron C) J2``
    otherwise; ``free`` is ``J2`` itself with shape ``(N*n, n)``.
    """

    full: np.ndarray
    free: np.ndarray
    factors: tuple[StepJacobian, ...]
    output: np.ndarray
    signed: bool
    trajectory: Trajectory

    @property
    def N(self) -> int:
        return len(self.trajectory)


def _solve(M: np.ndarray, rhs: np.ndarray, what: str, index: int) -> np.ndarray:
    try:
        out = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError:
        raise SingularSensitivityError(f"{what} is singular at step {index}") from None
    if not np.all(np.isfinite(out)):
        raise SingularSensitivityError(f"{what} is numerically singular at step {index}")
    return out


def _factor(dm: DiscreteModel, x_prev, x_next, stages, index: int, jac_prev=None, jac_next=None):
    h = dm.h
    n = dm.n
    dq = dm.model.jacobian
    eye = np.eye(n)
    if dm.scheme is Scheme.BE:
        Jn = dq(x_next) if jac_next is None else jac_next
        return _solve(eye - h * Jn, eye, "I - h dq/dx", index)
    if dm.scheme is Scheme.TI:
        Jn = dq(x_next) if jac_next is None else jac_next
        Jp = dq(x_prev) if jac_prev is None else jac_prev
        return _solve(eye - 0.5 * h * Jn, eye + 0.5 * h * Jp, "I - h/2 dq/dx", index)
    J1, J2 = dq(stages[0]), dq(stages[1])
    (a11, a12), (a21, a22) = IRK_A * h
    M = np.eye(2 * n)
    M[:n, :n] -= a11 * J1
    M[:n, n:] -= a12 * J2
    M[n:, :n] -= a21 * J1
    M[n:, n:] -= a22 * J2
    S = _solve(M, np.vstack([eye, eye]), "I_2n - A_2", index)
    return eye + h * (IRK_B[0] * (J1 @ S[:n]) + IRK_B[1] * (J2 @ S[n:]))


def step_jacobian(dm: DiscreteModel, step: StepResult, x_prev) -> StepJacobian:
    """``dx_j/dx_{j-1}`` for one converged step."""
    if not step.converged:
        raise ValueError("step did not converge")
    x_prev = np.asarray(x_prev, dtype=float)
    return StepJacobian(_factor(dm, x_prev, step.x_next, step.stages, 1), 1, dm.scheme.value)


def trajectory_factors(dm: DiscreteModel, traj: Trajectory) -> list[np.ndarray]:
    """Step factors ``S_1 .. S_{N-1}`` along a simulated trajectory."""
    X = traj.states
    factors = []
    if dm.scheme is Scheme.TI:
        jacs = [dm.model.jacobian(x) for x in X]
        for k in range(1, len(X)):
            factors.append(_factor(dm, X[k - 1], X[k], None, k, jacs[k - 1], jacs[k]))
    else:
        for k in range(1, len(X)):
            st = traj.stages[k - 1] if traj.stages is not None else None
            factors.append(_factor(dm, X[k - 1], X[k], st, k))
    return factors


def free_stack(factors: list[np.ndarray], n: int) -> np.ndarray:
    """``J2``: cumulative products ``I, S_1, S_2 S_1, ...`` stacked, shape ``(N*n, n)``."""
    out = np.empty((len(factors) + 1, n, n))
    out[0] = np.eye(n)
    for k, S in enumerate(factors, start=1):
        out[k] = S @ out[k - 1]
    return out.reshape(-1, n)


def output_matrix(mask_or_C, n: int) -> np.ndarray:
    """Turn a 0/1 mask into ``diag(b)``; pass a 2-D ``C`` through."""
    arr = np.asarray(mask_or_C, dtype=float)
    if arr.ndim == 1:
        if arr.shape != (n,) or not np.all((arr == 0) | (arr == 1)):
            raise ValueError("mask must be a length-n 0/1 vector")
        return np.diag(arr)
    if arr.ndim != 2 or arr.shape[1] != n:
        raise ValueError(f"output matrix must have {n} columns")
    return arr


def apply_output(C: np.ndarray, J2: np.ndarray, n: int, signed: bool) -> np.ndarray:
    """Blockwise ``(I_N kron C) J2`` (negated when ``signed``)."""
    blocks = J2.reshape(-1, n, n)
    out = np.matmul(C, blocks).reshape(-1, n)
    return -out if signed else out


def stack_from_trajectory(dm: DiscreteModel, traj: Trajectory, mask_or_C, signed: bool) -> JacobianStack:
    C = output_matrix(mask_or_C, dm.n)
    factors = trajectory_factors(dm, traj)
    J2 = free_stack(factors, dm.n)
    full = apply_output(C, J2, dm.n, signed)
    return JacobianStack(full, J2,
                         tuple(StepJacobian(S, k, dm.scheme.value) for k, S in enumerate(factors, 1)),
                         C, signed, traj)


def stack_output_jacobian(dm: DiscreteModel, x0, N: int, mask_or_C, signed: bool = True) -> JacobianStack:
    """Simulate from ``x0`` and assemble the stacked output Jacobian.

    ``signed=True`` gives the residual Jacobian (rows ``-C dx_k/dx_0``);
    ``signed=False`` with a mask gives the selection Jacobian ``J1``.
    """
    traj = simulate(dm, x0, N)
    return stack_from_trajectory(dm, traj, mask_or_C, signed)


def finite_difference_stack(dm: DiscreteModel, x0, N: int, mask_or_C, signed: bool = True,
                            rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference oracle for :func:`stack_output_jacobian`."""
    x0 = np.asarray(x0, dtype=float)
    C = output_matrix(mask_or_C, dm.n)
    n = dm.n
    cols = []
    for i in range(n):
        d = rel_step * (1.0 + abs(x0[i]))
        xp, xm = x0.copy(), x0.copy()
        xp[i] += d
        xm[i] -= d
        yp = (simulate(dm, xp, N).states @ C.T).reshape(-1)
        ym = (simulate(dm, xm, N).states @ C.T).reshape(-1)
        cols.append((yp - ym) / (2 * d))
    J = np.column_stack(cols)
    return -J if signed else J
