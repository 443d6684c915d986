"""Implicit one-step schemes (BE, TI, two-stage IRK) and an adaptive reference integrator.

The IRK scheme is the two-stage Radau IA tableau::

    zeta1 = x + h/4  (q(zeta1) - q(zeta2))
    zeta2 = x + h/12 (3 q(zeta1) + 5 q(zeta2))
    x+    = x + h/4  (q(zeta1) + 3 q(zeta2))

All implicit equations are solved with damped Newton iterations started
from the previous state.
"""

from __future__ import annotations

import contextlib
import contextvars
import csv
import enum
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .models import ContinuousModel, ContractError

IRK_A = np.array([[0.25, -0.25], [0.25, 5.0 / 12.0]])
IRK_B = np.array([0.25, 0.75])

NEWTON_RTOL = 1e-12
NEWTON_ATOL = 1e-14
NEWTON_MAXITER = 50
_MAX_HALVINGS = 12


class Scheme(str, enum.Enum):
    BE = "be"
    TI = "ti"
    IRK = "irk"

    @classmethod
    def parse(cls, value) -> "Scheme":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown scheme {value!r}; expected one of be, ti, irk") from None

    @property
    def order(self) -> int:
        return {"be": 1, "ti": 2, "irk": 3}[self.value]


class StepFailure(RuntimeError):
    """Newton iteration did not converge for an implicit step."""

    def __init__(self, message: str, residual: float = float("nan"), index: int | None = None):
        super().__init__(message)
        self.residual = residual
        self.index = index


class LinearSolveError(StepFailure):
    pass


class IntegrationFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class DiscreteModel:
    model: ContinuousModel
    scheme: Scheme
    h: float

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme.parse(self.scheme))
        h = float(self.h)
        if not (np.isfinite(h) and h > 0):
            raise ContractError(f"step size must be positive and finite, got {self.h}")
        object.__setattr__(self, "h", h)

    @property
    def n(self) -> int:
        return self.model.n


@dataclass(frozen=True)
class StepResult:
    x_next: np.ndarray
    stages: np.ndarray | None  # (2, n) for IRK
    newton_iterations: int
    converged: bool
    residual: float


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray          # (N, n)
    h: float
    scheme: str
    stages: np.ndarray | None = None   # (N-1, 2, n) for IRK
    times: np.ndarray | None = None

    def __len__(self) -> int:
        return self.states.shape[0]

    def time_grid(self) -> np.ndarray:
        if self.times is not None:
            return self.times
        return self.h * np.arange(len(self))


# ---------------------------------------------------------------------------
# simulation counting (used to substantiate cost claims)

_counters: contextvars.ContextVar[tuple] = contextvars.ContextVar("netobserve_sim_counters", default=())


class SimulationCounter:
    def __init__(self):
        self.count = 0


@contextlib.contextmanager
def count_simulations() -> Iterator[SimulationCounter]:
    """Count trajectory simulations started inside the ``with`` block."""
    counter = SimulationCounter()
    token = _counters.set(_counters.get() + (counter,))
    try:
        yield counter
    finally:
        _counters.reset(token)


def _tick():
    for c in _counters.get():
        c.count += 1


# ---------------------------------------------------------------------------
# Newton solver

def _newton(residual_and_jac, z0: np.ndarray, scale_ref: np.ndarray):
    """Damped Newton on ``F(z) = 0``; returns ``(z, iterations, residual_norm)``.

    Convergence is declared when the scaled residual or the scaled Newton
    update drops below one, with scale ``atol + rtol*max(|z|, |ref|)``.
    """
    z = z0.copy()
    F, JF = residual_and_jac(z, True)
    for it in range(1, NEWTON_MAXITER + 1):
        scale = NEWTON_ATOL + NEWTON_RTOL * np.maximum(np.abs(z), scale_ref)
        fnorm = np.max(np.abs(F) / scale)
        if not np.isfinite(fnorm):
            raise StepFailure("non-finite residual in implicit solve", fnorm)
        if fnorm <= 1.0:
            return z, it - 1, fnorm
        try:
            dz = np.linalg.solve(JF, -F)
        except np.linalg.LinAlgError as exc:
            raise LinearSolveError(f"singular Newton matrix: {exc}", fnorm) from None
        if np.max(np.abs(dz) / scale) <= 1.0:
            z = z + dz
            F, _ = residual_and_jac(z, False)
            return z, it, np.max(np.abs(F) / scale)
        t = 1.0
        base = np.linalg.norm(F)
        for _ in range(_MAX_HALVINGS):
            trial = z + t * dz
            Ft, _ = residual_and_jac(trial, False)
            if np.all(np.isfinite(Ft)) and np.linalg.norm(Ft) <= base:
                break
            t *= 0.5
        z = trial
        F, JF = residual_and_jac(z, True)
    scale = NEWTON_ATOL + NEWTON_RTOL * np.maximum(np.abs(z), scale_ref)
    raise StepFailure(f"Newton did not converge in {NEWTON_MAXITER} iterations",
                      float(np.max(np.abs(F) / scale)))


def _step_be(q, dq, x, h):
    n = x.size
    eye = np.eye(n)

    def fun(z, want_jac):
        F = z - x - h * q(z)
        return F, (eye - h * dq(z) if want_jac else None)

    z, it, res = _newton(fun, x, np.abs(x))
    return z, None, it, res


def _step_ti(q, dq, x, h):
    n = x.size
    eye = np.eye(n)
    rhs = x + 0.5 * h * q(x)

    def fun(z, want_jac):
        F = z - rhs - 0.5 * h * q(z)
        return F, (eye - 0.5 * h * dq(z) if want_jac else None)

    z, it, res = _newton(fun, x, np.abs(x))
    return z, None, it, res


def _step_irk(q, dq, x, h):
    n = x.size
    (a11, a12), (a21, a22) = IRK_A * h
    JF = np.eye(2 * n)
    x2 = np.concatenate([x, x])

    def fun(z, want_jac):
        z1, z2 = z[:n], z[n:]
        q1, q2 = q(z1), q(z2)
        F = z - x2
        F[:n] -= a11 * q1 + a12 * q2
        F[n:] -= a21 * q1 + a22 * q2
        if not want_jac:
            return F, None
        J1, J2 = dq(z1), dq(z2)
        M = JF.copy()
        M[:n, :n] -= a11 * J1
        M[:n, n:] -= a12 * J2
        M[n:, :n] -= a21 * J1
        M[n:, n:] -= a22 * J2
        return F, M

    ref = np.abs(x2)
    z, it, res = _newton(fun, x2, ref)
    z1, z2 = z[:n], z[n:]
    x_next = x + h * (IRK_B[0] * q(z1) + IRK_B[1] * q(z2))
    return x_next, np.stack([z1, z2]), it, res


_STEPPERS = {Scheme.BE: _step_be, Scheme.TI: _step_ti, Scheme.IRK: _step_irk}


def _raw_step(model: ContinuousModel, scheme: Scheme, h: float, x: np.ndarray):
    return _STEPPERS[scheme](model.field, model.jacobian, x, h)


def step(dm: DiscreteModel, x_prev) -> StepResult:
    """Advance one step of the discrete model from ``x_prev``."""
    x_prev = np.asarray(x_prev, dtype=float)
    if x_prev.shape != (dm.n,) or not np.all(np.isfinite(x_prev)):
        raise ContractError("x_prev must be a finite state vector of length n")
    x_next, stages, it, res = _raw_step(dm.model, dm.scheme, dm.h, x_prev)
    return StepResult(x_next, stages, it, True, float(res))


def simulate(dm: DiscreteModel, x0, N: int) -> Trajectory:
    """Simulate ``N`` samples ``x_0 .. x_{N-1}`` of the discrete model."""
    if N < 1:
        raise ContractError("N must be at least 1")
    x = np.asarray(x0, dtype=float)
    if x.shape != (dm.n,) or not np.all(np.isfinite(x)):
        raise ContractError("x0 must be a finite state vector of length n")
    _tick()
    states = np.empty((N, dm.n))
    states[0] = x
    stages = np.empty((N - 1, 2, dm.n)) if dm.scheme is Scheme.IRK else None
    for k in range(1, N):
        try:
            x, st, _, _ = _raw_step(dm.model, dm.scheme, dm.h, x)
        except StepFailure as exc:
            exc.index = k
            raise
        if not np.all(np.isfinite(x)):
            raise StepFailure(f"non-finite state at step {k}", index=k)
        states[k] = x
        if stages is not None:
            stages[k - 1] = st
    return Trajectory(states, dm.h, dm.scheme.value, stages)


def linear_step_matrix(A, scheme, h: float) -> np.ndarray:
    """Constant step map ``x_k = R x_{k-1}`` of a scheme applied to ``dx/dt = A x``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    eye = np.eye(n)
    scheme = Scheme.parse(scheme)
    if scheme is Scheme.BE:
        return np.linalg.solve(eye - h * A, eye)
    if scheme is Scheme.TI:
        return np.linalg.solve(eye - 0.5 * h * A, eye + 0.5 * h * A)
    M = np.eye(2 * n) - h * np.kron(IRK_A, A)
    S = np.linalg.solve(M, np.vstack([eye, eye]))
    return eye + h * (IRK_B[0] * (A @ S[:n]) + IRK_B[1] * (A @ S[n:]))


def simulate_states(dm: DiscreteModel, X0, N: int) -> np.ndarray:
    """States of several trajectories, shape ``(p, N, n)``; one simulation per row of ``X0``.

    Linear models (``meta["A"]``) are propagated with the constant step
    matrix for all rows at once; other models go through :func:`simulate`.
    """
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    A = dm.model.meta.get("A") if dm.model.meta else None
    if A is None:
        return np.stack([simulate(dm, x, N).states for x in X0])
    if N < 1:
        raise ContractError("N must be at least 1")
    if X0.shape[1] != dm.n or not np.all(np.isfinite(X0)):
        raise ContractError("initial states must be finite vectors of length n")
    for _ in range(X0.shape[0]):
        _tick()
    Rt = linear_step_matrix(A, dm.scheme, dm.h).T
    out = np.empty((X0.shape[0], N, dm.n))
    out[:, 0] = X0
    for k in range(1, N):
        out[:, k] = out[:, k - 1] @ Rt
    return out


# ---------------------------------------------------------------------------
# reference integrator

REF_RTOL = 1e-10
REF_ATOL = 1e-14


def reference_simulate(model: ContinuousModel, x0, times: Sequence[float],
                       rtol: float = REF_RTOL, atol: float = REF_ATOL,
                       h_min: float | None = None, max_steps: int = 2_000_000) -> Trajectory:
    """High-accuracy adaptive integration sampled at ``times``.

    IRK steps with step-doubling error control and local extrapolation (the
    extrapolated map stays A-stable).  This is the data-generating "true"
    system, deliberately distinct from the fixed-step estimation models.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0 or times[0] != 0.0:
        raise ContractError("times must be a 1-D sequence starting at 0")
    if np.any(np.diff(times) <= 0):
        raise ContractError("times must be strictly increasing")
    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (model.n,):
        raise ContractError("x0 has wrong length")
    _tick()
    out = np.empty((times.size, model.n))
    out[0] = x
    if times.size == 1:
        return Trajectory(out, 0.0, "reference", times=times)
    span = times[-1]
    if h_min is None:
        h_min = 1e-14 * max(span, 1e-300)
    f0 = np.abs(model.field(x))
    h = 1e-3 * (np.max(np.abs(x)) + atol / rtol) / max(np.max(f0), 1e-300)
    h = float(min(max(h, 1e-6 * (times[1] - times[0])), times[1] - times[0]))
    t = 0.0
    steps = 0
    q = model.field
    dq = model.jacobian
    for k in range(1, times.size):
        target = times[k]
        while t < target:
            if steps >= max_steps:
                raise IntegrationFailure(f"exceeded {max_steps} steps before t={target}")
            h = min(h, target - t)
            last = (t + h >= target)
            try:
                big, _, _, _ = _step_irk(q, dq, x, h)
                mid, _, _, _ = _step_irk(q, dq, x, 0.5 * h)
                small, _, _, _ = _step_irk(q, dq, mid, 0.5 * h)
                err_vec = (small - big) / 7.0
                scale = atol + rtol * np.maximum(np.abs(x), np.abs(small))
                err = float(np.max(np.abs(err_vec) / scale))
                if not np.isfinite(err):
                    raise StepFailure("non-finite error estimate")
            except StepFailure:
                err = np.inf
            if err <= 1.0:
                t = target if last else t + h
                x = small + err_vec
                steps += 1
                factor = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * err ** -0.25))
            else:
                factor = 0.25 if not np.isfinite(err) else max(0.1, 0.9 * err ** -0.25)
            h = h * factor
            if h < h_min:
                raise IntegrationFailure(f"step size underflow at t={t:.6g} (h={h:.3g})")
        out[k] = x
    return Trajectory(out, 0.0, "reference", times=times)


# ---------------------------------------------------------------------------
# export

def write_trajectory_csv(traj: Trajectory, names: Sequence[str], path) -> None:
    """``t,<names...>`` header, one row per sample, 17 significant digits."""
    t = traj.time_grid()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", *names])
        for tk, row in zip(t, traj.states):
            w.writerow([f"{tk:.17g}"] + [f"{v:.17g}" for v in row])
