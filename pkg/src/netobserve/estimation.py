"""Initial-state estimation by bounded nonlinear least squares.

Given samples ``y_k = C x_k`` of a network, the residual

    g(x0) = col(y_0 - C x_0, ..., y_{N-1} - C x_{N-1})

is minimised over the box ``lower <= x0 <= upper`` with a trust-region
reflective Gauss-Newton method driven by the analytic Jacobian stack.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .integrators import DiscreteModel, IntegrationFailure, StepFailure, Trajectory, simulate
from .sensitivity import JacobianStack, SingularSensitivityError, stack_from_trajectory

EPS = np.finfo(float).eps


class ResidualEvaluationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# data containers

def selection_matrix(sensors: Sequence[int], n: int) -> np.ndarray:
    """``r x n`` matrix with a single 1 per row at the sensor columns."""
    C = np.zeros((len(sensors), n))
    for row, i in enumerate(sensors):
        C[row, i] = 1.0
    return C


def mask_to_sensors(mask) -> list[int]:
    return [int(i) for i in np.flatnonzero(np.asarray(mask))]


@dataclass(frozen=True)
class ObservationSet:
    y: np.ndarray        # (N, r)
    C: np.ndarray        # (r, n)
    h: float
    scheme: str = "irk"

    def __post_init__(self):
        C = np.asarray(self.C, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if C.ndim != 2:
            raise ValueError("C must be a matrix")
        if y.ndim == 1:
            y = y.reshape(-1, 1)
        if y.shape[1] != C.shape[0]:
            raise ValueError(f"y has {y.shape[1]} outputs, C has {C.shape[0]} rows")
        ones = (C == 1.0).sum(axis=1)
        zeros = (C == 0.0).sum(axis=1)
        if np.any(ones != 1) or np.any(ones + zeros != C.shape[1]):
            raise ValueError("each row of C must hold exactly one 1 and zeros elsewhere")
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "y", y)

    @property
    def N(self) -> int:
        return self.y.shape[0]

    @property
    def r(self) -> int:
        return self.C.shape[0]

    @property
    def count_condition(self) -> bool:
        """Necessary condition ``N r >= n`` for a full-rank Jacobian."""
        return self.N * self.r >= self.C.shape[1]

    @property
    def sensors(self) -> list[int]:
        return [int(np.argmax(row)) for row in self.C]


def observe(traj: Trajectory, C: np.ndarray, h: float, scheme: str = "irk") -> ObservationSet:
    return ObservationSet(traj.states @ np.asarray(C).T, C, h, scheme)


@dataclass
class SolverSettings:
    gtol: float = 1e-8
    xtol: float = 1e-12
    max_iter: int = 500
    initial_radius: float = 1.0
    accept_ratio: float = 0.1


@dataclass(frozen=True)
class EstimationProblem:
    observations: ObservationSet
    dm: DiscreteModel
    initial_guess: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    settings: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self):
        n = self.dm.n
        lo = self.dm.model.lower if self.lower is None else np.asarray(self.lower, dtype=float)
        hi = self.dm.model.upper if self.upper is None else np.asarray(self.upper, dtype=float)
        x = np.asarray(self.initial_guess, dtype=float)
        if x.shape != (n,):
            raise ValueError("initial guess has wrong length")
        if self.observations.C.shape[1] != n:
            raise ValueError("output matrix does not match the model dimension")
        if np.any(x < lo) or np.any(x > hi):
            raise ValueError("initial guess lies outside the bounds")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "initial_guess", x)


@dataclass
class EstimationResult:
    x0: np.ndarray
    iterations: int
    residual_norm: float
    condition: float
    rank: int
    rank_ok: bool
    converged: bool
    status: str
    trace: list = field(default_factory=list)
    eta: float | None = None


# ---------------------------------------------------------------------------
# residual

def _simulate(problem: EstimationProblem, x0) -> Trajectory:
    try:
        return simulate(problem.dm, x0, problem.observations.N)
    except (StepFailure, IntegrationFailure, FloatingPointError) as exc:
        raise ResidualEvaluationError(str(exc)) from exc


def residual(problem: EstimationProblem, x0) -> np.ndarray:
    """``g(x0)`` stacked sample by sample, length ``N*r``."""
    traj = _simulate(problem, np.asarray(x0, dtype=float))
    obs = problem.observations
    return (obs.y - traj.states @ obs.C.T).reshape(-1)


def residual_and_jacobian(problem: EstimationProblem, x0) -> tuple[np.ndarray, JacobianStack]:
    traj = _simulate(problem, np.asarray(x0, dtype=float))
    obs = problem.observations
    g = (obs.y - traj.states @ obs.C.T).reshape(-1)
    try:
        stack = stack_from_trajectory(problem.dm, traj, obs.C, signed=True)
    except SingularSensitivityError as exc:
        raise ResidualEvaluationError(str(exc)) from exc
    return g, stack


# ---------------------------------------------------------------------------
# diagnostics

def rank_check(stack) -> tuple[int, float, bool]:
    """Numerical rank, condition number over retained singular values, and ``rank == n``."""
    J = stack.full if isinstance(stack, JacobianStack) else np.asarray(stack, dtype=float)
    m, n = J.shape
    s = np.linalg.svd(J, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0, math.inf, False
    tol = max(m, n) * EPS * s[0]
    kept = s[s > tol]
    rank = int(kept.size)
    kappa = float(kept[0] / kept[-1])
    return rank, kappa, rank == n


def estimation_error(x_hat, x_true) -> float:
    """Relative error ``||x_hat - x_true|| / ||x_true||``."""
    x_true = np.asarray(x_true, dtype=float)
    denom = np.linalg.norm(x_true)
    if denom == 0.0:
        raise ValueError("true state has zero norm")
    return float(np.linalg.norm(np.asarray(x_hat, dtype=float) - x_true) / denom)


def trajectory_error(traj, traj_ref) -> np.ndarray:
    """Per-step relative errors; ``nan`` where the reference state is zero."""
    X = traj.states if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)
    R = traj_ref.states if isinstance(traj_ref, Trajectory) else np.asarray(traj_ref, dtype=float)
    if X.shape != R.shape:
        raise ValueError("trajectories differ in shape")
    num = np.linalg.norm(X - R, axis=1)
    den = np.linalg.norm(R, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = num / den
    out[den == 0.0] = np.nan
    return out


# ---------------------------------------------------------------------------
# trust-region reflective solver

def _cl_scaling(x, grad, lb, ub):
    """Coleman-Li scaling ``v`` and its derivative sign ``dv``."""
    v = np.ones_like(x)
    dv = np.zeros_like(x)
    down = (grad < 0) & np.isfinite(ub)
    up = (grad > 0) & np.isfinite(lb)
    v[down] = ub[down] - x[down]
    dv[down] = -1.0
    v[up] = x[up] - lb[up]
    dv[up] = 1.0
    return v, dv


class _Quadratic:
    """``q(p) = gh.p + 0.5 (|Jh p|^2 + p.diag p)`` in scaled variables."""

    def __init__(self, Jh, gh, diag):
        self.Jh, self.gh, self.diag = Jh, gh, diag

    def value(self, p):
        Jp = self.Jh @ p
        return float(self.gh @ p + 0.5 * (Jp @ Jp + p @ (self.diag * p)))

    def along(self, p0, r):
        """Coefficients ``(a, b)`` of ``q(p0 + t r) - q(p0) = b t + a t^2 / 2``."""
        Jr = self.Jh @ r
        a = Jr @ Jr + r @ (self.diag * r)
        b = self.gh @ r + (self.Jh @ p0) @ Jr + p0 @ (self.diag * r)
        return float(a), float(b)


def _dogleg(quad, g, radius):
    """Dogleg step for the scaled model subject to ``||p|| <= radius``."""
    Jh, gh, diag = quad.Jh, quad.gh, quad.diag
    A = np.vstack([Jh, np.diag(np.sqrt(diag))])
    rhs = np.concatenate([-g, np.zeros(len(diag))])
    p_gn, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    if np.linalg.norm(p_gn) <= radius:
        return p_gn
    gnorm = np.linalg.norm(gh)
    if gnorm == 0.0:
        return np.zeros_like(gh)
    curv, _ = quad.along(np.zeros_like(gh), gh)
    if curv <= 0.0:
        return -radius * gh / gnorm
    p_c = -(gnorm ** 2 / curv) * gh
    nc = np.linalg.norm(p_c)
    if nc >= radius:
        return -radius * gh / gnorm
    dd = p_gn - p_c
    a = dd @ dd
    b = 2.0 * (p_c @ dd)
    c = nc ** 2 - radius ** 2
    t = (-b + math.sqrt(max(b * b - 4 * a * c, 0.0))) / (2 * a)
    return p_c + t * dd


def _step_to_bound(x, s, lb, ub):
    """Largest ``t`` with ``x + t s`` inside the box and the components that hit it."""
    with np.errstate(divide="ignore", invalid="ignore"):
        tl = np.where(s < 0, (lb - x) / s, np.inf)
        tu = np.where(s > 0, (ub - x) / s, np.inf)
    t_each = np.minimum(tl, tu)
    t = float(np.min(t_each)) if t_each.size else np.inf
    hits = np.isclose(t_each, t, rtol=1e-12, atol=0.0) if np.isfinite(t) else np.zeros_like(x, bool)
    return t, hits


def _line_minimiser(quad, p0, r, t_max):
    """Minimise the model on ``p0 + t r`` for ``0 <= t <= t_max``."""
    if not np.isfinite(t_max) or t_max <= 0:
        return 0.0
    a, b = quad.along(p0, r)
    t_star = -b / a if a > 0 else (t_max if b < 0 else 0.0)
    return float(min(max(t_star, 0.0), t_max))


def _truncate_and_reflect(quad, p, x, lb, ub, d, radius, theta):
    t_b, hits = _step_to_bound(x, d * p, lb, ub)
    if t_b >= 1.0:
        return [p]
    cands = [theta * t_b * p]
    # reflect the components that hit the boundary and continue
    p_hit = t_b * p
    r = p.copy()
    r[hits] *= -1.0
    if np.linalg.norm(p_hit) < radius:
        t_bnd, _ = _step_to_bound(x + d * p_hit, d * r, lb, ub)
        # stay within the trust region: |p_hit + t r| <= radius
        a, b, c = r @ r, 2 * (p_hit @ r), p_hit @ p_hit - radius ** 2
        t_tr = (-b + math.sqrt(max(b * b - 4 * a * c, 0.0))) / (2 * a)
        t = _line_minimiser(quad, p_hit, r, min(theta * t_bnd, t_tr))
        if t > 0:
            cands.append(p_hit + t * r)
    return cands


def _candidate_steps(plain, scaled, g, x, lb, ub, d, radius, theta):
    """Scaled candidate steps.

    Dogleg steps of the plain Gauss-Newton model and of the Coleman-Li
    model (with its diagonal bound term), each truncated at the box and
    reflected, plus scaled steepest descent.
    """
    cands = []
    for quad in (plain, scaled):
        cands += _truncate_and_reflect(plain, _dogleg(quad, g, radius), x, lb, ub, d, radius, theta)
    sd = -plain.gh
    nrm = np.linalg.norm(sd)
    if nrm > 0:
        t_bnd, _ = _step_to_bound(x, d * sd, lb, ub)
        t = _line_minimiser(plain, np.zeros_like(sd), sd, min(theta * t_bnd, radius / nrm))
        if t > 0:
            cands.append(t * sd)
    return cands


def solve_bounded_lsq(fun: Callable, x0, lb, ub, settings: SolverSettings | None = None):
    """Trust-region reflective Gauss-Newton for ``min 0.5 ||g(x)||^2`` on a box.

    ``fun(x)`` returns ``(g, J)`` and may raise
    :class:`ResidualEvaluationError`, which rejects the trial point.
    Returns ``(x, g, J, iterations, status, trace)``.
    """
    st = settings or SolverSettings()
    lb = np.asarray(lb, dtype=float)
    ub = np.asarray(ub, dtype=float)
    x = np.asarray(x0, dtype=float).copy()
    # keep iterates strictly inside the box
    width = np.where(np.isfinite(ub - lb), ub - lb, 1.0)
    margin = 1e-10 * np.maximum(width, 1.0)
    x = np.clip(x, np.where(np.isfinite(lb), lb + margin, -np.inf), np.where(np.isfinite(ub), ub - margin, np.inf))
    g, J = fun(x)
    cost = 0.5 * (g @ g)
    radius = st.initial_radius
    trace = [{"iteration": 0, "residual_norm": math.sqrt(2 * cost), "radius": radius, "accepted": True,
              "step_norm": 0.0}]
    status = "max_iter"
    it = 0
    while it < st.max_iter:
        grad = J.T @ g
        v, dv = _cl_scaling(x, grad, lb, ub)
        g_scaled = np.max(np.abs(v * grad)) if grad.size else 0.0
        if cost == 0.0 or g_scaled < st.gtol:
            status = "gtol"
            break
        it += 1
        d = np.sqrt(v)
        plain = _Quadratic(J * d, d * grad, np.zeros_like(x))
        scaled = _Quadratic(plain.Jh, plain.gh, grad * dv)
        theta = max(0.995, 1.0 - g_scaled)
        cands = _candidate_steps(plain, scaled, g, x, lb, ub, d, radius, theta)
        preds = [plain.value(p) for p in cands]
        k = int(np.argmin(preds))
        p, pred = cands[k], -preds[k]
        s = d * p
        step_norm = float(np.linalg.norm(s))
        p_norm = float(np.linalg.norm(p))
        x_new = np.clip(x + s, lb, ub)
        accepted = False
        ratio = -np.inf
        if pred > 0:
            try:
                g_new, J_new = fun(x_new)
                cost_new = 0.5 * (g_new @ g_new)
                if np.isfinite(cost_new):
                    ratio = (cost - cost_new) / pred
            except ResidualEvaluationError:
                pass
        if ratio > st.accept_ratio:
            x, g, J, cost = x_new, g_new, J_new, cost_new
            accepted = True
        if ratio < 0.25:
            radius = 0.25 * (p_norm if p_norm > 0 else radius)
        elif ratio > 0.75 and p_norm >= 0.95 * radius:
            radius *= 2.0
        trace.append({"iteration": it, "residual_norm": math.sqrt(2 * cost), "radius": radius,
                      "accepted": accepted, "step_norm": step_norm})
        if accepted and step_norm < st.xtol * (1.0 + np.linalg.norm(x)):
            status = "xtol"
            break
        if radius * np.max(d) < st.xtol * (1.0 + np.linalg.norm(x)):
            status = "xtol"
            break
    return x, g, J, it, status, trace


def estimate_initial_state(problem: EstimationProblem, x_true=None) -> EstimationResult:
    """Estimate ``x0`` from the observations; ``eta`` is filled when ``x_true`` is given."""

    def fun(x):
        g, stack = residual_and_jacobian(problem, x)
        if not np.all(np.isfinite(g)) or not np.all(np.isfinite(stack.full)):
            raise ResidualEvaluationError("non-finite residual or Jacobian")
        return g, stack.full

    x, g, J, iters, status, trace = solve_bounded_lsq(
        fun, problem.initial_guess, problem.lower, problem.upper, problem.settings)
    rank, kappa, ok = rank_check(J)
    eta = estimation_error(x, x_true) if x_true is not None else None
    return EstimationResult(x0=x, iterations=iters, residual_norm=float(np.linalg.norm(g)),
                            condition=kappa, rank=rank, rank_ok=ok,
                            converged=status in ("gtol", "xtol"), status=status,
                            trace=trace, eta=eta)


# ---------------------------------------------------------------------------
# files

def write_observations_csv(obs: ObservationSet, names: Sequence[str], path) -> None:
    """``k,<sensor names...>`` with one row per sample."""
    sensor_names = [names[i] for i in obs.sensors]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", *sensor_names])
        for k, row in enumerate(obs.y):
            w.writerow([k] + [f"{v:.17g}" for v in row])


def read_observations_csv(path, names: Sequence[str], h: float, scheme: str = "irk") -> ObservationSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[0] != "k":
        raise ValueError(f"{path}: first column must be 'k'")
    index = {nm: i for i, nm in enumerate(names)}
    try:
        sensors = [index[nm] for nm in header[1:]]
    except KeyError as exc:
        raise ValueError(f"{path}: unknown sensor {exc.args[0]!r}") from None
    ks = [int(r[0]) for r in body]
    if ks != list(range(len(body))):
        raise ValueError(f"{path}: sample indices must be 0..N-1 in order")
    y = np.array([[float(v) for v in r[1:]] for r in body])
    return ObservationSet(y, selection_matrix(sensors, len(names)), h, scheme)


def write_estimation_report(result: EstimationResult, names: Sequence[str], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quantity", "value"])
        for nm, v in zip(names, result.x0):
            w.writerow([f"x0[{nm}]", f"{v:.17g}"])
        w.writerow(["eta", "" if result.eta is None else f"{result.eta:.17g}"])
        w.writerow(["iterations", result.iterations])
        w.writerow(["condition", f"{result.condition:.17g}"])
        w.writerow(["residual_norm", f"{result.residual_norm:.17g}"])
        w.writerow(["rank", result.rank])
        w.writerow(["converged", int(result.converged)])
        w.writerow(["status", result.status])
