"""Empirical observability Gramians and Gramian-based sensor selection.

Three constructions are provided, all from output responses to perturbed
initial states simulated with the IRK model at step ``dt`` and integrated
with the trapezoid rule on ``t_0 = 0, ..., t_Q = tau``:

* ``gramian_def1``: responses from ``c_m T_l e_i`` (added to ``base``),
  centred on their long-time mean.
* ``gramian_def2``: central differences ``y(x0 + gamma e_i) - y(x0 - gamma e_i)``.
* ``gramian_def3``: central differences along ``c_m T_l e_i``.

Each Gramian is a sum of per-output contributions, which is what makes the
mask-parameterised Gramian ``X(b) = sum_k b_k G_k`` cheap to evaluate.
The normalisation uses ``v``, the number of orthogonal matrices, so that
all three reduce to the linear observability Gramian.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .integrators import DiscreteModel, IntegrationFailure, StepFailure, simulate, simulate_states
from .models import ContinuousModel
from .selection import (ObjectiveValue, SelectionConstraints, SensorMask, logdet_from_eigenvalues,
                        philox_rng, select_exhaustive, select_greedy, select_stochastic)

log = logging.getLogger(__name__)

DEFAULT_SCALES = (0.25, 0.5, 0.75, 1.0)
DEFAULT_GAMMA = 0.5


class GramianSimulationError(RuntimeError):
    def __init__(self, message: str, where: tuple):
        super().__init__(message)
        self.where = where


class UnstableSystemError(ArithmeticError):
    pass


def random_orthogonal_set(n: int, v: int, seed) -> list[np.ndarray]:
    """``v`` orthogonal matrices from QR of standard-normal draws.

    The signs of ``diag(R)`` are folded into ``Q`` and each column is then
    oriented so that its diagonal entry is non-negative; the result is a
    deterministic function of the seed (``+1`` when ``n = 1``).
    """
    if v < 1:
        raise ValueError("v must be at least 1")
    rng = philox_rng(seed)
    out = []
    for _ in range(v):
        S = rng.standard_normal((n, n))
        Q, R = np.linalg.qr(S)
        sign = np.sign(np.diag(R))
        sign[sign == 0] = 1.0
        Q = Q * sign
        orient = np.where(np.diag(Q) < 0, -1.0, 1.0)
        out.append(Q * orient)
    return out


@dataclass(frozen=True)
class GramianConfig:
    tau: float
    dt: float
    scales: tuple[float, ...] = DEFAULT_SCALES
    gamma: float = DEFAULT_GAMMA
    T_set: tuple = ()
    x0: np.ndarray | None = None
    mean: str = "terminal"

    def __post_init__(self):
        if not (self.dt > 0 and self.tau > 0):
            raise ValueError("tau and dt must be positive")
        Q = int(round(self.tau / self.dt))
        if Q < 1 or abs(Q * self.dt - self.tau) > 1e-9 * self.tau:
            raise ValueError(f"tau={self.tau} is not a whole number of dt={self.dt} segments")
        if not self.scales or any(c <= 0 for c in self.scales):
            raise ValueError("scales must be positive")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.mean not in ("terminal", "tail", "window"):
            raise ValueError("mean must be 'terminal', 'tail' or 'window'")
        Ts = tuple(np.array(T, dtype=float) for T in self.T_set)
        for T in Ts:
            if T.ndim != 2 or T.shape[0] != T.shape[1]:
                raise ValueError("T matrices must be square")
            if np.linalg.norm(T.T @ T - np.eye(T.shape[0])) > 1e-10:
                raise ValueError("T matrices must be orthogonal")
        object.__setattr__(self, "scales", tuple(float(c) for c in self.scales))
        object.__setattr__(self, "T_set", Ts)
        if self.x0 is not None:
            object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))

    @property
    def Q(self) -> int:
        return int(round(self.tau / self.dt))

    def transforms(self, n: int) -> tuple[np.ndarray, ...]:
        if not self.T_set:
            return (np.eye(n),)
        if any(T.shape != (n, n) for T in self.T_set):
            raise ValueError(f"T matrices must be {n}x{n}")
        return self.T_set

    def base(self, n: int) -> np.ndarray:
        if self.x0 is None:
            return np.zeros(n)
        if self.x0.shape != (n,):
            raise ValueError("base state has wrong length")
        return self.x0


@dataclass
class EmpiricalGramian:
    matrix: np.ndarray
    definition: int
    config: GramianConfig
    per_output: np.ndarray = field(repr=False, default=None)   # (r, n, n)
    simulations: int = 0

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(0.5 * (self.matrix + self.matrix.T))


def trapezoid_weights(Q: int, dt: float) -> np.ndarray:
    w = np.full(Q + 1, dt)
    w[0] = w[-1] = 0.5 * dt
    return w


def _clip(model: ContinuousModel, X: np.ndarray, labels) -> np.ndarray:
    """Clip perturbed initial states to the bounds, logging one summary line."""
    lo, hi = model.lower, model.upper
    bad = np.any((X < lo) | (X > hi), axis=1)
    if np.any(bad):
        first = labels[int(np.argmax(bad))]
        log.warning("%d of %d perturbed initial states cross the state bounds and were clipped "
                    "(first: %s)", int(bad.sum()), len(labels), first)
        return np.clip(X, lo, hi)
    return X


def _responses(model, config, starts) -> list[np.ndarray]:
    """Full-state trajectories (Q+1, n) for each ``(label, x0)``."""
    dm = DiscreteModel(model, "irk", config.dt)
    labels = [where for where, _ in starts]
    X0 = _clip(model, np.array([x for _, x in starts], dtype=float), labels)
    if model.meta.get("A") is not None:
        return list(simulate_states(dm, X0, config.Q + 1))
    out = []
    for where, x in zip(labels, X0):
        try:
            out.append(simulate(dm, x, config.Q + 1).states)
        except (StepFailure, IntegrationFailure) as exc:
            raise GramianSimulationError(f"simulation from perturbation {where} failed: {exc}", where) from exc
    return out


def _output(C, n):
    C = np.zeros((0, n)) if C is None else np.atleast_2d(np.asarray(C, dtype=float))
    if C.shape[1] != n:
        raise ValueError(f"C must have {n} columns")
    return C


def _assemble(per_output, definition, config, sims) -> EmpiricalGramian:
    total = per_output.sum(axis=0) if per_output.shape[0] else np.zeros(per_output.shape[1:])
    total = 0.5 * (total + total.T)
    return EmpiricalGramian(total, definition, config, per_output, sims)


def _difference_gramian(model, C, config, directions, definition) -> EmpiricalGramian:
    """Shared body of the central-difference Gramians.

    ``directions`` is a list of ``(T, c)``; each contributes
    ``1/(4 v s c^2) T (int Phi^T Phi dt) T^T`` with ``v s = len(directions)``.
    """
    n = model.n
    C = _output(C, n)
    x0 = config.base(n)
    w = trapezoid_weights(config.Q, config.dt)
    per_output = np.zeros((C.shape[0], n, n))
    sims = 0
    for l, (T, c, tag) in enumerate(directions):
        starts = []
        for i in range(n):
            starts.append((tag + (i, "+"), x0 + c * T[:, i]))
            starts.append((tag + (i, "-"), x0 - c * T[:, i]))
        trajs = _responses(model, config, starts)
        sims += len(trajs)
        # Phi[t, k, i] = y_k^{+i}(t) - y_k^{-i}(t)
        diff = np.stack([trajs[2 * i] - trajs[2 * i + 1] for i in range(n)], axis=2)
        Phi = np.einsum("kj,tji->tki", C, diff)
        G = np.einsum("t,tki,tkj->kij", w, Phi, Phi)
        G = np.einsum("ab,kbc,dc->kad", T, G, T)
        per_output += G / (4.0 * len(directions) * c * c)
    return _assemble(per_output, definition, config, sims)


def gramian_def2(model: ContinuousModel, C, config: GramianConfig) -> EmpiricalGramian:
    """``1/(4 gamma^2) int_0^tau Phi^T Phi dt`` from ``x0 +- gamma e_i``."""
    return _difference_gramian(model, C, config, [(np.eye(model.n), config.gamma, ())], 2)


def gramian_def3(model: ContinuousModel, C, config: GramianConfig) -> EmpiricalGramian:
    """Central differences along ``c_m T_l e_i`` for every ``T_l`` and scale ``c_m``."""
    Ts = config.transforms(model.n)
    dirs = [(T, c, (l, m)) for l, T in enumerate(Ts) for m, c in enumerate(config.scales)]
    return _difference_gramian(model, C, config, dirs, 3)


def _mean(Y: np.ndarray, w: np.ndarray, how: str) -> np.ndarray:
    if how == "terminal":
        return Y[-1]
    if how == "window":
        return (w @ Y) / w.sum()
    half = Y.shape[0] // 2
    tail = Y[half:]
    wt = trapezoid_weights(tail.shape[0] - 1, 1.0)
    return (wt @ tail) / wt.sum()


def gramian_def1(model: ContinuousModel, C, config: GramianConfig) -> EmpiricalGramian:
    """Responses from ``base + c_m T_l e_i`` centred on their long-time mean.

    The infinite-horizon mean is estimated by ``config.mean``: the terminal
    value (default; exact once trajectories have settled), the average over
    ``[tau/2, tau]``, or the average over the whole window.
    """
    n = model.n
    C = _output(C, n)
    base = config.base(n)
    w = trapezoid_weights(config.Q, config.dt)
    Ts = config.transforms(n)
    vs = len(Ts) * len(config.scales)
    per_output = np.zeros((C.shape[0], n, n))
    sims = 0
    for l, T in enumerate(Ts):
        for m, c in enumerate(config.scales):
            trajs = _responses(model, config, [((l, m, i), base + c * T[:, i]) for i in range(n)])
            sims += n
            Y = np.stack([X @ C.T for X in trajs], axis=2)          # (t, k, i)
            Ybar = np.stack([_mean(Y[:, :, i], w, config.mean) for i in range(n)], axis=1)
            D = Y - Ybar[None]
            G = np.einsum("t,tki,tkj->kij", w, D, D)
            G = np.einsum("ab,kbc,dc->kad", T, G, T)
            per_output += G / (vs * c * c)
    return _assemble(per_output, 1, config, sims)


GRAMIANS = {1: gramian_def1, 2: gramian_def2, 3: gramian_def3}


def empirical_gramian(model, C, config, definition: int) -> EmpiricalGramian:
    try:
        fn = GRAMIANS[int(definition)]
    except (KeyError, ValueError):
        raise ValueError(f"unknown Gramian definition {definition!r}") from None
    return fn(model, C, config)


def analytic_linear_gramian(A, C, tau) -> np.ndarray:
    """``int_0^tau exp(A^T t) C^T C exp(A t) dt``.

    Finite ``tau``: the block exponential of ``[[-A^T, C^T C], [0, A]]`` on a
    short horizon ``tau / 2^k``, then doubling with
    ``W(2t) = W(t) + exp(A^T t) W(t) exp(A t)``.  ``tau = inf`` solves the
    Lyapunov equation and requires a Hurwitz ``A``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    n = A.shape[0]
    CtC = C.T @ C
    if np.isinf(tau):
        if np.max(np.linalg.eigvals(A).real) >= 0:
            raise UnstableSystemError("infinite-horizon Gramian needs a Hurwitz A")
        W = scipy.linalg.solve_continuous_lyapunov(A.T, -CtC)
        return 0.5 * (W + W.T)
    if tau < 0:
        raise ValueError("tau must be non-negative")
    norm = np.linalg.norm(A, 1)
    k = max(0, int(np.ceil(np.log2(max(norm * tau, 1e-300))))) if tau > 0 else 0
    t = tau / 2 ** k
    M = np.zeros((2 * n, 2 * n))
    M[:n, :n] = -A.T
    M[:n, n:] = CtC
    M[n:, n:] = A
    E = scipy.linalg.expm(M * t)
    Phi = E[n:, n:]
    W = Phi.T @ E[:n, n:]
    for _ in range(k):
        W = W + Phi.T @ W @ Phi
        Phi = Phi @ Phi
    return 0.5 * (W + W.T)


# ---------------------------------------------------------------------------
# selection

class GramianObjective:
    """``b -> log det X(b)`` where ``X(b) = sum_k b_k G_k`` over full-state outputs.

    The perturbation trajectories are simulated once, on the first call.
    """

    def __init__(self, model: ContinuousModel, config: GramianConfig, definition: int):
        self.model = model
        self.config = config
        self.definition = int(definition)
        self.n = model.n
        self._gramian = None

    @property
    def gramian(self) -> EmpiricalGramian:
        if self._gramian is None:
            self._gramian = empirical_gramian(self.model, np.eye(self.n), self.config, self.definition)
        return self._gramian

    def matrix(self, mask) -> np.ndarray:
        b = np.asarray(mask.b if isinstance(mask, SensorMask) else mask, dtype=float)
        X = np.einsum("k,kij->ij", b, self.gramian.per_output)
        return 0.5 * (X + X.T)

    def __call__(self, mask) -> ObjectiveValue:
        return logdet_from_eigenvalues(np.linalg.eigvalsh(self.matrix(mask)), self.n)


def gramian_select(model: ContinuousModel, config: GramianConfig, constraints: SelectionConstraints,
                   definition: int = 2, solver: str = "greedy", budget: int = 200, seed=0):
    """Choose sensors by maximising ``log det X(b)`` of an empirical Gramian."""
    obj = GramianObjective(model, config, definition)
    if solver == "exhaustive":
        res = select_exhaustive(obj, constraints)
    elif solver == "greedy":
        res = select_greedy(obj, constraints)
    elif solver == "stochastic":
        res = select_stochastic(obj, constraints, budget, seed)
    else:
        raise ValueError(f"unknown solver {solver!r}")
    res.solver = f"gramian{definition}-{res.solver}"
    return res


# ---------------------------------------------------------------------------
# files

def write_gramian_csv(G: EmpiricalGramian | np.ndarray, names: Sequence[str], path) -> None:
    M = G.matrix if isinstance(G, EmpiricalGramian) else np.asarray(G)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", *names])
        for nm, row in zip(names, M):
            w.writerow([nm, *(f"{v:.17g}" for v in row)])


def write_eigenvalue_report(G: EmpiricalGramian, path) -> None:
    lam = G.eigenvalues()[::-1]
    lam_max = lam[0] if lam.size else 0.0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "eigenvalue", "relative"])
        for i, v in enumerate(lam):
            w.writerow([i, f"{v:.17g}", f"{(v / lam_max if lam_max else 0.0):.17g}"])
