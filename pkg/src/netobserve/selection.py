"""Sensor placement by maximising ``log det(J1^T J1)`` over 0/1 masks.

All solvers work on a *mask objective*: any callable mapping a mask to an
:class:`ObjectiveValue`.  The Jacobian objective below and the Gramian
objectives in :mod:`netobserve.gramians` share the same solvers.

Masks compare by ``(retained eigenvalue count, sum of their logs)``, so a
degenerate mask (objective ``-inf``) still ranks above a mask that loses
more directions.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .integrators import DiscreteModel, simulate
from .sensitivity import apply_output, free_stack, trajectory_factors

EPS = np.finfo(float).eps
EXHAUSTIVE_BUDGET = 1_000_000
N_STARTS = 5


class InfeasibleConstraintsError(ValueError):
    pass


class SelectionBudgetError(RuntimeError):
    def __init__(self, count: int, budget: int):
        super().__init__(f"{count} feasible masks exceed the exhaustive budget of {budget}")
        self.count = count
        self.budget = budget


def philox_rng(seed) -> np.random.Generator:
    """Counter-based generator used for every seeded draw in the package."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))


# ---------------------------------------------------------------------------
# masks and constraints

@dataclass(frozen=True)
class SensorMask:
    b: tuple[int, ...]

    def __post_init__(self):
        b = tuple(int(v) for v in self.b)
        if any(v not in (0, 1) for v in b):
            raise ValueError("mask entries must be 0 or 1")
        object.__setattr__(self, "b", b)

    @classmethod
    def from_nodes(cls, nodes: Iterable[int], n: int) -> "SensorMask":
        b = [0] * n
        for i in nodes:
            b[int(i)] = 1
        return cls(tuple(b))

    @property
    def n(self) -> int:
        return len(self.b)

    @property
    def r(self) -> int:
        return sum(self.b)

    @property
    def nodes(self) -> tuple[int, ...]:
        return tuple(i for i, v in enumerate(self.b) if v)

    @property
    def fraction(self) -> float:
        return self.r / self.n

    def array(self) -> np.ndarray:
        return np.array(self.b, dtype=float)


@dataclass(frozen=True)
class SelectionConstraints:
    """Cardinality plus forced/excluded nodes.

    ``cover`` lists node groups that each need at least one sensor (used for
    root strongly connected components).
    """

    n: int
    r: int
    forced: frozenset = frozenset()
    excluded: frozenset = frozenset()
    cover: tuple = ()

    def __post_init__(self):
        forced = frozenset(int(i) for i in self.forced)
        excluded = frozenset(int(i) for i in self.excluded)
        cover = tuple(frozenset(int(i) for i in g) for g in self.cover)
        object.__setattr__(self, "forced", forced)
        object.__setattr__(self, "excluded", excluded)
        object.__setattr__(self, "cover", cover)
        for i in forced | excluded | frozenset().union(*cover):
            if not 0 <= i < self.n:
                raise InfeasibleConstraintsError(f"node index {i} out of range")
        if forced & excluded:
            raise InfeasibleConstraintsError(f"nodes both forced and excluded: {sorted(forced & excluded)}")
        if not len(forced) <= self.r <= self.n - len(excluded):
            raise InfeasibleConstraintsError(
                f"need |forced|={len(forced)} <= r={self.r} <= n-|excluded|={self.n - len(excluded)}")
        uncovered = self._uncovered(forced)
        if any(not (g - excluded) for g in uncovered):
            raise InfeasibleConstraintsError("a cover group lies entirely in the excluded set")
        if _min_hitting(uncovered, excluded) > self.r - len(forced):
            raise InfeasibleConstraintsError("r is too small to cover every required group")

    @property
    def free(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.n) if i not in self.forced and i not in self.excluded)

    @property
    def slots(self) -> int:
        return self.r - len(self.forced)

    def _uncovered(self, chosen) -> list[frozenset]:
        chosen = frozenset(chosen)
        return [g for g in self.cover if not g & chosen]

    def admits(self, nodes) -> bool:
        s = frozenset(nodes)
        return (len(s) == self.r and self.forced <= s and not (s & self.excluded)
                and not self._uncovered(s))

    def count(self) -> int:
        """Number of feasible masks (exact, by enumeration when cover groups are present)."""
        if not self.cover:
            return math.comb(len(self.free), self.slots)
        return sum(1 for _ in self.feasible_masks())

    def feasible_masks(self):
        """Feasible node tuples in lexicographic order."""
        for combo in itertools.combinations(self.free, self.slots):
            nodes = tuple(sorted(self.forced.union(combo)))
            if not self._uncovered(nodes):
                yield nodes


def _min_hitting(groups, excluded) -> int:
    # smallest number of nodes meeting every group; groups are few and small
    groups = [g - excluded for g in groups]
    if not groups:
        return 0
    universe = sorted(frozenset().union(*groups))
    for k in range(1, len(groups) + 1):
        for combo in itertools.combinations(universe, k):
            s = frozenset(combo)
            if all(g & s for g in groups):
                return k
    return len(groups)


# ---------------------------------------------------------------------------
# objective values

@dataclass(frozen=True)
class ObjectiveValue:
    value: float          # log det, -inf when degenerate
    retained: int         # eigenvalues above the degeneracy threshold
    logsum: float         # sum of logs of the retained eigenvalues
    degenerate: bool

    @property
    def key(self) -> tuple[int, float]:
        return (self.retained, self.logsum)


def logdet_from_eigenvalues(lam: np.ndarray, n: int) -> ObjectiveValue:
    """``log det`` of a PSD matrix from its eigenvalues with the degeneracy guard."""
    lam = np.asarray(lam, dtype=float)
    lam_max = float(np.max(lam)) if lam.size else 0.0
    if lam.size < n:
        lam = np.concatenate([lam, np.zeros(n - lam.size)])
    if lam_max <= 0.0:
        return ObjectiveValue(-math.inf, 0, 0.0, True)
    kept = lam[lam > n * EPS * lam_max]
    logsum = float(np.sum(np.log(kept)))
    if kept.size < n:
        return ObjectiveValue(-math.inf, int(kept.size), logsum, True)
    return ObjectiveValue(logsum, n, logsum, False)


def gram_logdet(J: np.ndarray) -> ObjectiveValue:
    """``log det(J^T J)`` via the singular values of ``J``."""
    n = J.shape[1]
    s = np.linalg.svd(J, compute_uv=False)
    return logdet_from_eigenvalues(s * s, n)


class JacobianObjective:
    """``b -> log det(J1(b)^T J1(b))`` with ``J2`` built from one simulation.

    ``J2`` is computed on the first call and reused for every mask, since
    ``J1(b) = (I_N kron diag(b)) J2``.
    """

    def __init__(self, dm: DiscreteModel, x0, N: int, scale: float = 1.0):
        self.dm = dm
        self.x0 = np.asarray(x0, dtype=float)
        self.N = int(N)
        self.n = dm.n
        self.scale = float(scale)
        self._J2 = None

    @property
    def J2(self) -> np.ndarray:
        if self._J2 is None:
            traj = simulate(self.dm, self.x0, self.N)
            self._J2 = self.scale * free_stack(trajectory_factors(self.dm, traj), self.n)
        return self._J2

    def stack(self, mask) -> np.ndarray:
        b = np.asarray(mask.b if isinstance(mask, SensorMask) else mask, dtype=float)
        return apply_output(np.diag(b), self.J2, self.n, signed=False)

    def __call__(self, mask) -> ObjectiveValue:
        return gram_logdet(self.stack(mask))


def selection_objective(dm: DiscreteModel, x0, N: int, mask) -> ObjectiveValue:
    """Objective of a single mask (one trajectory simulation)."""
    return JacobianObjective(dm, x0, N)(mask)


# ---------------------------------------------------------------------------
# solvers

@dataclass
class SelectionResult:
    mask: SensorMask
    objective: float
    evaluations: int
    solver: str
    degenerate: bool
    value: ObjectiveValue | None = None
    seed: int | None = None
    trace: list = field(default_factory=list)


class _Counted:
    def __init__(self, fn: Callable, n: int):
        self.fn = fn
        self.n = n
        self.calls = 0

    def __call__(self, nodes) -> ObjectiveValue:
        self.calls += 1
        return self.fn(SensorMask.from_nodes(nodes, self.n))


def _better(a: ObjectiveValue, b: ObjectiveValue | None) -> bool:
    return b is None or a.key > b.key


def _result(nodes, val, ev, solver, trace=None, seed=None) -> SelectionResult:
    mask = SensorMask.from_nodes(nodes, ev.n)
    return SelectionResult(mask, val.value, ev.calls, solver, val.degenerate, val, seed, trace or [])


def select_exhaustive(objective: Callable, constraints: SelectionConstraints,
                      budget: int = EXHAUSTIVE_BUDGET) -> SelectionResult:
    """Evaluate every feasible mask; ties go to the lexicographically smallest node tuple."""
    count = constraints.count()
    if count > budget:
        raise SelectionBudgetError(count, budget)
    ev = _Counted(objective, constraints.n)
    best, best_val = None, None
    for nodes in constraints.feasible_masks():
        val = ev(nodes)
        if _better(val, best_val):
            best, best_val = nodes, val
    return _result(best, best_val, ev, "exhaustive")


def select_greedy(objective: Callable, constraints: SelectionConstraints) -> SelectionResult:
    """Add one sensor at a time with the largest objective gain.

    When the remaining slots equal the number of uncovered cover groups,
    candidates are restricted to nodes of those groups.
    """
    ev = _Counted(objective, constraints.n)
    chosen = set(constraints.forced)
    trace = []
    current = None
    while len(chosen) < constraints.r:
        cands = [i for i in constraints.free if i not in chosen]
        uncovered = constraints._uncovered(chosen)
        slots_left = constraints.r - len(chosen)
        if uncovered and _min_hitting(uncovered, constraints.excluded) >= slots_left:
            cover_nodes = frozenset().union(*uncovered)
            cands = [i for i in cands if i in cover_nodes]
        best, best_val = None, None
        for a in cands:
            val = ev(tuple(sorted(chosen | {a})))
            if _better(val, best_val):
                best, best_val = a, val
        chosen.add(best)
        current = best_val
        trace.append({"added": best, "objective": best_val.value, "retained": best_val.retained})
    if current is None:
        current = ev(tuple(sorted(chosen)))
    return _result(tuple(sorted(chosen)), current, ev, "greedy", trace)


def random_selection(constraints: SelectionConstraints, seed) -> SensorMask:
    """Uniform draw over feasible masks (rejection on cover groups)."""
    rng = philox_rng(seed)
    free = np.array(constraints.free, dtype=int)
    for _ in range(100_000):
        pick = rng.choice(free, size=constraints.slots, replace=False) if constraints.slots else []
        nodes = constraints.forced.union(int(i) for i in pick)
        if constraints.admits(nodes):
            return SensorMask.from_nodes(nodes, constraints.n)
    raise InfeasibleConstraintsError("could not draw a feasible mask")


def select_stochastic(objective: Callable, constraints: SelectionConstraints, budget: int,
                      seed) -> SelectionResult:
    """Multi-start single-swap hill climbing.

    The five starting masks are always evaluated; swap proposals run while
    the total evaluation count is below ``budget``.  Each start climbs until
    no swap of a selected free node with an unselected free node improves
    the objective.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    start_seq, *climb_seqs = ss.spawn(N_STARTS + 1)
    start_rng = philox_rng(start_seq)
    ev = _Counted(objective, constraints.n)
    starts = []
    for _ in range(N_STARTS):
        nodes = random_selection(constraints, start_rng).nodes
        starts.append([nodes, ev(nodes)])
    trace = [{"start": k, "objective": v.value} for k, (_, v) in enumerate(starts)]
    forced = constraints.forced
    for k, state in enumerate(starts):
        rng = philox_rng(climb_seqs[k])
        improved = True
        while improved and ev.calls < budget:
            improved = False
            nodes = set(state[0])
            inside = [i for i in sorted(nodes) if i not in forced]
            outside = [i for i in constraints.free if i not in nodes]
            pairs = [(a, b) for a in inside for b in outside]
            for idx in rng.permutation(len(pairs)):
                if ev.calls >= budget:
                    break
                a, b = pairs[idx]
                trial = tuple(sorted((nodes - {a}) | {b}))
                if not constraints.admits(trial):
                    continue
                val = ev(trial)
                if _better(val, state[1]):
                    state[0], state[1] = trial, val
                    trace.append({"start": k, "swap": (a, b), "objective": val.value})
                    improved = True
                    break
    best_nodes, best_val = None, None
    for nodes, val in starts:
        if _better(val, best_val) or (best_val is not None and val.key == best_val.key and nodes < best_nodes):
            best_nodes, best_val = nodes, val
    return _result(best_nodes, best_val, ev, "stochastic", trace, seed if isinstance(seed, int) else None)


def write_selection_report(results: Sequence[SelectionResult], path, names: Sequence[str] | None = None) -> None:
    """CSV ``solver,seed,objective,evaluations,degenerate,<mask columns>``."""
    if not results:
        raise ValueError("no results to write")
    n = results[0].mask.n
    cols = list(names) if names is not None else [f"b{i}" for i in range(n)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["solver", "seed", "objective", "evaluations", "degenerate", *cols])
        for res in results:
            w.writerow([res.solver, "" if res.seed is None else res.seed, f"{res.objective:.17g}",
                        res.evaluations, int(res.degenerate), *res.mask.b])
