"""Seeded experiment driver: sweeps, method comparisons and selection frequencies.

Random numbers come from Philox streams keyed by
``(seed, realization, stream, ...)``, so a run's draws do not depend on
which other runs share the sweep or on execution order.  Truth and initial
guess depend only on the realization, so cells of a sweep are paired.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .estimation import (EstimationProblem, ObservationSet, ResidualEvaluationError, SolverSettings,
                         estimate_initial_state, selection_matrix)
from .gramians import GramianConfig, GramianObjective, GramianSimulationError, random_orthogonal_set
from .integrators import (DiscreteModel, IntegrationFailure, StepFailure, count_simulations,
                          reference_simulate, simulate)
from .models import ContinuousModel, ModelConfigError, load_model, read_toml
from .oid import build_oid, scc_decompose
from .selection import (JacobianObjective, SelectionConstraints, SensorMask, random_selection,
                        select_exhaustive, select_greedy, select_stochastic)
from .sensitivity import SingularSensitivityError

INIT_LAWS = ("uniform01", "one_plus_uniform")
SOLVERS = ("random", "greedy", "stochastic", "exhaustive")
METHODS = (1, 2, 3, 4)
NUMERICAL_ERRORS = (StepFailure, IntegrationFailure, ResidualEvaluationError, SingularSensitivityError,
                    GramianSimulationError, np.linalg.LinAlgError, FloatingPointError)

# stream identifiers
_TRUTH, _GUESS, _MASK, _SOLVER, _TSET = range(5)


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent Philox generator for ``(seed, key...)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def generate_truth(model: ContinuousModel, law: str, seed) -> np.ndarray:
    """Initial state drawn from ``U(0,1)^n`` or ``1 + U(0,1)^n``."""
    rng = seed if isinstance(seed, np.random.Generator) else stream(seed)
    if law not in INIT_LAWS:
        raise ValueError(f"unknown initial-state law {law!r}; expected one of {INIT_LAWS}")
    u = rng.random(model.n)
    while np.any(u == 0.0):
        u = rng.random(model.n)
    return u + 1.0 if law == "one_plus_uniform" else u


def sensor_count(f: float, n: int) -> int:
    return max(1, min(n, int(math.floor(f * n + 0.5))))


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class ExperimentConfig:
    model: str
    scheme: str = "irk"
    h: float | None = None
    N: tuple[int, ...] = (50,)
    f: tuple[float, ...] = (1.0,)
    realizations: int = 1
    seed: int = 0
    solver: str = "random"
    init_law: str | None = None
    out: str = "."
    same_model_data: bool = False
    oid_blind: bool = False
    forced: tuple[str, ...] = ()
    excluded: tuple[str, ...] = ()
    budget: int = 200
    max_iter: int = 500
    gramian_v: int = 2
    workers: int = 1

    def __post_init__(self):
        for name in ("N", "f", "forced", "excluded"):
            val = getattr(self, name)
            object.__setattr__(self, name, tuple(val) if isinstance(val, (list, tuple)) else (val,))
        if not self.N or not self.f:
            raise ModelConfigError("N and f lists must be nonempty")
        if any(int(N) < 1 for N in self.N):
            raise ModelConfigError("every N must be at least 1")
        if any(not 0 < f <= 1 for f in self.f):
            raise ModelConfigError("sensor fractions must lie in (0, 1]")
        if self.realizations < 1:
            raise ModelConfigError("realizations must be at least 1")
        if self.solver not in SOLVERS:
            raise ModelConfigError(f"solver must be one of {SOLVERS}")
        if self.scheme not in ("be", "ti", "irk"):
            raise ModelConfigError("scheme must be be, ti or irk")
        if self.init_law is not None and self.init_law not in INIT_LAWS:
            raise ModelConfigError(f"init_law must be one of {INIT_LAWS}")
        if self.h is not None and not (self.h > 0 and math.isfinite(self.h)):
            raise ModelConfigError("h must be positive and finite")
        object.__setattr__(self, "N", tuple(int(N) for N in self.N))
        object.__setattr__(self, "f", tuple(float(f) for f in self.f))

    def config_hash(self) -> str:
        d = dataclasses.asdict(self)
        d.pop("out")
        d.pop("workers")
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


_CONFIG_FIELDS = {f.name for f in dataclasses.fields(ExperimentConfig)}


def load_config(path, **overrides) -> ExperimentConfig:
    """Read an experiment TOML file; keyword overrides win over file values."""
    doc = read_toml(path)
    unknown = set(doc) - _CONFIG_FIELDS
    if unknown:
        raise ModelConfigError(f"{path}: unknown keys {sorted(unknown)}")
    doc.update({k: v for k, v in overrides.items() if v is not None})
    if "model" not in doc:
        raise ModelConfigError(f"{path}: missing 'model'")
    model = Path(str(doc["model"]))
    if not model.is_absolute() and (Path(path).parent / model).exists():
        doc["model"] = str(Path(path).parent / model)
    try:
        return ExperimentConfig(**doc)
    except TypeError as exc:
        raise ModelConfigError(f"{path}: {exc}") from None


@lru_cache(maxsize=16)
def _model(path: str) -> ContinuousModel:
    return load_model(path)


def resolve_h(cfg: ExperimentConfig, model: ContinuousModel) -> float:
    if cfg.h is not None:
        return float(cfg.h)
    h = model.meta.get("recommended_h")
    if h is None:
        raise ModelConfigError(f"model {model.name!r} has no recommended_h; pass h explicitly")
    return float(h)


def resolve_law(cfg: ExperimentConfig, model: ContinuousModel) -> str:
    return cfg.init_law or model.meta.get("init_law", "one_plus_uniform")


def build_constraints(model: ContinuousModel, r: int, cfg: ExperimentConfig) -> SelectionConstraints:
    """Cardinality ``r`` plus forced/excluded nodes and, unless OID-blind, root-SCC cover."""
    idx = {nm: k for k, nm in enumerate(model.node_names)}
    try:
        forced = frozenset(idx[nm] for nm in cfg.forced)
        excluded = frozenset(idx[nm] for nm in cfg.excluded)
    except KeyError as exc:
        raise ModelConfigError(f"unknown node {exc.args[0]!r}") from None
    cover = ()
    if not cfg.oid_blind:
        cover = tuple(scc_decompose(build_oid(model)).root_components)
    return SelectionConstraints(model.n, max(r, len(forced)), forced, excluded, cover)


# ---------------------------------------------------------------------------
# single runs

@dataclass
class RunRecord:
    config_hash: str
    seed: int
    realization: int
    f: float
    r: int
    N: int
    h: float
    scheme: str
    solver: str
    mask: str
    eta: float
    z: int
    kappa: float
    objective: float
    converged: bool
    failure: str = ""
    wall_time: float = 0.0

    def row(self) -> list:
        def num(v):
            return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.17g}"
        return [self.config_hash, self.seed, self.realization, f"{self.f:.17g}", self.r, self.N,
                f"{self.h:.17g}", self.scheme, self.solver, self.mask, num(self.eta), self.z,
                num(self.kappa), num(self.objective), int(self.converged), self.failure,
                f"{self.wall_time:.6f}"]


SWEEP_COLUMNS = ["config_hash", "seed", "realization", "f", "r", "N", "h", "scheme", "solver", "mask",
                 "eta", "z", "kappa", "objective", "converged", "failure", "wall_time"]


def make_data(model, dm: DiscreteModel, x_true, N: int, same_model: bool) -> np.ndarray:
    """States ``x_0 .. x_{N-1}``: the discrete model itself or the reference integrator."""
    if same_model:
        return simulate(dm, x_true, N).states
    return reference_simulate(model, x_true, np.arange(N) * dm.h).states


def choose_mask(solver: str, dm, x_true, N, constraints, seed: int, realization: int, key,
                budget: int):
    """Mask and objective for one run; the objective is ``nan`` for random masks."""
    if solver == "random":
        return random_selection(constraints, stream(seed, realization, _MASK, *key)), math.nan
    obj = JacobianObjective(dm, x_true, N)
    if solver == "greedy":
        res = select_greedy(obj, constraints)
    elif solver == "exhaustive":
        res = select_exhaustive(obj, constraints)
    else:
        ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(realization, _SOLVER, *key))
        res = select_stochastic(obj, constraints, budget, ss)
    return res.mask, res.objective


def estimate_with_mask(model, dm, states, mask: SensorMask, x_true, x_guess, max_iter: int):
    C = selection_matrix(mask.nodes, model.n)
    obs = ObservationSet(states @ C.T, C, dm.h, dm.scheme.value)
    problem = EstimationProblem(obs, dm, x_guess, settings=SolverSettings(max_iter=max_iter))
    return estimate_initial_state(problem, x_true)


def _run_one(cfg: ExperimentConfig, fi: int, Ni: int, realization: int) -> RunRecord:
    model = _model(cfg.model)
    h = resolve_h(cfg, model)
    law = resolve_law(cfg, model)
    f, N = cfg.f[fi], cfg.N[Ni]
    r = sensor_count(f, model.n)
    t0 = time.perf_counter()
    rec = RunRecord(cfg.config_hash(), cfg.seed, realization, f, r, N, h, cfg.scheme, cfg.solver, "",
                    math.nan, 0, math.nan, math.nan, False)
    try:
        dm = DiscreteModel(model, cfg.scheme, h)
        x_true = generate_truth(model, law, stream(cfg.seed, realization, _TRUTH))
        x_guess = generate_truth(model, law, stream(cfg.seed, realization, _GUESS))
        constraints = build_constraints(model, r, cfg)
        rec.r = constraints.r
        mask, objective = choose_mask(cfg.solver, dm, x_true, N, constraints, cfg.seed, realization,
                                      (fi, Ni), cfg.budget)
        rec.mask = "".join(map(str, mask.b))
        rec.objective = objective
        states = make_data(model, dm, x_true, N, cfg.same_model_data)
        res = estimate_with_mask(model, dm, states, mask, x_true, x_guess, cfg.max_iter)
        rec.eta, rec.z, rec.kappa, rec.converged = res.eta, res.iterations, res.condition, res.converged
        if not res.converged:
            rec.failure = res.status
    except NUMERICAL_ERRORS as exc:
        rec.failure = type(exc).__name__
    rec.wall_time = time.perf_counter() - t0
    return rec


def _run_one_packed(args):
    return _run_one(*args)


def _cells(cfg: ExperimentConfig):
    return [(cfg, fi, Ni, k) for fi in range(len(cfg.f)) for Ni in range(len(cfg.N))
            for k in range(cfg.realizations)]


def _map(fn, jobs, workers: int):
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs))


def run_sweep(cfg: ExperimentConfig, write: bool = True) -> list[RunRecord]:
    """Every ``(f, N, realization)`` cell; rows are written in sorted-key order."""
    _model(cfg.model)   # fail early on a bad model file
    records = _map(_run_one_packed, _cells(cfg), cfg.workers)
    records.sort(key=lambda r: (r.f, r.N, r.realization))
    if write:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SWEEP_COLUMNS)
            for rec in records:
                w.writerow(rec.row())
    return records


# ---------------------------------------------------------------------------
# method comparison

METHOD_NAMES = {1: "gramian_def2+search", 2: "gramian_def3+search", 3: "jacobian+search",
                4: "jacobian+greedy"}


@dataclass
class MethodOutcome:
    method: int
    mask: SensorMask | None
    objective: float
    simulations: int
    eta: float
    wall_time: float
    failure: str = ""


def method_objective(method: int, model, dm, x_true, N: int, T_set=()):
    """Mask objective used by a method; Gramian horizons match the estimation window."""
    if method in (3, 4):
        return JacobianObjective(dm, x_true, N)
    tau = max(N - 1, 1) * dm.h
    cfg = GramianConfig(tau=tau, dt=dm.h, x0=x_true, T_set=T_set if method == 2 else ())
    return GramianObjective(model, cfg, 2 if method == 1 else 3)


def run_method(method: int, model, dm, x_true, x_guess, states, N, constraints, seed, realization, key,
               budget, max_iter) -> MethodOutcome:
    t0 = time.perf_counter()
    try:
        T_set = ()
        if method == 2:
            T_set = tuple(random_orthogonal_set(model.n, 2, stream(seed, realization, _TSET, *key)))
        with count_simulations() as counter:
            obj = method_objective(method, model, dm, x_true, N, T_set)
            if method == 4:
                res = select_greedy(obj, constraints)
            else:
                ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(realization, _SOLVER, *key))
                res = select_stochastic(obj, constraints, budget, ss)
        est = estimate_with_mask(model, dm, states, res.mask, x_true, x_guess, max_iter)
        return MethodOutcome(method, res.mask, res.objective, counter.count, est.eta,
                             time.perf_counter() - t0, "" if est.converged else est.status)
    except NUMERICAL_ERRORS as exc:
        return MethodOutcome(method, None, math.nan, 0, math.nan, time.perf_counter() - t0,
                             type(exc).__name__)


def _log_diff(a: float, b: float) -> float:
    if not (a > 0 and b > 0):
        return math.nan
    return math.log(a) - math.log(b)


COMPARE_COLUMNS = ["config_hash", "seed", "realization", "f", "r", "N", "method", "name", "mask",
                   "objective", "simulations", "eta", "log_eta_minus_m3", "failure", "wall_time"]


def _compare_cell(args):
    cfg, fi, Ni, realization, methods = args
    model = _model(cfg.model)
    h = resolve_h(cfg, model)
    law = resolve_law(cfg, model)
    f, N = cfg.f[fi], cfg.N[Ni]
    dm = DiscreteModel(model, cfg.scheme, h)
    x_true = generate_truth(model, law, stream(cfg.seed, realization, _TRUTH))
    x_guess = generate_truth(model, law, stream(cfg.seed, realization, _GUESS))
    constraints = build_constraints(model, sensor_count(f, model.n), cfg)
    try:
        states = make_data(model, dm, x_true, N, cfg.same_model_data)
    except NUMERICAL_ERRORS as exc:
        return [(cfg, f, constraints.r, N, realization,
                 MethodOutcome(m, None, math.nan, 0, math.nan, 0.0, type(exc).__name__)) for m in methods]
    out = []
    for m in methods:
        res = run_method(m, model, dm, x_true, x_guess, states, N, constraints, cfg.seed, realization,
                         (fi, Ni), cfg.budget, cfg.max_iter)
        out.append((cfg, f, constraints.r, N, realization, res))
    return out


def compare_methods(cfg: ExperimentConfig, methods: Sequence[int] = METHODS, write: bool = True):
    """Run Methods 1-4 on identical truths and data; emits ``compare.csv``."""
    _model(cfg.model)
    for m in methods:
        if m not in METHODS:
            raise ModelConfigError(f"unknown method {m}")
    jobs = [(cfg, fi, Ni, k, tuple(methods)) for fi in range(len(cfg.f)) for Ni in range(len(cfg.N))
            for k in range(cfg.realizations)]
    rows = [row for cell in _map(_compare_cell, jobs, cfg.workers) for row in cell]
    rows.sort(key=lambda t: (t[1], t[3], t[4], t[5].method))
    eta3 = {(f, N, k): res.eta for _, f, _, N, k, res in rows if res.method == 3}
    if write:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        h = cfg.config_hash()
        with open(out / "compare.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COMPARE_COLUMNS)
            for _, f, r, N, k, res in rows:
                diff = _log_diff(res.eta, eta3[(f, N, k)]) if (f, N, k) in eta3 else math.nan
                w.writerow([h, cfg.seed, k, f"{f:.17g}", r, N, res.method, METHOD_NAMES[res.method],
                            "" if res.mask is None else "".join(map(str, res.mask.b)),
                            f"{res.objective:.17g}", res.simulations, f"{res.eta:.17g}", f"{diff:.17g}",
                            res.failure, f"{res.wall_time:.6f}"])
    return [(f, r, N, k, res) for _, f, r, N, k, res in rows]


# ---------------------------------------------------------------------------
# selection frequencies

def selection_probabilities(results: Mapping[float, Sequence]) -> np.ndarray:
    """Per-node selection frequency, averaged within each ``f`` and then uniformly over ``f``.

    ``results`` maps a sensor fraction to one or more masks (``SensorMask``
    or 0/1 sequences).
    """
    if not results:
        raise ValueError("no selection results")
    per_f = []
    for f, masks in results.items():
        arr = np.array([m.b if isinstance(m, SensorMask) else m for m in masks], dtype=float)
        if arr.size == 0:
            raise ValueError(f"no selection results for f={f}")
        per_f.append(arr.mean(axis=0))
    return np.mean(per_f, axis=0)


def optimal_masks(cfg: ExperimentConfig) -> dict[float, list[SensorMask]]:
    """Optimal masks per sensor fraction for each realization's true state."""
    model = _model(cfg.model)
    h = resolve_h(cfg, model)
    law = resolve_law(cfg, model)
    dm = DiscreteModel(model, cfg.scheme, h)
    N = cfg.N[0]
    out: dict[float, list[SensorMask]] = {}
    for fi, f in enumerate(cfg.f):
        constraints = build_constraints(model, sensor_count(f, model.n), cfg)
        masks = []
        for k in range(cfg.realizations):
            x_true = generate_truth(model, law, stream(cfg.seed, k, _TRUTH))
            solver = cfg.solver if cfg.solver != "random" else "greedy"
            mask, _ = choose_mask(solver, dm, x_true, N, constraints, cfg.seed, k, (fi, 0), cfg.budget)
            masks.append(mask)
        out[f] = masks
    return out


def write_probabilities_csv(names: Sequence[str], probs, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node", "probability"])
        for nm, p in zip(names, probs):
            w.writerow([nm, f"{p:.17g}"])
