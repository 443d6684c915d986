"""Continuous-time network models ``dx/dt = q(x)`` and the bundled demo families.

A :class:`ContinuousModel` carries the vector field, its analytic Jacobian,
node names and box bounds on the state.  Builders for linear systems,
mass-spring networks and Hill-type regulatory networks live here; reaction
networks are built in :mod:`netobserve.reactions`.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class ContractError(ValueError):
    """An operation was called with arguments violating its contract."""


class ModelConfigError(ValueError):
    """A model description is malformed or inconsistent."""


class SingularGeometryError(ArithmeticError):
    """A spring has coincident endpoints but a positive rest length."""


@dataclass(frozen=True, eq=False)
class ContinuousModel:
    """Immutable description of ``dx/dt = q(x)``.

    ``field`` and ``jacobian`` must be pure functions of a length-``n``
    float array.  ``meta`` holds model-file extras such as a recommended
    step size or conservation rows.
    """

    n: int
    node_names: tuple[str, ...]
    field: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    lower: np.ndarray
    upper: np.ndarray
    name: str = "model"
    meta: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.n < 1:
            raise ModelConfigError("model dimension must be positive")
        if len(self.node_names) != self.n:
            raise ModelConfigError(
                f"expected {self.n} node names, got {len(self.node_names)}")
        if len(set(self.node_names)) != self.n:
            raise ModelConfigError("node names must be unique")
        lower = np.asarray(self.lower, dtype=float).reshape(-1)
        upper = np.asarray(self.upper, dtype=float).reshape(-1)
        if lower.shape != (self.n,) or upper.shape != (self.n,):
            raise ModelConfigError("bounds must have length n")
        if np.any(lower > upper):
            raise ModelConfigError("lower bounds exceed upper bounds")
        lower.setflags(write=False)
        upper.setflags(write=False)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    def index(self, name: str) -> int:
        try:
            return self.node_names.index(name)
        except ValueError:
            raise KeyError(f"unknown node {name!r}") from None


def _check_state(model: ContinuousModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (model.n,):
        raise ContractError(
            f"state has shape {x.shape}, model {model.name!r} needs ({model.n},)")
    if not np.all(np.isfinite(x)):
        raise ContractError("state contains non-finite entries")
    return x


def eval_field(model: ContinuousModel, x) -> np.ndarray:
    """Return ``q(x)``."""
    return model.field(_check_state(model, x))


def eval_field_jacobian(model: ContinuousModel, x) -> np.ndarray:
    """Return the ``n x n`` matrix ``dq/dx`` at ``x``."""
    return model.jacobian(_check_state(model, x))


def finite_difference_jacobian(model: ContinuousModel, x, rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of the field, step ``rel_step*(1+|x_i|)``."""
    x = _check_state(model, x)
    jac = np.empty((model.n, model.n))
    for i in range(model.n):
        step = rel_step * (1.0 + abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        jac[:, i] = (model.field(xp) - model.field(xm)) / (2.0 * step)
    return jac


def _names(prefix: str, n: int, names: Sequence[str] | None) -> tuple[str, ...]:
    return tuple(names) if names is not None else tuple(f"{prefix}{i + 1}" for i in range(n))


def _unbounded(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.full(n, -np.inf), np.full(n, np.inf)


# ---------------------------------------------------------------------------
# simple analytic models

def linear_model(A, names: Sequence[str] | None = None, name: str = "linear") -> ContinuousModel:
    """``dx/dt = A x``.  The matrix is kept in ``meta['A']`` for Gramian oracles."""
    A = np.array(A, dtype=float, ndmin=2)
    if A.shape[0] != A.shape[1]:
        raise ModelConfigError("A must be square")
    A.setflags(write=False)
    n = A.shape[0]
    lo, hi = _unbounded(n)
    return ContinuousModel(
        n=n, node_names=_names("x", n, names),
        field=lambda x: A @ x, jacobian=lambda x: A.copy(),
        lower=lo, upper=hi, name=name, meta={"A": A})


def logistic_model(rate: float = 1.0, capacity: float = 1.0) -> ContinuousModel:
    """Scalar logistic growth ``dx/dt = rate*x*(1 - x/capacity)``."""

    def f(x):
        return rate * x * (1.0 - x / capacity)

    def jac(x):
        return np.array([[rate * (1.0 - 2.0 * x[0] / capacity)]])

    lo, hi = _unbounded(1)
    return ContinuousModel(1, ("x",), f, jac, lo, hi, name="logistic")


# ---------------------------------------------------------------------------
# mass-spring networks

@dataclass(frozen=True)
class Spring:
    i: int
    j: int | None  # None: anchored at fixed height ``anchor``
    stiffness: float
    rest_length: float
    offset: float = 0.0
    anchor: float = 0.0


@dataclass(frozen=True)
class MassSpringConfig:
    """Point masses moving vertically, coupled by planar linear springs.

    ``masses`` holds ``(mass, position, velocity)`` triples; positions and
    velocities are only defaults used as the model's nominal state.
    """

    masses: tuple[tuple[float, float, float], ...]
    springs: tuple[Spring, ...]
    friction: tuple[float, ...]

    def __post_init__(self):
        m = len(self.masses)
        if m == 0:
            raise ModelConfigError("need at least one mass")
        if len(self.friction) != m:
            raise ModelConfigError("one friction coefficient per mass")
        for mass, _, _ in self.masses:
            if not mass > 0:
                raise ModelConfigError("masses must be positive")
        for s in self.springs:
            if s.stiffness < 0 or s.offset < 0 or s.rest_length < 0:
                raise ModelConfigError("stiffness, offset and rest length must be >= 0")
            if not 0 <= s.i < m or (s.j is not None and not 0 <= s.j < m):
                raise ModelConfigError(f"spring references unknown mass: {s}")
            if s.j == s.i:
                raise ModelConfigError("spring must join two different nodes")

    def nominal_state(self) -> np.ndarray:
        return np.array([p for _, p, _ in self.masses] + [v for _, _, v in self.masses])


def _spring_terms(s: Spring, dy: float) -> tuple[float, float]:
    """Vertical force on the ``i`` end and its derivative w.r.t. ``dy``."""
    length = math.hypot(s.offset, dy)
    if length == 0.0:
        if s.rest_length > 0.0:
            raise SingularGeometryError(
                f"spring {s.i}->{s.j}: coincident endpoints with rest length {s.rest_length}")
        return 0.0, -s.stiffness
    force = -s.stiffness * (length - s.rest_length) * dy / length
    dforce = -s.stiffness * (1.0 - s.rest_length * s.offset ** 2 / length ** 3)
    return force, dforce


def mass_spring_energy(cfg: MassSpringConfig, x) -> float:
    """Total mechanical energy (kinetic + spring potential) of state ``x``."""
    m = len(cfg.masses)
    x = np.asarray(x, dtype=float)
    pos, vel = x[:m], x[m:]
    kinetic = 0.5 * sum(mass * v * v for (mass, _, _), v in zip(cfg.masses, vel))
    potential = 0.0
    for s in cfg.springs:
        other = s.anchor if s.j is None else pos[s.j]
        length = math.hypot(s.offset, pos[s.i] - other)
        potential += 0.5 * s.stiffness * (length - s.rest_length) ** 2
    return kinetic + potential


def make_mass_spring_model(cfg: MassSpringConfig, names: Sequence[str] | None = None,
                           name: str = "mass_spring") -> ContinuousModel:
    m = len(cfg.masses)
    inv_mass = np.array([1.0 / mass for mass, _, _ in cfg.masses])
    mu = np.asarray(cfg.friction, dtype=float)

    def f(x):
        pos, vel = x[:m], x[m:]
        force = -mu * vel
        for s in cfg.springs:
            other = s.anchor if s.j is None else pos[s.j]
            fi, _ = _spring_terms(s, pos[s.i] - other)
            force[s.i] += fi
            if s.j is not None:
                force[s.j] -= fi
        return np.concatenate([vel, force * inv_mass])

    def jac(x):
        pos = x[:m]
        out = np.zeros((2 * m, 2 * m))
        out[:m, m:] = np.eye(m)
        dF = np.zeros((m, m))
        for s in cfg.springs:
            other = s.anchor if s.j is None else pos[s.j]
            _, d = _spring_terms(s, pos[s.i] - other)
            dF[s.i, s.i] += d
            if s.j is not None:
                dF[s.i, s.j] -= d
                dF[s.j, s.i] -= d
                dF[s.j, s.j] += d
        out[m:, :m] = dF * inv_mass[:, None]
        out[m:, m:] = np.diag(-mu * inv_mass)
        return out

    if names is None:
        names = [f"y{i + 1}" for i in range(m)] + [f"v{i + 1}" for i in range(m)]
    lo, hi = _unbounded(2 * m)
    return ContinuousModel(2 * m, tuple(names), f, jac, lo, hi, name=name,
                           meta={"nominal_state": cfg.nominal_state(), "config": cfg})


# ---------------------------------------------------------------------------
# Hill-type regulatory networks

@dataclass(frozen=True)
class HillNode:
    activators: tuple[int, ...] = ()
    inhibitors: tuple[int, ...] = ()
    exponent: float = 2.0
    threshold: float = 0.5
    decay: float = 1.0


@dataclass(frozen=True)
class HillNetworkConfig:
    nodes: tuple[HillNode, ...]

    def __post_init__(self):
        n = len(self.nodes)
        for k, node in enumerate(self.nodes):
            if not 0 < node.threshold < 1:
                raise ModelConfigError(f"node {k}: threshold must lie in (0, 1)")
            if not node.exponent > 0:
                raise ModelConfigError(f"node {k}: Hill exponent must be positive")
            if not node.decay > 0:
                raise ModelConfigError(f"node {k}: decay rate must be positive")
            for src in node.activators + node.inhibitors:
                if not 0 <= src < n:
                    raise ModelConfigError(f"node {k}: unknown source {src}")


def hill(u: float, m: float, theta: float) -> tuple[float, float]:
    """Activating Hill function ``u^m/(u^m+theta^m)`` and its derivative.

    Negative arguments are clamped at zero.
    """
    if u <= 0.0:
        return 0.0, (1.0 / theta if m == 1.0 and u == 0.0 else 0.0)
    um = u ** m
    tm = theta ** m
    val = um / (um + tm)
    deriv = m * u ** (m - 1.0) * tm / (um + tm) ** 2
    return val, deriv


def make_hill_model(cfg: HillNetworkConfig, names: Sequence[str] | None = None,
                    name: str = "hill") -> ContinuousModel:
    """Each node obeys ``dx_i/dt = prod(Hill terms) - decay_i*x_i``.

    Activators contribute ``h(u)``, inhibitors ``1 - h(u)``; a node without
    regulators has no production term.
    """
    n = len(cfg.nodes)
    decay = np.array([node.decay for node in cfg.nodes])
    regs = [[(src, +1) for src in node.activators] + [(src, -1) for src in node.inhibitors]
            for node in cfg.nodes]

    def _terms(x, k):
        node = cfg.nodes[k]
        vals, ders = [], []
        for src, sign in regs[k]:
            v, d = hill(x[src], node.exponent, node.threshold)
            if sign < 0:
                v, d = 1.0 - v, -d
            vals.append(v)
            ders.append(d)
        return vals, ders

    def f(x):
        out = -decay * x
        for k in range(n):
            if regs[k]:
                vals, _ = _terms(x, k)
                out[k] += math.prod(vals)
        return out

    def jac(x):
        out = np.diag(-decay)
        for k in range(n):
            if not regs[k]:
                continue
            vals, ders = _terms(x, k)
            for p, (src, _) in enumerate(regs[k]):
                others = math.prod(v for q, v in enumerate(vals) if q != p)
                out[k, src] += ders[p] * others
        return out

    return ContinuousModel(n, _names("g", n, names), f, jac, np.zeros(n), np.ones(n), name=name)


# ---------------------------------------------------------------------------
# model files

_COMMON_KEYS = {"kind", "name", "description", "recommended_h", "nominal_state", "init_law"}


def _strict(table: Mapping, allowed: set[str], where: str):
    unknown = set(table) - allowed
    if unknown:
        raise ModelConfigError(f"{where}: unknown keys {sorted(unknown)}")


def _meta(doc: Mapping) -> dict:
    meta = {}
    if "recommended_h" in doc:
        meta["recommended_h"] = float(doc["recommended_h"])
    if "init_law" in doc:
        meta["init_law"] = str(doc["init_law"])
    if "description" in doc:
        meta["description"] = str(doc["description"])
    if "nominal_state" in doc:
        meta["nominal_state"] = np.array(doc["nominal_state"], dtype=float)
    return meta


def _hill_from_doc(doc: Mapping, source: str) -> ContinuousModel:
    _strict(doc, _COMMON_KEYS | {"nodes", "node"}, source)
    names = list(doc.get("nodes", []))
    tables = doc.get("node", [])
    if len(tables) != len(names):
        raise ModelConfigError(f"{source}: {len(names)} node names but {len(tables)} [[node]] tables")
    index = {nm: k for k, nm in enumerate(names)}
    built = []
    for k, t in enumerate(tables):
        where = f"{source}: [[node]] #{k + 1}"
        _strict(t, {"name", "activators", "inhibitors", "exponent", "threshold", "decay"}, where)
        if t.get("name", names[k]) != names[k]:
            raise ModelConfigError(f"{where}: name {t['name']!r} does not match nodes[{k}]")
        try:
            act = tuple(index[s] for s in t.get("activators", []))
            inh = tuple(index[s] for s in t.get("inhibitors", []))
        except KeyError as exc:
            raise ModelConfigError(f"{where}: undeclared node {exc.args[0]!r}") from None
        built.append(HillNode(act, inh, float(t.get("exponent", 2.0)),
                              float(t.get("threshold", 0.5)), float(t.get("decay", 1.0))))
    model = make_hill_model(HillNetworkConfig(tuple(built)), names, name=doc.get("name", "hill"))
    return _with_meta(model, _meta(doc))


def _mass_spring_from_doc(doc: Mapping, source: str) -> ContinuousModel:
    _strict(doc, _COMMON_KEYS | {"mass", "spring"}, source)
    masses, friction, names = [], [], []
    for k, t in enumerate(doc.get("mass", [])):
        _strict(t, {"name", "m", "y", "v", "friction"}, f"{source}: [[mass]] #{k + 1}")
        names.append(t.get("name", f"m{k + 1}"))
        masses.append((float(t["m"]), float(t.get("y", 0.0)), float(t.get("v", 0.0))))
        friction.append(float(t.get("friction", 0.0)))
    index = {nm: k for k, nm in enumerate(names)}
    springs = []
    for k, t in enumerate(doc.get("spring", [])):
        where = f"{source}: [[spring]] #{k + 1}"
        _strict(t, {"i", "j", "anchor", "k", "l0", "d"}, where)
        try:
            i = index[t["i"]]
            j = index[t["j"]] if "j" in t else None
        except KeyError as exc:
            raise ModelConfigError(f"{where}: unknown mass {exc.args[0]!r}") from None
        if (j is None) == ("anchor" not in t):
            raise ModelConfigError(f"{where}: give exactly one of 'j' or 'anchor'")
        springs.append(Spring(i, j, float(t["k"]), float(t.get("l0", 0.0)),
                              float(t.get("d", 0.0)), float(t.get("anchor", 0.0))))
    cfg = MassSpringConfig(tuple(masses), tuple(springs), tuple(friction))
    state_names = [f"y_{nm}" for nm in names] + [f"v_{nm}" for nm in names]
    model = make_mass_spring_model(cfg, state_names, name=doc.get("name", "mass_spring"))
    return _with_meta(model, _meta(doc))


def _linear_from_doc(doc: Mapping, source: str) -> ContinuousModel:
    _strict(doc, _COMMON_KEYS | {"A", "nodes"}, source)
    model = linear_model(doc["A"], doc.get("nodes"), name=doc.get("name", "linear"))
    return _with_meta(model, _meta(doc))


def _with_meta(model: ContinuousModel, extra: Mapping) -> ContinuousModel:
    if not extra:
        return model
    return ContinuousModel(model.n, model.node_names, model.field, model.jacobian,
                           model.lower, model.upper, model.name, {**model.meta, **extra})


def read_toml(path) -> dict:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ModelConfigError(f"{path}: {exc}") from None


def bundled_model_path(name: str) -> Path:
    """Path of a model file shipped in ``netobserve/models``."""
    fname = name if name.endswith(".toml") else f"{name}.toml"
    path = Path(str(resources.files("netobserve") / "models" / fname))
    if not path.exists():
        raise FileNotFoundError(f"no bundled model named {name!r}")
    return path


def load_model(path) -> ContinuousModel:
    """Load any supported model file, dispatching on its ``kind`` key.

    A bare name (no suffix, not an existing path) refers to a bundled model.
    """
    p = Path(path)
    if not p.exists() and p.suffix == "" and len(p.parts) == 1:
        p = bundled_model_path(str(path))
    doc = read_toml(p)
    kind = doc.get("kind", "reaction")
    source = str(p)
    if kind == "reaction":
        from .reactions import mechanism_from_doc, mechanism_to_model
        mech = mechanism_from_doc(doc, source, p.read_text())
        return _with_meta(mechanism_to_model(mech), _meta(doc))
    if kind == "hill":
        return _hill_from_doc(doc, source)
    if kind == "mass_spring":
        return _mass_spring_from_doc(doc, source)
    if kind == "linear":
        return _linear_from_doc(doc, source)
    raise ModelConfigError(f"{source}: unknown model kind {kind!r}")
