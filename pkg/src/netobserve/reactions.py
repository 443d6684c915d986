"""Mass-action reaction networks ``dx/dt = Gamma q_c(x)``.

Mechanism files are TOML::

    kind = "reaction"
    species = ["H2", "O2", "H2O"]
    temperature = 2500.0
    conservation = [[2, 0, 2], [0, 2, 1]]   # optional atom-balance rows

    [[reaction]]
    reactants = {H2 = 2, O2 = 1}
    products = {H2O = 2}
    kf = 1.5                                  # or {A = .., b = .., Ea = ..}
    kr = 0.0

Rates are either explicit non-negative numbers or modified-Arrhenius
parameters evaluated once at the mechanism temperature (Ea in J/mol).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .models import ContinuousModel, ModelConfigError, read_toml

GAS_CONSTANT = 8.314462618  # J/(mol K)
MAX_STOICH = 6


class UndeclaredSpeciesError(ModelConfigError):
    pass


def arrhenius_rate(A: float, b: float, Ea: float, T: float) -> float:
    """Modified Arrhenius law ``A * T**b * exp(-Ea/(R T))``."""
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    return A * T ** b * math.exp(-Ea / (GAS_CONSTANT * T))


@dataclass(frozen=True)
class Arrhenius:
    A: float
    b: float = 0.0
    Ea: float = 0.0

    def at(self, T: float) -> float:
        return arrhenius_rate(self.A, self.b, self.Ea, T)


@dataclass(frozen=True)
class Reaction:
    alpha: tuple[int, ...]
    beta: tuple[int, ...]
    forward: float | Arrhenius
    backward: float | Arrhenius = 0.0
    label: str = ""

    def rates(self, T: float) -> tuple[float, float]:
        kf = self.forward.at(T) if isinstance(self.forward, Arrhenius) else float(self.forward)
        kr = self.backward.at(T) if isinstance(self.backward, Arrhenius) else float(self.backward)
        if kf < 0 or kr < 0 or not (math.isfinite(kf) and math.isfinite(kr)):
            raise ModelConfigError(f"reaction {self.label or '?'}: rates must be finite and >= 0")
        return kf, kr


@dataclass(frozen=True)
class ReactionMechanism:
    species: tuple[str, ...]
    reactions: tuple[Reaction, ...]
    temperature: float = 300.0
    conservation: tuple[tuple[float, ...], ...] = ()
    name: str = "mechanism"
    meta: Mapping = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.species)
        if len(set(self.species)) != n:
            raise ModelConfigError("species names must be unique")
        for k, rx in enumerate(self.reactions):
            if len(rx.alpha) != n or len(rx.beta) != n:
                raise ModelConfigError(f"reaction {k + 1}: stoichiometry length != {n}")
            if not any(rx.alpha) and not any(rx.beta):
                raise ModelConfigError(f"reaction {k + 1}: empty reaction")
            for c in rx.alpha + rx.beta:
                if c < 0 or c > MAX_STOICH or int(c) != c:
                    raise ModelConfigError(
                        f"reaction {k + 1}: coefficients must be integers in [0, {MAX_STOICH}]")
            rx.rates(self.temperature)
        for row in self.conservation:
            if len(row) != n:
                raise ModelConfigError("conservation rows must have one entry per species")

    @property
    def n(self) -> int:
        return len(self.species)

    @property
    def n_reactions(self) -> int:
        return len(self.reactions)

    def stoichiometry(self) -> np.ndarray:
        """``Gamma`` with entries ``beta_ji - alpha_ji`` (species x reactions)."""
        if not self.reactions:
            return np.zeros((self.n, 0))
        alpha = np.array([rx.alpha for rx in self.reactions], dtype=float)
        beta = np.array([rx.beta for rx in self.reactions], dtype=float)
        return (beta - alpha).T


class _MassAction:
    """Vectorised evaluation of ``q_c`` and its Jacobian."""

    def __init__(self, mech: ReactionMechanism):
        n, nr = mech.n, mech.n_reactions
        self.n = n
        self.nr = nr
        T = mech.temperature
        rates = [rx.rates(T) for rx in mech.reactions]
        self.kf = np.array([r[0] for r in rates])
        self.kr = np.array([r[1] for r in rates])
        self.alpha = np.array([rx.alpha for rx in mech.reactions], dtype=np.int64).reshape(nr, n)
        self.beta = np.array([rx.beta for rx in mech.reactions], dtype=np.int64).reshape(nr, n)
        self.gamma = mech.stoichiometry()
        self._da = self._derivative_tables(self.alpha)
        self._db = self._derivative_tables(self.beta)

    def _derivative_tables(self, stoich):
        # exps[j, i, k] = stoich[j, k] - delta_ik, zeroed where stoich[j, i] == 0
        eye = np.eye(self.n, dtype=np.int64)
        exps = stoich[:, None, :] - eye[None, :, :]
        present = stoich > 0
        exps = np.where(present[:, :, None], exps, 0)
        return stoich.astype(float), exps

    def rates(self, x):
        return self.kf * np.prod(x ** self.alpha, axis=1) - self.kr * np.prod(x ** self.beta, axis=1)

    def rate_jacobian(self, x):
        ca, ea = self._da
        cb, eb = self._db
        da = ca * np.prod(x ** ea, axis=2)
        db = cb * np.prod(x ** eb, axis=2)
        return self.kf[:, None] * da - self.kr[:, None] * db

    def field(self, x):
        if self.nr == 0:
            return np.zeros(self.n)
        return self.gamma @ self.rates(x)

    def jacobian(self, x):
        if self.nr == 0:
            return np.zeros((self.n, self.n))
        return self.gamma @ self.rate_jacobian(x)


def mechanism_to_model(mech: ReactionMechanism) -> ContinuousModel:
    """Mass-action model with lower bound 0 on every concentration."""
    ma = _MassAction(mech)
    meta = dict(mech.meta)
    meta.update(mechanism=mech, gamma=ma.gamma, rates=ma.rates, rate_jacobian=ma.rate_jacobian)
    if mech.conservation:
        meta["conservation"] = np.array(mech.conservation, dtype=float)
    return ContinuousModel(
        n=mech.n, node_names=mech.species, field=ma.field, jacobian=ma.jacobian,
        lower=np.zeros(mech.n), upper=np.full(mech.n, np.inf), name=mech.name, meta=meta)


# ---------------------------------------------------------------------------
# file loading

_MECH_KEYS = {"kind", "name", "description", "species", "temperature", "conservation",
              "reaction", "recommended_h", "nominal_state", "init_law"}
_REACTION_KEYS = {"reactants", "products", "kf", "kr", "equation"}
_ARRHENIUS_KEYS = {"A", "b", "Ea"}


def _reaction_lines(text: str) -> list[int]:
    return [k + 1 for k, line in enumerate(text.splitlines())
            if re.match(r"\s*\[\[\s*reaction\s*\]\]", line)]


def _parse_rate(value, where: str) -> float | Arrhenius:
    if isinstance(value, Mapping):
        unknown = set(value) - _ARRHENIUS_KEYS
        if unknown or "A" not in value:
            raise ModelConfigError(f"{where}: Arrhenius rate needs A and optional b, Ea; got {sorted(value)}")
        return Arrhenius(float(value["A"]), float(value.get("b", 0.0)), float(value.get("Ea", 0.0)))
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ModelConfigError(f"{where}: rate must be a number or an Arrhenius table")
    return float(value)


def mechanism_from_doc(doc: Mapping, source: str = "<mechanism>", text: str | None = None) -> ReactionMechanism:
    unknown = set(doc) - _MECH_KEYS
    if unknown:
        raise ModelConfigError(f"{source}: unknown keys {sorted(unknown)}")
    if "species" not in doc:
        raise ModelConfigError(f"{source}: missing 'species'")
    species = tuple(str(s) for s in doc["species"])
    index = {s: k for k, s in enumerate(species)}
    lines = _reaction_lines(text) if text else []
    reactions = []
    for k, t in enumerate(doc.get("reaction", [])):
        where = f"{source}: reaction #{k + 1}" + (f" (line {lines[k]})" if k < len(lines) else "")
        bad = set(t) - _REACTION_KEYS
        if bad:
            raise ModelConfigError(f"{where}: unknown keys {sorted(bad)}")
        if "kf" not in t:
            raise ModelConfigError(f"{where}: missing 'kf'")
        sides = []
        for key in ("reactants", "products"):
            coeffs = [0] * len(species)
            for sp, c in t.get(key, {}).items():
                if sp not in index:
                    raise UndeclaredSpeciesError(f"{where}: species {sp!r} not declared in 'species'")
                if isinstance(c, bool) or not isinstance(c, int):
                    raise ModelConfigError(f"{where}: coefficient of {sp!r} must be an integer")
                coeffs[index[sp]] = c
            sides.append(tuple(coeffs))
        reactions.append(Reaction(sides[0], sides[1], _parse_rate(t["kf"], f"{where} kf"),
                                  _parse_rate(t.get("kr", 0.0), f"{where} kr"),
                                  label=t.get("equation", f"R{k + 1}")))
    conservation = tuple(tuple(float(v) for v in row) for row in doc.get("conservation", []))
    try:
        return ReactionMechanism(species, tuple(reactions), float(doc.get("temperature", 300.0)),
                                 conservation, name=str(doc.get("name", "mechanism")))
    except ModelConfigError as exc:
        raise ModelConfigError(f"{source}: {exc}") from None


def load_mechanism(path) -> ReactionMechanism:
    """Parse a mechanism file strictly (unknown keys are errors)."""
    from pathlib import Path
    p = Path(path)
    return mechanism_from_doc(read_toml(p), str(p), p.read_text())
