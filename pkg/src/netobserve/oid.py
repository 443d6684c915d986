"""Observability inference diagrams.

The diagram has an edge ``i -> j`` whenever ``dq_i/dx_j`` is nonzero at one
of a set of sample states, i.e. whenever node ``j`` appears in the equation
of node ``i``.  Its strongly connected components without incoming edges
(root components) each need at least one sensor.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import networkx as nx
import numpy as np

from .models import ContinuousModel
from .selection import philox_rng

CENTRALITY_MEASURES = ("in_degree", "out_degree", "in_closeness", "out_closeness",
                       "betweenness", "pagerank")


@dataclass(frozen=True)
class Digraph:
    names: tuple[str, ...]
    edges: frozenset          # (i, j) pairs, self-loops allowed

    def __post_init__(self):
        n = len(self.names)
        edges = frozenset((int(i), int(j)) for i, j in self.edges)
        for i, j in edges:
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"edge ({i}, {j}) references a missing node")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "edges", edges)

    @classmethod
    def from_edges(cls, n: int, edges: Iterable, names: Sequence[str] | None = None) -> "Digraph":
        return cls(tuple(names) if names is not None else tuple(str(i) for i in range(n)), frozenset(edges))

    @property
    def n(self) -> int:
        return len(self.names)

    @property
    def self_loops(self) -> frozenset:
        return frozenset(e for e in self.edges if e[0] == e[1])

    def without_self_loops(self) -> "Digraph":
        return Digraph(self.names, frozenset(e for e in self.edges if e[0] != e[1]))

    def successors(self) -> list[list[int]]:
        adj = [[] for _ in range(self.n)]
        for i, j in sorted(self.edges):
            adj[i].append(j)
        return adj

    def to_networkx(self, self_loops: bool = False) -> nx.DiGraph:
        G = nx.DiGraph()
        G.add_nodes_from(range(self.n))
        G.add_edges_from(e for e in self.edges if self_loops or e[0] != e[1])
        return G


def sample_interior_states(model: ContinuousModel, count: int = 10, seed=0) -> np.ndarray:
    """Seeded random states strictly inside the model bounds."""
    rng = philox_rng(seed)
    lo, hi = model.lower, model.upper
    u = rng.uniform(0.05, 0.95, size=(count, model.n))
    out = np.empty_like(u)
    both = np.isfinite(lo) & np.isfinite(hi)
    only_lo = np.isfinite(lo) & ~np.isfinite(hi)
    only_hi = ~np.isfinite(lo) & np.isfinite(hi)
    free = ~np.isfinite(lo) & ~np.isfinite(hi)
    out[:, both] = lo[both] + u[:, both] * (hi[both] - lo[both])
    out[:, only_lo] = lo[only_lo] + 1.0 + u[:, only_lo]
    out[:, only_hi] = hi[only_hi] - 1.0 - u[:, only_hi]
    out[:, free] = 2.0 * u[:, free] - 1.0
    return out


def build_oid(model: ContinuousModel, sample_states=None, threshold: float = 0.0) -> Digraph:
    """Edge ``i -> j`` iff ``|dq_i/dx_j| > threshold`` at any sample state."""
    states = sample_interior_states(model) if sample_states is None else np.atleast_2d(sample_states)
    if states.shape[0] < 1:
        raise ValueError("need at least one sample state")
    pattern = np.zeros((model.n, model.n), dtype=bool)
    for x in states:
        pattern |= np.abs(model.jacobian(np.asarray(x, dtype=float))) > threshold
    return Digraph(model.node_names, frozenset(zip(*map(lambda a: a.tolist(), np.nonzero(pattern)))))


@dataclass(frozen=True)
class SccDecomposition:
    components: tuple[tuple[int, ...], ...]
    membership: tuple[int, ...]
    condensation: frozenset      # edges between component indices
    roots: tuple[bool, ...]

    @property
    def count(self) -> int:
        return len(self.components)

    @property
    def root_components(self) -> list[tuple[int, ...]]:
        return [c for c, r in zip(self.components, self.roots) if r]


def scc_decompose(g: Digraph) -> SccDecomposition:
    """Tarjan's algorithm (iterative); components are listed by smallest node."""
    n = g.n
    adj = g.successors()
    index = [-1] * n
    low = [0] * n
    on_stack = [False] * n
    stack: list[int] = []
    found: list[list[int]] = []
    counter = 0
    for root in range(n):
        if index[root] != -1:
            continue
        work = [(root, 0)]
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack[root] = True
        while work:
            v, k = work[-1]
            if k < len(adj[v]):
                work[-1] = (v, k + 1)
                w = adj[v][k]
                if index[w] == -1:
                    index[w] = low[w] = counter
                    counter += 1
                    stack.append(w)
                    on_stack[w] = True
                    work.append((w, 0))
                elif on_stack[w]:
                    low[v] = min(low[v], index[w])
                continue
            work.pop()
            if work:
                u = work[-1][0]
                low[u] = min(low[u], low[v])
            if low[v] == index[v]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack[w] = False
                    comp.append(w)
                    if w == v:
                        break
                found.append(sorted(comp))
    found.sort(key=lambda c: c[0])
    membership = [0] * n
    for c, comp in enumerate(found):
        for v in comp:
            membership[v] = c
    cond = frozenset((membership[i], membership[j]) for i, j in g.edges if membership[i] != membership[j])
    has_in = {b for _, b in cond}
    roots = tuple(c not in has_in for c in range(len(found)))
    return SccDecomposition(tuple(tuple(c) for c in found), tuple(membership), cond, roots)


def centralities(g: Digraph) -> dict[str, np.ndarray]:
    """Per-node centralities on the graph without self-loops.

    Closeness is harmonic (sum of reciprocal distances): ``in_closeness``
    uses distances from other nodes, ``out_closeness`` distances to them.
    """
    G = g.to_networkx(self_loops=False)
    n = g.n
    order = range(n)
    hin = nx.harmonic_centrality(G)
    hout = nx.harmonic_centrality(G.reverse(copy=True))
    btw = nx.betweenness_centrality(G, normalized=True)
    pr = nx.pagerank(G, alpha=0.85, tol=1e-10 / max(n, 1), max_iter=10_000) if n else {}
    return {
        "in_degree": np.array([G.in_degree(v) for v in order], dtype=float),
        "out_degree": np.array([G.out_degree(v) for v in order], dtype=float),
        "in_closeness": np.array([hin[v] for v in order], dtype=float),
        "out_closeness": np.array([hout[v] for v in order], dtype=float),
        "betweenness": np.array([btw[v] for v in order], dtype=float),
        "pagerank": np.array([pr[v] for v in order], dtype=float),
    }


def pearson(a, b) -> float:
    """Pearson correlation; ``nan`` when either vector has zero variance."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.size < 3:
        raise ValueError("need two vectors of equal length >= 3")
    da, db = a - a.mean(), b - b.mean()
    den = math.sqrt(float(da @ da) * float(db @ db))
    if den == 0.0:
        return math.nan
    return float(da @ db) / den


def selection_correlation(probabilities, table: Mapping[str, np.ndarray]) -> dict[str, float]:
    """Pearson coefficient between selection probabilities and each centrality."""
    return {name: pearson(probabilities, values) for name, values in table.items()}


# ---------------------------------------------------------------------------
# files

def write_edge_list(g: Digraph, path, self_loops: bool = True) -> None:
    with open(path, "w") as fh:
        for i, j in sorted(g.edges):
            if self_loops or i != j:
                fh.write(f"{g.names[i]} {g.names[j]}\n")


def write_tgf(g: Digraph, path, self_loops: bool = False) -> None:
    """Trivial Graph Format: node lines, ``#``, edge lines."""
    with open(path, "w") as fh:
        for k, nm in enumerate(g.names):
            fh.write(f"{k + 1} {nm}\n")
        fh.write("#\n")
        for i, j in sorted(g.edges):
            if self_loops or i != j:
                fh.write(f"{i + 1} {j + 1}\n")


def write_centrality_csv(g: Digraph, table: Mapping[str, np.ndarray], path,
                         scc: SccDecomposition | None = None) -> None:
    cols = list(table)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", *cols] + (["component", "root"] if scc else []))
        for k, nm in enumerate(g.names):
            row = [nm, *(f"{table[c][k]:.17g}" for c in cols)]
            if scc:
                c = scc.membership[k]
                row += [c, int(scc.roots[c])]
            w.writerow(row)
