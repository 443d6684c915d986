import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from netobserve.models import linear_model, load_model
from netobserve.oid import (CENTRALITY_MEASURES, Digraph, build_oid, centralities, pearson, scc_decompose,
                            selection_correlation, write_centrality_csv, write_edge_list, write_tgf)
from netobserve.reactions import Reaction, ReactionMechanism, mechanism_to_model


def naive_sccs(n, edges):
    """Components from mutual reachability by repeated DFS."""
    adj = [[] for _ in range(n)]
    for i, j in edges:
        adj[i].append(j)
    reach = []
    for s in range(n):
        seen = {s}
        todo = [s]
        while todo:
            v = todo.pop()
            for w in adj[v]:
                if w not in seen:
                    seen.add(w)
                    todo.append(w)
        reach.append(seen)
    comps = {frozenset(j for j in range(n) if j in reach[i] and i in reach[j]) for i in range(n)}
    return comps, reach


def test_pure_decay_has_only_self_loops():
    g = build_oid(linear_model(-np.eye(4)))
    assert g.edges == g.self_loops == frozenset((i, i) for i in range(4))
    scc = scc_decompose(g)
    assert scc.count == 4 and all(scc.roots)


def test_reversible_pair_is_one_component():
    m = mechanism_to_model(ReactionMechanism(("A", "B"), (Reaction((1, 0), (0, 1), 2.0, 1.0),)))
    g = build_oid(m)
    assert {(0, 1), (1, 0)} <= g.edges
    scc = scc_decompose(g)
    assert scc.components == ((0, 1),)
    assert scc.roots == (True,)


def test_h2o2_two_components(h2o2):
    scc = scc_decompose(build_oid(h2o2))
    assert scc.count == 2
    ar = h2o2.node_names.index("AR")
    comp = scc.membership[ar]
    assert scc.components[comp] == (ar,)
    assert not scc.roots[comp]
    assert sum(scc.roots) == 1


def test_cd_toy_hand_decomposition():
    model = load_model("cd_toy")
    scc = scc_decompose(build_oid(model))
    names = model.node_names
    got = {frozenset(names[i] for i in c) for c in scc.components}
    expected = {frozenset(s) for s in (["c1"], ["c2", "c3"], ["c4", "c5"], ["c6"], ["c7", "c8"], ["c9"], ["c10"])}
    assert got == expected
    assert [tuple(names[i] for i in c) for c in scc.root_components] == [("c10",)]


def test_threshold_drops_weak_edges():
    A = np.array([[-1.0, 1e-3], [0.5, -1.0]])
    assert (0, 1) in build_oid(linear_model(A)).edges
    assert (0, 1) not in build_oid(linear_model(A), threshold=1e-2).edges


def test_union_over_samples():
    from netobserve.models import ContinuousModel
    # dq0/dx1 = x0, which vanishes at the first sample only
    m = ContinuousModel(2, ("a", "b"), lambda x: np.array([x[0] * x[1], -x[1]]),
                        lambda x: np.array([[x[1], x[0]], [0.0, -1.0]]), np.full(2, -np.inf), np.full(2, np.inf))
    assert (0, 1) not in build_oid(m, [[0.0, 1.0]]).edges
    assert (0, 1) in build_oid(m, [[0.0, 1.0], [0.5, 1.0]]).edges


def test_cycle_and_chain():
    cyc = scc_decompose(Digraph.from_edges(3, [(0, 1), (1, 2), (2, 0)]))
    assert cyc.count == 1 and cyc.roots == (True,)
    chain = scc_decompose(Digraph.from_edges(3, [(0, 1), (1, 2)]))
    assert chain.count == 3
    assert chain.root_components == [(0,)]


def test_invalid_edge():
    with pytest.raises(ValueError):
        Digraph.from_edges(2, [(0, 2)])


@given(st.integers(1, 50), st.floats(0.0, 0.15), st.integers(0, 2**31))
def test_scc_against_reachability_oracle(n, p, seed):
    rng = np.random.default_rng(seed)
    edges = {(int(i), int(j)) for i, j in zip(*np.nonzero(rng.random((n, n)) < p))}
    scc = scc_decompose(Digraph.from_edges(n, edges))
    comps, reach = naive_sccs(n, edges)
    assert {frozenset(c) for c in scc.components} == comps
    # partition
    assert sorted(v for c in scc.components for v in c) == list(range(n))
    # condensation is acyclic: no component reaches itself through another
    for a, b in scc.condensation:
        u, v = scc.components[a][0], scc.components[b][0]
        assert u not in reach[v]
    has_in = {b for _, b in scc.condensation}
    assert scc.roots == tuple(c not in has_in for c in range(scc.count))


# ---------------------------------------------------------------------------
# centralities

def test_pagerank_uniform_on_complete_graph():
    n = 5
    g = Digraph.from_edges(n, [(i, j) for i in range(n) for j in range(n) if i != j])
    np.testing.assert_allclose(centralities(g)["pagerank"], 1 / n, atol=1e-10)


def test_star_centre_has_max_betweenness():
    edges = [(0, k) for k in range(1, 6)] + [(k, 0) for k in range(1, 6)]
    btw = centralities(Digraph.from_edges(6, edges))["betweenness"]
    assert np.argmax(btw) == 0 and btw[0] > 0 and np.all(btw[1:] == 0)


def test_path_in_degree_and_self_loops_ignored():
    g = Digraph.from_edges(4, [(0, 1), (1, 2), (2, 3), (2, 2)])
    table = centralities(g)
    np.testing.assert_array_equal(table["in_degree"], [0, 1, 1, 1])
    np.testing.assert_array_equal(table["out_degree"], [1, 1, 1, 0])
    # harmonic closeness on the path: distances to node 3 are 1, 2, 3
    assert table["in_closeness"][3] == pytest.approx(1 + 1 / 2 + 1 / 3)
    assert table["out_closeness"][0] == pytest.approx(1 + 1 / 2 + 1 / 3)
    assert set(table) == set(CENTRALITY_MEASURES)


@given(st.integers(2, 30), st.integers(0, 2**31))
def test_pagerank_sums_to_one(n, seed):
    rng = np.random.default_rng(seed)
    edges = {(int(i), int(j)) for i, j in zip(*np.nonzero(rng.random((n, n)) < 0.2))}
    assert abs(centralities(Digraph.from_edges(n, edges))["pagerank"].sum() - 1.0) < 1e-9


def test_pearson_examples():
    a = np.array([1.0, 2.0, 3.0, 5.0])
    assert pearson(a, a) == pytest.approx(1.0)
    assert pearson(a, -a) == pytest.approx(-1.0)
    assert pearson([1, 2, 3], [6, 4, 5]) == pytest.approx(-0.5)
    assert math.isnan(pearson([1, 1, 1], [1, 2, 3]))
    with pytest.raises(ValueError):
        pearson([1, 2], [3, 4])


def test_selection_correlation_table():
    g = Digraph.from_edges(4, [(0, 1), (1, 2), (2, 3)])
    table = centralities(g)
    out = selection_correlation(table["in_degree"] * 2 + 1, table)
    assert out["in_degree"] == pytest.approx(1.0)
    assert set(out) == set(table)


# ---------------------------------------------------------------------------
# files

def test_writers(tmp_path):
    g = Digraph.from_edges(3, [(0, 1), (1, 1), (1, 2)], names=["a", "b", "c"])
    write_edge_list(g, tmp_path / "e.txt")
    assert open(tmp_path / "e.txt").read().splitlines() == ["a b", "b b", "b c"]
    write_tgf(g, tmp_path / "g.tgf")
    assert open(tmp_path / "g.tgf").read().splitlines() == ["1 a", "2 b", "3 c", "#", "1 2", "2 3"]
    scc = scc_decompose(g)
    write_centrality_csv(g, centralities(g), tmp_path / "c.csv", scc)
    rows = open(tmp_path / "c.csv").read().splitlines()
    assert rows[0].split(",") == ["node", *CENTRALITY_MEASURES, "component", "root"]
    assert rows[1].startswith("a,") and rows[1].endswith(",0,1")
