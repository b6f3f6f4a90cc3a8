import numpy as np
import pytest

from detgp.dynamic import insert_nodes, neighbor_aggregate, refresh_embeddings
from detgp.gp import cross_kernel
from detgp.graph import Graph, GraphError, remove_node, update_edge
from detgp.model import parameter_hash
from detgp.text import Vocabulary

from conftest import random_graph, random_model


def _setup(rng, n=15, p=0.25, isolated=0):
    m = random_model(rng)
    # token names match random_model's vocabulary: w1..w8
    m.vocab = Vocabulary({f"w{i}": i for i in range(1, 9)})
    g = random_graph(rng, n, p=p, isolated=isolated)
    raw = {nid: " ".join(f"w{k}" for k in rng.integers(1, 9, size=rng.integers(1, 5))) for nid in g.node_ids}
    texts = {nid: m.vocab.encode(r.split()) for nid, r in raw.items()}
    return m, g, raw, texts


def test_remove_then_reinsert_matches_forward(rng):
    m, g, raw, texts = _setup(rng)
    H = refresh_embeddings(m, g, texts)
    before = parameter_hash(m)
    v = g.node_ids[4]
    nbrs = [g.node_ids[j] for j in g.neighbors(4)]
    reduced = remove_node(g, v)
    reduced_texts = {k: t for k, t in texts.items() if k != v}
    g2, _, H2 = insert_nodes(m, reduced, reduced_texts, [(v, raw[v])], [(v, b) for b in nbrs])
    order = [g2.index(nid) for nid in g.node_ids]
    assert np.max(np.abs(H2[order] - H)) <= 1e-10
    assert parameter_hash(m) == before


def test_insert_isolated_node_uses_only_its_text(rng):
    m, g, raw, texts = _setup(rng)
    g2, t2, H = insert_nodes(m, g, texts, [("new", "w1 w2 zzz")], [])
    row = H[g2.index("new")]
    x = row[: m.d_text]
    np.testing.assert_allclose(x, m.table[[1, 2, 0]].mean(0), atol=1e-15)
    ind = m.inducing
    A = cross_kernel(ind.Z, ind.Z, ind.C) + ind.sigma * np.eye(ind.num_points)
    local = cross_kernel(x[None], ind.Z, ind.C) @ np.linalg.solve(A, ind.U)
    np.testing.assert_allclose(row[m.d_text :], m.hops.alpha()[0] * local[0], atol=1e-12)


def test_insert_uses_frozen_vocab(rng):
    m, g, raw, texts = _setup(rng)
    vocab_before = dict(m.vocab.token_to_index)
    _, t2, _ = insert_nodes(m, g, texts, [("new", "never seen words")], [])
    np.testing.assert_array_equal(t2["new"], [0, 0, 0])
    assert m.vocab.token_to_index == vocab_before


def test_insert_many_keeps_hash(rng):
    m, g, raw, texts = _setup(rng)
    before = parameter_hash(m)
    new = [(f"n{i}", "w3 w4") for i in range(5)]
    edges = [("n0", "n1"), ("n1", g.node_ids[0]), ("n4", g.node_ids[2]), (g.node_ids[5], g.node_ids[6])]
    g2, _, H = insert_nodes(m, g, texts, new, edges)
    assert H.shape == (g.num_nodes + 5, m.d_text + m.d_struct)
    assert g2.has_edge(g2.index(g.node_ids[5]), g2.index(g.node_ids[6]))
    assert parameter_hash(m) == before


def test_insert_errors(rng):
    m, g, raw, texts = _setup(rng)
    with pytest.raises(GraphError):
        insert_nodes(m, g, texts, [(g.node_ids[0], "w1")])
    with pytest.raises(GraphError):
        insert_nodes(m, g, texts, [("a", "w1"), ("a", "w2")])


def test_refresh_noop_edge_change(rng):
    m, g, raw, texts = _setup(rng)
    H = refresh_embeddings(m, g, texts)
    a, b = g.edge_array()[0]
    g2 = update_edge(g, g.node_ids[a], g.node_ids[b], True)
    np.testing.assert_array_equal(refresh_embeddings(m, g2, texts), H)


def test_refresh_removing_all_edges(rng):
    m, g, raw, texts = _setup(rng)
    empty = Graph.from_index_edges(g.node_ids, np.zeros((0, 2)))
    H = refresh_embeddings(m, empty, texts)
    X = H[:, : m.d_text]
    ind = m.inducing
    A = cross_kernel(ind.Z, ind.Z, ind.C) + ind.sigma * np.eye(ind.num_points)
    local = cross_kernel(X, ind.Z, ind.C) @ np.linalg.solve(A, ind.U)
    np.testing.assert_allclose(H[:, m.d_text :], m.hops.alpha()[0] * local, atol=1e-12)


def test_refresh_unknown_node(rng):
    m, g, raw, texts = _setup(rng)
    del texts[g.node_ids[0]]
    with pytest.raises(GraphError):
        refresh_embeddings(m, g, texts)


def _hop_ball(g, seeds, J):
    seen = set(seeds)
    frontier = set(seeds)
    for _ in range(J):
        frontier = {int(k) for f in frontier for k in g.neighbors(f)} - seen
        seen |= frontier
    return seen


def test_edge_flip_locality(rng):
    for _ in range(5):
        m, g, raw, texts = _setup(rng, n=40, p=0.06)
        H = refresh_embeddings(m, g, texts)
        a, b = rng.choice(g.num_nodes, size=2, replace=False)
        present = not g.has_edge(a, b)
        g2 = update_edge(g, g.node_ids[a], g.node_ids[b], present)
        H2 = refresh_embeddings(m, g2, texts)
        ball = _hop_ball(g, [a, b], m.max_hops) | _hop_ball(g2, [a, b], m.max_hops)
        outside = np.setdiff1d(np.arange(g.num_nodes), sorted(ball))
        assert np.max(np.abs(H2[outside] - H[outside]), initial=0.0) <= 1e-12


def test_insert_then_remove_round_trip(rng):
    m, g, raw, texts = _setup(rng)
    H = refresh_embeddings(m, g, texts)
    g2, t2, _ = insert_nodes(m, g, texts, [("x", "w1 w5")], [("x", g.node_ids[0]), ("x", g.node_ids[3])])
    back = remove_node(g2, "x")
    assert back.same_structure(g)
    assert np.max(np.abs(refresh_embeddings(m, back, texts) - H)) <= 1e-12


def test_hash_unchanged_by_dynamic_sequence(rng):
    m, g, raw, texts = _setup(rng)
    before = parameter_hash(m)
    g2, t2, _ = insert_nodes(m, g, texts, [("x", "w1")], [("x", g.node_ids[1])])
    g3 = update_edge(g2, "x", g.node_ids[2], True)
    refresh_embeddings(m, g3, t2)
    refresh_embeddings(m, remove_node(g3, "x"), texts)
    assert parameter_hash(m) == before


def test_neighbor_aggregate_examples():
    S = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, -2.0], [0.0, 3.0]])
    np.testing.assert_array_equal(neighbor_aggregate("mean", S, [2]), S[2])
    np.testing.assert_array_equal(neighbor_aggregate("mean", S, [0, 1]), [0.5, 0.5])
    np.testing.assert_array_equal(neighbor_aggregate("max", S, [2, 3]), [1.0, 3.0])
    np.testing.assert_array_equal(neighbor_aggregate("max", S, []), [0.0, 0.0])
    with pytest.raises(IndexError):
        neighbor_aggregate("mean", S, [4])
    with pytest.raises(ValueError):
        neighbor_aggregate("sum", S, [0])
