import warnings

import numpy as np
import pytest

from detgp.gp import InducingPointSet
from detgp.graph import Graph, HopWeights
from detgp.model import (
    AdamState,
    DetGPModel,
    TrainConfig,
    adam_step,
    encode_texts,
    forward,
    init_model,
    kmeans_init,
    loss_and_grads,
    nce_loss,
    nce_loss_grad,
    parameter_hash,
    sample_negatives,
    train,
)
from detgp.text import Vocabulary, build_vocab, encode_wavg

from conftest import central_diff, max_rel_err, random_docs, random_graph, random_model


def barbell():
    ids = [str(i) for i in range(8)]
    edges = [(str(a), str(b)) for block in (range(4), range(4, 8)) for a in block for b in block if a < b]
    edges.append(("3", "4"))
    return Graph.from_edges(ids, edges)


def barbell_docs(vocab_size=9):
    # side-specific words plus one shared word
    return [np.array([1 + (i // 4) * 4 + (i % 4), 0]) if i % 2 else np.array([1 + (i // 4) * 4 + (i % 4)]) for i in range(8)]


# ---- forward -------------------------------------------------------------


def test_forward_zero_model_is_zero(rng):
    m = random_model(rng)
    m.table[:] = 0.0
    m.inducing.U[:] = 0.0
    g = random_graph(rng, 6, p=0.5)
    assert not np.any(forward(m, g, random_docs(rng, 6, 9)))


def test_forward_default_width(rng):
    vocab = build_vocab([["a", "b", "c"]])
    m = init_model(vocab, rng=rng)
    m.inducing.Z = rng.normal(size=m.inducing.Z.shape)
    g = Graph.from_edges(["x", "y"], [("x", "y")])
    H = forward(m, g, [np.array([1]), np.array([2, 3])])
    assert H.shape == (2, 200)


def test_forward_text_columns_match_encoder(rng):
    m = random_model(rng)
    g = random_graph(rng, 7, p=0.4)
    docs = random_docs(rng, 7, 9)
    H = forward(m, g, docs)
    for h, d in zip(H, docs):
        np.testing.assert_allclose(h[: m.d_text], encode_wavg(m.table, d), atol=1e-15)


def test_forward_rejects_misaligned_texts(rng):
    m = random_model(rng)
    with pytest.raises(ValueError):
        forward(m, random_graph(rng, 5, p=0.5), random_docs(rng, 4, 9))


# ---- loss ----------------------------------------------------------------


def _H_with_dots(dots):
    """Rows (2k, 2k+1) have inner product dots[k]."""
    H = np.zeros((2 * len(dots), 1))
    H[0::2, 0] = 1.0
    H[1::2, 0] = dots
    return H


def test_nce_single_zero_positive():
    H = _H_with_dots([0.0])
    assert nce_loss(H, [[0, 1]], np.zeros((0, 2)), 1) == pytest.approx(np.log(2), abs=1e-15)


def test_nce_saturation():
    assert nce_loss(_H_with_dots([40.0]), [[0, 1]], [], 1) < 1e-15
    H = _H_with_dots([40.0, -40.0])
    assert nce_loss(H, [[0, 1]], [[2, 3]], 1) < 2e-15


def test_nce_closed_form():
    H = _H_with_dots([1.0, -1.0])
    assert nce_loss(H, [[0, 1]], [[2, 3]], 1) == pytest.approx(0.626523, abs=1e-6)
    assert nce_loss(H, [[0, 1]], [[2, 3]], 1) == pytest.approx(2 * np.log1p(np.exp(-1.0)), abs=1e-15)


def test_nce_stable_for_large_dots():
    H = _H_with_dots([-1e4, 1e4])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        loss = nce_loss(H, [[0, 1]], [[2, 3]], 1)
    assert loss == pytest.approx(2e4)


def test_nce_errors():
    with pytest.raises(ValueError):
        nce_loss(np.zeros((2, 1)), np.zeros((0, 2)), [[0, 1]], 1)
    with pytest.raises(ValueError):
        nce_loss(np.zeros((2, 1)), [[0, 1]], [], 0)


def test_nce_grad_matches_finite_differences(rng):
    H = rng.normal(size=(6, 3))
    pos = np.array([[0, 1], [2, 3], [0, 3]])
    neg = np.array([[0, 4], [2, 5], [1, 1]])
    _, dH = nce_loss_grad(H, pos, neg, 3)
    assert max_rel_err(dH, central_diff(lambda: nce_loss(H, pos, neg, 3), H)) < 1e-7


# ---- sampler -------------------------------------------------------------


def test_sampler_complete_pair_warns():
    g = Graph.from_edges(["a", "b"], [("a", "b")])
    with pytest.warns(RuntimeWarning):
        neg = sample_negatives(g, [[0, 1]], 3, np.random.default_rng(0))
    assert neg.shape == (0, 2)


def test_sampler_contract(rng):
    g = random_graph(rng, 40, p=0.05)
    pos = g.edge_array()[:3]
    neg = sample_negatives(g, pos, 5, np.random.default_rng(1))
    assert neg.shape == (15, 2)
    np.testing.assert_array_equal(neg[:, 0], np.repeat(pos[:, 0], 5))
    for a, b in neg:
        assert a != b and not g.has_edge(a, b)


def test_sampler_deterministic(rng):
    g = random_graph(rng, 30, p=0.1)
    pos = g.edge_array()
    a = sample_negatives(g, pos, 4, np.random.default_rng(7))
    b = sample_negatives(g, pos, 4, np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)


def test_sampler_rejects_bad_k():
    with pytest.raises(ValueError):
        sample_negatives(Graph.from_edges(["a", "b"], [("a", "b")]), [[0, 1]], 0, np.random.default_rng())


# ---- k-means -------------------------------------------------------------


def test_kmeans_n_equals_m(rng):
    X = rng.normal(size=(6, 3))
    Z = kmeans_init(X, 6, rng)
    assert sorted(map(tuple, Z)) == sorted(map(tuple, X))


def test_kmeans_two_clouds(rng):
    a = rng.normal(size=(30, 2)) * 0.1 + [10, 0]
    b = rng.normal(size=(40, 2)) * 0.1 + [-10, 5]
    X = np.vstack([a, b])
    Z = kmeans_init(X, 2, rng)
    # oracle: the better of the two possible labelings of the clouds
    means = np.array([a.mean(0), b.mean(0)])
    best = min((means, means[::-1]), key=lambda c: np.abs(Z - c).max())
    np.testing.assert_allclose(Z, best, atol=1e-6)


def test_kmeans_identical_points(rng):
    X = np.tile([1.5, -2.0], (10, 1))
    np.testing.assert_array_equal(kmeans_init(X, 3, rng), np.tile([1.5, -2.0], (3, 1)))


def test_kmeans_too_few_points(rng):
    with pytest.raises(ValueError):
        kmeans_init(np.zeros((2, 2)), 3, rng)


# ---- Adam ----------------------------------------------------------------


def _params(rng):
    return {
        "table": rng.normal(size=(4, 3)),
        "Z": rng.normal(size=(2, 3)),
        "U": rng.normal(size=(2, 2)),
        "logits": rng.normal(size=3),
    }


def test_adam_first_step_is_sign(rng):
    cfg = TrainConfig(lr=0.01)
    p = _params(rng)
    g = {k: rng.normal(size=v.shape) for k, v in p.items()}
    new, state = adam_step(p, g, AdamState(), cfg)
    assert state.t == 1
    # the deviation from a pure sign step is lr * eps / |g|
    for name, lr in (("table", 0.01), ("logits", 0.01), ("Z", 0.001), ("U", 0.001)):
        bound = lr * cfg.eps / np.abs(g[name]) + 1e-15
        assert np.all(np.abs(new[name] - p[name] + lr * np.sign(g[name])) <= bound), name


def test_adam_zero_grad(rng):
    p = _params(rng)
    new, _ = adam_step(p, {k: np.zeros_like(v) for k, v in p.items()}, AdamState(), TrainConfig())
    for k in p:
        np.testing.assert_array_equal(new[k], p[k])


def test_adam_inducing_step_is_one_tenth(rng):
    cfg = TrainConfig(lr=0.05)
    p = {"table": np.zeros((2, 2)), "Z": np.zeros((2, 2)), "U": np.zeros((2, 2))}
    g = {k: np.full((2, 2), 0.3) for k in p}
    new, _ = adam_step(p, g, AdamState(), cfg)
    ratio = np.abs(new["Z"]).max() / np.abs(new["table"]).max()
    assert ratio == pytest.approx(0.1, rel=1e-6)
    np.testing.assert_array_equal(new["U"], new["Z"])


def test_adam_shape_mismatch(rng):
    p = _params(rng)
    g = {k: np.zeros_like(v) for k, v in p.items()}
    g["U"] = np.zeros((3, 3))
    with pytest.raises(ValueError):
        adam_step(p, g, AdamState(), TrainConfig())


def test_train_config_validation():
    for bad in ({"lr": 0.0}, {"k_neg": 0}, {"batch_edges": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# ---- end-to-end gradients --------------------------------------------------


def test_end_to_end_gradient_check(rng):
    m = random_model(rng, vocab_size=9, d_text=5, d_struct=4, M=3, J=2)
    g = random_graph(rng, 12, n_edges=18)
    docs = random_docs(rng, 12, 9)
    pos = g.edge_array()[:6]
    neg = sample_negatives(g, pos, 2, rng)
    Ns = len(neg)
    loss, grads = loss_and_grads(m, g, docs, pos, neg, Ns)
    params = m.parameters()

    def f():
        return loss_and_grads(m, g, docs, pos, neg, Ns)[0]

    assert f() == loss
    touched = np.unique(np.concatenate(docs))
    for name, arr in params.items():
        numeric = central_diff(f, arr)
        a, n = grads[name], numeric
        if name == "table":
            a, n = a[touched], n[touched]
            untouched = np.setdiff1d(np.arange(9), touched)
            assert not np.any(grads["table"][untouched])
        assert max_rel_err(a, n) < 1e-4, name


def test_batch_gradient_equals_restricted_full_gradient(rng):
    # the batch gradient of the sum of two disjoint batches equals the sum of batch gradients
    m = random_model(rng)
    g = random_graph(rng, 12, n_edges=20)
    docs = random_docs(rng, 12, 9)
    edges = g.edge_array()
    neg = sample_negatives(g, edges, 1, rng)
    n1, n2 = len(edges[:10]), len(edges[10:])
    _, ga = loss_and_grads(m, g, docs, edges[:10], neg[:10], 7.0)
    _, gb = loss_and_grads(m, g, docs, edges[10:], neg[10:], 7.0)
    # combine with the per-batch positive weights of the joint batch
    _, gpos_a = loss_and_grads(m, g, docs, edges[:10], np.zeros((0, 2)), 7.0)
    _, gpos_b = loss_and_grads(m, g, docs, edges[10:], np.zeros((0, 2)), 7.0)
    _, gall = loss_and_grads(m, g, docs, edges, neg, 7.0)
    for k in gall:
        neg_part = (ga[k] - gpos_a[k]) + (gb[k] - gpos_b[k])
        pos_part = (n1 * gpos_a[k] + n2 * gpos_b[k]) / (n1 + n2)
        assert max_rel_err(gall[k], neg_part + pos_part, floor=1e-12) < 1e-8, k


# ---- training ------------------------------------------------------------


def _toy_model(seed=0):
    vocab = Vocabulary({f"w{i}": i for i in range(1, 9)})
    return init_model(vocab, d_text=8, d_struct=8, num_inducing=3, max_hops=2, rng=np.random.default_rng(seed))


def test_initial_loss_near_log2():
    m = _toy_model()
    m.inducing.U[:] = 0.0
    g = barbell()
    pos = g.edge_array()
    neg = sample_negatives(g, pos, 5, np.random.default_rng(0))
    loss = nce_loss(forward(m, g, barbell_docs()), pos, neg, len(neg))
    assert loss == pytest.approx(2 * np.log(2), abs=1e-3)


def test_training_separates_barbell():
    g = barbell()
    docs = barbell_docs()
    before = parameter_hash(_toy_model())
    m, trace = train(_toy_model(), g, docs, TrainConfig(lr=0.01, epochs=200, batch_edges=4, seed=3))
    assert before != parameter_hash(m)
    assert len(trace) == 200 and np.all(np.isfinite(trace))
    H = forward(m, g, docs)
    pos = g.edge_array()
    A = g.adjacency.toarray()
    non = np.array([(i, j) for i in range(8) for j in range(i + 1, 8) if not A[i, j]])
    pos_dot = np.mean(np.sum(H[pos[:, 0]] * H[pos[:, 1]], axis=1))
    neg_dot = np.mean(np.sum(H[non[:, 0]] * H[non[:, 1]], axis=1))
    assert pos_dot > neg_dot


def test_loss_trends_down_early():
    _, trace = train(_toy_model(), barbell(), barbell_docs(), TrainConfig(epochs=10, batch_edges=4, seed=1))
    slope = np.polyfit(np.arange(10), trace, 1)[0]
    assert slope < 0


def test_training_is_deterministic():
    cfg = TrainConfig(lr=0.01, epochs=15, batch_edges=5, seed=11)
    m1, t1 = train(_toy_model(), barbell(), barbell_docs(), cfg)
    m2, t2 = train(_toy_model(), barbell(), barbell_docs(), cfg)
    assert t1 == t2
    assert parameter_hash(m1) == parameter_hash(m2)


def test_training_leaves_graph_and_vocab_alone():
    g = barbell()
    adj = g.adjacency.copy()
    m = _toy_model()
    vocab = dict(m.vocab.token_to_index)
    train(m, g, barbell_docs(), TrainConfig(epochs=2, seed=0))
    assert (g.adjacency != adj).nnz == 0
    assert m.vocab.token_to_index == vocab


def test_training_initializes_inducing_by_kmeans():
    m = _toy_model()
    assert not np.any(m.inducing.Z)
    docs = barbell_docs()
    m, _ = train(m, barbell(), docs, TrainConfig(epochs=0, seed=0))
    X = encode_texts(m, docs)
    # every center lies in the convex hull of the encoded texts, so within its bounding box
    assert np.all(m.inducing.Z >= X.min(0) - 1e-12) and np.all(m.inducing.Z <= X.max(0) + 1e-12)


def test_train_needs_edges():
    g = Graph.from_edges(["a", "b"], [])
    with pytest.raises(ValueError):
        train(_toy_model(), g, [np.array([1]), np.array([2])], TrainConfig(epochs=1))


def test_model_validation(rng):
    vocab = Vocabulary({"a": 1})
    with pytest.raises(ValueError):
        DetGPModel(vocab, np.zeros((3, 2)), InducingPointSet(np.zeros((1, 2)), np.zeros((1, 2))), HopWeights.uniform(1))
    with pytest.raises(ValueError):
        DetGPModel(vocab, np.zeros((2, 2)), InducingPointSet(np.zeros((1, 3)), np.zeros((1, 2))), HopWeights.uniform(1))


def test_copy_is_independent(rng):
    m = random_model(rng)
    c = m.copy()
    c.table[0, 0] += 1.0
    c.inducing.U[0, 0] += 1.0
    assert parameter_hash(c) != parameter_hash(m)
