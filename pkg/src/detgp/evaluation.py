"""Link-prediction and node-classification protocols."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.special import log_softmax, softmax
from scipy.stats import rankdata

from .dynamic import align_docs, insert_nodes, neighbor_aggregate
from .graph import Graph
from .model import DetGPModel, forward
from .text import encode_wavg, tokenize


@dataclass
class EdgeSplit:
    train_graph: Graph
    test_pos: np.ndarray
    test_neg: np.ndarray


@dataclass
class NodeSplit:
    train_ids: list[str]
    test_ids: list[str]


def sample_non_edges(
    graph: Graph, count: int, rng: np.random.Generator, candidates: Optional[np.ndarray] = None
) -> np.ndarray:
    """Distinct uniformly drawn node pairs ``i < j`` that are not edges of ``graph``.

    ``candidates`` restricts both endpoints to a node subset.
    """
    nodes = np.arange(graph.num_nodes) if candidates is None else np.asarray(candidates, dtype=np.int64)
    n = nodes.size
    keys = set(graph.edge_keys().tolist())
    total_pairs = n * (n - 1) // 2
    if count > total_pairs - _edges_within(graph, nodes):
        raise ValueError(f"cannot draw {count} non-edges from this node set")
    N = graph.num_nodes
    chosen: dict[int, None] = {}
    while len(chosen) < count:
        a = nodes[rng.integers(0, n, size=2 * (count - len(chosen)) + 8)]
        b = nodes[rng.integers(0, n, size=a.size)]
        for i, j in zip(a.tolist(), b.tolist()):
            if i == j:
                continue
            i, j = min(i, j), max(i, j)
            code = i * N + j
            if code in keys or code in chosen:
                continue
            chosen[code] = None
            if len(chosen) == count:
                break
    codes = np.fromiter(chosen, dtype=np.int64, count=len(chosen))
    return np.stack([codes // N, codes % N], axis=1) if codes.size else np.zeros((0, 2), np.int64)


def _edges_within(graph: Graph, nodes: np.ndarray) -> int:
    if nodes.size == graph.num_nodes:
        return graph.num_edges
    return graph.subgraph(nodes).num_edges


def split_edges(graph: Graph, keep_fraction: float, rng: np.random.Generator) -> EdgeSplit:
    """Keep a uniform ``keep_fraction`` of edges for training; hold out the rest."""
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must be in (0, 1]")
    edges = graph.edge_array()
    n_keep = int(np.floor(keep_fraction * len(edges)))
    if n_keep == 0:
        raise ValueError("split leaves no training edges")
    perm = rng.permutation(len(edges))
    train = edges[np.sort(perm[:n_keep])]
    test_pos = edges[np.sort(perm[n_keep:])]
    test_neg = sample_non_edges(graph, len(test_pos), rng)
    return EdgeSplit(Graph.from_index_edges(graph.node_ids, train), test_pos, test_neg)


def split_nodes(node_ids: Sequence[str], train_fraction: float, rng: np.random.Generator) -> NodeSplit:
    if not 0 < train_fraction <= 1:
        raise ValueError("train_fraction must be in (0, 1]")
    ids = list(node_ids)
    n_train = int(np.floor(train_fraction * len(ids)))
    if n_train == 0:
        raise ValueError("split leaves no training nodes")
    perm = rng.permutation(len(ids))
    train = sorted(perm[:n_train].tolist())
    test = sorted(perm[n_train:].tolist())
    return NodeSplit([ids[i] for i in train], [ids[i] for i in test])


def auc(pos_scores, neg_scores) -> float:
    """Probability that a positive outscores a negative, ties counted half."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auc needs non-empty positive and negative score lists")
    ranks = rankdata(np.concatenate([pos, neg]))
    # average ranks are half-integers, so this count is exact
    wins = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(wins / (pos.size * neg.size))


def auc_brute_force(pos_scores, neg_scores) -> float:
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    wins = 0.0
    for p in pos:
        wins += float(np.sum(p > neg)) + 0.5 * float(np.sum(p == neg))
    return float(wins / (pos.size * neg.size))


def pair_scores(H: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return np.einsum("ij,ij->i", H[pairs[:, 0]], H[pairs[:, 1]])


def link_prediction_eval(H: np.ndarray, split: EdgeSplit) -> float:
    return auc(pair_scores(H, split.test_pos), pair_scores(H, split.test_neg))


@dataclass
class LinearClassifier:
    W: np.ndarray
    b: np.ndarray
    classes: np.ndarray

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.W + self.b

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.decision_function(X), axis=1)]


def train_linear_classifier(
    H_train, labels, l2_reg: float = 1e-3, tol: float = 1e-5, max_iter: int = 5000
) -> LinearClassifier:
    """L2-regularized multinomial logistic regression.

    Full-batch accelerated gradient descent from zero with step ``1/L``,
    where ``L`` bounds the Hessian of the mean loss. Stops when the gradient
    norm drops below ``tol``.
    """
    X = np.asarray(H_train, dtype=np.float64)
    labels = np.asarray(labels)
    classes, y = np.unique(labels, return_inverse=True)
    if classes.size < 2:
        raise ValueError("need at least two classes to fit a classifier")
    n, d = X.shape
    K = classes.size
    Y = np.zeros((n, K))
    Y[np.arange(n), y] = 1.0
    Xb = np.hstack([X, np.ones((n, 1))])
    lipschitz = 0.5 * np.linalg.norm(Xb, 2) ** 2 / n + l2_reg
    step = 1.0 / lipschitz
    reg = np.ones((d + 1, 1))
    reg[-1] = 0.0  # bias is not penalized

    def grad(theta):
        P = softmax(Xb @ theta, axis=1)
        return Xb.T @ (P - Y) / n + l2_reg * reg * theta

    theta = np.zeros((d + 1, K))
    prev = theta
    momentum = 1.0
    for _ in range(max_iter):
        g_now = grad(theta)
        if np.linalg.norm(g_now) < tol:
            break
        nxt = theta - step * g_now
        m_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * momentum**2))
        look = nxt + ((momentum - 1.0) / m_next) * (nxt - prev)
        prev, theta, momentum = nxt, look, m_next
    return LinearClassifier(theta[:-1], theta[-1], classes)


def classifier_loss(clf: LinearClassifier, X, labels, l2_reg: float) -> float:
    """Objective minimized by :func:`train_linear_classifier`."""
    idx = np.searchsorted(clf.classes, np.asarray(labels))
    logp = log_softmax(clf.decision_function(X), axis=1)
    return float(-logp[np.arange(len(idx)), idx].mean() + 0.5 * l2_reg * np.sum(clf.W**2))


def macro_f1(pred_labels, true_labels) -> float:
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    if pred.shape != true.shape:
        raise ValueError("prediction and truth lengths differ")
    if pred.size == 0:
        raise ValueError("need at least one sample")
    scores = []
    for c in np.union1d(pred, true):
        tp = np.sum((pred == c) & (true == c))
        fp = np.sum((pred == c) & (true != c))
        fn = np.sum((pred != c) & (true == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if tp else 0.0)
    return float(np.mean(scores))


def node_classification_eval(
    H: np.ndarray,
    node_ids: Sequence[str],
    split: NodeSplit,
    labels: Mapping[str, str],
    l2_reg: float = 1e-3,
) -> float:
    index = {nid: i for i, nid in enumerate(node_ids)}
    tr = [index[i] for i in split.train_ids]
    te = [index[i] for i in split.test_ids]
    clf = train_linear_classifier(H[tr], [labels[i] for i in split.train_ids], l2_reg)
    return macro_f1(clf.predict(H[te]), [labels[i] for i in split.test_ids])


def labeled_split(split: NodeSplit, labels: Mapping[str, str]) -> NodeSplit:
    return NodeSplit(
        [i for i in split.train_ids if i in labels], [i for i in split.test_ids if i in labels]
    )


def dynamic_eval(
    model: DetGPModel,
    full_graph: Graph,
    raw_texts: Mapping[str, str],
    train_texts: Mapping[str, np.ndarray],
    split: NodeSplit,
    labels: Optional[Mapping[str, str]] = None,
    backend: str = "detgp",
    rng: Optional[np.random.Generator] = None,
    l2_reg: float = 1e-3,
) -> dict[str, float]:
    """Embed held-out nodes into a model trained on the training-node subgraph.

    Test nodes arrive with their text and only their edges to training nodes.
    Link AUC scores held-out edges among test nodes against an equal number
    of sampled non-edges among test nodes; Macro-F1 uses a classifier fit on
    the training nodes' embeddings before insertion. ``backend`` is
    ``"detgp"``, ``"agg-mean"`` or ``"agg-max"``.
    """
    if backend not in ("detgp", "agg-mean", "agg-max"):
        raise ValueError(f"unknown backend {backend!r}")
    rng = np.random.default_rng(0) if rng is None else rng
    train_idx = np.array([full_graph.index(i) for i in split.train_ids], dtype=np.int64)
    test_idx = np.array([full_graph.index(i) for i in split.test_ids], dtype=np.int64)
    train_graph = full_graph.subgraph(train_idx)
    H_train = forward(model, train_graph, align_docs(train_graph, train_texts))

    if test_idx.size == 0:
        H_all, all_ids, graph_after = H_train, list(train_graph.node_ids), train_graph
    else:
        is_train = np.zeros(full_graph.num_nodes, dtype=bool)
        is_train[train_idx] = True
        new_edges = []
        for t in test_idx:
            for nb in full_graph.neighbors(t):
                if is_train[nb]:
                    new_edges.append((full_graph.node_ids[t], full_graph.node_ids[nb]))
        new_texts = [(full_graph.node_ids[t], raw_texts.get(full_graph.node_ids[t], "")) for t in test_idx]
        if backend == "detgp":
            graph_after, _, H_all = insert_nodes(model, train_graph, train_texts, new_texts, new_edges)
            all_ids = list(graph_after.node_ids)
        else:
            graph_after, H_all, all_ids = _aggregate_insert(
                model, train_graph, H_train, new_texts, new_edges, backend.split("-")[1]
            )

    results: dict[str, float] = {}
    position = {nid: i for i, nid in enumerate(all_ids)}
    if test_idx.size:
        eval_nodes = test_idx
    else:
        eval_nodes = np.arange(full_graph.num_nodes)
    sub = full_graph.subgraph(eval_nodes)
    if sub.num_edges:
        pos = sub.edge_array()
        neg = sample_non_edges(sub, len(pos), rng)
        rows = np.array([position[nid] for nid in sub.node_ids])
        H_eval = H_all[rows]
        results["auc"] = auc(pair_scores(H_eval, pos), pair_scores(H_eval, neg))

    if labels is not None:
        lab = labeled_split(split, labels)
        tr_rows = [train_graph.index(i) for i in lab.train_ids]
        clf = train_linear_classifier(H_train[tr_rows], [labels[i] for i in lab.train_ids], l2_reg)
        test_ids = lab.test_ids if lab.test_ids else lab.train_ids
        te_rows = [position[i] for i in test_ids]
        results["macro_f1"] = macro_f1(clf.predict(H_all[te_rows]), [labels[i] for i in test_ids])
    return results


def _aggregate_insert(model, train_graph, H_train, new_texts, new_edges, strategy):
    """Neighbor-aggregate baseline: text from the encoder, structure pooled from known neighbors."""
    d = model.d_text
    S_train = H_train[:, d:]
    nbrs: dict[str, list[int]] = {nid: [] for nid, _ in new_texts}
    for a, b in new_edges:
        nbrs[a].append(train_graph.index(b))
    rows = []
    for nid, raw in new_texts:
        toks = model.vocab.encode(tokenize(raw))
        x = encode_wavg(model.table, toks)
        s = neighbor_aggregate(strategy, S_train, nbrs[nid])
        rows.append(np.concatenate([x, s]))
    H_all = np.vstack([H_train, np.array(rows).reshape(-1, H_train.shape[1])])
    ids = list(train_graph.node_ids) + [nid for nid, _ in new_texts]
    return train_graph, H_all, ids
