"""Embedding new nodes and changed edges with frozen parameters."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .graph import Graph, GraphError, add_nodes, update_edge
from .model import DetGPModel, forward
from .text import tokenize


def align_docs(graph: Graph, texts: Mapping[str, np.ndarray]) -> list[np.ndarray]:
    missing = [nid for nid in graph.node_ids if nid not in texts]
    if missing:
        raise GraphError(f"no text known for {len(missing)} node(s), e.g. {missing[0]!r}")
    return [texts[nid] for nid in graph.node_ids]


def refresh_embeddings(model: DetGPModel, graph: Graph, texts: Mapping[str, np.ndarray]) -> np.ndarray:
    """Recompute all embeddings for a graph whose edges (or nodes) changed."""
    return forward(model, graph, align_docs(graph, texts))


def insert_nodes(
    model: DetGPModel,
    graph: Graph,
    texts: Mapping[str, np.ndarray],
    new_texts: Sequence[tuple[str, str]],
    new_edges: Sequence[tuple[str, str]] = (),
):
    """Add nodes (raw text) and edges, then embed every node in one forward pass.

    New texts are tokenized against the model's frozen vocabulary, so unseen
    words map to the unknown-token row. Returns ``(graph, texts, H)`` for the
    extended graph.
    """
    new_ids = [nid for nid, _ in new_texts]
    if len(set(new_ids)) != len(new_ids):
        raise GraphError("duplicate ids among the inserted nodes")
    for nid in new_ids:
        if nid in graph:
            raise GraphError(f"node {nid!r} already exists")
    fresh = set(new_ids)
    nbrs: dict[str, list[str]] = {nid: [] for nid in new_ids}
    existing_pairs = []
    for a, b in new_edges:
        if a in fresh:
            nbrs[a].append(b)
        elif b in fresh:
            nbrs[b].append(a)
        else:
            existing_pairs.append((a, b))

    new_graph = add_nodes(graph, [(nid, nbrs[nid]) for nid in new_ids])
    for a, b in existing_pairs:
        new_graph = update_edge(new_graph, a, b, True)

    new_docs = dict(texts)
    for nid, raw in new_texts:
        new_docs[nid] = model.vocab.encode(tokenize(raw))
    H = refresh_embeddings(model, new_graph, new_docs)
    return new_graph, new_docs, H


def neighbor_aggregate(strategy: str, S_train: np.ndarray, neighbor_indices) -> np.ndarray:
    """Mean or max over the structural rows of a new node's known neighbors."""
    if strategy not in ("mean", "max"):
        raise ValueError(f"unknown aggregation strategy {strategy!r}")
    S_train = np.asarray(S_train, dtype=np.float64)
    idx = np.asarray(neighbor_indices, dtype=np.int64)
    if idx.size == 0:
        return np.zeros(S_train.shape[1])
    if idx.min() < 0 or idx.max() >= S_train.shape[0]:
        raise IndexError("neighbor index out of range")
    rows = S_train[idx]
    return rows.mean(axis=0) if strategy == "mean" else rows.max(axis=0)
