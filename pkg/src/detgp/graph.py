"""Undirected graph storage and the learnable multi-hop diffusion operator.

The diffusion ``P* = sum_j alpha_j P^j`` is only ever applied to dense
blocks through repeated sparse products; ``materialize_pstar`` exists for
tests and diagnostics on small graphs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

DENSE_GUARD = 4096


class GraphError(ValueError):
    """Raised for malformed graph construction or mutation requests."""


@dataclass(frozen=True)
class TransitionMatrix:
    """Row-stochastic transition matrix with an explicit transpose."""

    forward: sp.csr_matrix
    transposed: sp.csr_matrix

    @property
    def num_nodes(self) -> int:
        return self.forward.shape[0]


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable undirected graph over string node ids.

    ``adjacency`` is a symmetric boolean CSR matrix without self-loops.
    Mutating operations return new ``Graph`` objects.
    """

    node_ids: tuple[str, ...]
    adjacency: sp.csr_matrix
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index = {nid: i for i, nid in enumerate(self.node_ids)}
        if len(index) != len(self.node_ids):
            raise GraphError("node ids must be unique")
        n = len(self.node_ids)
        if self.adjacency.shape != (n, n):
            raise GraphError(
                f"adjacency shape {self.adjacency.shape} does not match {n} nodes"
            )
        object.__setattr__(self, "_index", index)

    @classmethod
    def from_edges(
        cls, node_ids: Sequence[str], edges: Iterable[tuple[str, str]]
    ) -> "Graph":
        """Build a graph from id pairs. Duplicates are merged, self-loops rejected."""
        node_ids = tuple(node_ids)
        index = {nid: i for i, nid in enumerate(node_ids)}
        if len(index) != len(node_ids):
            raise GraphError("node ids must be unique")
        rows, cols = [], []
        for a, b in edges:
            if a == b:
                raise GraphError(f"self-loop on node {a!r} is not allowed")
            try:
                rows.append(index[a])
                cols.append(index[b])
            except KeyError as exc:
                raise GraphError(f"edge references unknown node {exc.args[0]!r}") from None
        return cls(node_ids, _symmetric_csr(rows, cols, len(node_ids)))

    @classmethod
    def from_index_edges(cls, node_ids: Sequence[str], edges: np.ndarray) -> "Graph":
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if np.any(edges[:, 0] == edges[:, 1]):
            raise GraphError("self-loops are not allowed")
        return cls(tuple(node_ids), _symmetric_csr(edges[:, 0], edges[:, 1], len(node_ids)))

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def num_edges(self) -> int:
        return self.adjacency.nnz // 2

    def index(self, node_id: str) -> int:
        try:
            return self._index[node_id]
        except KeyError:
            raise GraphError(f"unknown node {node_id!r}") from None

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._index

    def degrees(self) -> np.ndarray:
        return np.diff(self.adjacency.indptr)

    def neighbors(self, i: int) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[i] : a.indptr[i + 1]]

    def has_edge(self, i: int, j: int) -> bool:
        return bool(np.any(self.neighbors(i) == j))

    def edge_array(self) -> np.ndarray:
        """Undirected edges as an ``(|E|, 2)`` int array with ``i < j``, sorted."""
        coo = sp.triu(self.adjacency, k=1).tocoo()
        order = np.lexsort((coo.col, coo.row))
        return np.stack([coo.row[order], coo.col[order]], axis=1).astype(np.int64)

    def edge_keys(self) -> np.ndarray:
        """Sorted ``i * N + j`` codes for every stored (directed) entry."""
        coo = self.adjacency.tocoo()
        return np.sort(coo.row.astype(np.int64) * self.num_nodes + coo.col)

    def subgraph(self, indices: Sequence[int]) -> "Graph":
        """Induced subgraph, keeping the given index order."""
        indices = np.asarray(indices, dtype=np.int64)
        sub = self.adjacency[indices][:, indices]
        return Graph(tuple(self.node_ids[i] for i in indices), _canonical(sub))

    @cached_property
    def transition(self) -> TransitionMatrix:
        return build_transition(self)

    def same_structure(self, other: "Graph") -> bool:
        if self.node_ids != other.node_ids:
            return False
        return (self.adjacency != other.adjacency).nnz == 0


def _canonical(a: sp.spmatrix) -> sp.csr_matrix:
    a = sp.csr_matrix(a, dtype=bool)
    a.eliminate_zeros()
    a.sum_duplicates()
    a.sort_indices()
    return a


def _symmetric_csr(rows, cols, n: int) -> sp.csr_matrix:
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    r = np.concatenate([rows, cols])
    c = np.concatenate([cols, rows])
    data = np.ones(r.shape[0], dtype=bool)
    # duplicate entries collapse to True under boolean summation
    return _canonical(sp.coo_matrix((data, (r, c)), shape=(n, n)))


def build_transition(graph: Graph) -> TransitionMatrix:
    """Row-normalize the adjacency; isolated nodes keep an all-zero row."""
    a = graph.adjacency
    deg = np.diff(a.indptr).astype(np.float64)
    inv = np.zeros_like(deg)
    np.divide(1.0, deg, out=inv, where=deg > 0)
    data = np.repeat(inv, np.diff(a.indptr))
    forward = sp.csr_matrix((data, a.indices.copy(), a.indptr.copy()), shape=a.shape)
    transposed = forward.transpose().tocsr()
    transposed.sort_indices()
    return TransitionMatrix(forward, transposed)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


@dataclass
class HopWeights:
    """Learnable logits whose softmax gives the hop weights alpha_0..alpha_J."""

    logits: np.ndarray

    @classmethod
    def uniform(cls, max_hops: int = 3) -> "HopWeights":
        if max_hops < 0:
            raise ValueError("max_hops must be >= 0")
        return cls(np.zeros(max_hops + 1))

    @property
    def max_hops(self) -> int:
        return len(self.logits) - 1

    def alpha(self) -> np.ndarray:
        return hop_weights_alpha(self)


def hop_weights_alpha(hw: HopWeights) -> np.ndarray:
    return softmax(hw.logits)


def _check_operands(P: TransitionMatrix, alpha: np.ndarray, V: np.ndarray):
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim != 1 or alpha.size == 0:
        raise ValueError("alpha must be a non-empty vector")
    V = np.asarray(V, dtype=np.float64)
    if V.shape[0] != P.num_nodes:
        raise ValueError(
            f"operand has {V.shape[0]} rows but the graph has {P.num_nodes} nodes"
        )
    return alpha, V


def diffuse_transposed(P: TransitionMatrix, alpha: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Return ``P*^T V`` via Horner accumulation over ``J`` sparse products."""
    alpha, V = _check_operands(P, alpha, V)
    out = alpha[-1] * V
    for a in alpha[-2::-1]:
        out = a * V + P.transposed @ out
    return out


def diffuse(P: TransitionMatrix, alpha: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Return ``P* V``; the adjoint of :func:`diffuse_transposed`."""
    alpha, V = _check_operands(P, alpha, V)
    out = alpha[-1] * V
    for a in alpha[-2::-1]:
        out = a * V + P.forward @ out
    return out


def hop_powers(P: TransitionMatrix, V: np.ndarray, max_hops: int, transposed: bool = False):
    """List ``[V, P V, ..., P^J V]`` (or with ``P^T``)."""
    op = P.transposed if transposed else P.forward
    out = [np.asarray(V, dtype=np.float64)]
    for _ in range(max_hops):
        out.append(op @ out[-1])
    return out


def materialize_pstar(P: TransitionMatrix, alpha: np.ndarray) -> np.ndarray:
    """Dense ``sum_j alpha_j P^j``. Diagnostic only; guarded to N <= 4096."""
    n = P.num_nodes
    if n > DENSE_GUARD:
        raise ValueError(f"refusing to materialize a dense {n}x{n} diffusion (limit {DENSE_GUARD})")
    dense = P.forward.toarray()
    power = np.eye(n)
    out = np.zeros((n, n))
    for a in np.asarray(alpha, dtype=np.float64):
        out += a * power
        power = power @ dense
    return out


def add_nodes(graph: Graph, new_nodes: Sequence[tuple[str, Sequence[str]]]) -> Graph:
    """Append nodes with their neighbor lists; neighbors may be other new ids."""
    ids = list(graph.node_ids)
    known = set(ids)
    for nid, _ in new_nodes:
        if nid in known:
            raise GraphError(f"node {nid!r} already exists")
        known.add(nid)
        ids.append(nid)
    index = {nid: i for i, nid in enumerate(ids)}
    coo = graph.adjacency.tocoo()
    rows, cols = list(coo.row), list(coo.col)
    for nid, nbrs in new_nodes:
        i = index[nid]
        for nb in nbrs:
            if nb not in index:
                raise GraphError(f"neighbor {nb!r} of {nid!r} is unknown")
            j = index[nb]
            if i == j:
                raise GraphError(f"self-loop on node {nid!r} is not allowed")
            rows.append(i)
            cols.append(j)
    return Graph(tuple(ids), _symmetric_csr(rows, cols, len(ids)))


def add_node(graph: Graph, node_id: str, neighbor_ids: Sequence[str] = ()) -> Graph:
    return add_nodes(graph, [(node_id, list(neighbor_ids))])


def update_edge(graph: Graph, a: str, b: str, present: bool) -> Graph:
    """Set the state of edge ``{a, b}``; a no-op if it is already in that state."""
    if a == b:
        raise GraphError("an edge needs two distinct endpoints")
    i, j = graph.index(a), graph.index(b)
    if graph.has_edge(i, j) == present:
        return graph
    adj = graph.adjacency.tolil()
    adj[i, j] = present
    adj[j, i] = present
    return Graph(graph.node_ids, _canonical(adj))


def remove_node(graph: Graph, node_id: str) -> Graph:
    """Drop a node and its incident edges; remaining nodes keep their relative order."""
    i = graph.index(node_id)
    keep = np.array([k for k in range(graph.num_nodes) if k != i], dtype=np.int64)
    return graph.subgraph(keep)
