"""The DetGP model: text encoder + GP structural layer, loss, and training."""

from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .gp import InducingPointSet, structural_mean, structural_mean_backward
from .graph import Graph, HopWeights
from .text import Vocabulary, averaging_matrix, init_table

log = logging.getLogger(__name__)

Docs = Union[Sequence[np.ndarray], sp.csr_matrix]

INDUCING_PARAMS = ("Z", "U")


@dataclass
class DetGPModel:
    vocab: Vocabulary
    table: np.ndarray
    inducing: InducingPointSet
    hops: HopWeights

    def __post_init__(self):
        if self.table.shape[0] != self.vocab.size:
            raise ValueError(
                f"table has {self.table.shape[0]} rows for a vocabulary of {self.vocab.size}"
            )
        if self.inducing.Z.shape[1] != self.table.shape[1]:
            raise ValueError("inducing points must live in the text embedding space")

    @property
    def d_text(self) -> int:
        return self.table.shape[1]

    @property
    def d_struct(self) -> int:
        return self.inducing.U.shape[1]

    @property
    def max_hops(self) -> int:
        return self.hops.max_hops

    def parameters(self) -> dict[str, np.ndarray]:
        """Live references to every learnable tensor."""
        return {
            "table": self.table,
            "Z": self.inducing.Z,
            "U": self.inducing.U,
            "logits": self.hops.logits,
        }

    def set_parameters(self, params: dict[str, np.ndarray]) -> None:
        self.table = params["table"]
        self.inducing.Z = params["Z"]
        self.inducing.U = params["U"]
        self.hops.logits = params["logits"]

    def copy(self) -> "DetGPModel":
        ind = self.inducing
        return DetGPModel(
            self.vocab,
            self.table.copy(),
            InducingPointSet(ind.Z.copy(), ind.U.copy(), ind.C, ind.sigma),
            HopWeights(self.hops.logits.copy()),
        )


def init_model(
    vocab: Vocabulary,
    d_text: int = 100,
    d_struct: int = 100,
    num_inducing: int = 20,
    max_hops: int = 3,
    C: float = 1.0,
    sigma: float = 1e-3,
    rng: Optional[np.random.Generator] = None,
) -> DetGPModel:
    """Fresh model. ``Z`` starts at zero; :func:`train` replaces it by k-means centers."""
    rng = np.random.default_rng() if rng is None else rng
    table = init_table(vocab.size, d_text, rng)
    U = rng.normal(0.0, 0.1, size=(num_inducing, d_struct))
    Z = np.zeros((num_inducing, d_text))
    return DetGPModel(vocab, table, InducingPointSet(Z, U, C, sigma), HopWeights.uniform(max_hops))


def parameter_hash(model: DetGPModel) -> str:
    h = hashlib.sha256()
    for name, arr in model.parameters().items():
        a = np.ascontiguousarray(arr, dtype=np.float64)
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    h.update(np.float64(model.inducing.C).tobytes())
    h.update(np.float64(model.inducing.sigma).tobytes())
    return h.hexdigest()


def as_averaging(model: DetGPModel, docs: Docs) -> sp.csr_matrix:
    if sp.issparse(docs):
        return sp.csr_matrix(docs)
    return averaging_matrix(list(docs), model.vocab.size)


def encode_texts(model: DetGPModel, docs: Docs) -> np.ndarray:
    return as_averaging(model, docs) @ model.table


def forward(model: DetGPModel, graph: Graph, docs: Docs, return_cache: bool = False):
    """Node embeddings ``H = [X, S]`` for every node of ``graph``."""
    W = as_averaging(model, docs)
    if W.shape[0] != graph.num_nodes:
        raise ValueError(f"{W.shape[0]} texts for a graph of {graph.num_nodes} nodes")
    X = W @ model.table
    S, cache = structural_mean(
        X, graph.transition, model.hops.alpha(), model.inducing, return_cache=True
    )
    H = np.hstack([X, S])
    if return_cache:
        return H, cache
    return H


def _pair_dots(H: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    if pairs.size == 0:
        return np.zeros(0)
    return np.einsum("ij,ij->i", H[pairs[:, 0]], H[pairs[:, 1]])


def nce_loss(H, pos_pairs, neg_pairs, Ns: float) -> float:
    """Negative-sampling loss with stable log-sigmoids."""
    pos = np.asarray(pos_pairs, dtype=np.int64).reshape(-1, 2)
    neg = np.asarray(neg_pairs, dtype=np.int64).reshape(-1, 2)
    if pos.shape[0] == 0:
        raise ValueError("need at least one positive pair")
    if not Ns > 0:
        raise ValueError("Ns must be positive")
    pos_term = np.logaddexp(0.0, -_pair_dots(H, pos)).sum() / pos.shape[0]
    neg_term = np.logaddexp(0.0, _pair_dots(H, neg)).sum() / Ns
    return float(pos_term + neg_term)


def nce_loss_grad(H, pos_pairs, neg_pairs, Ns: float):
    """Loss and its gradient with respect to ``H``."""
    pos = np.asarray(pos_pairs, dtype=np.int64).reshape(-1, 2)
    neg = np.asarray(neg_pairs, dtype=np.int64).reshape(-1, 2)
    loss = nce_loss(H, pos, neg, Ns)
    pairs = np.vstack([pos, neg])
    dots = _pair_dots(H, pairs)
    coef = np.concatenate(
        [-expit(-dots[: len(pos)]) / len(pos), expit(dots[len(pos) :]) / Ns]
    )
    dH = np.zeros_like(H)
    np.add.at(dH, pairs[:, 0], coef[:, None] * H[pairs[:, 1]])
    np.add.at(dH, pairs[:, 1], coef[:, None] * H[pairs[:, 0]])
    return loss, dH


def loss_and_grads(model: DetGPModel, graph: Graph, docs: Docs, pos_pairs, neg_pairs, Ns: float):
    """Batch loss and gradients for every learnable tensor of ``model``."""
    W = as_averaging(model, docs)
    H, cache = forward(model, graph, W, return_cache=True)
    loss, dH = nce_loss_grad(H, pos_pairs, neg_pairs, Ns)
    d = model.d_text
    g = structural_mean_backward(dH[:, d:], cache)
    dX = dH[:, :d] + g["X"]
    grads = {"table": W.T @ dX, "Z": g["Z"], "U": g["U"], "logits": g["logits"]}
    return loss, grads


def sample_negatives(
    graph: Graph, pos_batch, k_neg: int, rng: np.random.Generator, max_tries: int = 100
) -> np.ndarray:
    """``k_neg`` uniform non-neighbors per positive, anchored on its first node."""
    if k_neg < 1:
        raise ValueError("k_neg must be >= 1")
    pos = np.asarray(pos_batch, dtype=np.int64).reshape(-1, 2)
    N = graph.num_nodes
    anchors = np.repeat(pos[:, 0], k_neg)
    keys = graph.edge_keys()

    def invalid(a, c):
        code = a * N + c
        at = np.searchsorted(keys, code)
        hit = np.zeros(code.shape, dtype=bool)
        inside = at < keys.size
        hit[inside] = keys[at[inside]] == code[inside]
        return hit | (a == c)

    cand = rng.integers(0, N, size=anchors.size)
    bad = invalid(anchors, cand)
    tries = 1
    while bad.any() and tries < max_tries:
        idx = np.flatnonzero(bad)
        cand[idx] = rng.integers(0, N, size=idx.size)
        bad[idx] = invalid(anchors[idx], cand[idx])
        tries += 1
    if bad.any():
        skipped = sorted(set(anchors[bad].tolist()))
        warnings.warn(
            f"no non-neighbor found after {max_tries} draws for {len(skipped)} anchor node(s); "
            f"dropping {int(bad.sum())} negative pair(s)",
            RuntimeWarning,
            stacklevel=2,
        )
    keep = ~bad
    return np.stack([anchors[keep], cand[keep]], axis=1)


def kmeans_init(
    X: np.ndarray,
    M: int,
    rng: np.random.Generator,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> np.ndarray:
    """Lloyd's k-means with k-means++ seeding; returns the ``M`` centers."""
    X = np.asarray(X, dtype=np.float64)
    N = X.shape[0]
    if N < M:
        raise ValueError(f"cannot pick {M} centers from {N} points")

    centers = np.empty((M, X.shape[1]))
    centers[0] = X[rng.integers(N)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for m in range(1, M):
        total = d2.sum()
        if total > 0:
            i = rng.choice(N, p=d2 / total)
        else:
            i = rng.integers(N)
        centers[m] = X[i]
        d2 = np.minimum(d2, np.sum((X - centers[m]) ** 2, axis=1))

    for _ in range(max_iter):
        dist = _sq_dists(X, centers)
        assign = np.argmin(dist, axis=1)
        new = centers.copy()
        counts = np.bincount(assign, minlength=M)
        for m in range(M):
            if counts[m]:
                new[m] = X[assign == m].mean(axis=0)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            # farthest points from their current centers seed the empty clusters
            own = dist[np.arange(N), assign]
            far = np.argsort(-own, kind="stable")
            for m, i in zip(empty, far):
                new[m] = X[i]
        shift = np.max(np.linalg.norm(new - centers, axis=1))
        centers = new
        if shift < tol and not empty.size:
            break
    return centers


def _sq_dists(X, C):
    d = np.sum(X**2, axis=1)[:, None] - 2.0 * X @ C.T + np.sum(C**2, axis=1)[None, :]
    return np.maximum(d, 0.0)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    inducing_lr_scale: float = 0.1
    epochs: int = 200
    batch_edges: int = 128
    k_neg: int = 5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    log_every: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.k_neg < 1:
            raise ValueError("k_neg must be >= 1")
        if self.batch_edges < 1:
            raise ValueError("batch_edges must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update. ``Z`` and ``U`` use the scaled step size."""
    state.t += 1
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * g * g
        m_hat = m / (1 - cfg.beta1**state.t)
        v_hat = v / (1 - cfg.beta2**state.t)
        lr = cfg.lr * (cfg.inducing_lr_scale if name in INDUCING_PARAMS else 1.0)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return out, state


class TrainingDiverged(FloatingPointError):
    """Non-finite loss during training; ``snapshot`` holds the failing state."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


def train(
    model: DetGPModel,
    graph: Graph,
    docs: Docs,
    cfg: TrainConfig,
    init_inducing: bool = True,
):
    """Train end to end on the edges of ``graph``.

    Returns the model (updated in place) and the per-epoch mean batch loss.
    """
    if graph.num_edges < 1:
        raise ValueError("training needs at least one edge")
    rng = np.random.default_rng(cfg.seed)
    W = as_averaging(model, docs)
    if W.shape[0] != graph.num_nodes:
        raise ValueError(f"{W.shape[0]} texts for a graph of {graph.num_nodes} nodes")
    if init_inducing:
        model.inducing.Z = kmeans_init(W @ model.table, model.inducing.num_points, rng)

    edges = graph.edge_array()
    state = AdamState()
    trace = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(edges))
        oriented = edges[perm]
        flip = rng.random(len(edges)) < 0.5
        oriented[flip] = oriented[flip][:, ::-1]
        losses = []
        for start in range(0, len(oriented), cfg.batch_edges):
            pos = oriented[start : start + cfg.batch_edges]
            neg = sample_negatives(graph, pos, cfg.k_neg, rng)
            Ns = max(len(neg), 1)
            loss, grads = loss_and_grads(model, graph, W, pos, neg, Ns)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch starting at edge {start}",
                    {
                        "epoch": epoch,
                        "batch_start": start,
                        "loss": loss,
                        "alpha": model.hops.alpha(),
                        "param_norms": {k: float(np.linalg.norm(v)) for k, v in model.parameters().items()},
                        "grad_norms": {k: float(np.linalg.norm(v)) for k, v in grads.items()},
                    },
                )
            params, state = adam_step(model.parameters(), grads, state, cfg)
            model.set_parameters(params)
            losses.append(loss)
        trace.append(float(np.mean(losses)))
        if cfg.log_every and (epoch + 1) % cfg.log_every == 0:
            log.info("epoch %d loss %.6f alpha %s", epoch + 1, trace[-1], np.round(model.hops.alpha(), 3))
    return model, trace
