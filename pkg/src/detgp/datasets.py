"""Dataset helpers: a synthetic textual network and a Cora locator."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional

import numpy as np

from .graph import Graph
from .io import Dataset, load_dataset, write_edges, write_texts

CORA_ENV = "DETGP_CORA_DIR"


def make_textual_network(
    n_classes: int = 5,
    nodes_per_class: int = 60,
    communities_per_class: int = 3,
    p_in: float = 0.15,
    p_class: float = 0.01,
    p_out: float = 0.002,
    words_per_topic: int = 40,
    shared_words: int = 300,
    topic_share: float = 0.35,
    length: tuple[int, int] = (15, 40),
    seed: int = 0,
) -> Dataset:
    """Planted-partition citation-like network with topic-flavoured texts.

    Each class splits into communities. Edges are dense inside a community,
    sparser inside a class, and rare across classes. A node's words come
    from its class topic with probability ``topic_share`` and from a shared
    background vocabulary otherwise, so text alone only partly identifies
    the neighborhood.
    """
    rng = np.random.default_rng(seed)
    n = n_classes * nodes_per_class
    cls = np.repeat(np.arange(n_classes), nodes_per_class)
    comm = cls * communities_per_class + rng.integers(0, communities_per_class, size=n)
    same_comm = comm[:, None] == comm[None, :]
    same_cls = cls[:, None] == cls[None, :]
    prob = np.where(same_comm, p_in, np.where(same_cls, p_class, p_out))
    draw = rng.random((n, n)) < prob
    iu = np.triu_indices(n, k=1)
    mask = draw[iu]
    edges = np.stack([iu[0][mask], iu[1][mask]], axis=1)

    topic_words = [[f"t{c}w{k}" for k in range(words_per_topic)] for c in range(n_classes)]
    background = [f"w{k}" for k in range(shared_words)]
    # background frequencies follow a Zipf-like law, like real abstracts
    zipf = 1.0 / np.arange(1, shared_words + 1)
    zipf /= zipf.sum()
    texts = {}
    ids = [f"n{i}" for i in range(n)]
    for i in range(n):
        L = rng.integers(length[0], length[1] + 1)
        from_topic = rng.random(L) < topic_share
        words = []
        for t in from_topic:
            if t:
                words.append(topic_words[cls[i]][rng.integers(words_per_topic)])
            else:
                words.append(background[rng.choice(shared_words, p=zipf)])
        texts[ids[i]] = " ".join(words)
    graph = Graph.from_index_edges(ids, edges)
    labels = {ids[i]: f"class{cls[i]}" for i in range(n)}
    return Dataset(graph, texts, labels, {"dropped_nodes": 0, "dropped_edges": 0, "duplicate_edges": 0})


def write_dataset(dataset: Dataset, directory) -> dict[str, Path]:
    """Write ``edges.tsv``, ``texts.tsv`` and (if present) ``labels.tsv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {"edges": directory / "edges.tsv", "texts": directory / "texts.tsv"}
    write_edges(paths["edges"], dataset.graph)
    write_texts(paths["texts"], dataset.graph.node_ids, dataset.texts)
    if dataset.labels is not None:
        paths["labels"] = directory / "labels.tsv"
        with open(paths["labels"], "w", encoding="utf-8") as fh:
            for nid in dataset.graph.node_ids:
                if nid in dataset.labels:
                    fh.write(f"{nid}\t{dataset.labels[nid]}\n")
    return paths


def cora_dir() -> Optional[Path]:
    """Directory named by ``DETGP_CORA_DIR`` if it holds the three Cora TSV files."""
    value = os.environ.get(CORA_ENV)
    if not value:
        return None
    path = Path(value)
    if all((path / f).is_file() for f in ("edges.tsv", "texts.tsv", "labels.tsv")):
        return path
    return None


def load_cora() -> Dataset:
    path = cora_dir()
    if path is None:
        raise FileNotFoundError(
            f"Cora not found: set {CORA_ENV} to a directory with edges.tsv, texts.tsv "
            "and labels.tsv (see convert_cane_cora)"
        )
    return load_dataset(path / "edges.tsv", path / "texts.tsv", path / "labels.tsv")


def convert_cane_cora(src, dst) -> dict[str, Path]:
    """Convert the common text-network release of Cora into the TSV layout.

    Expects ``data.txt`` (one abstract per line, line k is node k),
    ``graph.txt`` (two whitespace-separated node numbers per line) and
    optionally ``group.txt`` (either one label per line, or ``node label``).
    """
    src, dst = Path(src), Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    with open(src / "data.txt", encoding="utf-8", errors="replace") as fh:
        abstracts = [line.rstrip("\n").replace("\t", " ") for line in fh]
    with open(dst / "texts.tsv", "w", encoding="utf-8") as fh:
        for k, text in enumerate(abstracts):
            fh.write(f"{k}\t{text}\n")
    with open(src / "graph.txt", encoding="utf-8") as fh, open(dst / "edges.tsv", "w", encoding="utf-8") as out:
        for line in fh:
            parts = line.split()
            if len(parts) >= 2 and parts[0] != parts[1]:
                out.write(f"{parts[0]}\t{parts[1]}\n")
    paths = {"edges": dst / "edges.tsv", "texts": dst / "texts.tsv"}
    group = src / "group.txt"
    if group.is_file():
        with open(group, encoding="utf-8") as fh, open(dst / "labels.tsv", "w", encoding="utf-8") as out:
            for k, line in enumerate(fh):
                parts = line.split()
                if not parts:
                    continue
                node, label = (parts[0], parts[1]) if len(parts) >= 2 else (str(k), parts[0])
                out.write(f"{node}\t{label}\n")
        paths["labels"] = dst / "labels.tsv"
    return paths
