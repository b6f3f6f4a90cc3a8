"""Dataset files, checkpoints, and TSV exports."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .gp import InducingPointSet
from .graph import Graph, HopWeights
from .model import DetGPModel
from .text import Vocabulary, tokenize

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
DTYPES = {"f64": np.dtype("<f8"), "f32": np.dtype("<f4")}
TENSOR_NAMES = ("table", "Z", "U", "logits")


class DatasetError(ValueError):
    """Malformed or empty dataset input."""


@dataclass
class Dataset:
    graph: Graph
    texts: dict[str, str]
    labels: Optional[dict[str, str]] = None
    stats: dict[str, int] = field(default_factory=dict)

    def tokenized(self) -> dict[str, list[str]]:
        return {nid: tokenize(self.texts.get(nid, "")) for nid in self.graph.node_ids}

    def encoded(self, vocab: Vocabulary) -> dict[str, np.ndarray]:
        return {nid: vocab.encode(toks) for nid, toks in self.tokenized().items()}


def _lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            yield lineno, line


def read_texts(path) -> dict[str, str]:
    texts: dict[str, str] = {}
    for lineno, line in _lines(path):
        nid, sep, text = line.partition("\t")
        if not sep or not nid:
            raise DatasetError(f"{path}:{lineno}: expected 'node_id<TAB>text'")
        if nid in texts:
            raise DatasetError(f"{path}:{lineno}: node {nid!r} has a second text line")
        texts[nid] = text
    return texts


def read_edges(path) -> list[tuple[str, str, int]]:
    out = []
    for lineno, line in _lines(path):
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise DatasetError(f"{path}:{lineno}: expected 'src<TAB>dst'")
        if parts[0] == parts[1]:
            raise DatasetError(f"{path}:{lineno}: self-loop on {parts[0]!r} is not allowed")
        out.append((parts[0], parts[1], lineno))
    return out


def read_labels(path) -> dict[str, str]:
    labels: dict[str, str] = {}
    for lineno, line in _lines(path):
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0]:
            raise DatasetError(f"{path}:{lineno}: expected 'node_id<TAB>label'")
        labels[parts[0]] = parts[1]
    return labels


def load_dataset(edges_path, texts_path, labels_path=None, require_text: bool = True) -> Dataset:
    """Read edge, text and optional label files into a :class:`Dataset`.

    Node order is first appearance in the text file, then in the edge file.
    With ``require_text`` nodes lacking a text line are dropped with their
    edges. Duplicate edges are merged.
    """
    texts = read_texts(texts_path)
    raw_edges = read_edges(edges_path)
    order = dict.fromkeys(texts)
    for a, b, _ in raw_edges:
        order.setdefault(a)
        order.setdefault(b)
    stats = {"dropped_nodes": 0, "dropped_edges": 0, "duplicate_edges": 0}
    if require_text:
        missing = [nid for nid in order if nid not in texts]
        stats["dropped_nodes"] = len(missing)
        for nid in missing:
            del order[nid]
    seen = set()
    edges = []
    for a, b, _ in raw_edges:
        if a not in order or b not in order:
            stats["dropped_edges"] += 1
            continue
        key = (a, b) if a < b else (b, a)
        if key in seen:
            stats["duplicate_edges"] += 1
            continue
        seen.add(key)
        edges.append(key)
    if not order:
        raise DatasetError("dataset has no nodes")
    if stats["dropped_nodes"]:
        log.warning(
            "dropped %d node(s) without text and %d incident edge(s)",
            stats["dropped_nodes"],
            stats["dropped_edges"],
        )
    if stats["duplicate_edges"]:
        log.warning("merged %d duplicate edge line(s)", stats["duplicate_edges"])
    graph = Graph.from_edges(list(order), edges)
    full_texts = {nid: texts.get(nid, "") for nid in graph.node_ids}
    labels = read_labels(labels_path) if labels_path else None
    return Dataset(graph, full_texts, labels, stats)


def write_texts(path, node_ids, texts) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for nid in node_ids:
            fh.write(f"{nid}\t{texts.get(nid, '')}\n")


def write_edges(path, graph: Graph) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, j in graph.edge_array():
            fh.write(f"{graph.node_ids[i]}\t{graph.node_ids[j]}\n")


def write_rows(path, ids, matrix) -> None:
    """``id<TAB>v1<TAB>...`` rows with round-trippable floats."""
    with open(path, "w", encoding="utf-8") as fh:
        for nid, row in zip(ids, np.asarray(matrix)):
            fh.write(nid + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")


def read_rows(path) -> tuple[list[str], np.ndarray]:
    ids, rows = [], []
    for _, line in _lines(path):
        parts = line.split("\t")
        ids.append(parts[0])
        rows.append([float(v) for v in parts[1:]])
    return ids, np.array(rows)


# --------------------------------------------------------------------------
# checkpoints


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TruncatedTensorError(CheckpointError):
    pass


class TensorShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: DetGPModel
    graph: Optional[Graph] = None
    texts: Optional[dict[str, str]] = None
    metadata: dict = field(default_factory=dict)


def save_checkpoint(
    model: DetGPModel,
    directory,
    dtype: str = "f64",
    graph: Optional[Graph] = None,
    texts: Optional[dict[str, str]] = None,
    metadata: Optional[dict] = None,
) -> Path:
    """Write a manifest, raw little-endian tensors, and the vocabulary."""
    if dtype not in DTYPES:
        raise ValueError(f"dtype must be one of {sorted(DTYPES)}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np_dtype = DTYPES[dtype]
    entries = []
    for name, arr in model.parameters().items():
        data = np.ascontiguousarray(arr, dtype=np_dtype)
        filename = f"{name}.bin"
        (directory / filename).write_bytes(data.tobytes(order="C"))
        entries.append(
            {
                "name": name,
                "shape": list(data.shape),
                "dtype": dtype,
                "filename": filename,
                "byte_length": int(data.nbytes),
            }
        )
    with open(directory / "vocab.tsv", "w", encoding="utf-8") as fh:
        for tok in sorted(model.vocab.token_to_index, key=model.vocab.token_to_index.get):
            fh.write(f"{tok}\t{model.vocab.token_to_index[tok]}\n")
    manifest = {
        "format_version": FORMAT_VERSION,
        "hyperparameters": {
            "d_text": model.d_text,
            "d_struct": model.d_struct,
            "J": model.max_hops,
            "M": model.inducing.num_points,
            "C": float(model.inducing.C),
            "sigma": float(model.inducing.sigma),
        },
        "tensors": entries,
        "vocabulary": "vocab.tsv",
        "metadata": metadata or {},
    }
    if graph is not None:
        write_edges(directory / "graph_edges.tsv", graph)
        write_texts(directory / "graph_texts.tsv", graph.node_ids, texts or {})
        manifest["graph"] = {
            "edges": "graph_edges.tsv",
            "texts": "graph_texts.tsv",
            "node_ids": "graph_nodes.txt",
        }
        (directory / "graph_nodes.txt").write_text(
            "".join(nid + "\n" for nid in graph.node_ids), encoding="utf-8"
        )
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return directory


def _read_tensor(directory: Path, entry: dict) -> np.ndarray:
    name = entry["name"]
    if entry["dtype"] not in DTYPES:
        raise CheckpointError(f"tensor {name!r}: unsupported dtype {entry['dtype']!r}")
    dt = DTYPES[entry["dtype"]]
    shape = tuple(entry["shape"])
    expected = int(np.prod(shape)) * dt.itemsize
    if entry["byte_length"] != expected:
        raise TensorShapeError(
            f"tensor {name!r}: manifest byte_length {entry['byte_length']} does not match shape {shape}"
        )
    raw = (directory / entry["filename"]).read_bytes()
    if len(raw) != expected:
        raise TruncatedTensorError(
            f"tensor {name!r}: file {entry['filename']} has {len(raw)} bytes, expected {expected}"
        )
    return np.frombuffer(raw, dtype=dt).reshape(shape).astype(np.float64)


def load_checkpoint(directory) -> Checkpoint:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"no manifest.json in {directory}") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format_version {version!r} is not supported (expected {FORMAT_VERSION})"
        )
    hp = manifest["hyperparameters"]
    tensors = {e["name"]: _read_tensor(directory, e) for e in manifest["tensors"]}
    missing = set(TENSOR_NAMES) - set(tensors)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensor(s) {sorted(missing)}")

    token_to_index = {}
    with open(directory / manifest["vocabulary"], encoding="utf-8") as fh:
        for line in fh:
            tok, idx = line.rstrip("\n").split("\t")
            token_to_index[tok] = int(idx)
    vocab = Vocabulary(token_to_index)

    expected_shapes = {
        "table": (vocab.size, hp["d_text"]),
        "Z": (hp["M"], hp["d_text"]),
        "U": (hp["M"], hp["d_struct"]),
        "logits": (hp["J"] + 1,),
    }
    for name, shape in expected_shapes.items():
        if tensors[name].shape != shape:
            raise TensorShapeError(
                f"tensor {name!r} has shape {tensors[name].shape}, hyperparameters imply {shape}"
            )
    model = DetGPModel(
        vocab,
        tensors["table"],
        InducingPointSet(tensors["Z"], tensors["U"], hp["C"], hp["sigma"]),
        HopWeights(tensors["logits"]),
    )
    graph = texts = None
    if "graph" in manifest:
        g = manifest["graph"]
        node_ids = (directory / g["node_ids"]).read_text(encoding="utf-8").splitlines()
        texts = read_texts(directory / g["texts"])
        edges = [(a, b) for a, b, _ in read_edges(directory / g["edges"])]
        graph = Graph.from_edges(node_ids, edges)
    return Checkpoint(model, graph, texts, manifest.get("metadata", {}))


def threads_from_env(default: Optional[int] = None) -> Optional[int]:
    value = os.environ.get("DETGP_THREADS")
    return int(value) if value else default
