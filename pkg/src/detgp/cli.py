"""``detgp`` command line: train, evaluate, insert nodes, export."""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import io
from .dynamic import align_docs, insert_nodes
from .evaluation import (
    dynamic_eval,
    labeled_split,
    link_prediction_eval,
    node_classification_eval,
    split_edges,
    split_nodes,
)
from .model import TrainConfig, forward, init_model, train
from .text import build_vocab

log = logging.getLogger("detgp")

MODEL_DEFAULTS = {
    "dim_text": 100,
    "dim_struct": 100,
    "hops": 3,
    "inducing": 20,
    "C": 1.0,
    "sigma": 1e-3,
    "min_count": 1,
    "dtype": "f64",
}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


class UsageError(Exception):
    pass


def split_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 101])


def init_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 202])


def eval_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 303])


def graph_fingerprint(graph) -> str:
    h = hashlib.sha256()
    for nid in graph.node_ids:
        h.update(nid.encode() + b"\n")
    h.update(np.ascontiguousarray(graph.edge_array()).tobytes())
    return h.hexdigest()


def effective_config(args) -> dict:
    """Built-in defaults, overridden by the config file, overridden by flags."""
    cfg = dict(MODEL_DEFAULTS)
    cfg.update({k: v for k, v in asdict(TrainConfig()).items()})
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            from_file = json.load(fh)
        unknown = set(from_file) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config key(s): {sorted(unknown)}")
        cfg.update(from_file)
    flag_map = {
        "seed": "seed",
        "epochs": "epochs",
        "lr": "lr",
        "hops": "hops",
        "inducing": "inducing",
        "dim_text": "dim_text",
        "dim_struct": "dim_struct",
        "batch_edges": "batch_edges",
        "k_neg": "k_neg",
        "dtype": "dtype",
    }
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _emit(rows, out=None):
    out = out or sys.stdout
    for row in rows:
        out.write("\t".join(str(v) for v in row) + "\n")
    out.flush()


def _dataset_name(args) -> str:
    return args.name or Path(args.edges).resolve().parent.name


def cmd_train(args) -> int:
    if args.keep_frac is not None and args.train_frac is not None:
        raise UsageError("--keep-frac and --train-frac are mutually exclusive")
    cfg = effective_config(args)
    data = io.load_dataset(args.edges, args.texts, args.labels, require_text=args.require_text)
    seed = int(cfg["seed"])
    graph = data.graph
    split = {"kind": "none"}
    if args.keep_frac is not None:
        es = split_edges(graph, args.keep_frac, split_rng(seed))
        graph = es.train_graph
        split = {"kind": "edges", "fraction": args.keep_frac, "seed": seed}
    elif args.train_frac is not None:
        ns = split_nodes(graph.node_ids, args.train_frac, split_rng(seed))
        graph = graph.subgraph([graph.index(i) for i in ns.train_ids])
        split = {"kind": "nodes", "fraction": args.train_frac, "seed": seed}
    split["dataset"] = graph_fingerprint(data.graph)

    tokens = data.tokenized()
    vocab = build_vocab([tokens[nid] for nid in graph.node_ids], cfg["min_count"])
    docs = [vocab.encode(tokens[nid]) for nid in graph.node_ids]
    model = init_model(
        vocab,
        d_text=cfg["dim_text"],
        d_struct=cfg["dim_struct"],
        num_inducing=cfg["inducing"],
        max_hops=cfg["hops"],
        C=cfg["C"],
        sigma=cfg["sigma"],
        rng=init_rng(seed),
    )
    tcfg = TrainConfig(**{k: v for k, v in cfg.items() if k in TRAIN_KEYS})
    model, trace = train(model, graph, docs, tcfg)

    out = Path(args.out)
    texts = {nid: data.texts[nid] for nid in graph.node_ids}
    io.save_checkpoint(
        model, out, dtype=cfg["dtype"], graph=graph, texts=texts,
        metadata={"split": split, "config": cfg},
    )
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with open(out / "loss_trace.tsv", "w", encoding="utf-8") as fh:
        fh.write("epoch\tloss\n")
        for i, value in enumerate(trace, start=1):
            fh.write(f"{i}\t{value!r}\n")
    log.info("trained on %d nodes / %d edges; final loss %s", graph.num_nodes, graph.num_edges,
             trace[-1] if trace else "n/a")
    return 0


def _check_split(ckpt, kind: str, fraction: float, seed: int, data) -> None:
    split = ckpt.metadata.get("split", {})
    if split.get("dataset") not in (None, graph_fingerprint(data.graph)):
        raise UsageError("checkpoint was trained on a different dataset")
    if split.get("kind") != kind or split.get("fraction") != fraction or split.get("seed") != seed:
        raise UsageError(
            f"checkpoint split {split.get('kind')}/{split.get('fraction')}/seed {split.get('seed')} "
            f"does not match the requested {kind}/{fraction}/seed {seed}; "
            f"train with the same split flags first"
        )


def cmd_eval_link(args) -> int:
    if args.keep_frac >= 1.0:
        raise UsageError("--keep-frac 1.0 leaves no held-out edges to score")
    ckpt = io.load_checkpoint(args.checkpoint)
    data = io.load_dataset(args.edges, args.texts, require_text=args.require_text)
    _check_split(ckpt, "edges", args.keep_frac, args.seed, data)
    es = split_edges(data.graph, args.keep_frac, split_rng(args.seed))
    docs = align_docs(es.train_graph, data.encoded(ckpt.model.vocab))
    H = forward(ckpt.model, es.train_graph, docs)
    d = ckpt.model.d_text
    part = {"full": H, "text": H[:, :d], "struct": H[:, d:]}[args.part]
    metric = "auc" if args.part == "full" else f"auc_{args.part}"
    _emit([("link", _dataset_name(args), args.keep_frac, args.seed, metric, repr(link_prediction_eval(part, es)))])
    return 0


def cmd_eval_class(args) -> int:
    ckpt = io.load_checkpoint(args.checkpoint)
    data = io.load_dataset(args.edges, args.texts, args.labels, require_text=args.require_text)
    graph = ckpt.graph if ckpt.graph is not None else data.graph
    docs = align_docs(graph, data.encoded(ckpt.model.vocab))
    H = forward(ckpt.model, graph, docs)
    ns = labeled_split(split_nodes(graph.node_ids, args.train_frac, eval_rng(args.seed)), data.labels)
    if not ns.test_ids:
        raise UsageError("--train-frac leaves no labeled test nodes")
    score = node_classification_eval(H, graph.node_ids, ns, data.labels, args.l2_reg)
    _emit([("class", _dataset_name(args), args.train_frac, args.seed, "macro_f1", repr(score))])
    return 0


def cmd_eval_dynamic(args) -> int:
    ckpt = io.load_checkpoint(args.checkpoint)
    data = io.load_dataset(args.edges, args.texts, args.labels, require_text=args.require_text)
    _check_split(ckpt, "nodes", args.train_frac, args.seed, data)
    ns = split_nodes(data.graph.node_ids, args.train_frac, split_rng(args.seed))
    keep = set(ns.train_ids)
    train_texts = {nid: ckpt.model.vocab.encode(tok) for nid, tok in data.tokenized().items()
                   if nid in keep}
    res = dynamic_eval(
        ckpt.model, data.graph, data.texts, train_texts, ns, data.labels,
        backend=args.baseline, rng=eval_rng(args.seed), l2_reg=args.l2_reg,
    )
    name = _dataset_name(args)
    _emit([(f"dynamic-{args.baseline}", name, args.train_frac, args.seed, k, repr(v)) for k, v in res.items()])
    return 0


def cmd_insert(args) -> int:
    ckpt = io.load_checkpoint(args.checkpoint)
    if ckpt.graph is None:
        raise UsageError("checkpoint does not include its training graph")
    new_texts = list(io.read_texts(args.new_texts).items())
    new_edges = [(a, b) for a, b, _ in io.read_edges(args.new_edges)] if args.new_edges else []
    texts = {nid: ckpt.model.vocab.encode(tok) for nid, tok in
             io.Dataset(ckpt.graph, ckpt.texts).tokenized().items()}
    graph, _, H = insert_nodes(ckpt.model, ckpt.graph, texts, new_texts, new_edges)
    io.write_rows(args.out, graph.node_ids, H)
    return 0


def cmd_export(args) -> int:
    ckpt = io.load_checkpoint(args.checkpoint)
    if args.what == "inducing":
        ind = ckpt.model.inducing
        ids = [f"inducing_{m}" for m in range(ind.num_points)]
        io.write_rows(args.out, ids, np.hstack([ind.Z, ind.U]))
        return 0
    if ckpt.graph is None:
        raise UsageError("checkpoint does not include its training graph")
    texts = io.Dataset(ckpt.graph, ckpt.texts).encoded(ckpt.model.vocab)
    H = forward(ckpt.model, ckpt.graph, align_docs(ckpt.graph, texts))
    io.write_rows(args.out, ckpt.graph.node_ids, H)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="detgp", description=__doc__)
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS threads when --no-deterministic (env DETGP_THREADS)")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True,
                   help="single-threaded, fixed reduction order (default on)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp, labels=False):
        sp.add_argument("--edges", required=True)
        sp.add_argument("--texts", required=True)
        sp.add_argument("--labels", required=labels, default=None)
        sp.add_argument("--require-text", action=argparse.BooleanOptionalAction, default=True)
        sp.add_argument("--name", default=None, help="dataset name for report rows")

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    data_args(t)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--hops", type=int)
    t.add_argument("--inducing", type=int)
    t.add_argument("--dim-text", type=int)
    t.add_argument("--dim-struct", type=int)
    t.add_argument("--batch-edges", type=int)
    t.add_argument("--k-neg", type=int)
    t.add_argument("--dtype", choices=sorted(io.DTYPES))
    t.add_argument("--keep-frac", type=float, help="train on this fraction of edges")
    t.add_argument("--train-frac", type=float, help="train on this fraction of nodes")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval-link", help="link-prediction AUC on held-out edges")
    e.add_argument("--checkpoint", required=True)
    data_args(e)
    e.add_argument("--keep-frac", type=float, required=True)
    e.add_argument("--seed", type=int, required=True)
    e.add_argument("--part", choices=["full", "text", "struct"], default="full")
    e.set_defaults(func=cmd_eval_link)

    c = sub.add_parser("eval-class", help="node-classification Macro-F1")
    c.add_argument("--checkpoint", required=True)
    data_args(c, labels=True)
    c.add_argument("--train-frac", type=float, required=True)
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--l2-reg", type=float, default=1e-3)
    c.set_defaults(func=cmd_eval_class)

    d = sub.add_parser("eval-dynamic", help="embed held-out nodes without retraining")
    d.add_argument("--checkpoint", required=True)
    data_args(d)
    d.add_argument("--train-frac", type=float, required=True)
    d.add_argument("--seed", type=int, required=True)
    d.add_argument("--baseline", choices=["detgp", "agg-mean", "agg-max"], default="detgp")
    d.add_argument("--l2-reg", type=float, default=1e-3)
    d.set_defaults(func=cmd_eval_dynamic)

    i = sub.add_parser("insert", help="add nodes and write embeddings for all nodes")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--new-texts", required=True)
    i.add_argument("--new-edges", default=None)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_insert)

    x = sub.add_parser("export", help="write embeddings or inducing points as TSV")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--what", choices=["embeddings", "inducing"], required=True)
    x.add_argument("--format", choices=["tsv"], default="tsv")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.deterministic and args.threads and args.threads > 1:
        parser.error("--threads > 1 needs --no-deterministic")
    threads = 1 if args.deterministic else (args.threads or io.threads_from_env())
    limit = threadpool_limits(threads) if threads else contextlib.nullcontext()
    try:
        with limit:
            return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (OSError, ValueError, io.CheckpointError) as exc:
        print(f"detgp: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
