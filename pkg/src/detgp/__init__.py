"""Textual-network node embeddings from a graph-diffused sparse Gaussian process."""

from .dynamic import insert_nodes, neighbor_aggregate, refresh_embeddings
from .gp import InducingPointSet, structural_mean, structural_mean_backward
from .graph import Graph, HopWeights, TransitionMatrix, diffuse_transposed, materialize_pstar
from .model import DetGPModel, TrainConfig, forward, init_model, nce_loss, parameter_hash, train
from .text import Vocabulary, build_vocab, encode_wavg, tokenize

__version__ = "0.1.0"

__all__ = [
    "DetGPModel",
    "Graph",
    "HopWeights",
    "InducingPointSet",
    "TrainConfig",
    "TransitionMatrix",
    "Vocabulary",
    "build_vocab",
    "diffuse_transposed",
    "encode_wavg",
    "forward",
    "init_model",
    "insert_nodes",
    "materialize_pstar",
    "nce_loss",
    "parameter_hash",
    "neighbor_aggregate",
    "refresh_embeddings",
    "structural_mean",
    "structural_mean_backward",
    "tokenize",
    "train",
]
