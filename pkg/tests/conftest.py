import numpy as np
import pytest

from detgp.gp import InducingPointSet
from detgp.graph import Graph, HopWeights
from detgp.model import DetGPModel
from detgp.text import Vocabulary


def random_graph(rng, n, p=None, n_edges=None, isolated=0):
    """Erdos-Renyi style graph; the last ``isolated`` nodes get no edges."""
    ids = [f"v{i}" for i in range(n)]
    live = n - isolated
    pairs = [(i, j) for i in range(live) for j in range(i + 1, live)]
    if n_edges is not None:
        pick = rng.choice(len(pairs), size=min(n_edges, len(pairs)), replace=False)
        chosen = [pairs[k] for k in sorted(pick)]
    else:
        p = 0.2 if p is None else p
        chosen = [pq for pq in pairs if rng.random() < p]
    return Graph.from_index_edges(ids, np.array(chosen, dtype=np.int64).reshape(-1, 2))


def random_simplex(rng, size):
    w = rng.random(size) + 0.05
    return w / w.sum()


def random_model(rng, vocab_size=9, d_text=5, d_struct=4, M=3, J=2, sigma=0.1, scale=0.5):
    vocab = Vocabulary({f"w{i}": i for i in range(1, vocab_size)})
    return DetGPModel(
        vocab,
        rng.normal(0.0, scale, (vocab_size, d_text)),
        InducingPointSet(rng.normal(size=(M, d_text)), rng.normal(size=(M, d_struct)), 1.0, sigma),
        HopWeights(rng.normal(size=J + 1)),
    )


def random_docs(rng, n, vocab_size, max_len=5):
    return [rng.integers(0, vocab_size, size=rng.integers(1, max_len + 1)) for _ in range(n)]


def central_diff(f, x, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (mutated in place)."""
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = f()
        x[idx] = orig - h
        down = f()
        x[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def max_rel_err(analytic, numeric, floor=1e-8):
    """Largest entrywise ``|a - n| / max(|a|, |n|)``; entries below ``floor`` compare absolutely."""
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def path3():
    return Graph.from_edges(["0", "1", "2"], [("0", "1"), ("1", "2")])


@pytest.fixture
def cycle3():
    return Graph.from_edges(["0", "1", "2"], [("0", "1"), ("1", "2"), ("2", "0")])


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
