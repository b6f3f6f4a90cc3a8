"""
Multi-hop diffusion and the structural embedding
================================================

A node's structural embedding is a kernel regression onto a handful of
inducing points, smoothed over the graph by a mixture of random-walk
powers. This script builds the pieces by hand on a small graph.
"""

# %%
# A path with a pendant triangle, plus one node with no edges at all.
import numpy as np

from detgp import Graph, HopWeights, InducingPointSet, diffuse_transposed, materialize_pstar, structural_mean
from detgp.gp import cross_kernel

ids = ["a", "b", "c", "d", "e", "lonely"]
graph = Graph.from_edges(ids, [("a", "b"), ("b", "c"), ("c", "d"), ("d", "e"), ("c", "e")])
P = graph.transition
print(np.round(P.forward.toarray(), 3))

# %%
# Hop weights live on the simplex. Zero logits give a uniform mix over
# hops 0..J; the dense mixture is only ever built for inspection.
alpha = HopWeights.uniform(3).alpha()
Pstar = materialize_pstar(P, alpha)
print("alpha =", alpha)
print("row sums of P* =", np.round(Pstar.sum(axis=1), 12))

# %%
# Training never forms P*. It applies the transposed mixture to a block of
# columns with a few sparse products.
V = np.random.default_rng(0).normal(size=(len(ids), 2))
print("max |sparse - dense| =", np.abs(diffuse_transposed(P, alpha, V) - Pstar.T @ V).max())

# %%
# Structural rows: text features X, three inducing points, linear kernel.
rng = np.random.default_rng(1)
X = rng.normal(size=(len(ids), 4))
ind = InducingPointSet(rng.normal(size=(3, 4)), rng.normal(size=(3, 2)), C=1.0, sigma=1e-3)
S = structural_mean(X, P, alpha, ind)
print(np.round(S, 3))

# %%
# The lonely node sees no walks, so its row is the unsmoothed regression
# scaled by the zero-hop weight.
A = cross_kernel(ind.Z, ind.Z, ind.C) + ind.sigma * np.eye(3)
local = cross_kernel(X[-1:], ind.Z, ind.C) @ np.linalg.solve(A, ind.U)
print("lonely row :", S[-1])
print("alpha0*local:", alpha[0] * local[0])
