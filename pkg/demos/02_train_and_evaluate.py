"""
Training on a textual network and scoring held-out links
========================================================

We generate a citation-like network whose texts only partly reveal the
communities, train on 55% of the edges, and compare the text half, the
structural half and the full embedding on the held-out links.
"""

# %%
import numpy as np

from detgp import TrainConfig, build_vocab, forward, init_model, train
from detgp.datasets import make_textual_network
from detgp.evaluation import link_prediction_eval, node_classification_eval, split_edges, split_nodes

data = make_textual_network(n_classes=7, nodes_per_class=40, seed=1)
print(data.graph.num_nodes, "nodes,", data.graph.num_edges, "edges")
print("sample text:", data.texts["n0"][:70], "...")

# %%
# Hold out 45% of the edges. The vocabulary comes from the training graph.
split = split_edges(data.graph, 0.55, np.random.default_rng(7))
tokens = data.tokenized()
vocab = build_vocab([tokens[i] for i in split.train_graph.node_ids])
docs = [vocab.encode(tokens[i]) for i in split.train_graph.node_ids]

model = init_model(vocab, rng=np.random.default_rng(7))
model, trace = train(model, split.train_graph, docs, TrainConfig(epochs=120, seed=7))
print("loss: first epoch %.4f, last epoch %.4f" % (trace[0], trace[-1]))

# %%
# Links are ranked by inner products of the embeddings.
H = forward(model, split.train_graph, docs)
d = model.d_text
for name, part in (("text", H[:, :d]), ("struct", H[:, d:]), ("full", H)):
    print(f"AUC {name:6s} {link_prediction_eval(part, split):.4f}")
print("learned hop weights:", np.round(model.hops.alpha(), 3))

# %%
# The same embeddings feed a linear classifier on half of the labeled nodes.
nodes = split_nodes(data.graph.node_ids, 0.5, np.random.default_rng(7))
f1 = node_classification_eval(H, split.train_graph.node_ids, nodes, data.labels)
print(f"Macro-F1 {f1:.4f}")
