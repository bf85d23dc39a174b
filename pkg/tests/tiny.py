"""A config small enough to train in well under a second per seed."""
from graphmoe.config import load_config

TINY = [
    "model.vocab_size=24",
    "model.d_model=8",
    "model.ffn_hidden=16",
    "model.max_seq_len=4",
    "data.n_per_task=20",
    "graph.gnn_hidden=8",
    "train.steps=4",
    "train.eval_every=2",
    "train.batch_size=4",
    "seeds=[0, 1]",
]


def tiny_config(*extra):
    return load_config(None, TINY + list(extra))
