"""Graph router over the MoE graph, plus the plain softmax router baseline."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, NumericError, ShapeError

DEFAULT_GNN_HIDDEN = 256


@dataclass
class RouterOutput:
    """Routing decision for a batch of tokens.

    weights: (T, N) softmax over experts; topk_indices: (T, K) int, largest
    weight first; topk_gates: (T, K) selected weights renormalized per row.
    """

    weights: Tensor
    topk_indices: np.ndarray
    topk_gates: Tensor
    k: int
    _dense: Tensor = field(default=None, repr=False)

    @property
    def num_experts(self):
        return self.weights.shape[-1]

    def dense_gates(self):
        """(T, N) gate matrix: renormalized gates at selected experts, zero elsewhere."""
        if self._dense is None:
            self._dense = ag.put_along(self.topk_gates, self.topk_indices, self.num_experts)
        return self._dense


class GraphRouterParams:
    """Learnable state of the two-layer GCN router."""

    def __init__(self, num_experts, in_features, hidden=DEFAULT_GNN_HIDDEN, rng=None):
        rng = np.random.default_rng() if rng is None else rng
        d = int(hidden)
        self.expert_embeddings = Tensor(rng.normal(0.0, 1.0, (num_experts, d)), requires_grad=True)
        self.token_in_proj = Tensor(rng.normal(0.0, 1.0 / np.sqrt(in_features), (d, in_features)), requires_grad=True)
        self.gcn_weights = [
            Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)), requires_grad=True) for _ in range(2)
        ]
        self.proj_vector = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), d), requires_grad=True)

    @property
    def num_experts(self):
        return self.expert_embeddings.shape[0]

    @property
    def hidden(self):
        return self.expert_embeddings.shape[1]

    @property
    def in_features(self):
        return self.token_in_proj.shape[1]

    def parameters(self):
        return [self.expert_embeddings, self.token_in_proj, *self.gcn_weights, self.proj_vector]

    def named_parameters(self):
        return {
            "expert_embeddings": self.expert_embeddings,
            "token_in_proj": self.token_in_proj,
            "gcn_weight_0": self.gcn_weights[0],
            "gcn_weight_1": self.gcn_weights[1],
            "proj_vector": self.proj_vector,
        }


def _check_k(k, n):
    if not 1 <= k <= n:
        raise ConfigError(f"Top-K must lie in [1, {n}], got {k}")


def _select(scores, k, name):
    if not np.isfinite(scores.data).all():
        raise NumericError(f"{name}: non-finite routing scores")
    weights = ag.softmax(scores, axis=-1)
    idx = _kernels.topk_rows(weights.data, k)
    chosen = ag.take_along(weights, idx, axis=-1)
    gates = ag.div(chosen, ag.sum_(chosen, axis=-1, keepdims=True))
    return RouterOutput(weights, idx, gates, k)


def graph_scores(params, graph, x):
    """Per-expert scores ``proj . GCN(H0)_i`` for every token row of ``x``.

    Node features are the expert embeddings plus the projected token, and each
    GCN layer computes ``A_norm @ H @ W`` (relu after the first layer only).
    The contraction is reassociated without changing its value: expert rows
    of ``H0`` go through the first weight once per call, the linear second
    layer folds into the projection, and first-layer rows of nodes not joined
    to the token node are token-independent, so they are computed once.
    """
    n = params.num_experts
    if graph.num_experts != n:
        raise ShapeError(f"graph has {graph.num_experts} experts but router has {n}")
    if x.shape[-1] != params.in_features:
        raise ShapeError(f"router input width {x.shape[-1]} != {params.in_features}")
    a_norm = graph.normalized_adjacency
    w0, w1 = params.gcn_weights
    t = x.shape[0]
    near = np.flatnonzero(a_norm[:, n])
    far = np.flatnonzero(a_norm[:, n] == 0)

    # node sums are order-free and per-node products position-free, so relabeling
    # experts permutes the scores bit for bit
    embedded = ag.rowwise_matmul(params.expert_embeddings, w0)
    static = ag.transpose(ag.ordered_matmul(ag.transpose(embedded), a_norm[:, :n].T))
    readout = ag.matmul(w1, params.proj_vector)

    token = ag.matmul(x, ag.matmul(params.token_in_proj.T, w0))
    from_token = ag.mul(Tensor(a_norm[None, near, n:]), ag.reshape(token, (t, 1, params.hidden)))
    h_near = ag.relu(ag.add(ag.take_rows(static, near), from_token))
    scores = ag.ordered_matmul(ag.rowwise_matmul(h_near, readout), a_norm[:n, near].T)
    if len(far):
        h_far = ag.relu(ag.take_rows(static, far))
        shared = ag.ordered_matmul(ag.rowwise_matmul(h_far, readout), a_norm[:n, far].T)
        scores = ag.add(scores, shared)
    return scores


def route(params, graph, x, k, name="graph router"):
    """Softmax over the GCN expert scores, then Top-K selection and renormalization."""
    _check_k(k, params.num_experts)
    return _select(graph_scores(params, graph, x), k, name)


def route_softmax_baseline(linear, x, k, name="softmax router"):
    """Softmax over ``linear @ x`` followed by the same Top-K step.

    With ``k`` equal to the expert count this is the dense mixture router.
    """
    _check_k(k, linear.shape[0])
    if x.shape[-1] != linear.shape[1]:
        raise ShapeError(f"router input width {x.shape[-1]} != {linear.shape[1]}")
    return _select(ag.linear(x, linear), k, name)
