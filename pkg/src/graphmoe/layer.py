"""A frozen linear map plus N LoRA experts mixed by a Top-K router."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ShapeError
from .graph import build_graph
from .lora import DEFAULT_ALPHA, FrozenBase, LoRAAdapter, expert_delta
from .losses import (
    ActivationTracker,
    NormalTarget,
    PoissonTarget,
    loss_normal,
    loss_poisson,
    tracker_update,
)
from .router import DEFAULT_GNN_HIDDEN, GraphRouterParams, route, route_softmax_baseline

ROUTER_KINDS = ("graph", "softmax", "dense")


@dataclass
class LayerAux:
    loss_poisson: Tensor
    loss_normal: Tensor
    routing: object


class GraphLoRALayer:
    """Drop-in replacement for one FFN linear map.

    ``router_kind`` selects the graph router, a softmax router with Top-K, or
    a dense softmax mixture (all experts, K = N).
    """

    def __init__(
        self,
        base_weight,
        num_experts,
        k,
        rank,
        alpha=DEFAULT_ALPHA,
        router_kind="graph",
        density=0.1,
        gnn_hidden=DEFAULT_GNN_HIDDEN,
        graph_seed=0,
        rng=None,
        normal_sorted=True,
        poisson_batch_mean_first=False,
        name="moe",
    ):
        if router_kind not in ROUTER_KINDS:
            raise ConfigError(f"router_kind must be one of {ROUTER_KINDS}, got {router_kind!r}")
        if num_experts < 1:
            raise ConfigError(f"need at least one expert, got {num_experts}")
        rng = np.random.default_rng() if rng is None else rng
        self.name = name
        self.base = FrozenBase(base_weight)
        in_f, out_f = self.base.in_features, self.base.out_features
        self.num_experts = int(num_experts)
        self.router_kind = router_kind
        self.k = self.num_experts if router_kind == "dense" else int(k)
        if not 1 <= self.k <= self.num_experts:
            raise ConfigError(f"Top-K must lie in [1, {self.num_experts}], got {k}")
        self.experts = [LoRAAdapter(in_f, out_f, rank, alpha, rng=rng) for _ in range(self.num_experts)]
        if router_kind == "graph":
            self.graph = build_graph(self.num_experts, density, graph_seed)
            self.router = GraphRouterParams(self.num_experts, in_f, gnn_hidden, rng=rng)
            self.router_linear = None
        else:
            self.graph = None
            self.router = None
            self.router_linear = Tensor(
                rng.normal(0.0, 1.0 / np.sqrt(in_f), (self.num_experts, in_f)), requires_grad=True
            )
        self.tracker = ActivationTracker(self.num_experts)
        self.poisson_target = PoissonTarget(self.num_experts)
        self.normal_target = NormalTarget(self.num_experts)
        self.normal_sorted = bool(normal_sorted)
        self.poisson_batch_mean_first = bool(poisson_batch_mean_first)

    @property
    def in_features(self):
        return self.base.in_features

    @property
    def out_features(self):
        return self.base.out_features

    def router_parameters(self):
        if self.router is not None:
            return self.router.parameters()
        return [self.router_linear]

    def parameters(self):
        params = []
        for adapter in self.experts:
            params.extend(adapter.parameters())
        params.extend(self.router_parameters())
        params.extend(self.poisson_target.parameters())
        params.extend(self.normal_target.parameters())
        return params

    def named_parameters(self):
        named = {}
        for j, adapter in enumerate(self.experts):
            named[f"expert{j}.A"] = adapter.A
            named[f"expert{j}.B"] = adapter.B
        if self.router is not None:
            for key, value in self.router.named_parameters().items():
                named[f"router.{key}"] = value
        else:
            named["router.linear"] = self.router_linear
        named["poisson.lambda_raw"] = self.poisson_target.lambda_raw
        named["normal.sigma_raw"] = self.normal_target.sigma_raw
        return named

    def route(self, x):
        if self.router is not None:
            return route(self.router, self.graph, x, self.k, name=f"{self.name} graph router")
        return route_softmax_baseline(self.router_linear, x, self.k, name=f"{self.name} softmax router")

    def __call__(self, x, train=True):
        return layer_forward(self, x, train=train)

    def stats(self):
        freq = self.tracker.frequency()
        return {
            "lambda": self.poisson_target.lam,
            "sigma": self.normal_target.sigma,
            "v_a": None if freq is None else freq.tolist(),
            "v_a_std": None if freq is None else float(freq.std()),
        }


def layer_forward(layer, x, train=True):
    """``W x + sum_j gate_j * E_j(x)`` over each token's selected experts.

    Only selected experts are evaluated, in ascending expert order. With
    ``train`` set, the auxiliary losses are computed from this batch's routing
    and the activation tracker is then updated; otherwise both are skipped.
    """
    if x.ndim != 2 or x.shape[1] != layer.in_features:
        raise ShapeError(f"{layer.name}: expected (tokens, {layer.in_features}) input, got {x.shape}")
    out = layer.route(x)
    if out.num_experts != len(layer.experts):
        raise ConfigError(f"{layer.name}: router width {out.num_experts} != {len(layer.experts)} experts")
    dispatch = _kernels.expert_dispatch(out.topk_indices, layer.num_experts)
    h = ag.add(layer.base(x), sparse_lora_mixture(x, out.topk_gates, layer.experts, dispatch))

    if not train:
        return h, LayerAux(None, None, out)
    lp = loss_poisson(layer.poisson_target, out.weights, layer.poisson_batch_mean_first)
    if layer.tracker.step_count:
        ln_ = loss_normal(layer.normal_target, layer.tracker, out, layer.normal_sorted)
    else:
        ln_ = Tensor(0.0)
    tracker_update(layer.tracker, out)
    return h, LayerAux(lp, ln_, out)


def sparse_lora_mixture(x, gates, experts, dispatch):
    """``sum_j gate_j * E_j(x_t)`` per token over its selected experts, as one tape node.

    ``dispatch`` is the ``(offsets, tokens, slots)`` grouping from
    ``_kernels.expert_dispatch``. Experts run in ascending index order and each
    sees only its own tokens; experts with no tokens get no gradient.
    """
    offsets, tokens, slots = dispatch
    X = x.data
    flat_gates = gates.data.reshape(-1)
    out = np.zeros((X.shape[0], experts[0].out_features))
    saved = []
    for j, adapter in enumerate(experts):
        lo, hi = offsets[j], offsets[j + 1]
        if lo == hi:
            saved.append(None)
            continue
        rows = tokens[lo:hi]
        xr = X[rows]
        low = xr @ adapter.A.data.T
        delta = (low @ adapter.B.data.T) * adapter.scale
        g = flat_gates[slots[lo:hi]]
        _kernels.scatter_add_rows(out, rows, delta * g[:, None])
        saved.append((rows, xr, low, delta, g))

    parents = [x, gates]
    for adapter in experts:
        parents.extend((adapter.A, adapter.B))

    def bw(grad):
        gx = np.zeros_like(X) if x.requires_grad else None
        ggates = np.zeros(flat_gates.shape[0])
        grads = [gx, None]
        for j, adapter in enumerate(experts):
            if saved[j] is None:
                grads.extend((None, None))
                continue
            rows, xr, low, delta, g = saved[j]
            lo, hi = offsets[j], offsets[j + 1]
            gr = grad[rows]
            ggates[slots[lo:hi]] = (gr * delta).sum(axis=1)
            gdelta = gr * (g[:, None] * adapter.scale)
            glow = gdelta @ adapter.B.data
            grads.extend((glow.T @ xr, gdelta.T @ low))
            if gx is not None:
                _kernels.scatter_add_rows(gx, rows, glow @ adapter.A.data)
        grads[1] = ggates.reshape(gates.shape)
        return tuple(grads)

    return ag.custom_op(out, tuple(parents), bw)


def dense_mixture(layer, x):
    """``W x + sum_i o_i E_i(x)`` over all experts, straight from the router weights.

    Independent of the Top-K path; equal to it when K = N.
    """
    out = layer.route(x)
    h = layer.base(x)
    for j, adapter in enumerate(layer.experts):
        w = ag.reshape(ag.index(out.weights, (slice(None), j)), (x.shape[0], 1))
        h = ag.add(h, ag.mul(expert_delta(adapter, x), w))
    return h


def trainable_parameter_count(layer):
    """Scalars that receive gradients: adapters, router, lambda and sigma."""
    return int(sum(p.size for p in layer.parameters()))


def gate_entropy(routing):
    w = routing.weights.data
    return float(-(w * np.log(np.maximum(w, 1e-300))).sum(axis=1).mean())
