"""Frozen random transformer whose FFN linear maps are graph-routed LoRA expert layers."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import PAD
from .errors import ConfigError, ShapeError
from .layer import GraphLoRALayer, gate_entropy, trainable_parameter_count


@dataclass(frozen=True)
class ToyTransformerConfig:
    vocab_size: int = 64
    d_model: int = 32
    num_blocks: int = 2
    num_heads: int = 2
    ffn_hidden: int = 64
    max_seq_len: int = 16

    def __post_init__(self):
        for key, value in asdict(self).items():
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"model.{key} must be a positive integer, got {value!r}")
        if self.d_model % self.num_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by num_heads {self.num_heads}")


@dataclass(frozen=True)
class MoESettings:
    num_experts: int = 8
    top_k: int = 2
    rank: int = 2
    alpha: float = 4.0
    router_kind: str = "graph"
    density: float = 0.1
    gnn_hidden: int = 256
    graph_seed: int = 0
    normal_sorted: bool = True
    poisson_batch_mean_first: bool = False


def _layer_graph_seed(base, run_seed, index):
    return int(np.random.SeedSequence([base, run_seed, index]).generate_state(1, np.uint64)[0] >> 1)


class ToyModel:
    """Pre-norm transformer with bidirectional attention and parameter-free layer norms.

    The backbone is drawn from ``backbone_seed`` and frozen. Adapters and
    routers are drawn from ``seed``. Each block's FFN is ``W2 relu(W1 x)``
    with both maps replaced by :class:`GraphLoRALayer`.
    """

    def __init__(self, config, moe, seed=0, backbone_seed=0):
        self.config = config
        self.moe = moe
        self.seed = int(seed)
        self.backbone_seed = int(backbone_seed)
        c = config
        brng = np.random.default_rng(backbone_seed)
        self.tok_emb = brng.normal(0.0, 1.0, (c.vocab_size, c.d_model))
        self.pos_emb = brng.normal(0.0, 1.0, (c.max_seq_len, c.d_model))
        d = c.d_model
        self.blocks = []
        base_weights = []
        for _ in range(c.num_blocks):
            attn = {name: Tensor(brng.normal(0.0, 1.0 / np.sqrt(d), (d, d))) for name in ("wq", "wk", "wv", "wo")}
            self.blocks.append(attn)
            base_weights.append(
                (
                    brng.normal(0.0, np.sqrt(2.0 / d), (c.ffn_hidden, d)),
                    brng.normal(0.0, 1.0 / np.sqrt(c.ffn_hidden), (d, c.ffn_hidden)),
                )
            )
        self.unembed = Tensor(brng.normal(0.0, 1.0 / np.sqrt(d), (c.vocab_size, d)))

        rng = np.random.default_rng(seed)
        self.moe_layers = []
        for b, (w1, w2) in enumerate(base_weights):
            pair = []
            for which, w in (("up", w1), ("down", w2)):
                index = len(self.moe_layers) + len(pair)
                pair.append(
                    GraphLoRALayer(
                        w,
                        moe.num_experts,
                        moe.top_k,
                        moe.rank,
                        alpha=moe.alpha,
                        router_kind=moe.router_kind,
                        density=moe.density,
                        gnn_hidden=moe.gnn_hidden,
                        graph_seed=_layer_graph_seed(moe.graph_seed, seed, index),
                        rng=rng,
                        normal_sorted=moe.normal_sorted,
                        poisson_batch_mean_first=moe.poisson_batch_mean_first,
                        name=f"block{b}.ffn_{which}",
                    )
                )
            self.moe_layers.extend(pair)

    @property
    def layers(self):
        return self.moe_layers

    def parameters(self):
        return [p for layer in self.moe_layers for p in layer.parameters()]

    def named_parameters(self):
        return {
            f"{layer.name}.{key}": value
            for layer in self.moe_layers
            for key, value in layer.named_parameters().items()
        }

    def frozen_arrays(self):
        arrays = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb, "unembed": self.unembed.data}
        for b, blk in enumerate(self.blocks):
            for key, value in blk.items():
                arrays[f"block{b}.{key}"] = value.data
        for layer in self.moe_layers:
            arrays[f"{layer.name}.W"] = layer.base.weight.data
        return arrays

    def trainable_parameter_count(self):
        return sum(trainable_parameter_count(layer) for layer in self.moe_layers)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def _attention(blk, x, num_heads):
    b, l, d = x.shape
    dh = d // num_heads

    def heads(t):
        return ag.transpose(ag.reshape(t, (b, l, num_heads, dh)), (0, 2, 1, 3))

    a = ag.layer_norm(x)
    q = heads(ag.linear(a, blk["wq"]))
    k = heads(ag.linear(a, blk["wk"]))
    v = heads(ag.linear(a, blk["wv"]))
    scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    mixed = ag.matmul(ag.softmax(scores, axis=-1), v)
    merged = ag.reshape(ag.transpose(mixed, (0, 2, 1, 3)), (b, l, d))
    return ag.linear(merged, blk["wo"])


def model_forward(model, tokens, train=True, adapters=True):
    """Logits of shape (batch, seq, vocab) and the layer-averaged auxiliary losses.

    With ``adapters=False`` every FFN map is its frozen base only, which is
    the backbone the adapters start from. Auxiliary losses are ``None``
    unless ``train`` is set (which also advances the activation trackers).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    c = model.config
    if tokens.ndim != 2:
        raise ShapeError(f"tokens must be (batch, seq), got {tokens.shape}")
    b, l = tokens.shape
    if l > c.max_seq_len:
        raise ShapeError(f"sequence length {l} exceeds max_seq_len {c.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= c.vocab_size):
        raise IndexError(f"token ids must lie in [0, {c.vocab_size})")
    x = Tensor(model.tok_emb[tokens] + model.pos_emb[:l])
    aux = []
    routings = []
    for blk, (up, down) in zip(model.blocks, zip(model.moe_layers[0::2], model.moe_layers[1::2])):
        x = ag.add(x, _attention(blk, x, c.num_heads))
        f = ag.reshape(ag.layer_norm(x), (b * l, c.d_model))
        if adapters:
            h, aux_up = up(f, train=train)
            h, aux_down = down(ag.relu(h), train=train)
            aux.extend([aux_up, aux_down])
            routings.extend([aux_up.routing, aux_down.routing])
        else:
            h = down.base(ag.relu(up.base(f)))
        x = ag.add(x, ag.reshape(h, (b, l, c.d_model)))
    logits = ag.linear(ag.layer_norm(x), model.unembed)
    lp = ln_ = None
    if adapters and train:
        lp = ag.scale(_sum(a.loss_poisson for a in aux), 1.0 / len(aux))
        ln_ = ag.scale(_sum(a.loss_normal for a in aux), 1.0 / len(aux))
    return logits, (lp, ln_), routings


def _sum(items):
    items = list(items)
    total = items[0]
    for item in items[1:]:
        total = ag.add(total, item)
    return total


def task_loss(logits, targets):
    """Token-level cross entropy over non-padding target positions."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    flat = ag.reshape(logits, (-1, logits.shape[-1]))
    keep = np.flatnonzero(targets != PAD)
    return ag.cross_entropy(ag.take_rows(flat, keep), targets[keep])


def evaluate(model, split, tasks, batch_size=256, adapters=True):
    """Exact-match accuracy per task and overall, plus routing statistics.

    Token accuracy counts non-padding target positions whose argmax equals
    the target; sequence accuracy requires every such position to match.
    Overall accuracy is the unweighted mean over tasks. Routing statistics are
    computed from this pass alone and do not touch the training trackers.
    """
    n = len(split)
    n_layers = len(model.moe_layers)
    n_exp = model.moe.num_experts
    n_tasks = len(tasks)
    correct = np.zeros(n_tasks)
    total = np.zeros(n_tasks)
    seq_ok = np.zeros(n_tasks)
    seq_n = np.zeros(n_tasks)
    mass = np.zeros((n_layers, n_tasks, n_exp))
    entropy = np.zeros(n_layers)
    with ag.no_grad():
        for start in range(0, n, batch_size):
            sl = slice(start, start + batch_size)
            inputs, targets, tids = split.inputs[sl], split.targets[sl], split.task_ids[sl]
            logits, _, routings = model_forward(model, inputs, train=False, adapters=adapters)
            pred = logits.data.argmax(axis=-1)
            mask = targets != PAD
            hit = (pred == targets) & mask
            np.add.at(correct, tids, hit.sum(axis=1))
            np.add.at(total, tids, mask.sum(axis=1))
            np.add.at(seq_ok, tids, (hit.sum(axis=1) == mask.sum(axis=1)).astype(float))
            np.add.at(seq_n, tids, 1.0)
            token_task = np.repeat(tids, inputs.shape[1])
            for li, routing in enumerate(routings):
                gates = routing.dense_gates().data
                np.add.at(mass[li], token_task, gates)
                entropy[li] += gate_entropy(routing) * gates.shape[0]
    per_task = {}
    for t, spec in enumerate(tasks):
        per_task[spec.name] = {
            "accuracy": float(correct[t] / total[t]) if total[t] else None,
            "sequence_accuracy": float(seq_ok[t] / seq_n[t]) if seq_n[t] else None,
        }
    accs = [v["accuracy"] for v in per_task.values() if v["accuracy"] is not None]
    metrics = {
        "accuracy": float(np.mean(accs)) if accs else None,
        "sequence_accuracy": float(np.mean([v["sequence_accuracy"] for v in per_task.values() if v["sequence_accuracy"] is not None])) if accs else None,
        "per_task": per_task,
    }
    if adapters and n:
        layers = []
        for li, layer in enumerate(model.moe_layers):
            overall = mass[li].sum(axis=0)
            freq = overall / overall.sum()
            task_freq = mass[li] / np.maximum(mass[li].sum(axis=1, keepdims=True), 1e-300)
            layers.append(
                {
                    "name": layer.name,
                    "v_a": freq.tolist(),
                    "v_a_std": float(freq.std()),
                    "dominant_experts": {
                        spec.name: [int(e) for e in np.argsort(-task_freq[t], kind="stable")[: layer.k]]
                        for t, spec in enumerate(tasks)
                    },
                    "task_frequency": task_freq.tolist(),
                    "gate_entropy": float(entropy[li] / (n * split.inputs.shape[1])),
                }
            )
        metrics["routing"] = layers
        metrics["v_a_std"] = float(np.mean([lay["v_a_std"] for lay in layers]))
    return metrics
