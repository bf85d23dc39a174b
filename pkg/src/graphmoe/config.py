"""Experiment configuration: a YAML key tree with every default spelled out.

A user file only needs the keys it changes. Unknown keys anywhere in the
tree are an error, as are values outside their legal range. The resolved
tree is what gets written next to results and hashed.
"""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml

from .errors import ConfigError
from .layer import ROUTER_KINDS

DEFAULTS = {
    "model": {
        "vocab_size": 64,
        "d_model": 32,
        "num_blocks": 2,
        "num_heads": 2,
        "ffn_hidden": 64,
        "max_seq_len": 16,
        "backbone_seed": 0,
    },
    "data": {
        "tasks": [
            {"rule": "copy", "param": 0},
            {"rule": "reverse", "param": 0},
            {"rule": "modular-add", "param": 7},
            {"rule": "parity", "param": 3},
        ],
        "n_per_task": 2000,
        "seq_len": 4,
        "n_symbols": 8,
        "seed": 0,
    },
    "moe": {
        "router_kind": "graph",
        "num_experts": 8,
        "top_k": 2,
        "rank": 2,
        "alpha": 4.0,
    },
    "graph": {
        "density": 0.1,
        "gnn_hidden": 256,
        "seed": 0,
    },
    "losses": {
        "c_p": 0.005,
        "c_n": 8.0,
        "normal_loss": {"sorted": True},
        "poisson_loss": {"batch_mean_first": False},
    },
    "train": {
        "lr": 1e-3,
        "steps": 2000,
        "batch_size": 16,
        "eval_every": 500,
        "checkpoint": True,
    },
    "seeds": [0, 1, 2, 3, 4],
    "output_dir": "runs/default",
}

# leaves whose value is a list or a null-able subtree, not a nested mapping
_OPAQUE = {("data", "tasks"), ("seeds",)}

SWEEP_GRIDS = {
    "experts": (4, 8, 12, 16, 32),
    "topk": (1, 2, 3, 4, 5),
    "rank": (1, 2, 4, 8, 16, 32),
    "density": (0.05, 0.1, 0.2, 0.5, 0.8, 1.0),
}

SWEEP_KEYS = {
    "experts": "moe.num_experts",
    "topk": "moe.top_k",
    "rank": "moe.rank",
    "density": "graph.density",
}


def default_config():
    return copy.deepcopy(DEFAULTS)


def _merge(base, user, path=()):
    if not isinstance(user, dict):
        where = ".".join(path) or "<root>"
        raise ConfigError(f"{where}: expected a mapping, got {type(user).__name__}")
    for key, value in user.items():
        here = path + (str(key),)
        dotted = ".".join(here)
        if key not in base:
            raise ConfigError(f"unknown config key {dotted!r}")
        if here == ("graph",):
            if value is None:
                base[key] = None
            else:
                if base[key] is None:
                    base[key] = copy.deepcopy(DEFAULTS["graph"])
                _merge(base[key], value, here)
        elif isinstance(base[key], dict) and here not in _OPAQUE:
            _merge(base[key], value, here)
        else:
            base[key] = copy.deepcopy(value)
    return base


def load_config(path=None, overrides=()):
    """Defaults, then the YAML file at ``path`` (if any), then ``key=value`` overrides."""
    cfg = default_config()
    if path is not None:
        text = Path(path).read_text()
        try:
            user = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
        if user is not None:
            _merge(cfg, user)
    for item in overrides:
        apply_override(cfg, item)
    return resolve(cfg)


def apply_override(cfg, item):
    """Set one dotted key from a ``key=value`` string; the value is parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {key}: cannot parse value {raw!r}") from exc
    set_key(cfg, key, value)
    return cfg


def set_key(cfg, dotted, value):
    parts = dotted.split(".")
    tree = {}
    node = tree
    for part in parts[:-1]:
        node[part] = {}
        node = node[part]
    node[parts[-1]] = value
    _merge(cfg, tree)
    return cfg


def get_key(cfg, dotted):
    node = cfg
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[part]
    return node


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_real(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _need(cond, key, msg):
    if not cond:
        raise ConfigError(f"{key}: {msg}")


def resolve(cfg):
    """Validate every field and normalize the graph section for the router kind.

    Softmax and dense routers have no MoE graph, so their ``graph`` section
    is dropped to ``None``.
    """
    cfg = copy.deepcopy(cfg)
    m = cfg["model"]
    for key in ("vocab_size", "d_model", "num_blocks", "num_heads", "ffn_hidden", "max_seq_len"):
        _need(_is_int(m[key]) and m[key] >= 1, f"model.{key}", f"must be a positive integer, got {m[key]!r}")
    _need(m["d_model"] % m["num_heads"] == 0, "model.num_heads", f"must divide d_model {m['d_model']}")
    _need(_is_int(m["backbone_seed"]) and m["backbone_seed"] >= 0, "model.backbone_seed", "must be a nonnegative integer")

    d = cfg["data"]
    _need(isinstance(d["tasks"], list) and d["tasks"], "data.tasks", "must be a nonempty list")
    for i, task in enumerate(d["tasks"]):
        _need(isinstance(task, dict), f"data.tasks[{i}]", "must be a mapping with rule and param")
        extra = set(task) - {"rule", "param"}
        _need(not extra, f"data.tasks[{i}]", f"unknown keys {sorted(extra)}")
        _need("rule" in task, f"data.tasks[{i}].rule", "is required")
        task.setdefault("param", 0)
        _need(_is_int(task["param"]), f"data.tasks[{i}].param", "must be an integer")
    _need(_is_int(d["n_per_task"]) and d["n_per_task"] >= 1, "data.n_per_task", "must be >= 1")
    _need(_is_int(d["seq_len"]) and 2 <= d["seq_len"] <= m["max_seq_len"], "data.seq_len", f"must lie in [2, {m['max_seq_len']}]")
    _need(_is_int(d["n_symbols"]) and d["n_symbols"] >= 2, "data.n_symbols", "must be >= 2")
    _need(_is_int(d["seed"]) and d["seed"] >= 0, "data.seed", "must be a nonnegative integer")
    from .data import SYMBOL_BASE

    _need(SYMBOL_BASE + d["n_symbols"] <= m["vocab_size"], "data.n_symbols", f"needs vocab_size >= {SYMBOL_BASE + d['n_symbols']}")

    moe = cfg["moe"]
    _need(moe["router_kind"] in ROUTER_KINDS, "moe.router_kind", f"must be one of {list(ROUTER_KINDS)}, got {moe['router_kind']!r}")
    _need(_is_int(moe["num_experts"]) and moe["num_experts"] >= 1, "moe.num_experts", "must be a positive integer")
    _need(_is_int(moe["top_k"]) and 1 <= moe["top_k"] <= moe["num_experts"], "moe.top_k", f"must lie in [1, num_experts={moe['num_experts']}]")
    max_rank = min(m["d_model"], m["ffn_hidden"])
    _need(_is_int(moe["rank"]) and 1 <= moe["rank"] <= max_rank, "moe.rank", f"must lie in [1, {max_rank}]")
    _need(_is_real(moe["alpha"]) and moe["alpha"] > 0, "moe.alpha", "must be positive")
    moe["alpha"] = float(moe["alpha"])
    if moe["router_kind"] == "dense":
        moe["top_k"] = moe["num_experts"]

    if moe["router_kind"] == "graph":
        g = cfg["graph"] if cfg["graph"] is not None else copy.deepcopy(DEFAULTS["graph"])
        _need(_is_real(g["density"]) and 0 < g["density"] <= 1, "graph.density", f"must lie in (0, 1], got {g['density']!r}")
        _need(_is_int(g["gnn_hidden"]) and g["gnn_hidden"] >= 1, "graph.gnn_hidden", "must be a positive integer")
        _need(_is_int(g["seed"]) and g["seed"] >= 0, "graph.seed", "must be a nonnegative integer")
        g["density"] = float(g["density"])
        cfg["graph"] = g
    else:
        cfg["graph"] = None

    loss = cfg["losses"]
    for key in ("c_p", "c_n"):
        _need(_is_real(loss[key]) and loss[key] >= 0, f"losses.{key}", "must be a nonnegative number")
        loss[key] = float(loss[key])
    _need(isinstance(loss["normal_loss"]["sorted"], bool), "losses.normal_loss.sorted", "must be true or false")
    _need(isinstance(loss["poisson_loss"]["batch_mean_first"], bool), "losses.poisson_loss.batch_mean_first", "must be true or false")

    t = cfg["train"]
    _need(_is_real(t["lr"]) and 0 < t["lr"] < 1, "train.lr", f"must lie in (0, 1), got {t['lr']!r}")
    t["lr"] = float(t["lr"])
    _need(_is_int(t["steps"]) and t["steps"] >= 0, "train.steps", "must be a nonnegative integer")
    _need(_is_int(t["batch_size"]) and t["batch_size"] >= 1, "train.batch_size", "must be a positive integer")
    _need(_is_int(t["eval_every"]) and t["eval_every"] >= 1, "train.eval_every", "must be a positive integer")
    _need(isinstance(t["checkpoint"], bool), "train.checkpoint", "must be true or false")

    seeds = cfg["seeds"]
    if _is_int(seeds):
        seeds = [seeds]
    _need(isinstance(seeds, list) and seeds and all(_is_int(s) and s >= 0 for s in seeds), "seeds", "must be a nonempty list of nonnegative integers")
    _need(len(set(seeds)) == len(seeds), "seeds", "must not repeat")
    cfg["seeds"] = seeds
    _need(isinstance(cfg["output_dir"], str) and cfg["output_dir"], "output_dir", "must be a nonempty path")

    # building the tasks surfaces rule and parameter errors now, not mid-run
    from .data import validate_tasks

    validate_tasks(task_specs(cfg), d["seq_len"], d["n_symbols"])
    return cfg


def task_specs(cfg):
    from .data import SyntheticTaskSpec

    return tuple(SyntheticTaskSpec(i, t["rule"], t.get("param", 0)) for i, t in enumerate(cfg["data"]["tasks"]))


def check_sweep_values(axis, values):
    """Sweep points must come from the fixed grid for their axis."""
    if axis not in SWEEP_GRIDS:
        raise ConfigError(f"sweep axis must be one of {list(SWEEP_GRIDS)}, got {axis!r}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    grid = SWEEP_GRIDS[axis]
    for v in values:
        if not any(abs(v - g) < 1e-12 for g in grid):
            raise ConfigError(f"sweep {axis}: {v!r} is outside the grid {list(grid)}")
    return [float(v) if axis == "density" else int(v) for v in values]


def canonical_json(cfg):
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg):
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()[:16]


def run_config(cfg, seed):
    """The resolved config of one seed's run (the seed list collapsed to that seed)."""
    one = copy.deepcopy(cfg)
    one["seeds"] = [int(seed)]
    return one


def dump_yaml(cfg, path):
    Path(path).write_text(yaml.safe_dump(cfg, sort_keys=False, default_flow_style=False))


def build_dataset(cfg):
    from .data import generate_dataset

    d = cfg["data"]
    return generate_dataset(task_specs(cfg), d["n_per_task"], d["seed"], d["seq_len"], d["n_symbols"])


def build_model(cfg, seed):
    from .model import MoESettings, ToyModel, ToyTransformerConfig

    m = dict(cfg["model"])
    backbone_seed = m.pop("backbone_seed")
    g = cfg["graph"] or DEFAULTS["graph"]
    moe = MoESettings(
        num_experts=cfg["moe"]["num_experts"],
        top_k=cfg["moe"]["top_k"],
        rank=cfg["moe"]["rank"],
        alpha=cfg["moe"]["alpha"],
        router_kind=cfg["moe"]["router_kind"],
        density=g["density"],
        gnn_hidden=g["gnn_hidden"],
        graph_seed=g["seed"],
        normal_sorted=cfg["losses"]["normal_loss"]["sorted"],
        poisson_batch_mean_first=cfg["losses"]["poisson_loss"]["batch_mean_first"],
    )
    return ToyModel(ToyTransformerConfig(**m), moe, seed=seed, backbone_seed=backbone_seed)
