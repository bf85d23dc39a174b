"""Versioned ``.npz`` checkpoints.

One archive holds a format version, the resolved run config as JSON, every
trainable and frozen tensor by name, each layer's MoE graph edge list and
its activation tracker. Nothing is pickled.
"""
from __future__ import annotations

import json

import numpy as np

from .config import build_model, canonical_json, config_hash
from .errors import CheckpointFormatError

FORMAT_VERSION = 1


def save_checkpoint(path, model, cfg, seed, step):
    meta = {
        "format_version": FORMAT_VERSION,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": int(seed),
        "step": int(step),
        "graphs": [None if layer.graph is None else layer.graph.to_dict() for layer in model.layers],
        "trackers": [layer.tracker.state() for layer in model.layers],
    }
    arrays = {"format_version": np.array(FORMAT_VERSION), "meta": np.array(json.dumps(meta, sort_keys=True))}
    for name, tensor in model.named_parameters().items():
        arrays[f"param/{name}"] = tensor.data
    for name, value in model.frozen_arrays().items():
        arrays[f"frozen/{name}"] = value
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def read_checkpoint(path):
    """``(meta, arrays)`` after checking the format version."""
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise CheckpointFormatError(f"{path}: not a readable checkpoint ({exc})") from exc
    with archive:
        if "format_version" not in archive.files or "meta" not in archive.files:
            raise CheckpointFormatError(f"{path}: missing format_version or meta record")
        version = int(archive["format_version"])
        if version != FORMAT_VERSION:
            raise CheckpointFormatError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
        meta = json.loads(str(archive["meta"]))
        arrays = {k: archive[k] for k in archive.files if k not in ("format_version", "meta")}
    return meta, arrays


def _comparable(cfg):
    # where results were written and which other seeds ran do not change the model
    return {k: v for k, v in cfg.items() if k not in ("output_dir", "seeds")}


def load_checkpoint(path, expected_config=None):
    """Rebuild the model a checkpoint was taken from.

    With ``expected_config`` given, every section except ``output_dir`` and
    ``seeds`` must match the stored run config, and the stored seed must be
    one of its seeds. Tensor names, shapes and graph edge lists must all agree with
    what the stored config builds.
    """
    meta, arrays = read_checkpoint(path)
    cfg = meta["config"]
    if config_hash(cfg) != meta["config_hash"]:
        raise CheckpointFormatError(f"{path}: stored config does not match its recorded hash")
    if expected_config is not None:
        want, have = _comparable(expected_config), _comparable(cfg)
        if canonical_json(want) != canonical_json(have):
            keys = sorted(k for k in set(want) | set(have) if want.get(k) != have.get(k))
            raise CheckpointFormatError(f"{path}: checkpoint config differs from the requested config in {keys}")
        if meta["seed"] not in expected_config["seeds"]:
            raise CheckpointFormatError(f"{path}: checkpoint seed {meta['seed']} is not among the requested seeds")
    model = build_model(cfg, meta["seed"])

    named = model.named_parameters()
    stored = {k[len("param/"):] for k in arrays if k.startswith("param/")}
    if stored != set(named):
        missing = sorted(set(named) - stored)
        extra = sorted(stored - set(named))
        raise CheckpointFormatError(f"{path}: parameter names differ (missing {missing[:5]}, unexpected {extra[:5]})")
    for name, tensor in named.items():
        value = arrays[f"param/{name}"]
        if value.shape != tensor.shape:
            raise CheckpointFormatError(f"{path}: {name} has shape {value.shape}, expected {tensor.shape}")
        tensor.data = np.array(value, dtype=np.float64)
    for name, value in model.frozen_arrays().items():
        key = f"frozen/{name}"
        if key not in arrays or not np.array_equal(arrays[key], value):
            raise CheckpointFormatError(f"{path}: frozen tensor {name} does not match the backbone its config builds")

    if len(meta["graphs"]) != len(model.layers) or len(meta["trackers"]) != len(model.layers):
        raise CheckpointFormatError(f"{path}: layer count differs from the config")
    for layer, graph, tracker in zip(model.layers, meta["graphs"], meta["trackers"]):
        built = None if layer.graph is None else layer.graph.to_dict()
        if graph != built:
            raise CheckpointFormatError(f"{path}: {layer.name} graph edge list does not match its config")
        layer.tracker.cumulative = np.array(tracker["cumulative"], dtype=np.float64)
        layer.tracker.step_count = int(tracker["step_count"])
    return model, meta
