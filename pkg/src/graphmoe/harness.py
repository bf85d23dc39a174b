"""Training runs, ablations, sweeps, routing dumps and plot-ready exports.

Every run owns one output directory. Metrics rows carry no wall-clock so
that identical (config, seed) pairs write identical bytes; timings live in
the summary only.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import autograd as ag
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    SWEEP_KEYS,
    build_dataset,
    build_model,
    check_sweep_values,
    config_hash,
    dump_yaml,
    resolve,
    run_config,
    set_key,
)
from .errors import ConfigError, NumericError
from .layer import dense_mixture, layer_forward
from .losses import total_loss
from .model import evaluate, model_forward, task_loss
from .optim import Adam

logger = logging.getLogger(__name__)

ABLATION_ARMS = ("full", "no_graph", "no_poisson", "no_normal")
_BATCH_STREAM = 0xB47C  # keeps batch order independent of parameter init


class RunFailed(RuntimeError):
    """A seed stopped on a non-finite value."""


def max_workers():
    raw = os.environ.get("GRAPHMOE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"GRAPHMOE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"GRAPHMOE_THREADS must be a positive integer, got {raw!r}")
    return n


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def layer_rows(model):
    rows = []
    for layer in model.layers:
        s = layer.stats()
        rows.append(
            {
                "name": layer.name,
                "v_a": s["v_a"],
                "v_a_std": s["v_a_std"],
                "lambda": s["lambda"],
                "sigma": s["sigma"],
                "tracker_steps": layer.tracker.step_count,
            }
        )
    return rows


def tracker_v_a_std(model):
    """Standard deviation of each layer's cumulative activation frequency, averaged over layers."""
    stds = [layer.stats()["v_a_std"] for layer in model.layers]
    if any(s is None for s in stds):
        return None
    return float(np.mean(stds))


def check_dense_equivalence(model, rng, n_tokens=16, tol=1e-10):
    """With K = N the sparse path must reproduce the all-expert mixture."""
    for layer in model.layers:
        if layer.k != layer.num_experts:
            continue
        x = ag.Tensor(rng.normal(size=(n_tokens, layer.in_features)))
        with ag.no_grad():
            sparse, _ = layer_forward(layer, x, train=False)
            dense = dense_mixture(layer, x)
        err = float(np.max(np.abs(sparse.data - dense.data)))
        if not err <= tol:
            raise AssertionError(f"{layer.name}: Top-K path with K=N differs from the dense mixture by {err:.3e}")


def _metrics_row(step, model, ev, losses):
    row = {
        "step": step,
        "accuracy": ev["accuracy"],
        "sequence_accuracy": ev["sequence_accuracy"],
        "per_task": {k: v["accuracy"] for k, v in ev["per_task"].items()},
        "v_a_std": tracker_v_a_std(model),
        "eval_v_a_std": ev.get("v_a_std"),
        "layers": layer_rows(model),
    }
    row.update(losses)
    return row


def train_run(cfg, seed, out_dir=None, dataset=None):
    """Train one seed and return its record.

    Writes ``metrics.jsonl`` (and ``checkpoint.npz`` if enabled) under
    ``out_dir``. A non-finite loss or router score stops this seed only;
    the record then has ``status == "failed"``.
    """
    t0 = time.perf_counter()
    rcfg = run_config(cfg, seed)
    ds = dataset if dataset is not None else build_dataset(cfg)
    model = build_model(cfg, seed)
    tcfg = cfg["train"]
    c_p, c_n = cfg["losses"]["c_p"], cfg["losses"]["c_n"]
    record = {
        "seed": int(seed),
        "config_hash": config_hash(rcfg),
        "trainable_parameters": model.trainable_parameter_count(),
        "status": "ok",
    }
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        dump_yaml(rcfg, out / "config.yaml")
    metrics_path = None if out is None else out / "metrics.jsonl"
    sink = open(metrics_path, "w") if metrics_path is not None else None
    rows = []

    def emit(row):
        rows.append(row)
        if sink is not None:
            sink.write(json.dumps(row, sort_keys=True) + "\n")
            sink.flush()

    try:
        frozen = evaluate(model, ds.val, ds.tasks, adapters=False)
        record["frozen_accuracy"] = frozen["accuracy"]
        check_dense_equivalence(model, np.random.default_rng([seed, 7]))
        emit(_metrics_row(0, model, evaluate(model, ds.val, ds.tasks), {}))

        opt = Adam(model.parameters(), lr=tcfg["lr"])
        rng = np.random.default_rng([seed, _BATCH_STREAM])
        n_train = len(ds.train)
        step = 0
        for step in range(1, tcfg["steps"] + 1):
            idx = rng.integers(0, n_train, tcfg["batch_size"])
            logits, (lp, ln_), _ = model_forward(model, ds.train.inputs[idx], train=True)
            tl = task_loss(logits, ds.train.targets[idx])
            loss = total_loss(tl, lp, ln_, c_p, c_n)
            values = {
                "task_loss": tl.item(),
                "loss_poisson": lp.item(),
                "loss_normal": ln_.item(),
                "total": loss.item(),
            }
            bad = [k for k, v in values.items() if not np.isfinite(v)]
            if bad:
                raise RunFailed(f"non-finite {', '.join(bad)} at step {step}")
            opt.zero_grad()
            ag.backward(loss)
            opt.step()
            if step % tcfg["eval_every"] == 0 or step == tcfg["steps"]:
                emit(_metrics_row(step, model, evaluate(model, ds.val, ds.tasks), values))
    except (RunFailed, NumericError, FloatingPointError) as exc:
        record["status"] = "failed"
        record["error"] = str(exc)
        logger.error("seed %d failed: %s", seed, exc)
    finally:
        if sink is not None:
            sink.close()

    if record["status"] == "ok":
        final = evaluate(model, ds.val, ds.tasks)
        record["final"] = {
            "step": tcfg["steps"],
            "accuracy": final["accuracy"],
            "sequence_accuracy": final["sequence_accuracy"],
            "per_task": final["per_task"],
            "v_a_std": tracker_v_a_std(model),
            "eval_v_a_std": final.get("v_a_std"),
            "routing": final.get("routing"),
            "layers": layer_rows(model),
        }
        if out is not None and tcfg["checkpoint"]:
            save_checkpoint(out / "checkpoint.npz", model, rcfg, seed, tcfg["steps"])
            record["checkpoint"] = str(out / "checkpoint.npz")
    record["graphs"] = [None if layer.graph is None else layer.graph.stats() for layer in model.layers]
    record["metrics"] = None if metrics_path is None else str(metrics_path)
    record["wall_clock_s"] = time.perf_counter() - t0
    return record


def _run_one(args):
    cfg, seed, out_dir = args
    return train_run(cfg, seed, out_dir)


def _mean_std(values):
    values = [v for v in values if v is not None]
    if not values:
        return None, None
    return float(np.mean(values)), float(np.std(values))


def cmd_train(cfg, out_dir=None):
    """Train every seed in the config and write ``summary.json``.

    Seeds run in up to ``GRAPHMOE_THREADS`` worker processes; each seed has
    its own ``seed_<n>`` directory.
    """
    cfg = resolve(cfg)
    out = Path(out_dir if out_dir is not None else cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    dump_yaml(cfg, out / "config.yaml")
    t0 = time.perf_counter()
    jobs = [(cfg, s, out / f"seed_{s}") for s in cfg["seeds"]]
    workers = min(max_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_one, jobs))
    else:
        records = [_run_one(job) for job in jobs]

    ok = [r for r in records if r["status"] == "ok"]
    acc_mean, acc_std = _mean_std([r["final"]["accuracy"] for r in ok])
    va_mean, va_std = _mean_std([r["final"]["v_a_std"] for r in ok])
    summary = {
        "config_hash": config_hash(cfg),
        "seeds": [r["seed"] for r in records],
        "runs": [{k: v for k, v in r.items() if k != "final"} | {"final": _brief(r.get("final"))} for r in records],
        "failed_seeds": [r["seed"] for r in records if r["status"] != "ok"],
        "accuracy_mean": acc_mean,
        "accuracy_std": acc_std,
        "frozen_accuracy_mean": _mean_std([r.get("frozen_accuracy") for r in records])[0],
        "v_a_std_mean": va_mean,
        "v_a_std_std": va_std,
        "trainable_parameters": records[0]["trainable_parameters"],
        "wall_clock_s": time.perf_counter() - t0,
    }
    _write_json(out / "summary.json", summary)
    return summary


def _brief(final):
    if final is None:
        return None
    return {k: final[k] for k in ("step", "accuracy", "sequence_accuracy", "per_task", "v_a_std", "eval_v_a_std", "layers")}


def ablation_configs(cfg):
    """The four single-factor arms derived from one base config."""
    cfg = resolve(cfg)
    if cfg["moe"]["router_kind"] != "graph":
        raise ConfigError("ablation needs moe.router_kind = graph in the base config")
    arms = {"full": copy.deepcopy(cfg)}
    no_graph = copy.deepcopy(cfg)
    set_key(no_graph, "moe.router_kind", "softmax")
    arms["no_graph"] = no_graph
    no_poisson = copy.deepcopy(cfg)
    set_key(no_poisson, "losses.c_p", 0.0)
    arms["no_poisson"] = no_poisson
    no_normal = copy.deepcopy(cfg)
    set_key(no_normal, "losses.c_n", 0.0)
    arms["no_normal"] = no_normal
    return {name: resolve(arm) for name, arm in arms.items()}


def cmd_ablate(cfg, out_dir=None):
    """Run full, -Graph, -Poisson and -Normal over all seeds; write ``ablation.csv``."""
    arms = ablation_configs(cfg)
    out = Path(out_dir if out_dir is not None else arms["full"]["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    seeds = arms["full"]["seeds"]
    table = []
    for name, arm in arms.items():
        summary = cmd_train(arm, out / name)
        by_seed = {r["seed"]: r for r in summary["runs"]}
        row = {"arm": name}
        for s in seeds:
            final = by_seed[s]["final"]
            row[f"accuracy_seed{s}"] = None if final is None else final["accuracy"]
        for s in seeds:
            final = by_seed[s]["final"]
            row[f"v_a_std_seed{s}"] = None if final is None else final["v_a_std"]
        row.update(
            accuracy_mean=summary["accuracy_mean"],
            accuracy_std=summary["accuracy_std"],
            v_a_std_mean=summary["v_a_std_mean"],
            v_a_std_std=summary["v_a_std_std"],
            trainable_parameters=summary["trainable_parameters"],
            failed_seeds=len(summary["failed_seeds"]),
        )
        table.append(row)
    _write_csv(out / "ablation.csv", table)
    _write_json(out / "ablation.json", {"arms": {k: v for k, v in arms.items()}, "table": table})
    return table


def sweep_point_config(cfg, axis, value):
    point = copy.deepcopy(cfg)
    if axis == "density" and point["moe"]["router_kind"] != "graph":
        raise ConfigError("a density sweep needs moe.router_kind = graph")
    set_key(point, SWEEP_KEYS[axis], value)
    return resolve(point)


def parameter_breakdown(cfg):
    """Closed-form trainable counts: adapters, router and the two target scalars per map."""
    m = cfg["model"]
    n, r = cfg["moe"]["num_experts"], cfg["moe"]["rank"]
    maps = [(m["d_model"], m["ffn_hidden"]), (m["ffn_hidden"], m["d_model"])] * m["num_blocks"]
    adapters = sum(n * r * (i + o) for i, o in maps)
    if cfg["moe"]["router_kind"] == "graph":
        d = cfg["graph"]["gnn_hidden"]
        router = sum(n * d + d * i + 2 * d * d + d for i, _ in maps)
    else:
        router = sum(n * i for i, _ in maps)
    targets = 2 * len(maps)
    return {"adapter_parameters": adapters, "router_parameters": router, "target_parameters": targets}


def cmd_sweep(cfg, axis, values, out_dir=None):
    """One ``cmd_train`` per grid value along ``axis``; write ``sweep.csv``."""
    cfg = resolve(cfg)
    values = check_sweep_values(axis, values)
    points = [(v, sweep_point_config(cfg, axis, v)) for v in values]
    out = Path(out_dir if out_dir is not None else cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    table = []
    graphs = {}
    for value, point in sorted(points, key=lambda p: p[0]):
        summary = cmd_train(point, out / f"{axis}={value}")
        graph_stats = [g for r in summary["runs"] for g in r["graphs"] if g is not None]
        graphs[str(value)] = graph_stats
        for g in graph_stats:
            logger.info("sweep %s=%s graph: %s", axis, value, g)
        row = {"axis": axis, "value": value}
        row.update(
            accuracy_mean=summary["accuracy_mean"],
            accuracy_std=summary["accuracy_std"],
            v_a_std_mean=summary["v_a_std_mean"],
            v_a_std_std=summary["v_a_std_std"],
            trainable_parameters=summary["trainable_parameters"],
        )
        row.update(parameter_breakdown(point))
        row["graphs_complete"] = bool(graph_stats) and all(g["complete"] for g in graph_stats)
        row["failed_seeds"] = len(summary["failed_seeds"])
        table.append(row)
    _write_csv(out / "sweep.csv", table)
    _write_json(out / "sweep.json", {"axis": axis, "table": table, "graphs": graphs})
    return table


def cmd_route_inspect(checkpoint, out_path, split="val", limit=None, expected_config=None):
    """Dump per-token routing from a checkpoint as JSONL, then the per-task frequency matrix.

    Each layer's token rows come first, followed by one ``{"kind": "task_frequency"}``
    record per layer whose rows (tasks) sum to 1.
    """
    model, meta = load_checkpoint(checkpoint, expected_config)
    ds = build_dataset(meta["config"])
    part = getattr(ds, split, None)
    if part is None or split not in ("train", "val"):
        raise ConfigError(f"split must be train or val, got {split!r}")
    if limit is not None:
        part = part.subset(slice(0, int(limit)))
    with ag.no_grad():
        _, _, routings = model_forward(model, part.inputs, train=False)
    seq = part.inputs.shape[1]
    token_task = np.repeat(part.task_ids, seq)
    n_tasks = len(ds.tasks)
    records = 0
    with open(out_path, "w") as fh:
        for layer, routing in zip(model.layers, routings):
            weights = routing.weights.data
            idx = routing.topk_indices
            gates = routing.topk_gates.data
            for t in range(weights.shape[0]):
                fh.write(
                    json.dumps(
                        {
                            "kind": "token",
                            "layer": layer.name,
                            "sequence": int(t // seq),
                            "position": int(t % seq),
                            "task_id": int(token_task[t]),
                            "o_r": weights[t].tolist(),
                            "topk_indices": idx[t].tolist(),
                            "topk_gates": gates[t].tolist(),
                        }
                    )
                    + "\n"
                )
                records += 1
            mass = np.zeros((n_tasks, layer.num_experts))
            np.add.at(mass, token_task, routing.dense_gates().data)
            totals = mass.sum(axis=1, keepdims=True)
            freq = np.divide(mass, totals, out=np.zeros_like(mass), where=totals > 0)
            fh.write(
                json.dumps(
                    {
                        "kind": "task_frequency",
                        "layer": layer.name,
                        "tasks": [t.name for t in ds.tasks],
                        "matrix": freq.tolist(),
                    }
                )
                + "\n"
            )
    return {"tokens": records // max(len(model.layers), 1), "layers": len(model.layers), "path": str(out_path)}


def cmd_plot_data(run_dirs, out_dir):
    """Tidy CSVs from finished runs: ``scatter.csv``, ``ablation.csv`` and ``sweep.csv``.

    A run directory is recognised by its ``summary.json``, ``ablation.json``
    or ``sweep.json``. Directories holding none of these are reported.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    missing = [str(d) for d in run_dirs if not any((Path(d) / f).exists() for f in ("summary.json", "ablation.json", "sweep.json"))]
    if missing:
        raise FileNotFoundError("no finished run found in: " + ", ".join(missing))

    scatter, ablation, sweep = [], [], []
    for d in map(Path, run_dirs):
        if (d / "ablation.json").exists():
            info = json.loads((d / "ablation.json").read_text())
            for row in info["table"]:
                summary = json.loads((d / row["arm"] / "summary.json").read_text())
                for run in summary["runs"]:
                    if run["final"] is None:
                        continue
                    ablation.append(
                        {"arm": row["arm"], "seed": run["seed"], "accuracy": run["final"]["accuracy"], "v_a_std": run["final"]["v_a_std"]}
                    )
                scatter.append(
                    {"method": row["arm"], "mean_accuracy": row["accuracy_mean"], "trainable_parameters": row["trainable_parameters"]}
                )
        if (d / "sweep.json").exists():
            info = json.loads((d / "sweep.json").read_text())
            for row in info["table"]:
                summary = json.loads((d / f"{info['axis']}={row['value']}" / "summary.json").read_text())
                for run in summary["runs"]:
                    if run["final"] is None:
                        continue
                    sweep.append(
                        {
                            "axis": info["axis"],
                            "value": row["value"],
                            "seed": run["seed"],
                            "accuracy": run["final"]["accuracy"],
                            "v_a_std": run["final"]["v_a_std"],
                            "trainable_parameters": row["trainable_parameters"],
                        }
                    )
        if (d / "summary.json").exists():
            summary = json.loads((d / "summary.json").read_text())
            cfg = json.loads(json.dumps(_read_config(d)))
            kind = cfg["moe"]["router_kind"] if cfg else "unknown"
            scatter.append({"method": f"{d.name}:{kind}", "mean_accuracy": summary["accuracy_mean"], "trainable_parameters": summary["trainable_parameters"]})

    sweep.sort(key=lambda r: (r["axis"], r["value"], r["seed"]))
    ablation.sort(key=lambda r: (ABLATION_ARMS.index(r["arm"]), r["seed"]))
    paths = {}
    for name, rows, cols in (
        ("scatter", scatter, ["method", "mean_accuracy", "trainable_parameters"]),
        ("ablation", ablation, ["arm", "seed", "accuracy", "v_a_std"]),
        ("sweep", sweep, ["axis", "value", "seed", "accuracy", "v_a_std", "trainable_parameters"]),
    ):
        _write_csv(out / f"{name}.csv", rows, cols)
        paths[name] = str(out / f"{name}.csv")
    return paths


def _read_config(run_dir):
    import yaml

    path = Path(run_dir) / "config.yaml"
    return yaml.safe_load(path.read_text()) if path.exists() else None


def _write_csv(path, rows, columns=None):
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in columns})
