import csv
import json

import numpy as np
import pytest
import yaml

from graphmoe import harness
from graphmoe.autograd import Tensor
from graphmoe.config import resolve
from graphmoe.errors import ConfigError
from tiny import tiny_config


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_train_writes_everything(tmp_path):
    summary = harness.cmd_train(tiny_config(), tmp_path)
    assert summary["seeds"] == [0, 1] and summary["failed_seeds"] == []
    assert 0.0 <= summary["accuracy_mean"] <= 1.0
    echoed = yaml.safe_load((tmp_path / "config.yaml").read_text())
    assert echoed == resolve(tiny_config())
    for s in (0, 1):
        d = tmp_path / f"seed_{s}"
        rows = [json.loads(line) for line in (d / "metrics.jsonl").read_text().splitlines()]
        assert [r["step"] for r in rows] == [0, 2, 4]
        last = rows[-1]
        for key in ("task_loss", "loss_poisson", "loss_normal", "total", "accuracy", "v_a_std"):
            assert key in last
        for layer in last["layers"]:
            assert {"v_a", "v_a_std", "lambda", "sigma"} <= set(layer)
            assert sum(layer["v_a"]) == pytest.approx(1.0, abs=1e-12)
        assert (d / "checkpoint.npz").exists()
        assert yaml.safe_load((d / "config.yaml").read_text())["seeds"] == [s]
    assert json.loads((tmp_path / "summary.json").read_text())["accuracy_mean"] == summary["accuracy_mean"]


def test_zero_steps_records_untrained_evaluation(tmp_path):
    summary = harness.cmd_train(tiny_config("train.steps=0", "seeds=[0]"), tmp_path)
    run = summary["runs"][0]
    assert run["status"] == "ok" and run["final"]["step"] == 0
    rows = (tmp_path / "seed_0" / "metrics.jsonl").read_text().splitlines()
    assert len(rows) == 1
    # untouched adapters: the adapted model is the frozen backbone
    assert run["final"]["accuracy"] == run["frozen_accuracy"]


def test_identical_runs_write_identical_metrics(tmp_path):
    cfg = tiny_config("seeds=[3]")
    harness.cmd_train(cfg, tmp_path / "a")
    harness.cmd_train(cfg, tmp_path / "b")
    a = (tmp_path / "a" / "seed_3" / "metrics.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "seed_3" / "metrics.jsonl").read_bytes()


def test_non_finite_loss_fails_the_seed(tmp_path, monkeypatch):
    monkeypatch.setattr(harness, "task_loss", lambda logits, targets: Tensor(np.nan))
    summary = harness.cmd_train(tiny_config("seeds=[0]"), tmp_path)
    assert summary["failed_seeds"] == [0]
    assert "non-finite task_loss" in summary["runs"][0]["error"]
    assert summary["accuracy_mean"] is None
    assert not (tmp_path / "seed_0" / "checkpoint.npz").exists()


def test_ablation_arms_are_single_factor():
    arms = harness.ablation_configs(tiny_config())
    assert list(arms) == ["full", "no_graph", "no_poisson", "no_normal"]
    full = arms["full"]

    def diff(a, b, prefix=""):
        keys = set(a) | set(b)
        out = []
        for k in keys:
            if isinstance(a.get(k), dict) and isinstance(b.get(k), dict):
                out += diff(a[k], b[k], f"{prefix}{k}.")
            elif a.get(k) != b.get(k):
                out.append(prefix + k)
        return sorted(out)

    assert diff(full, arms["no_poisson"]) == ["losses.c_p"]
    assert diff(full, arms["no_normal"]) == ["losses.c_n"]
    assert arms["no_graph"]["graph"] is None
    assert arms["no_graph"]["moe"]["router_kind"] == "softmax"
    with pytest.raises(ConfigError):
        harness.ablation_configs(tiny_config("moe.router_kind=softmax"))


def test_ablation_table_format(tmp_path):
    table = harness.cmd_ablate(tiny_config("train.steps=2"), tmp_path)
    rows = read_csv(tmp_path / "ablation.csv")
    assert [r["arm"] for r in rows] == ["full", "no_graph", "no_poisson", "no_normal"] == [r["arm"] for r in table]
    per_seed = [c for c in rows[0] if c.endswith(("seed0", "seed1"))]
    assert len(per_seed) == 4
    assert {"accuracy_mean", "accuracy_std", "v_a_std_mean"} <= set(rows[0])
    stored = json.loads((tmp_path / "ablation.json").read_text())
    assert stored["arms"]["no_graph"]["graph"] is None


def test_rank_sweep_counts_are_linear_and_closed_form(tmp_path):
    cfg = tiny_config("seeds=[0]", "train.steps=1")
    table = harness.cmd_sweep(cfg, "rank", [2, 1], tmp_path)
    assert [r["value"] for r in table] == [1, 2]
    for row in table:
        assert row["trainable_parameters"] == row["adapter_parameters"] + row["router_parameters"] + row["target_parameters"]
    assert table[1]["adapter_parameters"] == 2 * table[0]["adapter_parameters"]
    assert table[0]["router_parameters"] == table[1]["router_parameters"]
    assert (tmp_path / "sweep.csv").exists()


def test_full_density_graphs_are_complete(tmp_path):
    table = harness.cmd_sweep(tiny_config("seeds=[0]", "train.steps=1"), "density", [1.0, 0.1], tmp_path)
    by_value = {r["value"]: r for r in table}
    assert by_value[1.0]["graphs_complete"] is True
    assert by_value[0.1]["graphs_complete"] is False


def test_topk_equal_to_experts_checks_dense_equivalence(tmp_path, monkeypatch):
    calls = []
    real = harness.check_dense_equivalence

    def spy(model, rng, **kw):
        calls.append([layer.k == layer.num_experts for layer in model.layers])
        return real(model, rng, **kw)

    monkeypatch.setattr(harness, "check_dense_equivalence", spy)
    harness.cmd_sweep(tiny_config("seeds=[0]", "train.steps=1", "moe.num_experts=4"), "topk", [4], tmp_path)
    assert calls and all(all(c) for c in calls)


def test_dense_equivalence_check_catches_a_broken_path(monkeypatch):
    from graphmoe.config import build_model

    model = build_model(resolve(tiny_config("moe.num_experts=3", "moe.top_k=3")), 0)
    for layer in model.layers:
        for a in layer.experts:
            a.B.data[...] = 0.1
    harness.check_dense_equivalence(model, np.random.default_rng(0))
    monkeypatch.setattr(harness, "dense_mixture", lambda layer, x: Tensor(np.zeros((x.shape[0], layer.out_features))))
    with pytest.raises(AssertionError, match="dense"):
        harness.check_dense_equivalence(model, np.random.default_rng(0))


def test_sweep_rejects_off_grid_values(tmp_path):
    with pytest.raises(ConfigError):
        harness.cmd_sweep(tiny_config(), "rank", [3], tmp_path)


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    out = tmp_path_factory.mktemp("route")
    harness.cmd_train(tiny_config("seeds=[0]"), out)
    return out / "seed_0" / "checkpoint.npz"


def test_route_inspect_rows_are_distributions(checkpoint, tmp_path):
    path = tmp_path / "routes.jsonl"
    info = harness.cmd_route_inspect(checkpoint, path, limit=6)
    records = [json.loads(line) for line in path.read_text().splitlines()]
    tokens = [r for r in records if r["kind"] == "token"]
    freq = [r for r in records if r["kind"] == "task_frequency"]
    assert info["tokens"] == 6 * 4 and len(freq) == info["layers"] == 4
    for r in tokens:
        assert sum(r["o_r"]) == pytest.approx(1.0, abs=1e-9)
        assert sum(r["topk_gates"]) == pytest.approx(1.0, abs=1e-9)
        assert len(r["topk_indices"]) == 2
    present = {r["task_id"] for r in tokens}
    assert present == {0, 1, 2}  # the first six validation rows miss the last task
    for r in freq:
        sums = [sum(row) for row in r["matrix"]]
        assert sums[:3] == pytest.approx([1.0] * 3, abs=1e-12) and sums[3] == 0.0


def test_route_inspect_single_expert_gates_are_one(tmp_path):
    harness.cmd_train(tiny_config("seeds=[0]", "moe.num_experts=1", "moe.top_k=1"), tmp_path)
    path = tmp_path / "r.jsonl"
    harness.cmd_route_inspect(tmp_path / "seed_0" / "checkpoint.npz", path, limit=3)
    for line in path.read_text().splitlines():
        r = json.loads(line)
        if r["kind"] == "token":
            assert r["topk_gates"] == [1.0] and r["o_r"] == [1.0]


def test_plot_data_bundles(tmp_path):
    abl = tmp_path / "abl"
    harness.cmd_ablate(tiny_config("train.steps=1"), abl)
    sw = tmp_path / "sw"
    harness.cmd_sweep(tiny_config("train.steps=1"), "rank", [4, 1, 2], sw)
    paths = harness.cmd_plot_data([abl, sw], tmp_path / "plots")
    scatter = read_csv(paths["scatter"])
    assert list(scatter[0]) == ["method", "mean_accuracy", "trainable_parameters"]
    ablation = read_csv(paths["ablation"])
    assert sorted({r["arm"] for r in ablation}) == sorted(harness.ABLATION_ARMS)
    sweep = read_csv(paths["sweep"])
    values = [float(r["value"]) for r in sweep]
    assert values == sorted(values) and set(values) == {1.0, 2.0, 4.0}


def test_plot_data_lists_missing_runs(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(FileNotFoundError, match="empty.*nowhere|nowhere.*empty"):
        harness.cmd_plot_data([tmp_path / "empty", tmp_path / "nowhere"], tmp_path / "out")


def test_thread_cap_is_validated(monkeypatch):
    monkeypatch.setenv("GRAPHMOE_THREADS", "0")
    with pytest.raises(ConfigError):
        harness.max_workers()
    monkeypatch.setenv("GRAPHMOE_THREADS", "3")
    assert harness.max_workers() == 3


def test_parallel_seeds_match_serial(tmp_path, monkeypatch):
    cfg = tiny_config()
    harness.cmd_train(cfg, tmp_path / "serial")
    monkeypatch.setenv("GRAPHMOE_THREADS", "2")
    harness.cmd_train(cfg, tmp_path / "parallel")
    for s in (0, 1):
        a = (tmp_path / "serial" / f"seed_{s}" / "metrics.jsonl").read_bytes()
        assert a == (tmp_path / "parallel" / f"seed_{s}" / "metrics.jsonl").read_bytes()
