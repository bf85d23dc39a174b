import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from graphmoe import autograd as ag
from graphmoe.autograd import Tensor
from graphmoe.errors import ConfigError, NumericError
from graphmoe.graph import MoEGraph, build_graph
from graphmoe.router import GraphRouterParams, graph_scores, route, route_softmax_baseline
from helpers import check_gradients


def naive_scores(params, graph, x):
    """Per-token GCN with explicit node features; no reassociation."""
    a = graph.normalized_adjacency
    w0, w1 = (w.data for w in params.gcn_weights)
    n = params.num_experts
    out = np.empty((x.shape[0], n))
    for t in range(x.shape[0]):
        h0 = np.vstack([params.expert_embeddings.data, params.token_in_proj.data @ x[t]])
        h1 = np.maximum(a @ h0 @ w0, 0.0)
        h2 = a @ h1 @ w1
        out[t] = h2[:n] @ params.proj_vector.data
    return out


def setup(n=8, density=0.1, seed=0, in_features=6, hidden=16):
    rng = np.random.default_rng(seed)
    params = GraphRouterParams(n, in_features, hidden, rng=rng)
    return params, build_graph(n, density, seed), rng


@given(st.integers(1, 10), st.sampled_from([0.05, 0.1, 0.3, 1.0]), st.integers(0, 10_000))
def test_scores_match_per_token_gcn(n, density, seed):
    params, graph, rng = setup(n, density, seed)
    x = rng.normal(size=(5, 6))
    np.testing.assert_allclose(graph_scores(params, graph, Tensor(x)).data, naive_scores(params, graph, x), rtol=0, atol=1e-10)


def test_zero_parameters_route_uniformly():
    params, graph, _ = setup()
    for p in params.parameters():
        p.data[...] = 0.0
    out = route(params, graph, Tensor(np.ones((3, 6))), 2)
    np.testing.assert_allclose(out.weights.data, 1 / 8)


def test_topk_renormalization_example():
    # a softmax router whose weights are exactly [0.4, 0.3, 0.2, 0.1]
    lin = Tensor(np.log(np.array([[0.4], [0.3], [0.2], [0.1]])))
    out = route_softmax_baseline(lin, Tensor(np.ones((1, 1))), 2)
    np.testing.assert_allclose(out.weights.data, [[0.4, 0.3, 0.2, 0.1]], atol=1e-15)
    assert out.topk_indices.tolist() == [[0, 1]]
    np.testing.assert_allclose(out.topk_gates.data, [[4 / 7, 3 / 7]], atol=1e-15)


def test_full_k_gates_are_sorted_weights():
    params, graph, rng = setup()
    out = route(params, graph, Tensor(rng.normal(size=(4, 6))), 8)
    np.testing.assert_allclose(out.topk_gates.data, -np.sort(-out.weights.data, axis=1), atol=1e-12)


def test_linear_zero_is_uniform_and_single_pick_is_one_hot():
    out = route_softmax_baseline(Tensor(np.zeros((2, 3))), Tensor(np.ones((4, 3))), 1)
    np.testing.assert_allclose(out.weights.data, 0.5)
    np.testing.assert_allclose(out.topk_gates.data, 1.0)
    np.testing.assert_allclose(out.dense_gates().data.sum(axis=1), 1.0)


@pytest.mark.parametrize("k", [0, 9])
def test_k_out_of_range(k):
    params, graph, _ = setup()
    with pytest.raises(ConfigError):
        route(params, graph, Tensor(np.ones((1, 6))), k)
    with pytest.raises(ConfigError):
        route_softmax_baseline(Tensor(np.ones((8, 6))), Tensor(np.ones((1, 6))), k)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_scores_name_the_router():
    params, graph, _ = setup()
    params.proj_vector.data[0] = np.inf
    with pytest.raises(NumericError, match="block3"):
        route(params, graph, Tensor(np.ones((1, 6))), 2, name="block3 graph router")


def test_gradients_match_finite_differences():
    params, graph, rng = setup(n=6, density=0.4, hidden=12)
    x = Tensor(rng.normal(size=(5, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(5, 6)))
    g = Tensor(rng.normal(size=(5, 2)))

    def loss():
        out = route(params, graph, x, 2)
        return ag.add(ag.sum_(ag.mul(out.weights, w)), ag.sum_(ag.mul(out.topk_gates, g)))

    check_gradients(loss, params.parameters() + [x], n=30, rng=rng)


def test_permuting_experts_permutes_weights():
    params, graph, rng = setup(n=7, density=0.3)
    x = Tensor(rng.normal(size=(4, 6)))
    perm = rng.permutation(7)
    node_perm = np.append(perm, 7)  # token node keeps its index
    inverse = np.argsort(node_perm)
    edges = [tuple(sorted((int(inverse[u]), int(inverse[v])))) for u, v in graph.edges]
    g2 = MoEGraph.from_edges(7, graph.density, graph.seed, edges, graph.n_sampled)
    p2 = GraphRouterParams(7, 6, params.hidden, rng=rng)
    p2.expert_embeddings.data = params.expert_embeddings.data[perm]
    p2.token_in_proj.data = params.token_in_proj.data
    p2.gcn_weights[0].data = params.gcn_weights[0].data
    p2.gcn_weights[1].data = params.gcn_weights[1].data
    p2.proj_vector.data = params.proj_vector.data
    w1 = route(params, graph, x, 3).weights.data
    w2 = route(p2, g2, x, 3).weights.data
    assert np.array_equal(w2, w1[:, perm])


@given(st.floats(0.1, 10.0))
def test_positive_score_scaling_keeps_selection(c):
    lin = Tensor(np.random.default_rng(0).normal(size=(8, 5)))
    x = Tensor(np.random.default_rng(1).normal(size=(6, 5)))
    a = route_softmax_baseline(lin, x, 3).topk_indices
    b = route_softmax_baseline(Tensor(lin.data * c), x, 3).topk_indices
    assert np.array_equal(a, b)


@given(st.integers(1, 8), st.integers(0, 1000))
def test_router_output_contract(n, seed):
    params, graph, rng = setup(n=n, seed=seed)
    k = int(rng.integers(1, n + 1))
    out = route(params, graph, Tensor(rng.normal(size=(5, 6)) * 3), k)
    w = out.weights.data
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(out.topk_gates.data.sum(axis=1), 1.0, atol=1e-9)
    for row, idx in zip(w, out.topk_indices):
        assert len(set(idx)) == k
        assert np.min(row[idx]) >= np.max(np.delete(row, idx), initial=-np.inf)


def test_deterministic():
    params, graph, rng = setup()
    x = Tensor(rng.normal(size=(4, 6)))
    a, b = route(params, graph, x, 2), route(params, graph, x, 2)
    assert np.array_equal(a.weights.data, b.weights.data)
    assert np.array_equal(a.topk_indices, b.topk_indices)


def test_distinction_gradient_reaches_every_router_parameter():
    from graphmoe.losses import PoissonTarget, loss_poisson

    params, graph, rng = setup(density=0.5)
    out = route(params, graph, Tensor(rng.normal(size=(4, 6))), 2)
    ag.backward(loss_poisson(PoissonTarget(8), out.weights))
    for p in params.parameters():
        assert p.grad is not None and np.abs(p.grad).max() > 0
