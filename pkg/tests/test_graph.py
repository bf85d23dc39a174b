import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from graphmoe.errors import ConfigError
from graphmoe.graph import MoEGraph, build_graph, candidate_pairs, density_of, normalize_adjacency

densities = st.sampled_from([0.05, 0.1, 0.2, 0.5, 0.8, 1.0])


def test_default_graph_has_four_sampled_edges():
    g = build_graph(8, 0.1, 0)
    assert g.num_nodes == 9
    assert candidate_pairs(8) == 36
    assert g.n_sampled == 4
    assert g.degrees().min() >= 1


def test_single_expert_full_density():
    g = build_graph(1, 1.0, 123)
    assert g.edges == ((0, 1),)
    assert g.n_repaired == 0


def test_full_density_is_complete():
    g = build_graph(6, 1.0, 5)
    assert len(g.edges) == candidate_pairs(6)
    assert g.n_repaired == 0
    assert density_of(g) == 1.0
    assert g.stats()["complete"]


def test_density_of_counts_edges():
    g = MoEGraph.from_edges(8, 0.1, 0, [(0, 1), (2, 3), (4, 5), (6, 7)], 4)
    assert density_of(g) == pytest.approx(4 / 36)


def test_repairs_are_logged(caplog):
    with caplog.at_level(logging.INFO, logger="graphmoe.graph"):
        for seed in range(50):
            g = build_graph(8, 0.1, seed)
            if g.n_repaired:
                break
    assert g.n_repaired > 0
    assert "repaired" in caplog.text


def test_zero_sampled_edges_repair_everything():
    g = build_graph(3, 0.05, 0)  # round(0.05 * 6) = 0
    assert g.n_sampled == 0
    assert g.degrees().min() >= 1


@pytest.mark.parametrize("beta", [0.0, -0.1, 1.5])
def test_density_out_of_range(beta):
    with pytest.raises(ConfigError):
        build_graph(8, beta, 0)


def test_needs_an_expert():
    with pytest.raises(ConfigError):
        build_graph(0, 0.5, 0)


def test_normalized_adjacency_matches_definition():
    edges = [(0, 1), (1, 2)]
    a = np.array([[1, 1, 0], [1, 1, 1], [0, 1, 1]], dtype=float)
    d = np.diag(1 / np.sqrt(a.sum(1)))
    np.testing.assert_allclose(normalize_adjacency(3, edges), d @ a @ d, atol=1e-15)


@given(st.integers(1, 16), densities, st.integers(0, 2**63 - 1))
def test_graph_invariants(n, beta, seed):
    g = build_graph(n, beta, seed)
    again = build_graph(n, beta, seed)
    assert g.edges == again.edges
    assert np.array_equal(g.normalized_adjacency, again.normalized_adjacency)
    assert g.n_sampled == int(round(beta * candidate_pairs(n)))
    assert g.n_repaired <= n + 1
    assert all(u < v for u, v in g.edges)
    assert len(set(g.edges)) == len(g.edges)
    assert g.degrees().min() >= 1
    a = g.normalized_adjacency
    assert np.isfinite(a).all()
    np.testing.assert_allclose(a, a.T, atol=1e-12)
    eig = np.linalg.eigvalsh(a)
    assert eig.min() >= -1 - 1e-9 and eig.max() <= 1 + 1e-9
    assert density_of(g) >= g.n_sampled / candidate_pairs(n)
