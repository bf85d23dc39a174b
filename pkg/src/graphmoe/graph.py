"""The MoE graph: N expert nodes plus one token node with random edges."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MoEGraph:
    """Undirected simple graph over experts ``0..N-1`` and the token node ``N``.

    ``edges`` holds (u, v) pairs with u < v; the first ``n_sampled`` of them
    came from density sampling and the rest from isolated-node repair.
    """

    num_experts: int
    density: float
    seed: int
    edges: tuple
    n_sampled: int
    normalized_adjacency: np.ndarray = field(repr=False, compare=False)

    @property
    def num_nodes(self):
        return self.num_experts + 1

    @property
    def token_node(self):
        return self.num_experts

    @property
    def n_repaired(self):
        return len(self.edges) - self.n_sampled

    def adjacency(self):
        adj = np.zeros((self.num_nodes, self.num_nodes))
        for u, v in self.edges:
            adj[u, v] = adj[v, u] = 1.0
        return adj

    def degrees(self):
        return self.adjacency().sum(axis=1).astype(np.int64)

    def token_neighbors(self):
        return sorted(u if v == self.token_node else v for u, v in self.edges if self.token_node in (u, v))

    def stats(self):
        return {
            "num_experts": self.num_experts,
            "density_target": self.density,
            "seed": self.seed,
            "edges_sampled": self.n_sampled,
            "edges_repaired": self.n_repaired,
            "density": density_of(self),
            "min_degree": int(self.degrees().min()),
            "token_degree": len(self.token_neighbors()),
            "complete": len(self.edges) == candidate_pairs(self.num_experts),
        }

    def to_dict(self):
        return {
            "num_experts": self.num_experts,
            "density": self.density,
            "seed": self.seed,
            "n_sampled": self.n_sampled,
            "edges": [list(e) for e in self.edges],
        }

    @classmethod
    def from_edges(cls, num_experts, density, seed, edges, n_sampled):
        edges = tuple(tuple(int(x) for x in e) for e in edges)
        return cls(num_experts, float(density), int(seed), edges, int(n_sampled), normalize_adjacency(num_experts + 1, edges))


def candidate_pairs(num_experts):
    n = num_experts + 1
    return n * (n - 1) // 2


def normalize_adjacency(num_nodes, edges):
    """``D^-1/2 (A + I) D^-1/2`` for the undirected edge list."""
    a_hat = np.eye(num_nodes)
    for u, v in edges:
        a_hat[u, v] = a_hat[v, u] = 1.0
    d_inv_sqrt = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return d_inv_sqrt[:, None] * a_hat * d_inv_sqrt[None, :]


def build_graph(num_experts, density, seed):
    """Sample ``round(density * C)`` of the C node pairs, then connect isolated nodes.

    Repair gives every isolated node one edge to a uniformly chosen other node,
    visiting nodes in index order.
    """
    if num_experts < 1:
        raise ConfigError(f"need at least one expert, got {num_experts}")
    if not (0.0 < density <= 1.0):
        raise ConfigError(f"edge density must lie in (0, 1], got {density}")
    n = num_experts + 1
    pairs = list(itertools.combinations(range(n), 2))
    n_sample = int(round(density * len(pairs)))
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(pairs), size=n_sample, replace=False)) if n_sample else []
    edges = [pairs[i] for i in chosen]

    degree = np.zeros(n, dtype=np.int64)
    for u, v in edges:
        degree[u] += 1
        degree[v] += 1
    repairs = []
    for node in range(n):
        if degree[node] > 0:
            continue
        others = [m for m in range(n) if m != node]
        other = others[int(rng.integers(len(others)))]
        edge = (min(node, other), max(node, other))
        repairs.append(edge)
        degree[node] += 1
        degree[other] += 1
    if repairs:
        logger.info("MoE graph (N=%d, density=%s, seed=%d): repaired isolated nodes with edges %s",
                    num_experts, density, seed, repairs)
    return MoEGraph.from_edges(num_experts, density, seed, edges + repairs, len(edges))


def density_of(graph):
    """Fraction of node pairs joined by an edge, repair edges included."""
    return len(graph.edges) / candidate_pairs(graph.num_experts)
