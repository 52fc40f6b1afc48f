"""
P2P graph generation and the random-graph connectivity math.

Graphs are immutable values. Edge probabilities follow the G(n, p) model, and the
key-sharing probability is evaluated as an exact rational product so that large
pools (2000 keys and more) never touch raw factorials.
"""

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from pathlib import Path

import networkx as nx
import numpy as np
from networkx.utils import UnionFind

from pptfl.errors import ParameterError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Graph:
    node_count: int
    edges: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.node_count < 1:
            raise ParameterError(f"node_count must be positive, got {self.node_count}")
        normalized = set()
        for u, v in self.edges:
            if u == v:
                raise ParameterError(f"self-loop on node {u}")
            if not (0 <= u < self.node_count and 0 <= v < self.node_count):
                raise ParameterError(f"edge ({u}, {v}) references a missing node")
            normalized.add((min(u, v), max(u, v)))
        object.__setattr__(self, "edges", frozenset(normalized))

    @cached_property
    def adjacency(self):
        adj = {node: set() for node in range(self.node_count)}
        for u, v in self.edges:
            adj[u].add(v)
            adj[v].add(u)
        return {node: frozenset(nbrs) for node, nbrs in adj.items()}

    def neighbors(self, node):
        return self.adjacency[node]

    def has_edge(self, u, v):
        return (min(u, v), max(u, v)) in self.edges

    def degree(self, node):
        return len(self.adjacency[node])

    def subgraph(self, nodes):
        """Keep node ids, drop every edge with an endpoint outside `nodes`."""
        keep = set(nodes)
        return Graph(self.node_count, frozenset((u, v) for u, v in self.edges if u in keep and v in keep))

    def without_edges(self, removed):
        drop = {(min(u, v), max(u, v)) for u, v in removed}
        return Graph(self.node_count, self.edges - drop)

    def to_networkx(self):
        g = nx.Graph()
        g.add_nodes_from(range(self.node_count))
        g.add_edges_from(self.edges)
        return g

    @classmethod
    def from_networkx(cls, g):
        return cls(g.number_of_nodes(), frozenset((int(u), int(v)) for u, v in g.edges()))

    def to_edge_list(self):
        lines = [f"n={self.node_count}"]
        lines.extend(f"{u} {v}" for u, v in sorted(self.edges))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_edge_list(cls, text):
        lines = [line.strip() for line in text.splitlines() if line.strip()]
        if not lines or not lines[0].startswith("n="):
            raise ParameterError("edge list must start with a 'n=<count>' header")
        try:
            n = int(lines[0][2:])
            edges = frozenset(tuple(int(tok) for tok in line.split()) for line in lines[1:])
        except ValueError as e:
            raise ParameterError(f"malformed edge list: {e}") from e
        if any(len(edge) != 2 for edge in edges):
            raise ParameterError("every edge line needs exactly two node ids")
        return cls(n, edges)


def write_edge_list(graph, path):
    Path(path).write_text(graph.to_edge_list(), encoding="utf-8")


def read_edge_list(path):
    return Graph.from_edge_list(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class ConnectivityParams:
    pool_size: int
    ring_size: int
    desired_connectivity: float
    c: float = 0.0

    def __post_init__(self):
        if self.pool_size < 1 or self.ring_size < 1:
            raise ParameterError("pool and ring sizes must be positive")
        if 2 * self.ring_size > self.pool_size:
            raise ParameterError(f"2l={2 * self.ring_size} exceeds pool size {self.pool_size}")
        if not 0 < self.desired_connectivity < 1:
            raise ParameterError("desired connectivity must lie in (0, 1)")

    @property
    def shared_key_probability(self):
        return shared_key_probability(self.pool_size, self.ring_size)

    def required_edge_probability(self, n):
        return threshold_edge_probability(n, self.desired_connectivity)

    def meets_threshold(self, n):
        """True when the ring overlap probability reaches the edge threshold for n clients."""
        return self.shared_key_probability >= self.required_edge_probability(n)


def generate_random_graph(n, p, seed):
    """Sample G(n, p): every unordered pair is an edge independently with probability p."""
    if not isinstance(n, (int, np.integer)) or n < 2:
        raise ParameterError(f"n must be an integer >= 2, got {n}")
    if not 0.0 <= p <= 1.0:
        raise ParameterError(f"p must lie in [0, 1], got {p}")
    rng = np.random.default_rng(seed)
    rows, cols = np.triu_indices(n, k=1)
    mask = rng.random(rows.shape[0]) < p
    return Graph(int(n), frozenset(zip(rows[mask].tolist(), cols[mask].tolist())))


def connectivity_probability(c):
    if -c > 700:
        return 0.0
    return math.exp(-math.exp(-c))


def threshold_edge_probability(n, target_pc):
    if n < 2:
        raise ParameterError(f"n must be >= 2, got {n}")
    if not 0 < target_pc < 1:
        raise ParameterError(f"target connectivity must lie in (0, 1), got {target_pc}")
    c = -math.log(-math.log(target_pc))
    return max(0.0, min(1.0, (math.log(n) + c) / n))


def shared_key_probability_exact(pool_size, ring_size):
    """1 - prod_{i<l} (eta-l-i)/(eta-i) as a Fraction."""
    if ring_size < 0 or pool_size < 1:
        raise ParameterError("pool size must be positive and ring size non-negative")
    if 2 * ring_size > pool_size:
        raise ParameterError(f"2l={2 * ring_size} exceeds pool size {pool_size}")
    miss = Fraction(1)
    for i in range(ring_size):
        miss *= Fraction(pool_size - ring_size - i, pool_size - i)
    return 1 - miss


def shared_key_probability(pool_size, ring_size):
    return float(shared_key_probability_exact(pool_size, ring_size))


def is_connected(graph):
    uf = UnionFind(range(graph.node_count))
    for u, v in graph.edges:
        uf.union(u, v)
    root = uf[0]
    return all(uf[node] == root for node in range(1, graph.node_count))


def components(graph):
    uf = UnionFind(range(graph.node_count))
    for u, v in graph.edges:
        uf.union(u, v)
    return [frozenset(group) for group in uf.to_sets()]


def component_of(graph, node):
    for group in components(graph):
        if node in group:
            return group
    return frozenset({node})


def trial_seeds(seed, trials):
    """Independent per-trial seeds, so trials may run in any order or in parallel."""
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(seed).spawn(trials)]


def connected_fraction(n, p, trials, seed):
    if trials < 1:
        raise ParameterError("trials must be positive")
    hits = sum(is_connected(generate_random_graph(n, p, s)) for s in trial_seeds(seed, trials))
    fraction = hits / trials
    logger.debug("G(%d, %.5f): %d/%d connected", n, p, hits, trials)
    return fraction


def key_graph(rings, pool_size):
    """Edges join clients whose key-id sets overlap. `rings` is a list of key-id collections."""
    n = len(rings)
    if n < 1:
        raise ParameterError("need at least one ring")
    membership = np.zeros((n, pool_size), dtype=np.int32)
    for owner, ids in enumerate(rings):
        membership[owner, list(ids)] = 1
    overlap = membership @ membership.T
    rows, cols = np.nonzero(np.triu(overlap, k=1))
    return Graph(n, frozenset(zip(rows.tolist(), cols.tolist())))
