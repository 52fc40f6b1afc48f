import numpy as np
import pytest

from pptfl.crypto import AeadSuite, TransparentSuite, generate_noise
from pptfl.keying import establish_network_keys, generate_pool
from pptfl.model import FixedPoint, encode
from pptfl.protocol import AggregationRound, ClientState, Role
from pptfl.topology import Graph

# any two 10-key rings from a 12-key pool overlap, so every edge gets a direct key
TEST_POOL_SIZE = 12
TEST_RING_SIZE = 10


def path_graph(n):
    return Graph(n, frozenset((i, i + 1) for i in range(n - 1)))


def star_graph(leaves):
    return Graph(leaves + 1, frozenset((0, i) for i in range(1, leaves + 1)))


def complete_graph(n):
    return Graph(n, frozenset((i, j) for i in range(n) for j in range(i + 1, n)))


@pytest.fixture
def fmt():
    return FixedPoint()


@pytest.fixture
def transparent():
    return TransparentSuite()


@pytest.fixture
def aead():
    return AeadSuite(nonce_seed=1)


@pytest.fixture
def make_updates(fmt):
    def _make(clients, dim=4, seed=0):
        rng = np.random.default_rng(seed)
        return {c: encode(fmt.vector(rng.uniform(-1.0, 1.0, size=dim)), int(rng.integers(1, 50)))
                for c in clients}
    return _make


@pytest.fixture
def build_round():
    """AggregationRound over `graph` with keys for every edge and the transparent suite by default."""
    def _build(graph, updates, leader, targets=None, suite=None, noise=None, deadline=None, seed=0, **kwargs):
        suite = suite or TransparentSuite()
        directory = establish_network_keys(graph, generate_pool(TEST_POOL_SIZE, seed), TEST_RING_SIZE, suite, seed)
        secure = directory.secure_graph(graph)
        targets = set(updates) if targets is None else set(targets)
        clients = {}
        for node in range(graph.node_count):
            secret, public = suite.generate_keypair(node)
            role = Role.LEADER if node == leader else Role.TARGET if node in targets else Role.POTENTIAL
            clients[node] = ClientState(node, role, secret, public, neighbors=secure.neighbors(node),
                                        update=updates.get(node))
        dim = next(iter(updates.values())).packed.dim
        if noise is None:
            noise = generate_noise(dim, 0, seed).values
        return AggregationRound(secure, directory, suite, clients, targets, leader, noise,
                                deadline or 4 * len(targets), **kwargs)
    return _build
