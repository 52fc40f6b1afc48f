"""
Modified Eschenauer-Gligor key establishment.

Clients draw rings from a shared pool, learn common keys by trial-decrypting each
other's challenges (no key-id is ever sent in clear), XOR the common keys into a
pairwise communication key, and fall back to a broker-distributed path-key when a
pair shares too few keys. Poisoned keys can be revoked and affected pairs rebuilt.
"""

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from functools import reduce
from pathlib import Path

import numpy as np

from pptfl.errors import (AuthenticationError, InsufficientSharedKeysError, KeyEstablishmentRequiredError, ParameterError,
                          PathKeyFailureError)

logger = logging.getLogger(__name__)

KEY_SIZE = 16
CHALLENGE_MAGIC = b"PPTKEYCH"
_CHALLENGE_BODY = struct.Struct("<IH")
_RECORD_LEN = struct.Struct("<I")

DEFAULT_THRESHOLD = 0
PATH_KEY_CANDIDATES = 4
PATH_KEY_SELECTION = 3


def seed_int(*parts):
    """Fold a tuple seed into a 64-bit integer."""
    digest = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def pair_of(a, b):
    return (a, b) if a < b else (b, a)


@dataclass(frozen=True)
class KeyPool:
    keys: tuple

    @property
    def size(self):
        return len(self.keys)

    def key(self, key_id):
        return self.keys[key_id]


@dataclass(frozen=True)
class KeyRing:
    owner: int
    entries: tuple  # (key_id, key bytes) in draw order

    @property
    def ids(self):
        return frozenset(kid for kid, _ in self.entries)

    @property
    def size(self):
        return len(self.entries)

    def key(self, key_id):
        for kid, value in self.entries:
            if kid == key_id:
                return value
        raise KeyError(key_id)

    def without(self, key_ids):
        drop = set(key_ids)
        return KeyRing(self.owner, tuple(entry for entry in self.entries if entry[0] not in drop))


@dataclass(frozen=True)
class CommunicationKey:
    pair: tuple
    key: bytes
    derivation: tuple  # ascending key ids XOR-ed into `key`
    broker: int = None

    @property
    def via_path_key(self):
        return self.broker is not None


@dataclass(frozen=True)
class Challenge:
    issuer: int
    index: int
    ciphertext: bytes


def generate_pool(size, seed):
    """Hash-derived pool: key i is BLAKE2b(seed, i) truncated to KEY_SIZE bytes."""
    if size < 1:
        raise ParameterError(f"pool size must be >= 1, got {size}")
    base = hashlib.blake2b(f"pool:{seed}".encode(), digest_size=32).digest()
    keys = tuple(hashlib.blake2b(i.to_bytes(4, "little"), key=base, digest_size=KEY_SIZE).digest()
                 for i in range(size))
    return KeyPool(keys)


def draw_ring(pool, ring_size, seed, owner=0):
    """Sample `ring_size` distinct keys uniformly (without replacement)."""
    if ring_size < 1:
        raise ParameterError(f"ring size must be >= 1, got {ring_size}")
    if ring_size > pool.size:
        raise ParameterError(f"ring size {ring_size} exceeds pool size {pool.size}")
    rng = np.random.default_rng(seed)
    ids = rng.choice(pool.size, size=ring_size, replace=False)
    return KeyRing(owner, tuple((int(kid), pool.key(int(kid))) for kid in ids))


def challenge_plaintext(issuer, index):
    return CHALLENGE_MAGIC + _CHALLENGE_BODY.pack(issuer, index)


def issue_challenges(ring, suite):
    if ring.size == 0:
        raise ParameterError(f"client {ring.owner} has an empty key ring")
    return [Challenge(ring.owner, index, suite.encrypt(challenge_plaintext(ring.owner, index), key))
            for index, (_, key) in enumerate(ring.entries)]


def discover_shared_keys(mine, received, suite):
    """Return the key ids common to `mine` and the issuer's ring, by trial decryption only."""
    issuers = {challenge.issuer for challenge in received}
    if len(issuers) > 1:
        raise ParameterError(f"challenges from several issuers: {sorted(issuers)}")
    shared = set()
    for challenge in received:
        expected = challenge_plaintext(challenge.issuer, challenge.index)
        for kid, key in mine.entries:
            if kid in shared:
                continue
            try:
                plaintext = suite.decrypt(challenge.ciphertext, key)
            except AuthenticationError:
                continue
            if plaintext == expected:
                shared.add(kid)
                break
    return shared


def _xor(values):
    return reduce(lambda acc, value: bytes(x ^ y for x, y in zip(acc, value)), values, bytes(KEY_SIZE))


def derive_communication_key(shared, threshold=DEFAULT_THRESHOLD, pair=None, broker=None):
    """XOR every shared key, ascending by id. `shared` maps key id to key bytes."""
    shared = dict(shared)
    if len(shared) <= threshold:
        raise InsufficientSharedKeysError(pair, len(shared), threshold)
    order = tuple(sorted(shared))
    return CommunicationKey(pair, _xor(shared[kid] for kid in order), order, broker)


def establish_path_key(a, b, broker, unused, pool, seed, graph=None, threshold=DEFAULT_THRESHOLD,
                       candidates=PATH_KEY_CANDIDATES, selection=PATH_KEY_SELECTION):
    """Broker hands both endpoints the same unused keys; each keeps a proper subset.

    Returns the derived key and the broker's view (the candidate ids, which never
    reveal which subset either endpoint kept).
    """
    if graph is not None:
        if not graph.has_edge(a, b):
            raise PathKeyFailureError(f"clients {a} and {b} are not adjacent")
        if not (graph.has_edge(broker, a) and graph.has_edge(broker, b)):
            raise PathKeyFailureError(f"broker {broker} is not adjacent to both {a} and {b}")
    if selection >= candidates:
        raise PathKeyFailureError("endpoints must withhold at least one candidate")
    if 2 * selection - candidates <= threshold:
        raise PathKeyFailureError("selection size cannot guarantee enough overlap")
    unused = sorted(unused)
    if len(unused) < candidates:
        raise PathKeyFailureError(f"only {len(unused)} unused keys, need {candidates}")
    seeds = np.random.SeedSequence(seed).spawn(3)
    offered = sorted(int(kid) for kid in np.random.default_rng(seeds[0]).choice(unused, candidates, replace=False))
    picked_a = set(int(kid) for kid in np.random.default_rng(seeds[1]).choice(offered, selection, replace=False))
    picked_b = set(int(kid) for kid in np.random.default_rng(seeds[2]).choice(offered, selection, replace=False))
    overlap = picked_a & picked_b
    key = derive_communication_key({kid: pool.key(kid) for kid in overlap}, threshold, pair_of(a, b), broker)
    return key, frozenset(offered)


@dataclass
class RevocationResult:
    rings: dict
    comm_keys: dict
    affected: list = field(default_factory=list)  # (pair, "rederived" | "needs-path-key")

    @property
    def needs_path_key(self):
        return [pair for pair, status in self.affected if status == "needs-path-key"]


def revoke_keys(poisoned, all_rings, comm_keys, pool, threshold=DEFAULT_THRESHOLD):
    poisoned = set(poisoned)
    if not poisoned:
        return RevocationResult(dict(all_rings), dict(comm_keys))
    if any(not 0 <= kid < pool.size for kid in poisoned):
        raise ParameterError("poisoned ids must belong to the pool")
    rings = {owner: ring.without(poisoned) for owner, ring in all_rings.items()}
    updated = {}
    affected = []
    for pair, ck in comm_keys.items():
        if poisoned.isdisjoint(ck.derivation):
            updated[pair] = ck
            continue
        remaining = {kid: pool.key(kid) for kid in ck.derivation if kid not in poisoned}
        if len(remaining) > threshold:
            updated[pair] = derive_communication_key(remaining, threshold, pair, ck.broker)
            affected.append((pair, "rederived"))
        else:
            affected.append((pair, "needs-path-key"))
    logger.info("revoked %d keys: %d pairs rebuilt, %d need a path-key", len(poisoned),
                sum(1 for _, s in affected if s == "rederived"),
                sum(1 for _, s in affected if s == "needs-path-key"))
    return RevocationResult(rings, updated, affected)


@dataclass
class KeyDirectory:
    """Every client's ring plus the communication keys of the whole network."""

    pool: KeyPool
    rings: dict
    comm_keys: dict = field(default_factory=dict)
    unusable: set = field(default_factory=set)
    challenges: dict = field(default_factory=dict)
    threshold: int = DEFAULT_THRESHOLD

    def has_key(self, a, b):
        return pair_of(a, b) in self.comm_keys

    def key_for(self, a, b):
        try:
            return self.comm_keys[pair_of(a, b)].key
        except KeyError:
            raise KeyEstablishmentRequiredError(f"no communication key between {a} and {b}") from None

    def keys_of(self, client):
        return {pair: ck for pair, ck in self.comm_keys.items() if client in pair}

    def secure_graph(self, graph):
        return graph.without_edges(self.unusable)

    def unused_ids(self):
        used = set()
        for ring in self.rings.values():
            used |= ring.ids
        return set(range(self.pool.size)) - used

    def revoke(self, poisoned, graph, seed):
        result = revoke_keys(poisoned, self.rings, self.comm_keys, self.pool, self.threshold)
        self.rings = result.rings
        self.comm_keys = result.comm_keys
        for pair in result.needs_path_key:
            self._path_key(pair, graph, seed, exclude=set(poisoned))
        return result

    def _path_key(self, pair, graph, seed, exclude=()):
        a, b = pair
        brokers = sorted(graph.neighbors(a) & graph.neighbors(b))
        unused = self.unused_ids() - set(exclude)
        for broker in brokers:
            try:
                key, _ = establish_path_key(a, b, broker, unused, self.pool, seed_int(seed, a, b, broker), graph,
                                            self.threshold)
            except PathKeyFailureError as e:
                logger.debug("path-key %s via %d failed: %s", pair, broker, e)
                continue
            self.comm_keys[pair] = key
            self.unusable.discard(pair)
            return key
        self.unusable.add(pair)
        logger.debug("pair %s has no broker, edge unusable", pair)
        return None


def establish_network_keys(graph, pool, ring_size, suite, seed, threshold=DEFAULT_THRESHOLD,
                           verify_symmetry=False):
    """Draw rings for every node of `graph`, run discovery on every edge, fill in path-keys."""
    rings = {node: draw_ring(pool, ring_size, seed_int(seed, "ring", node), owner=node)
             for node in range(graph.node_count)}
    directory = KeyDirectory(pool, rings, threshold=threshold)
    directory.challenges = {node: issue_challenges(ring, suite) for node, ring in rings.items()}
    lacking = []
    for u, v in sorted(graph.edges):
        found = discover_shared_keys(rings[v], directory.challenges[u], suite)
        if verify_symmetry:
            mirrored = discover_shared_keys(rings[u], directory.challenges[v], suite)
            if mirrored != found:
                raise KeyEstablishmentRequiredError(f"asymmetric discovery on ({u}, {v})")
        if len(found) > threshold:
            directory.comm_keys[(u, v)] = derive_communication_key(
                {kid: rings[v].key(kid) for kid in found}, threshold, (u, v))
        else:
            lacking.append((u, v))
    for pair in lacking:
        directory._path_key(pair, graph, seed)
    logger.info("keys established: %d direct, %d path-keys, %d unusable edges",
                sum(1 for ck in directory.comm_keys.values() if not ck.via_path_key),
                sum(1 for ck in directory.comm_keys.values() if ck.via_path_key),
                len(directory.unusable))
    return directory


def encode_challenge_log(challenges):
    out = bytearray()
    for challenge in challenges:
        body = _CHALLENGE_BODY.pack(challenge.issuer, challenge.index) + challenge.ciphertext
        out += _RECORD_LEN.pack(len(body)) + body
    return bytes(out)


def decode_challenge_log(data):
    challenges = []
    offset = 0
    while offset < len(data):
        if offset + _RECORD_LEN.size > len(data):
            raise ParameterError("truncated challenge log")
        (length,) = _RECORD_LEN.unpack_from(data, offset)
        offset += _RECORD_LEN.size
        if length < _CHALLENGE_BODY.size or offset + length > len(data):
            raise ParameterError("truncated challenge record")
        issuer, index = _CHALLENGE_BODY.unpack_from(data, offset)
        challenges.append(Challenge(issuer, index, bytes(data[offset + _CHALLENGE_BODY.size:offset + length])))
        offset += length
    return challenges


def write_challenge_log(challenges, path):
    Path(path).write_bytes(encode_challenge_log(challenges))


def read_challenge_log(path):
    return decode_challenge_log(Path(path).read_bytes())
