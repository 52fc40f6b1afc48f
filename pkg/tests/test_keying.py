from functools import reduce

import numpy as np
import pytest

from pptfl.errors import InsufficientSharedKeysError, KeyEstablishmentRequiredError, ParameterError, PathKeyFailureError
from pptfl.keying import (KEY_SIZE, CommunicationKey, KeyRing, decode_challenge_log, derive_communication_key,
                          discover_shared_keys, draw_ring, encode_challenge_log, establish_network_keys,
                          establish_path_key, generate_pool, issue_challenges, read_challenge_log, revoke_keys,
                          write_challenge_log)
from pptfl.topology import Graph, shared_key_probability

from conftest import complete_graph, path_graph


def ring_of(pool, owner, ids):
    return KeyRing(owner, tuple((kid, pool.key(kid)) for kid in ids))


def xor(*values):
    return reduce(lambda a, b: bytes(x ^ y for x, y in zip(a, b)), values, bytes(KEY_SIZE))


@pytest.fixture
def pool():
    return generate_pool(10, seed=4)


def test_pool_sizes_and_determinism():
    assert generate_pool(1, seed=9).size == 1
    big = generate_pool(2000, seed=9)
    assert big.size == 2000
    assert len(set(big.keys)) == 2000
    assert all(len(k) == KEY_SIZE for k in big.keys)
    assert generate_pool(2000, seed=9) == big
    assert generate_pool(2000, seed=10) != big


def test_empty_pool_rejected():
    with pytest.raises(ParameterError):
        generate_pool(0, seed=1)


def test_ring_of_whole_pool():
    pool = generate_pool(5, seed=1)
    assert draw_ring(pool, 5, seed=3).ids == set(range(5))


def test_ring_ids_distinct():
    ring = draw_ring(generate_pool(2000, seed=1), 20, seed=3)
    assert ring.size == 20
    assert len(ring.ids) == 20


def test_ring_larger_than_pool_rejected(pool):
    with pytest.raises(ParameterError):
        draw_ring(pool, 11, seed=0)


@pytest.mark.slow
def test_ring_overlap_frequency_matches_analytic():
    pool = generate_pool(2000, seed=2)
    seeds = np.random.SeedSequence(5).generate_state(20000)
    hits = sum(bool(draw_ring(pool, 20, int(a)).ids & draw_ring(pool, 20, int(b)).ids)
               for a, b in zip(seeds[0::2], seeds[1::2]))
    assert abs(hits / 10000 - shared_key_probability(2000, 20)) <= 0.01


def test_challenges_per_ring_entry(pool, transparent, aead):
    assert len(issue_challenges(ring_of(pool, 0, [3]), transparent)) == 1
    big = draw_ring(generate_pool(2000, seed=1), 20, seed=3)
    challenges = issue_challenges(big, aead)
    assert len(challenges) == 20
    assert len({c.ciphertext for c in challenges}) == 20


@pytest.mark.parametrize("mine,theirs,expected", [
    ([1, 2, 3], [2, 3, 4], {2, 3}),
    ([0, 1], [5, 6], set()),
    ([4, 5, 6], [4, 5, 6], {4, 5, 6}),
])
def test_discovery_by_trial_decryption(pool, aead, mine, theirs, expected):
    challenges = issue_challenges(ring_of(pool, 1, theirs), aead)
    assert discover_shared_keys(ring_of(pool, 0, mine), challenges, aead) == expected


def test_discovery_rejects_mixed_issuers(pool, transparent):
    mixed = issue_challenges(ring_of(pool, 1, [1]), transparent) + issue_challenges(ring_of(pool, 2, [2]), transparent)
    with pytest.raises(ParameterError):
        discover_shared_keys(ring_of(pool, 0, [1, 2]), mixed, transparent)


def test_single_shared_key_is_the_key(pool):
    ck = derive_communication_key({3: pool.key(3)}, pair=(0, 1))
    assert ck.key == pool.key(3)
    assert ck.derivation == (3,)


def test_equal_keys_xor_to_zero():
    k = bytes(range(KEY_SIZE))
    assert derive_communication_key({1: k, 2: k}).key == bytes(KEY_SIZE)


def test_derivation_order_is_ascending(pool):
    ck = derive_communication_key({7: pool.key(7), 2: pool.key(2), 5: pool.key(5)})
    assert ck.derivation == (2, 5, 7)
    assert ck.key == xor(pool.key(2), pool.key(5), pool.key(7))


def test_threshold_violation():
    with pytest.raises(InsufficientSharedKeysError):
        derive_communication_key({}, threshold=0, pair=(0, 1))
    with pytest.raises(InsufficientSharedKeysError):
        derive_communication_key({1: bytes(KEY_SIZE)}, threshold=1)


def test_both_endpoints_derive_the_same_key(transparent):
    pool = generate_pool(60, seed=8)
    for trial in range(200):
        a, b = draw_ring(pool, 12, seed=2 * trial, owner=0), draw_ring(pool, 12, seed=2 * trial + 1, owner=1)
        seen_by_b = discover_shared_keys(b, issue_challenges(a, transparent), transparent)
        seen_by_a = discover_shared_keys(a, issue_challenges(b, transparent), transparent)
        assert seen_by_a == seen_by_b == a.ids & b.ids
        if seen_by_a:
            assert (derive_communication_key({k: a.key(k) for k in seen_by_a}).key
                    == derive_communication_key({k: b.key(k) for k in seen_by_b}).key)


def test_path_key_overlap_is_at_least_two():
    pool = generate_pool(20, seed=1)
    for seed in range(200):
        ck, offered = establish_path_key(0, 1, 2, range(10, 20), pool, seed)
        assert len(offered) == 4
        assert 2 <= len(ck.derivation) <= 3
        assert set(ck.derivation) <= offered
        assert ck.via_path_key and ck.broker == 2


def test_broker_view_does_not_fix_the_key():
    pool = generate_pool(20, seed=1)
    sizes = set()
    for seed in range(200):
        ck, offered = establish_path_key(0, 1, 2, range(10, 20), pool, seed)
        sizes.add(len(ck.derivation))
        assert ck.key != xor(*(pool.key(k) for k in offered))
    assert sizes == {2, 3}


def test_path_key_needs_candidates():
    pool = generate_pool(20, seed=1)
    with pytest.raises(PathKeyFailureError):
        establish_path_key(0, 1, 2, [], pool, seed=0)
    with pytest.raises(PathKeyFailureError):
        establish_path_key(0, 1, 2, [1, 2, 3], pool, seed=0)


def test_path_key_requires_adjacent_broker():
    pool = generate_pool(20, seed=1)
    with pytest.raises(PathKeyFailureError):
        establish_path_key(0, 1, 3, range(10, 20), pool, seed=0, graph=path_graph(4))


def test_revocation(pool):
    keys = {
        (0, 1): derive_communication_key({1: pool.key(1), 2: pool.key(2)}, pair=(0, 1)),
        (1, 2): derive_communication_key({1: pool.key(1)}, pair=(1, 2)),
        (2, 3): derive_communication_key({5: pool.key(5)}, pair=(2, 3)),
    }
    rings = {i: ring_of(pool, i, [1, 2, 5]) for i in range(4)}
    result = revoke_keys({1}, rings, keys, pool)
    assert result.comm_keys[(0, 1)].key == pool.key(2)
    assert result.comm_keys[(2, 3)] == keys[(2, 3)]
    assert result.needs_path_key == [(1, 2)]
    assert (1, 2) not in result.comm_keys
    assert all(1 not in ring.ids for ring in result.rings.values())


def test_empty_revocation_is_noop(pool):
    keys = {(0, 1): derive_communication_key({1: pool.key(1)}, pair=(0, 1))}
    assert revoke_keys(set(), {}, keys, pool).comm_keys == keys


def test_network_keys_cover_every_edge(transparent):
    graph = complete_graph(6)
    directory = establish_network_keys(graph, generate_pool(12, seed=0), 10, transparent, seed=0,
                                       verify_symmetry=True)
    assert set(directory.comm_keys) == graph.edges
    assert not directory.unusable
    assert directory.key_for(3, 1) == directory.key_for(1, 3)
    assert directory.secure_graph(graph) == graph


def test_network_keys_fall_back_to_path_keys(transparent):
    # one-key rings from a 40-key pool: most adjacent pairs share nothing
    graph = complete_graph(5)
    directory = establish_network_keys(graph, generate_pool(40, seed=0), 1, transparent, seed=3)
    brokered = [ck for ck in directory.comm_keys.values() if ck.via_path_key]
    assert brokered
    for ck in brokered:
        assert graph.has_edge(ck.broker, ck.pair[0]) and graph.has_edge(ck.broker, ck.pair[1])


def test_edges_without_broker_are_unusable(transparent):
    graph = Graph(2, frozenset({(0, 1)}))
    pool = generate_pool(40, seed=0)
    directory = establish_network_keys(graph, pool, 1, transparent, seed=0)
    if directory.rings[0].ids & directory.rings[1].ids:
        pytest.skip("rings happen to overlap for this seed")
    assert directory.unusable == {(0, 1)}
    assert directory.secure_graph(graph).edges == frozenset()
    with pytest.raises(KeyEstablishmentRequiredError):
        directory.key_for(0, 1)


def test_challenge_log_file(tmp_path, pool, transparent):
    challenges = issue_challenges(ring_of(pool, 7, [1, 4, 9]), transparent)
    path = tmp_path / "challenges.bin"
    write_challenge_log(challenges, path)
    assert read_challenge_log(path) == challenges


def test_truncated_challenge_log(pool, transparent):
    data = encode_challenge_log(issue_challenges(ring_of(pool, 7, [1]), transparent))
    with pytest.raises(ParameterError):
        decode_challenge_log(data[:-3])


def test_communication_key_flags_brokered_keys():
    assert not CommunicationKey((0, 1), bytes(KEY_SIZE), (1,)).via_path_key
    assert CommunicationKey((0, 1), bytes(KEY_SIZE), (1, 2), broker=4).via_path_key
