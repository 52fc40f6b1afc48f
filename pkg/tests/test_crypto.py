import numpy as np
import pytest
from scipy import stats

from pptfl.crypto import (NOISE_GENERATORS, AeadSuite, CountingSuite, SignedEnvelope, TransparentSuite,
                          generate_noise, make_suite, sign_envelope, verify_envelope)
from pptfl.errors import AuthenticationError, ForgeryError, ParameterError, ReplayError
from pptfl.model import FixedPoint

KEY = bytes(range(16))
OTHER_KEY = bytes(range(1, 17))


@pytest.fixture(params=["aead", "transparent"])
def suite(request):
    return make_suite(request.param, seed=3)


@pytest.mark.parametrize("payload", [b"", b"x", bytes(range(256)) * 40])
def test_decrypt_recovers_payload(suite, payload):
    assert suite.decrypt(suite.encrypt(payload, KEY), KEY) == payload


def test_wrong_key_fails(suite):
    with pytest.raises(AuthenticationError):
        suite.decrypt(suite.encrypt(b"secret update", KEY), OTHER_KEY)


def test_flipped_bit_fails(suite):
    ct = bytearray(suite.encrypt(b"secret update", KEY))
    ct[-1] ^= 0x01
    with pytest.raises(AuthenticationError):
        suite.decrypt(bytes(ct), KEY)


def flip(data, rng):
    out = bytearray(data)
    out[int(rng.integers(len(out)))] ^= 1 << int(rng.integers(8))
    return bytes(out)


def test_any_flipped_bit_fails(suite):
    rng = np.random.default_rng(21)
    ct = suite.encrypt(bytes(range(64)), KEY)
    for _ in range(1000):
        with pytest.raises(AuthenticationError):
            suite.decrypt(flip(ct, rng), KEY)


def test_any_flipped_envelope_bit_is_caught(suite):
    rng = np.random.default_rng(22)
    secret, public = suite.generate_keypair(3)
    wire = sign_envelope(suite, suite.encrypt(b"running sum", KEY), 50, secret, sender=3).to_bytes()
    for _ in range(1000):
        with pytest.raises(AuthenticationError):
            env = SignedEnvelope.from_bytes(flip(wire, rng))
            if env.sender != 3:
                raise ForgeryError("sender changed")
            verify_envelope(suite, env, public, now=50)
            suite.decrypt(env.ciphertext, KEY)


def test_aead_hides_payload_and_never_repeats_nonce():
    suite = AeadSuite(nonce_seed=0)
    a, b = suite.encrypt(b"same payload", KEY), suite.encrypt(b"same payload", KEY)
    assert a != b
    assert b"same payload" not in a
    assert a[:AeadSuite.NONCE_SIZE] != b[:AeadSuite.NONCE_SIZE]


def test_aead_short_ciphertext():
    with pytest.raises(AuthenticationError):
        AeadSuite().decrypt(b"\x00" * 10, KEY)


def test_signatures(suite):
    secret, public = suite.generate_keypair(5)
    _, other_public = suite.generate_keypair(6)
    sig = suite.sign(b"message", secret)
    assert suite.verify(b"message", sig, public)
    assert not suite.verify(b"messagf", sig, public)
    assert not suite.verify(b"message", sig, other_public)


def test_keypairs_are_deterministic(suite):
    assert suite.generate_keypair(9)[1] == suite.generate_keypair(9)[1]


def test_aead_rejects_garbage_public_key():
    suite = AeadSuite()
    secret, _ = suite.generate_keypair(1)
    assert not suite.verify(b"m", suite.sign(b"m", secret), b"short")


def test_counting_suite_counts():
    suite = CountingSuite(TransparentSuite())
    secret, public = suite.generate_keypair(0)
    suite.verify(b"m", suite.sign(b"m", secret), public)
    suite.decrypt(suite.encrypt(b"m", KEY), KEY)
    assert suite.calls == {"keypair": 1, "sign": 1, "verify": 1, "encrypt": 1, "decrypt": 1}


def test_unknown_suite():
    with pytest.raises(ParameterError):
        make_suite("rot13")


def test_envelope_wire_format(suite):
    secret, _ = suite.generate_keypair(2)
    env = sign_envelope(suite, suite.encrypt(b"payload", KEY), 17, secret, sender=2)
    assert SignedEnvelope.from_bytes(env.to_bytes()) == env


@pytest.mark.parametrize("cut", [1, 5, 40])
def test_truncated_envelope_is_forgery(cut):
    suite = TransparentSuite()
    secret, _ = suite.generate_keypair(2)
    wire = sign_envelope(suite, suite.encrypt(b"payload", KEY), 17, secret, sender=2).to_bytes()
    with pytest.raises(ForgeryError):
        SignedEnvelope.from_bytes(wire[:-cut])


def test_trailing_bytes_are_forgery():
    suite = TransparentSuite()
    secret, _ = suite.generate_keypair(2)
    wire = sign_envelope(suite, b"ct", 1, secret, sender=2).to_bytes()
    with pytest.raises(ForgeryError):
        SignedEnvelope.from_bytes(wire + b"\x00")


@pytest.mark.parametrize("now,accepted", [(100, True), (110, True), (90, True), (111, False), (89, False)])
def test_freshness_window(suite, now, accepted):
    secret, public = suite.generate_keypair(4)
    env = sign_envelope(suite, b"ct", 100, secret, sender=4)
    if accepted:
        assert verify_envelope(suite, env, public, now, window=10)
    else:
        with pytest.raises(ReplayError):
            verify_envelope(suite, env, public, now, window=10)


def test_stale_broadcast_stamp_is_replay(suite):
    secret, public = suite.generate_keypair(4)
    env = sign_envelope(suite, b"ct", 100, secret, sender=4)
    with pytest.raises(ReplayError):
        verify_envelope(suite, env, public, 100, window=10, broadcast_tau=80)


def test_altered_stamp_is_forgery(suite):
    secret, public = suite.generate_keypair(4)
    env = sign_envelope(suite, b"ct", 100, secret, sender=4)
    moved = SignedEnvelope(env.sender, 101, env.ciphertext, env.signature)
    with pytest.raises(ForgeryError):
        verify_envelope(suite, moved, public, 101)


def test_wrong_signer_is_forgery(suite):
    secret, _ = suite.generate_keypair(4)
    _, impostor_public = suite.generate_keypair(5)
    env = sign_envelope(suite, b"ct", 100, secret, sender=4)
    with pytest.raises(ForgeryError):
        verify_envelope(suite, env, impostor_public, 100)


def test_replay_is_an_authentication_error():
    assert issubclass(ReplayError, AuthenticationError)
    assert issubclass(ForgeryError, AuthenticationError)


@pytest.mark.parametrize("generator_id", range(len(NOISE_GENERATORS)))
def test_noise_is_deterministic_and_in_range(generator_id):
    a = generate_noise(1000, generator_id, seed=11)
    assert np.array_equal(a.values, generate_noise(1000, generator_id, seed=11).values)
    assert a.values.min() >= 0 and a.values.max() < 2 ** 32
    assert a.dim == 1000


def test_noise_is_read_only():
    noise = generate_noise(4, 0, seed=1)
    with pytest.raises(ValueError):
        noise.values[0] = 1


def test_noise_generators_differ():
    draws = [generate_noise(16, g, seed=1).values for g in range(len(NOISE_GENERATORS))]
    assert len({d.tobytes() for d in draws}) == len(draws)


def test_noise_looks_uniform():
    values = generate_noise(100_000, 0, seed=2).values
    counts = np.bincount(values >> 28, minlength=16)
    assert stats.chisquare(counts).pvalue > 1e-4


@pytest.mark.parametrize("generator_id", range(len(NOISE_GENERATORS)))
def test_masked_value_independent_of_secret(generator_id):
    fmt = FixedPoint(width=16, frac_bits=8)
    secrets = np.array([0, 1, 255, 1 << 15, 40_000])
    draws = 20_000
    table = []
    for i, x in enumerate(secrets):
        noise = generate_noise(draws, generator_id, seed=100 + i, width=16).values
        masked = fmt.wrap(x + noise)
        table.append(np.bincount(masked >> 12, minlength=16))
    table = np.array(table)
    assert table.sum() == draws * len(secrets)
    assert stats.chi2_contingency(table).pvalue > 1e-4


@pytest.mark.parametrize("dim,generator_id", [(0, 0), (-1, 0), (4, len(NOISE_GENERATORS)), (4, -1)])
def test_noise_rejects_bad_arguments(dim, generator_id):
    with pytest.raises(ParameterError):
        generate_noise(dim, generator_id, seed=0)
