"""
Pluggable cipher suites, signed envelopes and the leader's noise generators.

Two suites ship: `AeadSuite` (AES-GCM under 16-byte communication keys, Ed25519
signatures) and `TransparentSuite`, a keyed-checksum double that leaves payloads
readable so protocol tests do not pay for real primitives. `CountingSuite` wraps
either one and counts calls.
"""

import abc
import hashlib
import itertools
import struct
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from pptfl.errors import AuthenticationError, ForgeryError, ParameterError, ReplayError

DEFAULT_FRESHNESS_WINDOW = 10

# noise generator families, indexed by generator id
NOISE_GENERATORS = (np.random.PCG64, np.random.Philox, np.random.SFC64, np.random.MT19937)

_HEADER = struct.Struct("<IQI")
_SIG_LEN = struct.Struct("<H")
_STAMP = struct.Struct("<Q")


def _seed_bytes(seed, label, size):
    return hashlib.blake2b(f"{label}:{seed}".encode(), digest_size=size).digest()


class CipherSuite(abc.ABC):
    """Symmetric authenticated encryption plus per-client signatures."""

    name = "abstract"

    @abc.abstractmethod
    def encrypt(self, payload: bytes, key: bytes) -> bytes:
        raise NotImplementedError()

    @abc.abstractmethod
    def decrypt(self, ciphertext: bytes, key: bytes) -> bytes:
        """Raises AuthenticationError on a wrong key or altered ciphertext."""
        raise NotImplementedError()

    @abc.abstractmethod
    def generate_keypair(self, seed):
        """Return (secret, public) for one client, deterministic in seed."""
        raise NotImplementedError()

    @abc.abstractmethod
    def sign(self, message: bytes, secret) -> bytes:
        raise NotImplementedError()

    @abc.abstractmethod
    def verify(self, message: bytes, signature: bytes, public: bytes) -> bool:
        raise NotImplementedError()


@lru_cache(maxsize=16384)
def _aesgcm(key):
    return AESGCM(key)


class AeadSuite(CipherSuite):
    """AES-GCM with a per-suite counter nonce; Ed25519 signatures."""

    name = "aead"
    NONCE_SIZE = 12

    def __init__(self, nonce_seed=0):
        self._salt = _seed_bytes(nonce_seed, "nonce", 4)
        self._counter = itertools.count()

    def encrypt(self, payload, key):
        nonce = self._salt + next(self._counter).to_bytes(8, "little")
        return nonce + _aesgcm(bytes(key)).encrypt(nonce, bytes(payload), None)

    def decrypt(self, ciphertext, key):
        if len(ciphertext) < self.NONCE_SIZE + 16:
            raise AuthenticationError("ciphertext too short")
        nonce, body = ciphertext[:self.NONCE_SIZE], ciphertext[self.NONCE_SIZE:]
        try:
            return _aesgcm(bytes(key)).decrypt(nonce, body, None)
        except InvalidTag as e:
            raise AuthenticationError("authentication tag mismatch") from e

    def generate_keypair(self, seed):
        secret = Ed25519PrivateKey.from_private_bytes(_seed_bytes(seed, "ed25519", 32))
        public = secret.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        return secret, public

    def sign(self, message, secret):
        return secret.sign(message)

    def verify(self, message, signature, public):
        try:
            Ed25519PublicKey.from_public_bytes(public).verify(signature, message)
        except (InvalidSignature, ValueError):
            return False
        return True


class TransparentSuite(CipherSuite):
    """Test double: plaintext stays visible behind a keyed checksum.

    Signatures are keyed hashes where the public value equals the secret, so the
    suite offers integrity checks but no real authentication.
    """

    name = "transparent"
    TAG_SIZE = 16

    def _tag(self, payload, key):
        return hashlib.blake2b(payload, key=bytes(key)[:64], digest_size=self.TAG_SIZE).digest()

    def encrypt(self, payload, key):
        payload = bytes(payload)
        return self._tag(payload, key) + payload

    def decrypt(self, ciphertext, key):
        tag, payload = ciphertext[:self.TAG_SIZE], ciphertext[self.TAG_SIZE:]
        if len(tag) != self.TAG_SIZE or tag != self._tag(payload, key):
            raise AuthenticationError("checksum mismatch")
        return payload

    def generate_keypair(self, seed):
        secret = _seed_bytes(seed, "transparent-sign", 32)
        return secret, secret

    def sign(self, message, secret):
        return hashlib.blake2b(message, key=secret, digest_size=32).digest()

    def verify(self, message, signature, public):
        return signature == hashlib.blake2b(message, key=public, digest_size=32).digest()


class CountingSuite(CipherSuite):
    def __init__(self, inner):
        self.inner = inner
        self.name = f"counting({inner.name})"
        self.calls = Counter()

    def encrypt(self, payload, key):
        self.calls["encrypt"] += 1
        return self.inner.encrypt(payload, key)

    def decrypt(self, ciphertext, key):
        self.calls["decrypt"] += 1
        return self.inner.decrypt(ciphertext, key)

    def generate_keypair(self, seed):
        self.calls["keypair"] += 1
        return self.inner.generate_keypair(seed)

    def sign(self, message, secret):
        self.calls["sign"] += 1
        return self.inner.sign(message, secret)

    def verify(self, message, signature, public):
        self.calls["verify"] += 1
        return self.inner.verify(message, signature, public)


def make_suite(name, seed=0):
    if name == "aead":
        return AeadSuite(nonce_seed=seed)
    if name == "transparent":
        return TransparentSuite()
    raise ParameterError(f"unknown cipher suite '{name}'")


@dataclass(frozen=True)
class SignedEnvelope:
    sender: int
    timestamp: int
    ciphertext: bytes
    signature: bytes

    @staticmethod
    def signed_message(ciphertext, timestamp):
        return bytes(ciphertext) + _STAMP.pack(timestamp)

    def to_bytes(self):
        return (_HEADER.pack(self.sender, self.timestamp, len(self.ciphertext)) + self.ciphertext
                + _SIG_LEN.pack(len(self.signature)) + self.signature)

    @classmethod
    def from_bytes(cls, data):
        data = bytes(data)
        if len(data) < _HEADER.size + _SIG_LEN.size:
            raise ForgeryError("envelope truncated")
        sender, timestamp, ct_len = _HEADER.unpack_from(data, 0)
        offset = _HEADER.size
        if len(data) < offset + ct_len + _SIG_LEN.size:
            raise ForgeryError("envelope truncated")
        ciphertext = data[offset:offset + ct_len]
        offset += ct_len
        (sig_len,) = _SIG_LEN.unpack_from(data, offset)
        offset += _SIG_LEN.size
        if len(data) != offset + sig_len:
            raise ForgeryError("envelope length mismatch")
        return cls(sender, timestamp, ciphertext, data[offset:])


def sign_envelope(suite, ciphertext, t, secret, sender):
    signature = suite.sign(SignedEnvelope.signed_message(ciphertext, t), secret)
    return SignedEnvelope(sender, t, bytes(ciphertext), signature)


def verify_envelope(suite, envelope, public, now, window=DEFAULT_FRESHNESS_WINDOW, broadcast_tau=None):
    """Accept iff the signature holds and both the envelope and broadcast stamps are fresh."""
    message = SignedEnvelope.signed_message(envelope.ciphertext, envelope.timestamp)
    if not suite.verify(message, envelope.signature, public):
        raise ForgeryError(f"bad signature on envelope from {envelope.sender}")
    if abs(now - envelope.timestamp) > window:
        raise ReplayError(f"envelope stamped {envelope.timestamp} is stale at tick {now}")
    if broadcast_tau is not None and abs(now - broadcast_tau) > window:
        raise ReplayError(f"broadcast stamped {broadcast_tau} is stale at tick {now}")
    return True


@dataclass(frozen=True)
class NoiseVector:
    values: np.ndarray
    generator_id: int
    seed: int
    width: int

    @property
    def dim(self):
        return int(self.values.shape[0])


def generate_noise(dim, generator_id, seed, width=32):
    """Uniform noise over [0, 2^width) from one of the built-in generator families."""
    if dim < 1:
        raise ParameterError(f"noise dimension must be >= 1, got {dim}")
    if not 0 <= generator_id < len(NOISE_GENERATORS):
        raise ParameterError(f"unknown noise generator {generator_id}, expected 0..{len(NOISE_GENERATORS) - 1}")
    rng = np.random.Generator(NOISE_GENERATORS[generator_id](seed))
    values = rng.integers(0, 1 << width, size=dim, dtype=np.uint64).astype(np.int64)
    values.setflags(write=False)
    return NoiseVector(values, generator_id, seed, width)
