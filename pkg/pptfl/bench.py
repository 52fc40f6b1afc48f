"""Micro-benchmark of the per-hop operations on one fixed-size payload."""

import logging
import time

import numpy as np
import pandas as pd

from pptfl.crypto import NOISE_GENERATORS, CountingSuite, generate_noise, make_suite
from pptfl.errors import ParameterError
from pptfl.keying import KEY_SIZE
from pptfl.model import EncodedUpdate, FixedPoint, ParameterVector

logger = logging.getLogger(__name__)

BENCH_OPS = ("noise_generation", "noise_addition", "noise_subtraction", "encryption", "decryption", "signature",
             "verification")


def _noise(dim, seed, width):
    if dim == 0:
        return np.zeros(0, dtype=np.int64)
    return generate_noise(dim, seed % len(NOISE_GENERATORS), seed, width).values


def run_bench(ops=BENCH_OPS, dim=1000, repeats=50, suite_name="aead", seed=0):
    """Time each op `repeats` times. Relative cost is against the cheapest op measured."""
    unknown = set(ops) - set(BENCH_OPS)
    if unknown:
        raise ParameterError(f"unknown bench ops {sorted(unknown)}")
    if repeats < 2:
        raise ParameterError("need at least two repeats for a spread")
    fmt = FixedPoint()
    suite = CountingSuite(make_suite(suite_name, seed))
    rng = np.random.default_rng(seed)
    payload = EncodedUpdate(ParameterVector(rng.integers(0, fmt.modulus, size=dim + 1), fmt))
    noise = _noise(dim + 1, seed, fmt.width)
    masked = payload.add_mask(noise)
    key = bytes(rng.integers(0, 256, size=KEY_SIZE, dtype=np.uint8))
    secret, public = suite.generate_keypair(seed)
    plaintext = masked.to_bytes()
    ciphertext = suite.encrypt(plaintext, key)
    signature = suite.sign(ciphertext, secret)

    actions = {
        "noise_generation": lambda: _noise(dim + 1, seed, fmt.width),
        "noise_addition": lambda: payload.add_mask(noise),
        "noise_subtraction": lambda: masked.remove_mask(noise),
        "encryption": lambda: suite.encrypt(plaintext, key),
        "decryption": lambda: suite.decrypt(ciphertext, key),
        "signature": lambda: suite.sign(ciphertext, secret),
        "verification": lambda: suite.verify(ciphertext, signature, public),
    }
    rows = []
    for op in ops:
        samples = np.empty(repeats)
        for i in range(repeats):
            start = time.perf_counter()
            actions[op]()
            samples[i] = time.perf_counter() - start
        mean = float(samples.mean())
        rows.append({"op": op, "mean_ms": mean * 1e3, "std_ms": float(samples.std(ddof=1)) * 1e3,
                     "cv": float(samples.std(ddof=1) / mean) if mean > 0 else 0.0})
    table = pd.DataFrame(rows, columns=["op", "mean_ms", "std_ms", "cv"])
    cheapest = table["mean_ms"].min() if len(table) else 0.0
    table["relative"] = table["mean_ms"] / cheapest if cheapest > 0 else 1.0
    logger.debug("bench suite calls: %s", dict(suite.calls))
    return table
