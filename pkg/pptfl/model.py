"""
Fixed-point model arithmetic and the synthetic federated task.

Every update is a vector of w-bit integers read modulo 2^w with `frac_bits`
fractional bits. Sums, masks and their removal are exact group operations, so the
masked route and a plain weighted average agree bit for bit.
"""

import logging
import struct
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from pptfl.errors import DegenerateRoundError, OverflowRiskError, ParameterError, ShapeError

logger = logging.getLogger(__name__)

_VECTOR_HEADER = struct.Struct("<IBB")


def _div_round_half_even(num, den):
    """Integer division num/den (den > 0) rounded to nearest, ties to even. Vectorised."""
    num = np.asarray(num, dtype=np.int64)
    q = np.floor_divide(num, den)
    r = num - q * den
    twice = 2 * r
    bump = (twice > den) | ((twice == den) & (q % 2 == 1))
    return q + bump.astype(np.int64)


@dataclass(frozen=True)
class FixedPoint:
    width: int = 32
    frac_bits: int = 16

    def __post_init__(self):
        if not 8 <= self.width <= 32:
            raise ParameterError(f"width must lie in [8, 32], got {self.width}")
        if not 0 <= self.frac_bits < self.width:
            raise ParameterError(f"frac_bits must lie in [0, width), got {self.frac_bits}")

    @property
    def modulus(self):
        return 1 << self.width

    @property
    def scale(self):
        return 1 << self.frac_bits

    @property
    def limit(self):
        return 1 << (self.width - 1)

    def wrap(self, values):
        return np.mod(np.asarray(values, dtype=np.int64), self.modulus)

    def signed(self, values):
        values = np.asarray(values, dtype=np.int64)
        return np.where(values >= self.limit, values - self.modulus, values)

    def quantize(self, floats):
        return np.rint(np.asarray(floats, dtype=np.float64) * self.scale).astype(np.int64)

    def ensure_headroom(self, signed_values, what="value"):
        signed_values = np.asarray(signed_values, dtype=np.int64)
        if signed_values.size and int(np.max(np.abs(signed_values))) >= self.limit:
            raise OverflowRiskError(f"{what} exceeds the {self.width}-bit headroom")

    def vector(self, floats):
        raw = self.quantize(floats)
        self.ensure_headroom(raw, "parameter")
        return ParameterVector(self.wrap(raw), self)

    def zeros(self, dim):
        return ParameterVector(np.zeros(dim, dtype=np.int64), self)


@dataclass(frozen=True, eq=False)
class ParameterVector:
    values: np.ndarray
    fmt: FixedPoint = field(default_factory=FixedPoint)

    def __post_init__(self):
        values = self.fmt.wrap(self.values)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def dim(self):
        return int(self.values.shape[0])

    def signed(self):
        return self.fmt.signed(self.values)

    def to_floats(self):
        return self.signed().astype(np.float64) / self.fmt.scale

    def _check(self, other):
        if self.dim != other.dim or self.fmt != other.fmt:
            raise ShapeError(f"vector shapes differ: {self.dim}/{self.fmt} vs {other.dim}/{other.fmt}")

    def __add__(self, other):
        self._check(other)
        return ParameterVector(self.values + other.values, self.fmt)

    def __sub__(self, other):
        self._check(other)
        return ParameterVector(self.values - other.values, self.fmt)

    def __eq__(self, other):
        return (isinstance(other, ParameterVector) and self.fmt == other.fmt
                and np.array_equal(self.values, other.values))

    def __hash__(self):
        return hash((self.fmt, self.values.tobytes()))

    def to_bytes(self):
        width_bytes = (self.fmt.width + 7) // 8
        body = b"".join(int(v).to_bytes(width_bytes, "little") for v in self.values)
        return _VECTOR_HEADER.pack(self.dim, self.fmt.width, self.fmt.frac_bits) + body

    @classmethod
    def from_bytes(cls, data):
        if len(data) < _VECTOR_HEADER.size:
            raise ShapeError("vector header truncated")
        dim, width, frac_bits = _VECTOR_HEADER.unpack_from(data, 0)
        fmt = FixedPoint(width, frac_bits)
        width_bytes = (width + 7) // 8
        body = data[_VECTOR_HEADER.size:]
        if len(body) != dim * width_bytes:
            raise ShapeError(f"expected {dim * width_bytes} value bytes, got {len(body)}")
        values = [int.from_bytes(body[i:i + width_bytes], "little") for i in range(0, len(body), width_bytes)]
        return cls(np.array(values, dtype=np.int64), fmt)


@dataclass(frozen=True, eq=False)
class EncodedUpdate:
    """(omega * x, omega) packed as one vector, weight in the trailing slot."""

    packed: ParameterVector

    @property
    def fmt(self):
        return self.packed.fmt

    @property
    def dim(self):
        return self.packed.dim - 1

    @property
    def weighted(self):
        return ParameterVector(self.packed.values[:-1], self.fmt)

    @property
    def weight_raw(self):
        return int(self.fmt.signed(self.packed.values[-1:])[0])

    @property
    def weight(self):
        return self.weight_raw / self.fmt.scale

    def add_mask(self, noise_values):
        noise_values = np.asarray(noise_values, dtype=np.int64)
        if noise_values.shape != self.packed.values.shape:
            raise ShapeError(f"noise dimension {noise_values.shape[0]} != payload {self.packed.dim}")
        return EncodedUpdate(ParameterVector(self.packed.values + noise_values, self.fmt))

    def remove_mask(self, noise_values):
        noise_values = np.asarray(noise_values, dtype=np.int64)
        if noise_values.shape != self.packed.values.shape:
            raise ShapeError(f"noise dimension {noise_values.shape[0]} != payload {self.packed.dim}")
        return EncodedUpdate(ParameterVector(self.packed.values - noise_values, self.fmt))

    def __eq__(self, other):
        return isinstance(other, EncodedUpdate) and self.packed == other.packed

    def __hash__(self):
        return hash(self.packed)

    def to_bytes(self):
        return self.packed.to_bytes()

    @classmethod
    def from_bytes(cls, data):
        packed = ParameterVector.from_bytes(data)
        if packed.dim < 1:
            raise ShapeError("encoded update needs a weight slot")
        return cls(packed)


def local_update(m_i, M):
    """x_i = m_i - M, component-wise modulo 2^w."""
    return m_i - M


def encode(x_i, weight):
    if weight < 0:
        raise ParameterError(f"weight must be non-negative, got {weight}")
    fmt = x_i.fmt
    weight_raw = int(fmt.quantize([weight])[0])
    fmt.ensure_headroom([weight_raw], "weight")
    weighted = _div_round_half_even(x_i.signed() * weight_raw, fmt.scale)
    fmt.ensure_headroom(weighted, "weighted update")
    packed = np.concatenate([weighted, np.array([weight_raw], dtype=np.int64)])
    return EncodedUpdate(ParameterVector(packed, fmt))


def decode(encoded):
    """Return (omega * x as a ParameterVector, omega as a float)."""
    return encoded.weighted, encoded.weight


def aggregate(updates):
    updates = list(updates)
    if not updates:
        raise ParameterError("nothing to aggregate")
    total = updates[0].packed
    for update in updates[1:]:
        if update.packed.dim != total.dim or update.fmt != total.fmt:
            raise ShapeError("encoded updates differ in dimension or format")
        total = total + update.packed
    return EncodedUpdate(total)


def global_update(agg, M_R):
    """M_{R+1} = (sum omega_i x_i) / (sum omega_i) + M_R, ties rounded to even."""
    if agg.dim != M_R.dim:
        raise ShapeError(f"aggregate dimension {agg.dim} != model dimension {M_R.dim}")
    total_weight = agg.weight_raw
    if total_weight <= 0:
        raise DegenerateRoundError("total weight of the round is zero")
    fmt = M_R.fmt
    delta = _div_round_half_even(agg.weighted.signed() * fmt.scale, total_weight)
    return ParameterVector(M_R.values + delta, fmt)


def fedavg_oracle(local_models, weights, M):
    """Centralised weighted average of local models in exact rational arithmetic.

    Independent of the modular path: Python integers and Fractions, same rounding
    rule (ties to even, applied to the averaged delta).
    """
    total = sum(weights[i] for i in local_models)
    if total <= 0:
        raise DegenerateRoundError("total weight is zero")
    fmt = M.fmt
    base = [int(v) for v in M.signed()]
    out = []
    for k in range(M.dim):
        num = sum(Fraction(weights[i]) * (int(fmt.signed(m.values[k:k + 1])[0]) - base[k])
                  for i, m in local_models.items())
        out.append(round(num / total) + base[k])
    return ParameterVector(np.array(out, dtype=np.int64), fmt)


@dataclass
class SyntheticTask:
    """Least-squares regression split across clients with skewed sample counts."""

    features: list
    labels: list
    true_weights: np.ndarray
    fmt: FixedPoint = field(default_factory=FixedPoint)

    @property
    def n_clients(self):
        return len(self.features)

    @property
    def dim(self):
        return int(self.true_weights.shape[0])

    def sample_count(self, client):
        return int(self.labels[client].shape[0])

    @property
    def weights(self):
        return {client: self.sample_count(client) for client in range(self.n_clients)}

    def pooled(self):
        non_empty = [c for c in range(self.n_clients) if self.sample_count(c)]
        return (np.vstack([self.features[c] for c in non_empty]),
                np.concatenate([self.labels[c] for c in non_empty]))

    def loss(self, model):
        X, y = self.pooled()
        w = model.to_floats() if isinstance(model, ParameterVector) else np.asarray(model)
        return float(np.mean((X @ w - y) ** 2))

    def local_loss(self, client, model):
        X, y = self.features[client], self.labels[client]
        w = model.to_floats() if isinstance(model, ParameterVector) else np.asarray(model)
        return float(np.mean((X @ w - y) ** 2))

    def optimum(self):
        X, y = self.pooled()
        return np.linalg.lstsq(X, y, rcond=None)[0]


def make_synthetic_task(n_clients, dim, seed, fmt=None, mean_log_samples=3.0, sigma=0.8,
                        max_samples=200, label_noise=0.05, empty_clients=0):
    """Clients' sample counts follow a clipped log-normal, mimicking uneven mailbox sizes."""
    if not 1 <= dim <= 64:
        raise ParameterError(f"task dimension must lie in [1, 64], got {dim}")
    if n_clients < 1:
        raise ParameterError("need at least one client")
    fmt = fmt or FixedPoint()
    rng = np.random.default_rng(seed)
    true_weights = rng.uniform(-1.0, 1.0, size=dim)
    counts = np.clip(rng.lognormal(mean_log_samples, sigma, size=n_clients), 1, max_samples).astype(int)
    if empty_clients:
        counts[rng.choice(n_clients, size=min(empty_clients, n_clients), replace=False)] = 0
    budget = fmt.limit // fmt.scale
    if counts.sum() >= budget:
        raise OverflowRiskError(f"{counts.sum()} samples overflow the total-weight headroom {budget}")
    features, labels = [], []
    for count in counts:
        X = rng.normal(0.0, 1.0, size=(count, dim))
        features.append(X)
        labels.append(X @ true_weights + rng.normal(0.0, label_noise, size=count))
    return SyntheticTask(features, labels, true_weights, fmt)


def train_local(task, client, M, epochs, lr, seed=0):
    """Plain per-sample SGD from the global model. None when the client has no data."""
    n = task.sample_count(client)
    if n == 0:
        return None
    X, y = task.features[client], task.labels[client]
    w = M.to_floats().copy()
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        for idx in rng.permutation(n):
            w -= lr * (X[idx] @ w - y[idx]) * X[idx]
    return task.fmt.vector(w)
