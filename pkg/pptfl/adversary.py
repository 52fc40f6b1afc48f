"""
Adversarial behaviour against a PPT round and the deposit game that deters collusion.
"""

import itertools
import logging
import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from pptfl.crypto import SignedEnvelope
from pptfl.errors import (AttackInfeasibleError, AuthenticationError, KeyEstablishmentRequiredError, ParameterError,
                          ShapeError)
from pptfl.model import EncodedUpdate, ParameterVector

logger = logging.getLogger(__name__)

ADVERSARY_KINDS = ("curious", "forger", "byzantine-claimer", "colluder-pair")
INJECTION_MODES = ("mutate", "replay")
_CLAIM = struct.Struct("<4sIQ")


class Strategy(str, Enum):
    COLLUDE = "collude"
    COUNTER = "counter-collude"


STRATEGIES = (Strategy.COLLUDE, Strategy.COUNTER)


@dataclass(frozen=True)
class AdversaryProfile:
    kind: str
    members: tuple
    strategy: Strategy = None
    gain: int = 1
    deposit: int = 2

    def __post_init__(self):
        if self.kind not in ADVERSARY_KINDS:
            raise ParameterError(f"unknown adversary kind '{self.kind}'")
        if self.gain <= 0 or self.deposit <= 0:
            raise ParameterError("gain and deposit must be positive")
        if self.kind == "colluder-pair" and len(self.members) != 2:
            raise ParameterError("a colluder pair has exactly two members")


@dataclass(frozen=True, eq=False)
class PayoffMatrix:
    """Row player B, column player C; index 0 is collude, 1 is counter-collude."""

    b: np.ndarray
    c: np.ndarray

    @classmethod
    def from_gain_deposit(cls, g, d):
        return cls(np.array([[g, -d], [d, 0]]), np.array([[g, d], [-d, 0]]))

    def payoff(self, sb, sc):
        i, j = STRATEGIES.index(sb), STRATEGIES.index(sc)
        return int(self.b[i, j]), int(self.c[i, j])


def pure_nash_equilibria(m):
    """Profiles where neither player gains by deviating alone (weak inequalities)."""
    equilibria = set()
    for i, j in itertools.product(range(2), repeat=2):
        if m.b[i, j] >= m.b[:, j].max() and m.c[i, j] >= m.c[i, :].max():
            equilibria.add((STRATEGIES[i], STRATEGIES[j]))
    return equilibria


def is_strict_equilibrium(m, profile):
    i, j = STRATEGIES.index(profile[0]), STRATEGIES.index(profile[1])
    return bool(m.b[i, j] > m.b[1 - i, j] and m.c[i, j] > m.c[i, 1 - j])


def rational_strategy(profile, deposits_enabled=True):
    # ties go to counter-collusion
    if not deposits_enabled:
        return Strategy.COLLUDE
    return Strategy.COUNTER if profile.gain <= profile.deposit else Strategy.COLLUDE


class DepositBook:
    """Integer deposit accounting for the supervision-and-report game."""

    def __init__(self, amount):
        if amount <= 0:
            raise ParameterError("deposit must be positive")
        self.amount = amount
        self.held = {}
        self.balances = {}
        self.confiscated = 0
        self.transfers = []

    def collect(self, clients):
        for client in clients:
            self.held[client] = self.amount
            self.balances[client] = self.balances.get(client, 0) - self.amount

    def release(self, clients=None):
        for client in list(self.held if clients is None else clients):
            self.balances[client] = self.balances.get(client, 0) + self.held.pop(client, 0)

    def transfer(self, src, dst, amount=None):
        amount = self.amount if amount is None else amount
        taken = min(amount, self.held.get(src, 0))
        self.held[src] = self.held.get(src, 0) - taken
        self.balances[dst] = self.balances.get(dst, 0) + taken
        self.transfers.append((src, dst, taken))
        return taken

    def confiscate(self, client):
        taken = self.held.pop(client, 0)
        self.confiscated += taken
        self.transfers.append((client, None, taken))
        return taken

    def report(self, reporter, accused, proven):
        """A proven report moves the accused's deposit to the reporter; a false one costs the reporter."""
        if proven:
            return self.transfer(accused, reporter)
        return -self.confiscate(reporter)


@dataclass
class AttackOutcome:
    victim: int
    recovered: EncodedUpdate = None
    detected: bool = False
    transfers: list = field(default_factory=list)
    strategies: tuple = ()
    success: bool = False


def _open(delivery, observer, directory, suite):
    try:
        envelope = SignedEnvelope.from_bytes(delivery.wire)
        key = directory.key_for(envelope.sender, observer)
        return EncodedUpdate.from_bytes(suite.decrypt(envelope.ciphertext, key))
    except (AuthenticationError, KeyEstablishmentRequiredError, ParameterError, ShapeError):
        return None


def _minus(a, b):
    return EncodedUpdate(ParameterVector(a.packed.values - b.packed.values, a.fmt))


def curious_observer_audit(transcript, observer, directory, suite, noise=None, own_update=None,
                           differencing=False):
    """Every plaintext the observer can derive from what it received and what it holds.

    The leader also knows the mask; with `differencing` the observer subtracts what it
    sent earlier and its own update from each later receipt.
    """
    received = [v for v in (_open(d, observer, directory, suite) for d in transcript.received_by(observer))
                if v is not None]
    derived = set(received)
    if noise is not None:
        derived |= {r.remove_mask(noise) for r in received}
    if differencing:
        sent = [v for v in (_open(d, d.recipient, directory, suite) for d in transcript.deliveries
                            if d.sender == observer) if v is not None]
        derived |= {_minus(r, s) for r in received for s in sent}
        if own_update is not None:
            derived |= {_minus(r, own_update) for r in received}
            if noise is not None:
                derived |= {_minus(r.remove_mask(noise), own_update) for r in received}
    return derived


def find_leaks(transcript, updates, directory, suite, leader, noise, differencing=False):
    """Map each observer to the other clients whose individual update it can derive."""
    leaks = {}
    observers = {d.recipient for d in transcript.deliveries} | {leader}
    for observer in sorted(observers):
        derived = curious_observer_audit(transcript, observer, directory, suite,
                                         noise=noise if observer == leader else None,
                                         own_update=updates.get(observer), differencing=differencing)
        exposed = {client for client, x in updates.items() if client != observer and x in derived}
        if exposed:
            leaks[observer] = exposed
    return leaks


def _route_position(transcript, b, c, victim):
    forwards = [d for d in transcript.deliveries if d.kind == "forward"]
    for into, out in zip(forwards, forwards[1:]):
        if (into.sender, into.recipient, out.sender, out.recipient) == (b, victim, victim, c):
            return into, out
    raise AttackInfeasibleError(f"{b} and {c} are not directly around {victim} on the route")


def execute_collusion(b, c, victim, transcript, directory, suite, true_update, strategies, deposits=None):
    """B shares what it sent to the victim with C, who subtracts it from what the victim passed on."""
    if b == c:
        raise AttackInfeasibleError("collusion needs two distinct clients")
    into, out = _route_position(transcript, b, c, victim)
    sb, sc = strategies
    outcome = AttackOutcome(victim, strategies=(sb, sc))
    if sb is Strategy.COLLUDE and sc is Strategy.COLLUDE:
        before, after = _open(into, victim, directory, suite), _open(out, c, directory, suite)
        outcome.recovered = _minus(after, before)
        outcome.success = outcome.recovered == true_update
        logger.info("collusion %d/%d against %d: %s", b, c, victim, "recovered" if outcome.success else "failed")
        return outcome
    outcome.detected = sb is not sc
    if deposits is not None and outcome.detected:
        # the colluding side is proven by its message in the ledger
        reporter, accused = (c, b) if sb is Strategy.COLLUDE else (b, c)
        deposits.report(reporter, accused, proven=True)
        outcome.transfers = list(deposits.transfers)
    return outcome


def mutual_false_report(b, c, deposits):
    deposits.report(b, c, proven=False)
    deposits.report(c, b, proven=False)
    return list(deposits.transfers)


@dataclass
class ClaimVerdict:
    claimer: int
    accepted: bool
    rejected_by: frozenset
    reason: str


def claim_message(claimer, tick):
    return _CLAIM.pack(b"HOLD", claimer, tick)


def inject_byzantine_claim(claimer, round_, forge_signature=False):
    """Broadcast "I hold the aggregate"; honest clients check it against the broadcast ledger."""
    clients, suite, tick = round_.clients, round_.suite, round_.clock.tick
    message = claim_message(claimer, tick)
    secret = clients[claimer].secret
    if forge_signature:
        secret, _ = suite.generate_keypair(f"forged-{claimer}-{tick}")
    signature = suite.sign(message, secret)
    record = round_.ledger.broadcast(claimer, "claim", tick)
    witnesses = frozenset(n for n in record.reached if n != claimer and n in clients and clients[n].alive
                          and not clients[n].flagged)
    if not suite.verify(message, signature, clients[claimer].public):
        accepted, reason = False, "signature"
    elif round_.ledger.holder() != claimer:
        accepted, reason = False, "ledger"
    else:
        accepted, reason = True, ""
    round_.transcript.record(tick, claimer, "claim-accepted" if accepted else "claim-rejected", message)
    if not accepted:
        clients[claimer].flagged = True
        round_.state.malicious.add(claimer)
    return ClaimVerdict(claimer, accepted, frozenset() if accepted else witnesses, reason)


def inject_envelopes(round_, count, rng, mode="mutate"):
    """Push `count` mutated or replayed copies of past deliveries at their recipients."""
    if mode not in INJECTION_MODES:
        raise ParameterError(f"unknown injection mode '{mode}'")
    deliveries = [d for d in round_.transcript.deliveries if round_.clients[d.recipient].alive]
    accepted = 0
    for _ in range(count if deliveries else 0):
        delivery = deliveries[int(rng.integers(len(deliveries)))]
        wire = bytearray(delivery.wire)
        if mode == "mutate":
            wire[int(rng.integers(len(wire)))] ^= 1 << int(rng.integers(8))
        accepted += round_.receive_injected(delivery.recipient, bytes(wire))
    return accepted
