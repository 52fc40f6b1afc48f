"""
PPT round state machine and its deterministic discrete-event clock.

A round starts at the leader, which masks its own encoded update with fresh noise.
The payload walks the target clients depth-first: each hop is broadcast to the
neighbourhood, encrypted under the pair's communication key, signed with a
timestamp, verified and decrypted by the recipient, which adds its own update the
first time it is reached. The walk backtracks along the DFS stack and ends at the
leader, which removes the noise and uploads the aggregate to the server.
"""

import hashlib
import heapq
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import networkx as nx
import numpy as np

from pptfl.crypto import DEFAULT_FRESHNESS_WINDOW, SignedEnvelope, sign_envelope, verify_envelope
from pptfl.errors import (AbortRoundError, AuthenticationError, DegenerateRoundError, ForgeryError,
                          KeyEstablishmentRequiredError, ParameterError, RecipientDroppedError, ReplayError,
                          ShapeError)
from pptfl.model import EncodedUpdate

logger = logging.getLogger(__name__)

DETECTION_TICKS = 2
MAX_SEND_ATTEMPTS = 2


class Role(str, Enum):
    POTENTIAL = "potential"
    TARGET = "target"
    LEADER = "leader"


class Hop(Enum):
    BACKTRACK = "backtrack"
    DONE = "done"


BACKTRACK = Hop.BACKTRACK
DONE = Hop.DONE


@dataclass
class ClientState:
    id: int
    role: Role
    secret: object
    public: bytes
    neighbors: frozenset = frozenset()
    update: EncodedUpdate = None
    visited: bool = False
    pending: EncodedUpdate = None
    deposit: int = 0
    dropout_tick: int = None
    alive: bool = True
    flagged: bool = False
    seen_envelopes: set = field(default_factory=set)


@dataclass
class AggregationState:
    leader: int
    participants: set
    deadline: int
    route: list = field(default_factory=list)
    visited: set = field(default_factory=set)
    excluded: set = field(default_factory=set)
    contributors: set = field(default_factory=set)
    running: EncodedUpdate = None
    holder: int = None
    last_handoff: tuple = None  # (sender, payload sent, contributors at send time)
    join_cutoff: bool = False
    backtrack_forced: bool = False
    target_count: int = 0
    transmissions: int = 0
    retries: int = 0
    reroutes: int = 0
    dropped: set = field(default_factory=set)
    rejected_joins: list = field(default_factory=list)
    accepted_joins: list = field(default_factory=list)
    malicious: set = field(default_factory=set)
    rejected_injections: int = 0
    accepted_injections: int = 0
    hops: list = field(default_factory=list)  # (tick, sender, recipient, kind)

    @property
    def completed_targets(self):
        return len(self.visited & self.participants)

    @property
    def join_threshold(self):
        return math.ceil(self.target_count / 2)


@dataclass(frozen=True)
class BroadcastRecord:
    actor: int
    action: str
    tau: int
    detail: tuple
    reached: frozenset


class BroadcastLedger:
    """Append-only neighbourhood broadcast log, flooded over live clients."""

    def __init__(self, graph):
        self.graph = graph
        self.records = []
        self._dead = frozenset()
        self._components = None

    def mark_dead(self, client):
        self._dead = self._dead | {client}
        self._components = None

    def _component(self, actor):
        if self._components is None:
            alive = [n for n in range(self.graph.node_count) if n not in self._dead]
            g = self.graph.subgraph(alive).to_networkx()
            g.remove_nodes_from(self._dead)
            self._components = {}
            for comp in nx.connected_components(g):
                frozen = frozenset(comp)
                for node in comp:
                    self._components[node] = frozen
        return self._components.get(actor, frozenset({actor}))

    def broadcast(self, actor, action, tau, **detail):
        record = BroadcastRecord(actor, action, tau, tuple(sorted(detail.items())), self._component(actor))
        self.records.append(record)
        return record

    def latest(self, action, **match):
        for record in reversed(self.records):
            detail = dict(record.detail)
            if record.action == action and all(detail.get(k) == v for k, v in match.items()):
                return record
        return None

    def holder(self):
        """Client that most recently confirmed receipt of the aggregating payload."""
        record = next((r for r in reversed(self.records) if r.action in ("aggregated", "relayed", "start")), None)
        return None if record is None else record.actor


@dataclass(order=True)
class SimEvent:
    tick: int
    seq: int
    kind: str = field(compare=False)
    data: dict = field(compare=False, default_factory=dict)


class SimClock:
    """Discrete time plus an event queue ordered by (tick, sequence)."""

    def __init__(self, seed=0, start=0):
        self.tick = start
        self.rng = np.random.default_rng(seed)
        self._queue = []
        self._seq = itertools.count()

    def schedule(self, tick, kind, **data):
        event = SimEvent(tick, next(self._seq), kind, data)
        heapq.heappush(self._queue, event)
        return event

    def advance(self, ticks=1):
        self.tick += ticks

    def due(self):
        while self._queue and self._queue[0].tick <= self.tick:
            yield heapq.heappop(self._queue)

    def pending(self):
        return len(self._queue)


@dataclass(frozen=True)
class Delivery:
    tick: int
    sender: int
    recipient: int
    kind: str
    wire: bytes


class Transcript:
    """Hashable record of every protocol action, plus the raw deliveries for audits."""

    def __init__(self):
        self.records = []
        self.deliveries = []

    def record(self, tick, actor, action, payload=b""):
        self.records.append({"tick": tick, "actor": actor, "action": action,
                             "payload_hash": hashlib.sha256(payload).hexdigest()[:16]})

    def deliver(self, delivery):
        self.deliveries.append(delivery)

    def to_jsonl(self):
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def digest(self):
        return hashlib.sha256(self.to_jsonl().encode()).hexdigest()

    def received_by(self, client):
        return [d for d in self.deliveries if d.recipient == client]


def select_leader(targets, server_adjacent, history, seed):
    """Prefer a server-adjacent target that completed the protocol before."""
    candidates = sorted(set(targets) & set(server_adjacent))
    if not candidates:
        raise AbortRoundError("no target client is adjacent to the server")
    preferred = sorted(set(candidates) & set(history))
    pool = preferred or candidates
    return int(np.random.default_rng(seed).choice(pool))


def next_hop(current, state, graph):
    """Lowest-id unvisited participant neighbour, else BACKTRACK, else DONE at the leader."""
    if not state.route or state.route[-1] != current:
        raise ParameterError(f"client {current} is not on top of the route stack")
    at_leader = len(state.route) == 1
    if not state.backtrack_forced:
        for neighbor in sorted(graph.neighbors(current)):
            if neighbor in state.participants and neighbor not in state.visited and neighbor not in state.excluded:
                return neighbor
    return DONE if at_leader else BACKTRACK


def enforce_termination(state, clock):
    if state.completed_targets >= state.join_threshold:
        state.join_cutoff = True
    if clock.tick >= math.ceil(2 * state.deadline / 3) and not state.backtrack_forced:
        state.backtrack_forced = True
        logger.debug("tick %d: forced backtrack", clock.tick)
    if clock.tick > state.deadline:
        raise AbortRoundError(f"payload not back at leader by tick {state.deadline}")
    return state


def admit_new_client(new, state, directory, graph):
    """Accept a late joiner before half the targets completed, if it holds keys to them."""
    if state.join_cutoff or state.completed_targets >= state.join_threshold:
        state.rejected_joins.append(new)
        return False
    linked = [n for n in graph.neighbors(new) if n in state.participants and directory.has_key(new, n)]
    if not linked:
        state.rejected_joins.append(new)
        raise KeyEstablishmentRequiredError(f"client {new} has no communication key with any participant")
    state.participants.add(new)
    state.target_count += 1
    state.accepted_joins.append(new)
    return True


@dataclass
class RoundOutcome:
    aggregate: EncodedUpdate
    contributors: frozenset
    leader: int
    transmissions: int
    retries: int
    reroutes: int
    dropouts: frozenset
    rejected_joins: tuple
    accepted_joins: tuple
    malicious: frozenset
    rejected_injections: int
    accepted_injections: int
    aborted: bool
    abort_reason: str
    transcript_hash: str
    hops: tuple
    noise: np.ndarray = None

    @property
    def total_weight(self):
        return 0.0 if self.aggregate is None else self.aggregate.weight


class AggregationRound:
    """One PPT aggregation round over the secure graph of a keyed network."""

    def __init__(self, graph, directory, suite, clients, targets, leader, noise, deadline,
                 clock=None, transcript=None, window=DEFAULT_FRESHNESS_WINDOW, shortcut_return=False,
                 server=None, tamper=None, revoke_seed=0):
        if leader not in targets:
            raise ParameterError(f"leader {leader} is not a target client")
        self.graph = graph
        self.directory = directory
        self.suite = suite
        self.clients = clients
        self.noise = noise
        self.clock = clock or SimClock()
        self.transcript = transcript if transcript is not None else Transcript()
        self.ledger = BroadcastLedger(graph)
        self.window = window
        self.shortcut_return = shortcut_return
        self.server = server
        self.tamper = tamper
        self.revoke_seed = revoke_seed
        self.state = AggregationState(leader=leader, participants=set(targets), deadline=deadline,
                                      target_count=len(targets))
        for client in clients.values():
            if not client.alive:
                self.state.dropped.add(client.id)
                self.ledger.mark_dead(client.id)

    # event handling

    def _process_events(self):
        for event in self.clock.due():
            if event.kind == "dropout":
                self._drop(event.data["client"])
            elif event.kind == "join":
                try:
                    accepted = admit_new_client(event.data["client"], self.state, self.directory, self.graph)
                except KeyEstablishmentRequiredError as e:
                    logger.debug("join refused: %s", e)
                    accepted = False
                self.ledger.broadcast(event.data["client"], "join", self.clock.tick, accepted=accepted)
                self.transcript.record(self.clock.tick, event.data["client"],
                                       "join-accepted" if accepted else "join-rejected")
            elif event.kind == "inject":
                self.receive_injected(event.data["recipient"], event.data["wire"])
            elif event.kind == "call":
                event.data["fn"](self)

    def _drop(self, client_id):
        client = self.clients.get(client_id)
        if client is None or not client.alive:
            return
        client.alive = False
        self.state.dropped.add(client_id)
        self.ledger.mark_dead(client_id)
        self.transcript.record(self.clock.tick, client_id, "dropout")
        if client_id == self.state.leader:
            raise AbortRoundError(f"leader {client_id} dropped out")
        if client_id == self.state.holder:
            self.clock.advance(DETECTION_TICKS)
            self.handle_dropout(client_id)

    # transport

    def _verify(self, recipient, wire, expected_sender, tau):
        envelope = SignedEnvelope.from_bytes(wire)
        if envelope.sender != expected_sender:
            raise ForgeryError(f"envelope claims sender {envelope.sender}, expected {expected_sender}")
        sender = self.clients[envelope.sender]
        verify_envelope(self.suite, envelope, sender.public, self.clock.tick, self.window, broadcast_tau=tau)
        fingerprint = hashlib.sha256(wire).digest()
        receiver = self.clients[recipient]
        if fingerprint in receiver.seen_envelopes:
            raise ReplayError(f"client {recipient} already processed this envelope")
        plaintext = self.suite.decrypt(envelope.ciphertext, self.directory.key_for(envelope.sender, recipient))
        try:
            payload = EncodedUpdate.from_bytes(plaintext)
        except (ShapeError, ParameterError) as e:
            raise AuthenticationError(f"undecodable payload: {e}") from e
        receiver.seen_envelopes.add(fingerprint)
        return payload

    def receive_injected(self, recipient, wire):
        """An envelope nobody announced: accepted only if it matches the latest intent to `recipient`."""
        intent = self.ledger.latest("intent", to=recipient)
        try:
            if intent is None:
                raise ForgeryError("no announced transmission to this client")
            self._verify(recipient, wire, intent.actor, intent.tau)
        except (AuthenticationError, KeyEstablishmentRequiredError) as e:
            self.state.rejected_injections += 1
            self.transcript.record(self.clock.tick, recipient, "reject-injected", wire)
            logger.debug("client %d rejected injected envelope: %s", recipient, e)
            return False
        self.state.accepted_injections += 1
        self.transcript.record(self.clock.tick, recipient, "accept-injected", wire)
        return True

    def forward_payload(self, sender, recipient, kind="forward"):
        """Hand the running sum from sender to recipient: broadcast, encrypt, sign, verify, decrypt, add."""
        state = self.state
        target = self.clients[recipient]
        if not target.alive:
            state.transmissions += 1
            state.retries += 1
            self.transcript.record(self.clock.tick, sender, "no-answer")
            self.clock.advance(DETECTION_TICKS)
            raise RecipientDroppedError(recipient)
        key = self.directory.key_for(sender, recipient)
        payload = state.running.to_bytes()
        for attempt in range(MAX_SEND_ATTEMPTS):
            tau = self.clock.tick
            self.ledger.broadcast(sender, "intent", tau, to=recipient)
            envelope = sign_envelope(self.suite, self.suite.encrypt(payload, key), tau,
                                     self.clients[sender].secret, sender)
            wire = envelope.to_bytes()
            if self.tamper is not None:
                wire = self.tamper(wire, sender, recipient, attempt)
            self.clock.advance(1)
            state.transmissions += 1
            self.transcript.deliver(Delivery(self.clock.tick, sender, recipient, kind, wire))
            try:
                received = self._verify(recipient, wire, sender, tau)
                break
            except AuthenticationError as e:
                self.transcript.record(self.clock.tick, recipient, "reject", wire)
                logger.debug("client %d rejected envelope from %d: %s", recipient, sender, e)
                if attempt + 1 < MAX_SEND_ATTEMPTS:
                    state.retries += 1
        else:
            self._flag_malicious(sender)
            return state
        before = frozenset(state.contributors)
        if recipient in state.participants and recipient not in state.visited and target.update is not None:
            state.running = EncodedUpdate(received.packed + target.update.packed)
            state.contributors.add(recipient)
            action = "aggregated"
        else:
            state.running = received
            action = "relayed"
        state.visited.add(recipient)
        target.visited = True
        state.last_handoff = (sender, received, before)
        state.holder = recipient
        if kind == "forward":
            state.route.append(recipient)
        state.hops.append((self.clock.tick, sender, recipient, kind))
        self.ledger.broadcast(recipient, action, self.clock.tick, source=sender)
        self.transcript.record(self.clock.tick, recipient, f"{kind}:{action}", wire)
        return state

    def _flag_malicious(self, sender):
        state = self.state
        self.clients[sender].flagged = True
        state.malicious.add(sender)
        self.ledger.broadcast(sender, "flagged", self.clock.tick)
        self.transcript.record(self.clock.tick, sender, "flagged-malicious")
        poisoned = set(self.directory.rings[sender].ids) if sender in self.directory.rings else set()
        if poisoned:
            self.directory.revoke(poisoned, self.graph, self.revoke_seed)
            self.graph = self.directory.secure_graph(self.graph)
        if sender == state.leader:
            raise AbortRoundError(f"leader {sender} failed verification")
        self.clients[sender].alive = False
        self.ledger.mark_dead(sender)
        self.handle_dropout(sender)

    def handle_dropout(self, dropped):
        """Reroute around a silent client; if it held the payload, the last sender resends."""
        state = self.state
        if dropped == state.leader:
            raise AbortRoundError(f"leader {dropped} dropped out")
        state.excluded.add(dropped)
        state.dropped.add(dropped)
        self.ledger.broadcast(dropped, "dropout", self.clock.tick)
        if dropped != state.holder:
            return state
        sender, sent, before = state.last_handoff
        if not self.clients[sender].alive:
            raise AbortRoundError(f"payload lost: {dropped} and its sender {sender} are both offline")
        state.running = sent
        state.contributors = set(before)
        if dropped in state.route:
            state.route.remove(dropped)
        state.holder = sender
        self.transcript.record(self.clock.tick, sender, "resend")
        if state.route[-1] != sender:
            self._relay(sender, state.route[-1])
        return state

    def _relay(self, src, dst):
        """Reach a non-adjacent stack ancestor through live, already-visited participants."""
        state = self.state
        allowed = {n for n in state.visited if self.clients[n].alive} | {src, dst}
        g = self.graph.subgraph(allowed).to_networkx()
        try:
            path = nx.shortest_path(g, src, dst)
        except nx.NetworkXNoPath:
            raise AbortRoundError(f"no live route from {src} back to {dst}") from None
        for a, b in zip(path, path[1:]):
            state.reroutes += 1
            self.forward_payload(a, b, kind="relay")
        return state

    def _exploration_finished(self):
        state = self.state
        remaining = state.participants - state.visited - state.excluded
        if not remaining:
            return True
        alive = [n for n in state.participants if self.clients[n].alive]
        reachable = nx.node_connected_component(self.graph.subgraph(alive).to_networkx(), state.leader)
        return not (remaining & reachable)

    def _backtrack(self):
        state = self.state
        holder = state.holder
        if (self.shortcut_return and holder != state.leader and self.graph.has_edge(holder, state.leader)
                and self._exploration_finished()):
            state.route = [state.leader]
        else:
            state.route.pop()
        while True:
            parent = state.route[-1]
            if self.graph.has_edge(holder, parent) and self.directory.has_key(holder, parent):
                try:
                    self.forward_payload(holder, parent, kind="backtrack")
                    return
                except RecipientDroppedError:
                    self.handle_dropout(parent)
                    state.route.pop()
                    continue
            if not self.clients[parent].alive:
                self.handle_dropout(parent)
                state.route.pop()
                continue
            self._relay(holder, parent)
            return

    def start(self):
        state = self.state
        leader = self.clients[state.leader]
        if not leader.alive:
            raise AbortRoundError(f"leader {state.leader} is offline")
        state.route = [state.leader]
        state.visited = {state.leader}
        state.contributors = {state.leader}
        state.holder = state.leader
        state.running = leader.update.add_mask(self.noise)
        self.ledger.broadcast(state.leader, "start", self.clock.tick)
        self.transcript.record(self.clock.tick, state.leader, "start")

    def step(self):
        """Advance the walk by one decision. Returns False once the payload is home."""
        state = self.state
        self._process_events()
        enforce_termination(state, self.clock)
        hop = next_hop(state.holder, state, self.graph)
        if hop is DONE:
            return False
        if hop is BACKTRACK:
            self._backtrack()
            return True
        if not self.directory.has_key(state.holder, hop):
            state.excluded.add(hop)
            return True
        try:
            self.forward_payload(state.holder, hop)
        except RecipientDroppedError:
            self.handle_dropout(hop)
        return True

    def finalize_round(self):
        """Leader removes the mask, signs and uploads; the server verifies and decodes."""
        state = self.state
        if state.holder != state.leader:
            raise AbortRoundError("payload is not back at the leader")
        total = state.running.remove_mask(self.noise)
        if self.server is not None:
            total = self.server.receive(self, state.leader, total)
        if total.weight_raw <= 0:
            raise DegenerateRoundError("aggregated weight is zero")
        self.transcript.record(self.clock.tick, state.leader, "upload", total.to_bytes())
        return total

    def _outcome(self, aggregate, aborted=False, reason=""):
        state = self.state
        return RoundOutcome(
            aggregate=aggregate, contributors=frozenset(state.contributors) if not aborted else frozenset(),
            leader=state.leader, transmissions=state.transmissions, retries=state.retries,
            reroutes=state.reroutes, dropouts=frozenset(state.dropped),
            rejected_joins=tuple(state.rejected_joins), accepted_joins=tuple(state.accepted_joins),
            malicious=frozenset(state.malicious), rejected_injections=state.rejected_injections,
            accepted_injections=state.accepted_injections, aborted=aborted, abort_reason=reason,
            transcript_hash=self.transcript.digest(), hops=tuple(state.hops), noise=self.noise)

    def run(self):
        try:
            self.start()
            while self.step():
                pass
            aggregate = self.finalize_round()
        except (AbortRoundError, DegenerateRoundError) as e:
            self.transcript.record(self.clock.tick, self.state.leader, "abort")
            logger.info("round aborted: %s", e)
            return self._outcome(None, aborted=True, reason=str(e))
        return self._outcome(aggregate)


class Server:
    """Honest-but-curious aggregator reached through the leader's uplink key."""

    def __init__(self, suite, link_keys):
        self.suite = suite
        self.link_keys = link_keys
        self.received = []

    def receive(self, round_, leader, total):
        key = self.link_keys.get(leader)
        if key is None:
            raise AbortRoundError(f"leader {leader} has no uplink to the server")
        client = round_.clients[leader]
        tick = round_.clock.tick
        envelope = sign_envelope(self.suite, self.suite.encrypt(total.to_bytes(), key), tick, client.secret, leader)
        wire = envelope.to_bytes()
        if round_.tamper is not None:
            wire = round_.tamper(wire, leader, "server", 0)
        try:
            envelope = SignedEnvelope.from_bytes(wire)
            verify_envelope(self.suite, envelope, client.public, tick, round_.window)
            upload = EncodedUpdate.from_bytes(self.suite.decrypt(envelope.ciphertext, key))
        except (AuthenticationError, ShapeError) as e:
            raise AbortRoundError(f"server rejected the upload: {e}") from e
        self.received.append(upload)
        return upload
