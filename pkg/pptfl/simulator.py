"""
Multi-round PPT training driver and the experiment helpers built on it.

`ScenarioRun` wires topology, keying, crypto, the synthetic task and the round state
machine together for one `ScenarioConfig`; everything random is derived from the
scenario seed, so a run is a pure function of (config, seed).
"""

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from pptfl import results_db
from pptfl.adversary import (AdversaryProfile, DepositBook, Strategy, execute_collusion, find_leaks,
                             inject_byzantine_claim, inject_envelopes, rational_strategy)
from pptfl.crypto import NOISE_GENERATORS, generate_noise, make_suite
from pptfl.errors import AbortRoundError, AttackInfeasibleError, ConfigError
from pptfl.keying import encode_challenge_log, establish_network_keys, generate_pool, seed_int
from pptfl.model import FixedPoint, aggregate, encode, fedavg_oracle, global_update, local_update, \
    make_synthetic_task, train_local
from pptfl.protocol import AggregationRound, ClientState, Role, Server, SimClock, Transcript, select_leader
from pptfl.topology import (generate_random_graph, is_connected, key_graph, read_edge_list, shared_key_probability,
                            trial_seeds)

logger = logging.getLogger(__name__)

ROUND_HEADER = ["round", "total_weight", "checkpoint", "transmissions", "retries", "reroutes", "dropouts",
                "rejected_joins", "aggregated", "aborted", "transcript_hash"]
ATTACK_HEADER = ["scenario", "adversary_kind", "success", "deposits_moved"]


@dataclass
class Network:
    graph: object
    directory: object
    suite: object
    keypairs: dict
    server_adjacent: frozenset
    link_keys: dict

    @property
    def secure(self):
        return self.directory.secure_graph(self.graph)


def build_network(cfg, suite, generation=0):
    """Physical graph, key establishment, signing keys and server uplinks. `generation` bumps on rekey."""
    n = cfg.topology.n_potential
    if cfg.topology.graph_file:
        graph = read_edge_list(cfg.topology.graph_file)
        if graph.node_count != n:
            raise ConfigError(f"{cfg.topology.graph_file} has {graph.node_count} nodes, expected {n}")
    else:
        graph = generate_random_graph(n, cfg.edge_probability, seed_int(cfg.seed, "graph"))
    pool = generate_pool(cfg.keying.pool_size, seed_int(cfg.seed, "pool", generation))
    directory = establish_network_keys(graph, pool, cfg.keying.ring_size, suite,
                                       seed_int(cfg.seed, "keys", generation), cfg.keying.threshold)
    keypairs = {node: suite.generate_keypair(seed_int(cfg.seed, "sign", node)) for node in range(n)}
    rng = np.random.default_rng(seed_int(cfg.seed, "server"))
    server_adjacent = frozenset(int(x) for x in rng.choice(n, size=cfg.topology.server_links, replace=False))
    link_keys = {node: hashlib.blake2b(f"uplink:{cfg.seed}:{generation}:{node}".encode(), digest_size=16).digest()
                 for node in server_adjacent}
    return Network(graph, directory, suite, keypairs, server_adjacent, link_keys)


@dataclass
class RoundRecord:
    round: int
    total_weight: float
    checkpoint: str
    transmissions: int
    retries: int
    reroutes: int
    dropouts: int
    rejected_joins: int
    aggregated: int
    aborted: bool
    transcript_hash: str
    leader: int = None
    abort_reason: str = ""
    oracle_match: bool = None
    sum_match: bool = None
    full_oracle_distance: float = None
    malicious: tuple = ()
    rejected_injections: int = 0
    accepted_injections: int = 0

    def row(self):
        return {name: getattr(self, name) for name in ROUND_HEADER}


@dataclass
class ScenarioResult:
    name: str
    seed: int
    rounds: list = field(default_factory=list)
    attacks: list = field(default_factory=list)
    transcript: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)
    final_model: object = None
    final_loss: float = None
    challenges: bytes = b""
    debug_keys: dict = None

    @property
    def completed(self):
        return [r for r in self.rounds if not r.aborted]

    @property
    def transcript_hash(self):
        digest = hashlib.sha256()
        for record in self.rounds:
            digest.update(record.transcript_hash.encode())
        return digest.hexdigest()

    @property
    def oracle_ok(self):
        return all(r.oracle_match and r.sum_match for r in self.completed)

    def mean_transmissions(self):
        done = self.completed
        return float(np.mean([r.transmissions for r in done])) if done else 0.0

    def summary(self):
        return {
            "scenario": self.name,
            "seed": self.seed,
            "rounds": len({r.round for r in self.rounds}),
            "rounds_completed": len(self.completed),
            "rounds_aborted": sum(1 for r in self.rounds if r.aborted),
            "mean_transmissions": self.mean_transmissions(),
            "oracle_match": self.oracle_ok,
            "final_loss": self.final_loss,
            "attacks": len(self.attacks),
            "successful_attacks": sum(1 for a in self.attacks if a["success"]),
            "transcript_hash": self.transcript_hash,
        }


class ScenarioRun:
    def __init__(self, cfg, record_challenges=False, debug_keys=False):
        self.cfg = cfg
        self.fmt = FixedPoint(cfg.fixed_point.width, cfg.fixed_point.frac_bits)
        self.suite = make_suite(cfg.keying.suite, seed_int(cfg.seed, "suite"))
        self.network = build_network(cfg, self.suite)
        self.task = make_synthetic_task(cfg.topology.n_potential, cfg.task.dim, seed_int(cfg.seed, "task"), self.fmt,
                                        cfg.task.mean_log_samples, cfg.task.sigma, cfg.task.max_samples,
                                        empty_clients=cfg.task.empty_clients)
        rng = np.random.default_rng(seed_int(cfg.seed, "targets"))
        self.targets = frozenset(int(x) for x in rng.choice(cfg.topology.n_potential, size=cfg.protocol.n_target,
                                                               replace=False))
        self.history = set()
        self.record_challenges = record_challenges
        self.debug_keys = debug_keys

    def _local_updates(self, r, clients, M):
        cfg = self.cfg
        models, updates = {}, {}
        for client in sorted(clients):
            m = train_local(self.task, client, M, cfg.task.epochs, cfg.task.learning_rate,
                            seed=seed_int(cfg.seed, "train", r, client))
            if m is None:
                continue
            models[client] = m
            updates[client] = encode(local_update(m, M), self.task.sample_count(client))
        return models, updates

    def _noise(self, r, attempt):
        dim = self.cfg.task.dim + 1
        if not self.cfg.protocol.masking:
            return np.zeros(dim, dtype=np.int64)
        generator = seed_int(self.cfg.seed, "generator", r, attempt) % len(NOISE_GENERATORS)
        return generate_noise(dim, generator, seed_int(self.cfg.seed, "noise", r, attempt), self.fmt.width).values

    def _schedule(self, r, clock, leader, offline):
        cfg = self.cfg
        rng = np.random.default_rng(seed_int(cfg.seed, "dropouts", r))
        candidates = sorted(self.targets - {leader} - offline)
        k = min(cfg.dropouts.random, len(candidates))
        low, high = cfg.dropouts.window
        for client in rng.choice(candidates, size=k, replace=False) if k else ():
            clock.schedule(int(rng.integers(low, high + 1)), "dropout", client=int(client))
        for event in cfg.dropouts.schedule:
            if event["round"] == r:
                clock.schedule(event["tick"], "dropout", client=event["client"])
        joiners = set()
        for event in cfg.joins:
            if event["round"] != r:
                continue
            if event["client"] in self.targets:
                logger.warning("round %d: join by %d ignored, already a target", r, event["client"])
                continue
            joiners.add(event["client"])
            clock.schedule(event["tick"], "join", client=event["client"])
        return joiners

    def _clients(self, leader, updates, offline):
        secure = self.network.secure
        clients = {}
        for node in range(self.cfg.topology.n_potential):
            role = Role.LEADER if node == leader else Role.TARGET if node in self.targets else Role.POTENTIAL
            secret, public = self.network.keypairs[node]
            clients[node] = ClientState(node, role, secret, public, neighbors=secure.neighbors(node),
                                        update=updates.get(node), alive=node not in offline)
        return clients

    def _schedule_attacks(self, r, clock, results):
        for adv in self.cfg.adversaries:
            if adv.round != r:
                continue
            if adv.kind == "forger":
                rng = np.random.default_rng(seed_int(self.cfg.seed, "forger", r, adv.tick))

                def forge(round_, adv=adv, rng=rng):
                    accepted = inject_envelopes(round_, adv.count, rng, adv.mode)
                    results.append((adv, accepted > 0, 0))
                clock.schedule(adv.tick, "call", fn=forge)
            elif adv.kind == "byzantine-claimer":
                for member in adv.members:
                    def claim(round_, adv=adv, member=member):
                        verdict = inject_byzantine_claim(member, round_, adv.forge_signature)
                        results.append((adv, verdict.accepted, 0))
                    clock.schedule(adv.tick, "call", fn=claim)

    def _post_round_attacks(self, r, round_, outcome, updates, results):
        directory, suite = self.network.directory, self.suite
        contributed = {c: updates[c] for c in outcome.contributors if c in updates}
        for adv in self.cfg.adversaries:
            if adv.round != r:
                continue
            if adv.kind == "curious":
                leaks = find_leaks(round_.transcript, contributed, directory, suite, outcome.leader, outcome.noise,
                                   differencing=adv.differencing)
                observers = set(adv.members) or set(leaks)
                results.append((adv, any(o in leaks for o in observers), 0))
            elif adv.kind == "colluder-pair":
                results.append(self._collusion(adv, round_, contributed))

    def _collusion(self, adv, round_, contributed):
        forwards = [(d.sender, d.recipient) for d in round_.transcript.deliveries if d.kind == "forward"]
        if adv.members:
            b, c = adv.members
            victims = [v for (s, v), (v2, t) in zip(forwards, forwards[1:]) if s == b and v == v2 and t == c]
        else:
            triples = [(s, v, t) for (s, v), (v2, t) in zip(forwards, forwards[1:]) if v == v2 and s != t]
            if not triples:
                return adv, False, 0
            b, victims, c = triples[0][0], [triples[0][1]], triples[0][2]
        if not victims:
            logger.info("colluders %s are not positioned around any victim", adv.members)
            return adv, False, 0
        victim = victims[0]
        profile = AdversaryProfile("colluder-pair", (b, c), gain=adv.gain, deposit=adv.deposit)
        strategy = Strategy(adv.strategy) if adv.strategy else rational_strategy(profile, adv.deposits_enabled)
        book = None
        if adv.deposits_enabled:
            book = DepositBook(adv.deposit)
            book.collect(sorted(round_.state.participants))
        try:
            outcome = execute_collusion(b, c, victim, round_.transcript, self.network.directory, self.suite,
                                        contributed.get(victim), (strategy, strategy), book)
        except AttackInfeasibleError as e:
            logger.info("collusion infeasible: %s", e)
            return adv, False, 0
        if book is not None:
            book.release()
        moved = sum(amount for _, _, amount in outcome.transfers)
        return adv, outcome.success, moved

    def run_round(self, r, M, attempt=0, offline=frozenset(), excluded_leaders=frozenset()):
        cfg = self.cfg
        record_base = {"round": r, "checkpoint": ""}
        try:
            leader = select_leader(self.targets - excluded_leaders - offline, self.network.server_adjacent,
                                   self.history, seed_int(cfg.seed, "leader", r, attempt))
        except AbortRoundError as e:
            logger.warning("round %d: %s", r, e)
            transcript = Transcript()
            transcript.record(0, -1, "abort")
            record = RoundRecord(**record_base, total_weight=0.0, transmissions=0, retries=0, reroutes=0, dropouts=0,
                                 rejected_joins=0, aggregated=0, aborted=True, transcript_hash=transcript.digest(),
                                 abort_reason=str(e))
            return record, None, transcript, [], None
        clock = SimClock(seed_int(cfg.seed, "clock", r, attempt))
        joiners = self._schedule(r, clock, leader, offline)
        models, updates = self._local_updates(r, (self.targets | joiners) - offline, M)
        if leader not in updates:
            models[leader] = M
            updates[leader] = encode(self.fmt.zeros(cfg.task.dim), 0)
        attack_results = []
        self._schedule_attacks(r, clock, attack_results)
        noise = self._noise(r, attempt)
        round_ = AggregationRound(
            self.network.secure, self.network.directory, self.suite, self._clients(leader, updates, offline),
            self.targets - offline, leader, noise, cfg.deadline, clock=clock, window=cfg.protocol.freshness_window,
            shortcut_return=cfg.protocol.shortcut_return, server=Server(self.suite, self.network.link_keys),
            revoke_seed=seed_int(cfg.seed, "revoke", r))
        outcome = round_.run()
        record = RoundRecord(
            **record_base, total_weight=outcome.total_weight, transmissions=outcome.transmissions,
            retries=outcome.retries, reroutes=outcome.reroutes, dropouts=len(outcome.dropouts),
            rejected_joins=len(outcome.rejected_joins), aggregated=len(outcome.contributors),
            aborted=outcome.aborted, transcript_hash=outcome.transcript_hash, leader=leader,
            abort_reason=outcome.abort_reason, malicious=tuple(sorted(outcome.malicious)),
            rejected_injections=outcome.rejected_injections, accepted_injections=outcome.accepted_injections)
        new_model = None
        if not outcome.aborted:
            new_model = global_update(outcome.aggregate, M)
            contributors = sorted(outcome.contributors)
            weights = {c: self.task.sample_count(c) for c in contributors}
            oracle = fedavg_oracle({c: models[c] for c in contributors}, weights, M)
            record.oracle_match = oracle == new_model
            record.sum_match = aggregate(updates[c] for c in contributors) == outcome.aggregate
            everyone = sorted(self.targets & set(models))
            full = fedavg_oracle({c: models[c] for c in everyone},
                                 {c: self.task.sample_count(c) for c in everyone}, M) if everyone else new_model
            record.full_oracle_distance = float(np.linalg.norm(new_model.to_floats() - full.to_floats()))
            self._post_round_attacks(r, round_, outcome, updates, attack_results)
            self.history |= set(outcome.contributors) & self.targets
        attacks = [{"scenario": cfg.name, "adversary_kind": adv.kind, "success": bool(success),
                    "deposits_moved": int(moved)} for adv, success, moved in attack_results]
        return record, new_model, round_.transcript, attacks, outcome

    def run(self):
        cfg = self.cfg
        result = ScenarioResult(cfg.name, cfg.seed)
        if self.record_challenges:
            result.challenges = self._challenge_log()
        M = self.fmt.zeros(cfg.task.dim)
        for r in range(cfg.protocol.rounds):
            if r in cfg.keying.rekey_at_round:
                logger.info("round %d: key lifetime over, re-establishing keys", r)
                self.network = build_network(cfg, self.suite, generation=r)
                if self.record_challenges:
                    result.challenges += self._challenge_log()
            record, new_model, transcript, attacks, outcome = self.run_round(r, M)
            self._collect(result, record, transcript, attacks)
            if record.aborted and cfg.protocol.retry_aborted and record.leader is not None:
                offline = frozenset(outcome.dropouts) if outcome is not None else frozenset()
                record, new_model, transcript, attacks, _ = self.run_round(
                    r, M, attempt=1, offline=offline, excluded_leaders=frozenset({record.leader}))
                self._collect(result, record, transcript, attacks)
            if new_model is not None:
                M = new_model
                result.checkpoints[r] = M.to_bytes()
                record.checkpoint = f"checkpoints/round_{r:04d}.bin"
            logger.info("round %d: %s, %d transmissions", r, "aborted" if record.aborted else "done",
                        record.transmissions)
        result.final_model = M
        result.final_loss = self.task.loss(M)
        if self.debug_keys:
            result.debug_keys = {f"{a}-{b}": {"key": ck.key.hex(), "derivation": list(ck.derivation),
                                              "broker": ck.broker}
                                 for (a, b), ck in sorted(self.network.directory.comm_keys.items())}
        return result

    def _collect(self, result, record, transcript, attacks):
        result.rounds.append(record)
        result.transcript.extend(dict(rec, round=record.round) for rec in transcript.records)
        result.attacks.extend(attacks)

    def _challenge_log(self):
        challenges = self.network.directory.challenges
        return encode_challenge_log(ch for node in sorted(challenges) for ch in challenges[node])


def run_scenario(cfg, record_challenges=False, debug_keys=False):
    return ScenarioRun(cfg, record_challenges, debug_keys).run()


def write_outputs(result, out_dir, output=None):
    """Write transcript, CSV tables, summary, checkpoints and the results database."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if output is None or output.transcript:
        with open(out_dir / "transcript.jsonl", "w", encoding="utf-8") as f:
            for rec in result.transcript:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
    rounds = [r.row() for r in result.rounds]
    pd.DataFrame(rounds, columns=ROUND_HEADER).to_csv(out_dir / "rounds.csv", index=False)
    pd.DataFrame(result.attacks, columns=ATTACK_HEADER).to_csv(out_dir / "attacks.csv", index=False)
    with open(out_dir / "summary.yaml", "w", encoding="utf-8") as f:
        yaml.safe_dump(result.summary(), f, sort_keys=False)
    if output is None or output.checkpoints:
        (out_dir / "checkpoints").mkdir(exist_ok=True)
        for r, blob in result.checkpoints.items():
            (out_dir / "checkpoints" / f"round_{r:04d}.bin").write_bytes(blob)
    if result.challenges:
        (out_dir / "challenges.bin").write_bytes(result.challenges)
    if result.debug_keys is not None:
        with open(out_dir / "keys.debug.yaml", "w", encoding="utf-8") as f:
            yaml.safe_dump(result.debug_keys, f, sort_keys=False)
    results_db.save_results(out_dir / "results.db", result.name, rounds, result.attacks)
    return out_dir


def _dropout_trial(args):
    cfg, count, seed = args
    cfg = cfg.with_changes("dropouts", random=count).with_changes("protocol", rounds=1).with_seed(seed)
    result = run_scenario(cfg)
    done = result.completed
    return {
        "dropouts": count,
        "completed": float(bool(done)),
        "transmissions": done[0].transmissions if done else np.nan,
        "oracle_distance": done[0].full_oracle_distance if done else np.nan,
        "oracle_match": bool(done) and result.oracle_ok,
    }


def fan_out(fn, jobs, workers=1):
    """Run independent jobs in processes; results come back in job order."""
    if workers <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def dropout_series(cfg, counts, repetitions, workers=1):
    """One row per dropout count, averaged over seeded repetitions."""
    if any(c >= cfg.protocol.n_target for c in counts):
        raise ConfigError("every dropout count must be below n_target")
    seeds = trial_seeds(cfg.seed, repetitions)
    rows = fan_out(_dropout_trial, [(cfg, count, s) for count in counts for s in seeds], workers)
    frame = pd.DataFrame(rows)
    table = frame.groupby("dropouts", sort=True).agg(
        completed=("completed", "mean"), transmissions=("transmissions", "mean"),
        oracle_distance=("oracle_distance", "mean"), oracle_match=("oracle_match", "all")).reset_index()
    return table


def _sweep_row(args):
    pool_size, ring_size, n, trials, graph_trials, seed = args
    analytic = shared_key_probability(pool_size, ring_size)
    if ring_size == 0:
        return {"pool_size": pool_size, "ring_size": 0, "analytic_p": analytic, "empirical_p": 0.0,
                "connected_fraction": 0.0}
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(trials):
        a = rng.choice(pool_size, size=ring_size, replace=False)
        b = rng.choice(pool_size, size=ring_size, replace=False)
        hits += bool(np.intersect1d(a, b).size)
    connected = 0
    for s in trial_seeds(seed, graph_trials):
        rings_rng = np.random.default_rng(s)
        rings = [rings_rng.choice(pool_size, size=ring_size, replace=False) for _ in range(n)]
        connected += is_connected(key_graph(rings, pool_size))
    return {"pool_size": pool_size, "ring_size": ring_size, "analytic_p": analytic, "empirical_p": hits / trials,
            "connected_fraction": connected / graph_trials if graph_trials else np.nan}


def connectivity_sweep(pool_sizes, ring_sizes, n, trials, seed, graph_trials=50, workers=1):
    """Analytic vs sampled ring-overlap probability, plus how often the key graph is connected."""
    jobs = [(eta, l, n, trials, graph_trials, seed_int(seed, eta, l))
            for eta in pool_sizes for l in ring_sizes if 2 * l <= eta]
    return pd.DataFrame(fan_out(_sweep_row, jobs, workers),
                        columns=["pool_size", "ring_size", "analytic_p", "empirical_p", "connected_fraction"])
