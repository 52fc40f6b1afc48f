"""Scenario files: YAML experiment definitions validated into frozen dataclasses."""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from pptfl.adversary import ADVERSARY_KINDS, INJECTION_MODES, Strategy
from pptfl.errors import ConfigError
from pptfl.topology import shared_key_probability


@dataclass(frozen=True)
class TopologySpec:
    n_potential: int = 200
    edge_probability: float = None  # None: ring-overlap probability of the keying section
    graph_file: str = None
    server_links: int = 20


@dataclass(frozen=True)
class KeyingSpec:
    pool_size: int = 2000
    ring_size: int = 20
    threshold: int = 0
    suite: str = "aead"
    rekey_at_round: tuple = ()


@dataclass(frozen=True)
class ProtocolSpec:
    n_target: int = 100
    rounds: int = 1
    deadline: int = None  # ticks; None means 4 * n_target
    freshness_window: int = 10
    shortcut_return: bool = False
    masking: bool = True
    retry_aborted: bool = True


@dataclass(frozen=True)
class FixedPointSpec:
    width: int = 32
    frac_bits: int = 16


@dataclass(frozen=True)
class TaskSpec:
    dim: int = 8
    epochs: int = 1
    learning_rate: float = 0.01
    mean_log_samples: float = 3.0
    sigma: float = 0.8
    max_samples: int = 200
    empty_clients: int = 0


@dataclass(frozen=True)
class DropoutSpec:
    random: int = 0
    window: tuple = (0, 50)
    schedule: tuple = ()  # dicts: {round, client, tick}


@dataclass(frozen=True)
class AdversarySpec:
    kind: str
    members: tuple = ()
    round: int = 0
    tick: int = 5
    count: int = 0
    mode: str = "mutate"
    gain: int = 1
    deposit: int = 2
    deposits_enabled: bool = True
    strategy: str = None
    forge_signature: bool = False
    differencing: bool = False


@dataclass(frozen=True)
class OutputSpec:
    directory: str = None
    record_challenges: bool = False
    checkpoints: bool = True
    transcript: bool = True


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    seed: int = 0
    topology: TopologySpec = field(default_factory=TopologySpec)
    keying: KeyingSpec = field(default_factory=KeyingSpec)
    protocol: ProtocolSpec = field(default_factory=ProtocolSpec)
    fixed_point: FixedPointSpec = field(default_factory=FixedPointSpec)
    task: TaskSpec = field(default_factory=TaskSpec)
    dropouts: DropoutSpec = field(default_factory=DropoutSpec)
    joins: tuple = ()  # dicts: {round, client, tick}
    adversaries: tuple = ()

    @property
    def edge_probability(self):
        if self.topology.edge_probability is not None:
            return self.topology.edge_probability
        return shared_key_probability(self.keying.pool_size, self.keying.ring_size)

    @property
    def deadline(self):
        return self.protocol.deadline or 4 * self.protocol.n_target

    def with_seed(self, seed):
        return dataclasses.replace(self, seed=seed)

    def with_changes(self, section, **changes):
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})


def _build(cls, raw, where):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from e


def _events(raw, where, keys=("round", "client", "tick")):
    events = []
    for i, item in enumerate(raw or ()):
        if not isinstance(item, dict) or set(item) - set(keys) or "client" not in item:
            raise ConfigError(f"{where}[{i}]: expected a mapping with keys {list(keys)}")
        events.append({"round": int(item.get("round", 0)), "client": int(item["client"]),
                       "tick": int(item.get("tick", 0))})
    return tuple(events)


def validate(cfg):
    top, keying, proto = cfg.topology, cfg.keying, cfg.protocol
    n = top.n_potential
    checks = [
        (n >= 2, "topology.n_potential must be >= 2"),
        (top.edge_probability is None or 0.0 <= top.edge_probability <= 1.0,
         "topology.edge_probability must lie in [0, 1]"),
        (1 <= top.server_links <= n, "topology.server_links must lie in [1, n_potential]"),
        (keying.pool_size >= 1 and 1 <= keying.ring_size and 2 * keying.ring_size <= keying.pool_size,
         "keying needs 1 <= ring_size and 2 * ring_size <= pool_size"),
        (keying.threshold >= 0, "keying.threshold must be >= 0"),
        (keying.suite in ("aead", "transparent"), "keying.suite must be 'aead' or 'transparent'"),
        (1 <= proto.n_target <= n, "protocol.n_target must lie in [1, n_potential]"),
        (proto.rounds >= 0, "protocol.rounds must be >= 0"),
        (proto.deadline is None or proto.deadline >= 1, "protocol.deadline must be positive"),
        (proto.freshness_window >= 0, "protocol.freshness_window must be >= 0"),
        (0 <= cfg.dropouts.random < proto.n_target, "dropouts.random must be below n_target"),
        (len(cfg.dropouts.window) == 2 and 0 <= cfg.dropouts.window[0] <= cfg.dropouts.window[1],
         "dropouts.window must be [low, high] with 0 <= low <= high"),
        (cfg.task.empty_clients <= n, "task.empty_clients exceeds n_potential"),
        (1 <= cfg.task.dim <= 64, "task.dim must lie in [1, 64]"),
        (8 <= cfg.fixed_point.width <= 32, "fixed_point.width must lie in [8, 32]"),
        (0 <= cfg.fixed_point.frac_bits < cfg.fixed_point.width, "fixed_point.frac_bits must lie in [0, width)"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)
    for event in cfg.dropouts.schedule + cfg.joins:
        if not 0 <= event["client"] < n:
            raise ConfigError(f"client id {event['client']} out of range [0, {n})")
    for adv in cfg.adversaries:
        if adv.kind not in ADVERSARY_KINDS:
            raise ConfigError(f"unknown adversary kind '{adv.kind}'")
        if any(not 0 <= m < n for m in adv.members):
            raise ConfigError(f"adversary members {adv.members} out of range [0, {n})")
        if adv.kind == "colluder-pair" and len(adv.members) not in (0, 2):
            raise ConfigError("a colluder pair lists two members, or none to pick them from the route")
        if adv.gain <= 0 or adv.deposit <= 0:
            raise ConfigError("adversary gain and deposit must be positive")
        if adv.strategy is not None and adv.strategy not in {s.value for s in Strategy}:
            raise ConfigError(f"unknown adversary strategy '{adv.strategy}'")
        if adv.mode not in INJECTION_MODES:
            raise ConfigError(f"unknown injection mode '{adv.mode}'")
    return cfg


def scenario_from_dict(raw, default_name="scenario"):
    if not isinstance(raw, dict):
        raise ConfigError("scenario file must hold a mapping")
    sections = {"name", "seed", "topology", "keying", "protocol", "fixed_point", "task", "dropouts", "joins",
                "adversaries", "output"}
    unknown = set(raw) - sections
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    dropouts_raw = dict(raw.get("dropouts") or {})
    schedule = _events(dropouts_raw.pop("schedule", ()), "dropouts.schedule")
    dropouts = _build(DropoutSpec, dropouts_raw, "dropouts")
    cfg = ScenarioConfig(
        name=str(raw.get("name", default_name)),
        seed=int(raw.get("seed", 0)),
        topology=_build(TopologySpec, raw.get("topology"), "topology"),
        keying=_build(KeyingSpec, raw.get("keying"), "keying"),
        protocol=_build(ProtocolSpec, raw.get("protocol"), "protocol"),
        fixed_point=_build(FixedPointSpec, raw.get("fixed_point"), "fixed_point"),
        task=_build(TaskSpec, raw.get("task"), "task"),
        dropouts=dataclasses.replace(dropouts, schedule=schedule),
        joins=_events(raw.get("joins"), "joins"),
        adversaries=tuple(_build(AdversarySpec, a, f"adversaries[{i}]")
                          for i, a in enumerate(raw.get("adversaries") or ())),
    )
    return validate(cfg), _build(OutputSpec, raw.get("output"), "output")


def load_scenario(path, seed=None):
    """Read a scenario file; `seed` overrides the file's seed."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read scenario {path}: {e}") from e
    cfg, output = scenario_from_dict(raw, default_name=path.stem)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg, output
