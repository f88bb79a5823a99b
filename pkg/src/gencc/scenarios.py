"""Experiment configuration: scenarios, requirement vectors and config files.

Config files are YAML::

    schema_version: 1
    scenario: broadband
    connections:
      - {min_mbps: 1}
      - {min_mbps: 10, max_mbps: 12}
    repetitions: 10
    duration_s: 30
    seed: 0
    controller: {epsilon: 0.05}

``max_mbps`` defaults to 1.5 x ``min_mbps``.  ``connections`` may be omitted,
in which case the five-connection reference set for the scenario is used.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .controller import ControllerConfig
from .netsim import SCENARIOS, LinkConfig, scenario_link

SCHEMA_VERSION = 1
MAX_TO_MIN = 1.5
OVERSUBSCRIPTION = 1.4
SPREAD = 10.0
N_CONNECTIONS = 5


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RequirementSet:
    pairs: tuple = ()

    def __post_init__(self):
        pairs = tuple((float(a), float(b)) for a, b in self.pairs)
        object.__setattr__(self, "pairs", pairs)
        if not pairs:
            raise ConfigError("connections: at least one connection is required")
        for i, (a, b) in enumerate(pairs):
            if not a > 0:
                raise ConfigError(f"connections[{i}].min_mbps must be positive, got {a}")
            if not b > a:
                raise ConfigError(f"connections[{i}].max_mbps must exceed min_mbps, got {b} <= {a}")

    @classmethod
    def from_minimums(cls, minimums, ratio: float = MAX_TO_MIN) -> RequirementSet:
        return cls(tuple((a, ratio * a) for a in minimums))

    @property
    def mins(self) -> list[float]:
        return [a for a, _ in self.pairs]

    @property
    def maxs(self) -> list[float]:
        return [b for _, b in self.pairs]

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)


def paper_requirements(scenario: str) -> RequirementSet:
    """Five over-subscribed connections whose minimums span one decade.

    Minimums are geometrically spaced (neighbour ratio 10**(1/4)) and scaled
    so that they sum to 1.4x the link capacity; maximums are 1.5x minimums.
    """
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}; expected one of {sorted(SCENARIOS)}")
    capacity = SCENARIOS[scenario][0]
    ratio = SPREAD ** (1.0 / (N_CONNECTIONS - 1))
    shape = [ratio**i for i in range(N_CONNECTIONS)]
    scale = OVERSUBSCRIPTION * capacity / sum(shape)
    return RequirementSet.from_minimums([scale * s for s in shape])


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str
    requirements: RequirementSet
    repetitions: int = 10
    duration_s: float = 30.0
    seed: int = 0
    controller: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario: unknown scenario {self.scenario!r}")
        if not isinstance(self.repetitions, int) or self.repetitions < 1:
            raise ConfigError(f"repetitions must be an integer >= 1, got {self.repetitions!r}")
        if not self.duration_s > 0:
            raise ConfigError(f"duration_s must be positive, got {self.duration_s}")
        known = {f.name for f in dataclasses.fields(ControllerConfig)}
        unknown = set(self.controller) - known
        if unknown:
            raise ConfigError(f"controller: unknown field(s) {sorted(unknown)}")
        try:
            ControllerConfig(**self.controller)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"controller: {exc}") from None

    @property
    def link(self) -> LinkConfig:
        return scenario_link(self.scenario)

    @property
    def controller_config(self) -> ControllerConfig:
        return ControllerConfig(**self.controller)

    def seeds(self) -> list[int]:
        return [self.seed + rep for rep in range(self.repetitions)]

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "scenario": self.scenario,
            "connections": [{"min_mbps": a, "max_mbps": b} for a, b in self.requirements],
            "repetitions": self.repetitions,
            "duration_s": self.duration_s,
            "seed": self.seed,
            "controller": dict(self.controller),
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping at the top level")
    allowed = {"schema_version", "scenario", "connections", "repetitions", "duration_s", "seed", "controller"}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level field(s) {sorted(unknown)}")
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version {version!r} is not supported (expected {SCHEMA_VERSION})")
    if "scenario" not in data:
        raise ConfigError("scenario: field is required")
    scenario = data["scenario"]
    connections = data.get("connections")
    if connections is None:
        if scenario not in SCENARIOS:
            raise ConfigError(f"scenario: unknown scenario {scenario!r}")
        reqs = paper_requirements(scenario)
    else:
        if not isinstance(connections, list):
            raise ConfigError("connections must be a list")
        pairs = []
        for i, conn in enumerate(connections):
            if isinstance(conn, (int, float)):
                conn = {"min_mbps": conn}
            if not isinstance(conn, dict) or "min_mbps" not in conn:
                raise ConfigError(f"connections[{i}].min_mbps is required")
            extra = set(conn) - {"min_mbps", "max_mbps"}
            if extra:
                raise ConfigError(f"connections[{i}]: unknown field(s) {sorted(extra)}")
            a = conn["min_mbps"]
            b = conn.get("max_mbps")
            try:
                a = float(a)
                b = MAX_TO_MIN * a if b is None else float(b)
            except (TypeError, ValueError):
                raise ConfigError(f"connections[{i}]: rates must be numbers") from None
            pairs.append((a, b))
        reqs = RequirementSet(tuple(pairs))
    return ExperimentConfig(
        scenario=scenario,
        requirements=reqs,
        repetitions=data.get("repetitions", 10),
        duration_s=float(data.get("duration_s", 30.0)),
        seed=int(data.get("seed", 0)),
        controller=dict(data.get("controller") or {}),
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark is not None else "unknown line"
        raise ConfigError(f"{path}: parse error at {where}: {getattr(exc, 'problem', exc)}") from None
    try:
        return config_from_dict(data)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def write_config(config: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
    return path


def default_config(scenario: str, **changes) -> ExperimentConfig:
    return ExperimentConfig(scenario=scenario, requirements=paper_requirements(scenario)).replace(**changes)
