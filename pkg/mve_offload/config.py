"""
Configuration files and environment overrides.

A server or scenario file is a JSON object. Server files hold one object per
section::

    {"server": {...}, "policy": {...}, "cache": {...},
     "latency": {...}, "storage_latency": {...}, "cost": {...}}

Scenario files hold the scenario keys at the top level and the same sections
nested inside. Unknown keys in files are ignored; every key of a section can be
overridden with ``MVE_<SECTION>__<KEY>=value`` (``MVE_SCENARIO__<KEY>`` for the
scenario keys). Override values are parsed as JSON when possible and kept as
strings otherwise; an override naming an unknown key is an error.
"""

import inspect
import json
import os

from collections.abc import Iterable, Mapping
from enum import IntEnum
from pathlib import Path
from typing import Any, NamedTuple, Optional, Union

from mve_offload.constructs import DEFAULT_MAX_CONSTRUCT_BLOCKS
from mve_offload.errors import MveConfigurationError, MveTypeError, MveValueError
from mve_offload.latency import CostModel, LatencyModel, StorageLatencyModel
from mve_offload.speculation import OffloadPolicy
from mve_offload.store import CachePolicy
from mve_offload.terrain import DEFAULT_LOOKAHEAD, DEFAULT_MAX_LOADS_PER_TICK, DEFAULT_MAX_LOCAL_GENERATIONS_PER_TICK
from mve_offload.typings import (
    BehaviorKind,
    BehaviorKindType,
    ClockMode,
    ClockModeType,
    ConstructTemplate,
    ConstructTemplateType,
    GenerationMode,
    GenerationModeType,
    RuntimeModeType,
    RuntimeType,
    ScMode,
    ScModeType,
    StorageMode,
    StorageModeType,
    TerrainMode,
    TerrainModeType,
    coerce_enum,
)
from mve_offload.world import DEFAULT_VIEW_DISTANCE


ENV_PREFIX = "MVE_"
SECTIONS = ("server", "policy", "cache", "latency", "storage_latency", "cost")


def _parse_env_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except ValueError:
        return raw


def allowed_keys(cls: type) -> set[str]:
    """Constructor parameters of a config type."""
    return set(inspect.signature(cls).parameters) - {"self"}


def apply_env_overrides(
    section: str,
    values: Mapping[str, Any],
    allowed: Iterable[str],
    env: Optional[Mapping[str, str]] = None,
) -> dict[str, Any]:
    """Overlay ``MVE_<SECTION>__<KEY>`` variables on a section.

    :param section: section name
    :param values: values read from the file
    :param allowed: keys the section accepts
    :param env: environment (``os.environ`` if omitted)
    :raises MveConfigurationError: a variable names an unknown key
    """
    env = os.environ if env is None else env
    allowed = set(allowed)
    prefix = f"{ENV_PREFIX}{section.upper()}__"
    merged = dict(values)
    for var in sorted(env):
        if not var.startswith(prefix):
            continue
        key = var[len(prefix) :].lower()
        if key not in allowed:
            raise MveConfigurationError(f"Unknown configuration key in {var}: {section}.{key}.")
        merged[key] = _parse_env_value(env[var])
    return merged


def _read_json(path: Union[str, Path]) -> dict[str, Any]:
    if isinstance(path, str):
        path = Path(path)
    try:
        with path.open(mode="r", encoding="utf-8") as f:
            data = json.load(f)
    except ValueError as e:
        raise MveConfigurationError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise MveConfigurationError(f"{path} must hold a JSON object.")
    return data


def _write_json(path: Union[str, Path], data: dict[str, Any]) -> None:
    if isinstance(path, str):
        path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as file:
        json.dump(data, file, indent=2)


def _enum_value(value: Any) -> Any:
    return value.name if isinstance(value, IntEnum) else value


class ServerConfig(NamedTuple):
    """Game server settings.

    Properties:
     - tick_rate_hz: simulation rate R
     - sc_mode: how constructs are advanced
     - terrain_mode: where terrain is generated
     - storage_mode: blob back-end of the persisted world
     - clock_mode: virtual (modelled time) or real (wall clock)
     - runtime_type: FaaS runtime implementation
     - listen_endpoint: ``host:port`` of the bot protocol listener
     - view_distance_blocks: radius of terrain kept loaded around avatars
     - max_players: connection cap
     - world_seed: terrain seed
     - generation_mode: terrain generator
     - lookahead_blocks: generation margin beyond the view distance
     - max_chunk_loads_per_tick: load-in budget per tick
     - max_local_generations_per_tick: LocalSync generation budget per tick
     - max_construct_blocks: larger components are not simulated
     - unload_margin_blocks: chunks stay loaded this far beyond the lookahead
     - pin_construct_chunks: chunks under fixture constructs are never unloaded
     - distance_sample_ticks: period of the distance-to-unloaded-terrain series
     - cache_dir: chunk cache directory (temporary if unset)
     - storage_root: directory of the local blob back-end (temporary if unset)
     - redis_url: URL of the Redis blob back-end
     - faas_endpoint: gateway URL of the HTTP runtime
     - warn_over_budget: log ticks that exceed the budget
     - emit_chunks: send chunk data to sessions
    """

    tick_rate_hz: int = 20
    sc_mode: ScModeType = ScMode.Offloaded
    terrain_mode: TerrainModeType = TerrainMode.Offloaded
    storage_mode: StorageModeType = StorageMode.emulated
    clock_mode: ClockModeType = ClockMode.virtual
    runtime_type: RuntimeModeType = RuntimeType.emulated
    listen_endpoint: str = "127.0.0.1:25600"
    view_distance_blocks: int = DEFAULT_VIEW_DISTANCE
    max_players: int = 1000
    world_seed: int = 0
    generation_mode: GenerationModeType = GenerationMode.Flat
    lookahead_blocks: int = DEFAULT_LOOKAHEAD
    max_chunk_loads_per_tick: int = DEFAULT_MAX_LOADS_PER_TICK
    max_local_generations_per_tick: int = DEFAULT_MAX_LOCAL_GENERATIONS_PER_TICK
    max_construct_blocks: int = DEFAULT_MAX_CONSTRUCT_BLOCKS
    unload_margin_blocks: int = 16
    pin_construct_chunks: bool = True
    distance_sample_ticks: int = 5
    cache_dir: Optional[str] = None
    storage_root: Optional[str] = None
    redis_url: Optional[str] = None
    faas_endpoint: Optional[str] = None
    warn_over_budget: bool = False
    emit_chunks: bool = True

    @property
    def tick_budget_ms(self) -> float:
        """Tick budget, ``1000 / tick_rate_hz``."""
        return 1000.0 / self.tick_rate_hz

    @property
    def host_port(self) -> tuple[str, int]:
        """``listen_endpoint`` split into host and port."""
        host, _, port = self.listen_endpoint.rpartition(":")
        try:
            return host or "127.0.0.1", int(port)
        except ValueError as e:
            raise MveConfigurationError(f"Invalid listen_endpoint: {self.listen_endpoint!r}.") from e

    @staticmethod
    def _validate_endpoint(endpoint: Any) -> str:
        if not isinstance(endpoint, str):
            raise MveTypeError("listen_endpoint must be a string.")
        _, sep, port = endpoint.rpartition(":")
        if not sep or not port.isdigit() or not 0 <= int(port) <= 65535:
            raise MveConfigurationError(f"Invalid listen_endpoint: {endpoint!r}.")
        return endpoint

    @staticmethod
    def _validate_int(name: str, value: Any, minimum: int) -> int:
        if not isinstance(value, int) or isinstance(value, bool):
            raise MveTypeError(f"{name} must be an integer, got {type(value).__name__}.")
        if value < minimum:
            raise MveValueError(f"{name} must be >= {minimum}.")
        return value

    def validate(self) -> "ServerConfig":
        """Check ranges and normalize mode names to enum members."""
        for name, minimum in (
            ("tick_rate_hz", 1),
            ("view_distance_blocks", 0),
            ("max_players", 0),
            ("lookahead_blocks", 0),
            ("max_chunk_loads_per_tick", 1),
            ("max_local_generations_per_tick", 1),
            ("max_construct_blocks", 1),
            ("unload_margin_blocks", 0),
            ("distance_sample_ticks", 1),
        ):
            self._validate_int(name, getattr(self, name), minimum)
        self._validate_int("world_seed", self.world_seed, 0)
        config = self._replace(
            sc_mode=coerce_enum(ScMode, self.sc_mode),
            terrain_mode=coerce_enum(TerrainMode, self.terrain_mode),
            storage_mode=coerce_enum(StorageMode, self.storage_mode),
            clock_mode=coerce_enum(ClockMode, self.clock_mode),
            runtime_type=coerce_enum(RuntimeType, self.runtime_type),
            generation_mode=coerce_enum(GenerationMode, self.generation_mode),
        )
        self._validate_endpoint(config.listen_endpoint)
        return config

    def as_dict(self) -> dict[str, Any]:
        """Serialize to a config-friendly dictionary (enum members by name)."""
        return {k: _enum_value(v) for k, v in self._asdict().items()}


class Settings(NamedTuple):
    """Everything a ``GameServer`` is built from."""

    server: ServerConfig = ServerConfig()
    policy: OffloadPolicy = OffloadPolicy()
    cache: CachePolicy = CachePolicy()
    latency: LatencyModel = LatencyModel()
    storage_latency: StorageLatencyModel = StorageLatencyModel()
    cost: CostModel = CostModel()

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], env: Optional[Mapping[str, str]] = None) -> "Settings":
        """Build validated settings from section dictionaries plus environment overrides.

        :raises MveConfigurationError: invalid section or override
        """
        sections = merge_sections(data, env)
        try:
            return cls(
                server=ServerConfig(**_known(sections["server"], ServerConfig)).validate(),
                policy=OffloadPolicy(**_known(sections["policy"], OffloadPolicy)).validate(),
                cache=CachePolicy(**_known(sections["cache"], CachePolicy)).validate(),
                latency=LatencyModel.from_dict(sections["latency"]),
                storage_latency=StorageLatencyModel.from_dict(sections["storage_latency"]),
                cost=CostModel.from_dict(sections["cost"]),
            )
        except (MveValueError, MveTypeError, KeyError, TypeError) as e:
            if isinstance(e, MveConfigurationError):
                raise
            raise MveConfigurationError(f"Invalid configuration: {e}") from e

    def as_dict(self) -> dict[str, Any]:
        """Serialize every section."""
        return {
            "server": self.server.as_dict(),
            "policy": self.policy.as_dict(),
            "cache": self.cache.as_dict(),
            "latency": self.latency.as_dict(),
            "storage_latency": self.storage_latency.as_dict(),
            "cost": self.cost.as_dict(),
        }

    def to_file(self, path: Union[str, Path]) -> None:
        """Save the settings as JSON, creating parent directories."""
        _write_json(path, self.as_dict())

    @classmethod
    def from_file(cls, path: Union[str, Path], env: Optional[Mapping[str, str]] = None) -> "Settings":
        """Load settings from a JSON file and apply environment overrides."""
        return cls.from_dict(_read_json(path), env)


def _known(values: Mapping[str, Any], cls: type) -> dict[str, Any]:
    allowed = allowed_keys(cls)
    return {k: v for k, v in values.items() if k in allowed}


def section_keys(section: str) -> set[str]:
    """Keys accepted by a section."""
    types = {
        "server": ServerConfig,
        "policy": OffloadPolicy,
        "cache": CachePolicy,
        "latency": LatencyModel,
        "storage_latency": StorageLatencyModel,
        "cost": CostModel,
    }
    return allowed_keys(types[section])


def merge_sections(data: Mapping[str, Any], env: Optional[Mapping[str, str]] = None) -> dict[str, dict[str, Any]]:
    """Every section of ``data`` (empty when absent) with its environment overrides applied.

    :raises MveConfigurationError: a section is not an object or an override names an unknown key
    """
    merged = {}
    for section in SECTIONS:
        raw = data.get(section) or {}
        if not isinstance(raw, Mapping):
            raise MveConfigurationError(f"Section {section!r} must be an object.")
        merged[section] = apply_env_overrides(section, raw, section_keys(section), env)
    return merged


class ScenarioConfig(NamedTuple):
    """One experiment: players and their behaviour, constructs, modes and duration.

    Properties:
     - name: scenario name (used for output directories)
     - players: bots joining the server
     - join_interval_s: bot ``k`` joins at ``k * join_interval_s``
     - behavior: bot behaviour
     - speed: StarWalk speed in blocks/s
     - area_radius: BoundedMoveOnly radius in blocks
     - step_interval_s: StarWalkIncreasing speed-up period
     - sc_count: reference constructs deployed before the first tick
     - sc_template: reference construct
     - world: terrain generator (overrides ``server.generation_mode``)
     - sc_mode / terrain_mode / storage_mode: override the server section when set
     - duration_s: run length on the tick clock
     - repetitions: runs per scenario, seeded ``seed, seed + 1, ...``
     - seed: first seed
     - warmup_s: excluded from QoS statistics
     - sections: ``server``, ``policy``, ``cache``, ``latency``, ``storage_latency`` and ``cost`` dictionaries
    """

    name: str = "scenario"
    players: int = 1
    join_interval_s: float = 10.0
    behavior: BehaviorKindType = BehaviorKind.BoundedMoveOnly
    speed: int = 3
    area_radius: int = 64
    step_interval_s: float = 200.0
    sc_count: int = 0
    sc_template: ConstructTemplateType = ConstructTemplate.Clock484
    world: GenerationModeType = GenerationMode.Flat
    sc_mode: Optional[ScModeType] = None
    terrain_mode: Optional[TerrainModeType] = None
    storage_mode: Optional[StorageModeType] = None
    duration_s: float = 60.0
    repetitions: int = 1
    seed: int = 0
    warmup_s: float = 30.0
    sections: Optional[dict[str, Any]] = None

    @property
    def seeds(self) -> list[int]:
        """Seed of every repetition."""
        return [self.seed + k for k in range(self.repetitions)]

    def validate(self) -> "ScenarioConfig":
        """Check ranges and normalize enum names."""
        for name, minimum in (("players", 0), ("sc_count", 0), ("repetitions", 1), ("area_radius", 1), ("seed", 0)):
            ServerConfig._validate_int(name, getattr(self, name), minimum)
        ServerConfig._validate_int("speed", self.speed, 1)
        if self.speed > 8:
            raise MveValueError("speed must be within [1, 8] blocks/s.")
        for name in ("join_interval_s", "duration_s", "step_interval_s"):
            if getattr(self, name) <= 0:
                raise MveValueError(f"{name} must be > 0.")
        if self.warmup_s < 0:
            raise MveValueError("warmup_s must be >= 0.")
        return self._replace(
            behavior=coerce_enum(BehaviorKind, self.behavior),
            sc_template=coerce_enum(ConstructTemplate, self.sc_template),
            world=coerce_enum(GenerationMode, self.world),
            sc_mode=None if self.sc_mode is None else coerce_enum(ScMode, self.sc_mode),
            terrain_mode=None if self.terrain_mode is None else coerce_enum(TerrainMode, self.terrain_mode),
            storage_mode=None if self.storage_mode is None else coerce_enum(StorageMode, self.storage_mode),
            sections=dict(self.sections or {}),
        )

    def settings(self, env: Optional[Mapping[str, str]] = None) -> Settings:
        """Server settings of the scenario; the scenario's mode keys win over the server section."""
        sections = {k: dict(v) for k, v in (self.sections or {}).items()}
        server = sections.setdefault("server", {})
        server["generation_mode"] = _enum_value(self.world)
        for key in ("sc_mode", "terrain_mode", "storage_mode"):
            value = getattr(self, key)
            if value is not None:
                server[key] = _enum_value(value)
        return Settings.from_dict(sections, env)

    def as_dict(self) -> dict[str, Any]:
        """Serialize to a config-friendly dictionary."""
        data = {k: _enum_value(v) for k, v in self._asdict().items() if k != "sections"}
        data.update(self.sections or {})
        return data

    def to_file(self, path: Union[str, Path]) -> None:
        """Save the scenario as JSON, creating parent directories."""
        _write_json(path, self.as_dict())

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], env: Optional[Mapping[str, str]] = None) -> "ScenarioConfig":
        """Build a validated scenario; environment overrides apply to the scenario keys.

        :raises MveConfigurationError: invalid values or overrides
        """
        allowed = allowed_keys(cls) - {"sections"}
        top = apply_env_overrides("scenario", {k: v for k, v in data.items() if k in allowed}, allowed, env)
        sections = {k: v for k, v in merge_sections(data, env).items() if v}
        try:
            scenario = cls(**top, sections=sections).validate()
        except (MveValueError, MveTypeError, TypeError) as e:
            raise MveConfigurationError(f"Invalid scenario: {e}") from e
        scenario.settings({})
        return scenario

    @classmethod
    def from_file(cls, path: Union[str, Path], env: Optional[Mapping[str, str]] = None) -> "ScenarioConfig":
        """Restore a scenario from a JSON file.

        Keys that are neither scenario parameters nor sections are ignored.

        :param path: path to file
        :param env: environment (``os.environ`` if omitted)
        """
        return cls.from_dict(_read_json(path), env)
