"""
This module contains type definitions used in the library.

Value types are ``NamedTuple`` records so they are hashable, cheap to copy out of
the tick thread and trivially comparable in tests. Closed enumerations are
``IntEnum`` so they fit into the one-byte fields of the wire formats.

Modes that users pass around in configuration accept either the enum member or
its lower-case string name (see the ``*ModeType`` unions at the bottom).
"""

from enum import IntEnum
from typing import NamedTuple, Optional, TypeVar, Union

from typing_extensions import Literal

from mve_offload.errors import MveValueError


Sentinel = object()

CHUNK_WIDTH = 16
CHUNK_HEIGHT = 256
CHUNK_VOLUME = CHUNK_WIDTH * CHUNK_WIDTH * CHUNK_HEIGHT
MAX_POWER = 15

PlayerId = int
ConstructId = int


class BlockType(IntEnum):
    """Closed set of block types.

    - Air: empty space, default fill
    - Solid: inert terrain
    - Wire: carries power, losing one level per block
    - Source: constant power 15
    - Inverter: emits 15 when none of its neighbours is powered
    - Lamp: lit by the strongest powered neighbour, emits nothing
    """

    Air = 0
    Solid = 1
    Wire = 2
    Source = 3
    Inverter = 4
    Lamp = 5


STATEFUL_TYPES = frozenset({BlockType.Wire, BlockType.Source, BlockType.Inverter, BlockType.Lamp})


class Block(NamedTuple):
    """A single voxel.

    Properties:
     - type: block type
     - power: power level 0..15
    """

    type: BlockType
    power: int = 0

    @classmethod
    def of(cls, type_: Union[BlockType, int], power: int = 0) -> "Block":
        """Build a block, normalizing power to the type's invariant.

        Air and Solid never carry power; a Source is always at full power.
        """
        type_ = BlockType(type_)
        if type_ in (BlockType.Air, BlockType.Solid):
            return cls(type_, 0)
        if type_ == BlockType.Source:
            return cls(type_, MAX_POWER)
        return cls(type_, min(max(int(power), 0), MAX_POWER))


AIR = Block(BlockType.Air, 0)


class Position(NamedTuple):
    """Integer block position."""

    x: int
    y: int
    z: int


class ChunkCoord(NamedTuple):
    """Chunk grid indices."""

    cx: int
    cz: int

    @classmethod
    def of_position(cls, pos: Union[Position, tuple[int, int, int]]) -> "ChunkCoord":
        """Return the chunk that contains a block position."""
        return cls(pos[0] // CHUNK_WIDTH, pos[2] // CHUNK_WIDTH)

    @property
    def key(self) -> str:
        """Blob key of the chunk."""
        return f"c_{self.cx}_{self.cz}"

    @classmethod
    def from_key(cls, key: str) -> "ChunkCoord":
        """Parse a blob key produced by ``key``."""
        try:
            prefix, cx, cz = key.split("_")
            if prefix != "c":
                raise ValueError(prefix)
            return cls(int(cx), int(cz))
        except ValueError as e:
            raise MveValueError(f"Not a chunk key: {key!r}") from e


class Box(NamedTuple):
    """Inclusive axis-aligned box in block coordinates."""

    x0: int
    y0: int
    z0: int
    x1: int
    y1: int
    z1: int

    def contains(self, pos: Union[Position, tuple[int, int, int]], margin: int = 0) -> bool:
        """Check whether a position lies inside the box grown by ``margin``."""
        x, y, z = pos
        return (
            self.x0 - margin <= x <= self.x1 + margin
            and self.y0 - margin <= y <= self.y1 + margin
            and self.z0 - margin <= z <= self.z1 + margin
        )

    @property
    def shape(self) -> tuple[int, int, int]:
        """Array shape of the box in ``(y, z, x)`` order."""
        return self.y1 - self.y0 + 1, self.z1 - self.z0 + 1, self.x1 - self.x0 + 1

    def chunks(self) -> set[ChunkCoord]:
        """All chunks the box overlaps."""
        return {
            ChunkCoord(cx, cz)
            for cx in range(self.x0 // CHUNK_WIDTH, self.x1 // CHUNK_WIDTH + 1)
            for cz in range(self.z0 // CHUNK_WIDTH, self.z1 // CHUNK_WIDTH + 1)
        }


class GenerationMode(IntEnum):
    """Terrain generator: ``Flat`` bedrock slab or ``Noise`` height map."""

    Flat = 0
    Noise = 1


class ScMode(IntEnum):
    """How simulated constructs are advanced by the server."""

    LocalOnly = 1
    Offloaded = 2
    LocalEveryOtherTick = 3


class TerrainMode(IntEnum):
    """Where terrain generation runs."""

    LocalSync = 1
    LocalAsync = 2
    Offloaded = 3


class StorageMode(IntEnum):
    """Blob back-end used for terrain persistence.

    - local: files on local disk
    - emulated: in-memory blob store with injected latency
    - redis: Redis server (needs ``redis`` (``redis-py``) package)
    """

    local = 1
    emulated = 2
    redis = 3


class RuntimeType(IntEnum):
    """FaaS runtime implementation.

    - emulated: in-process emulator with cold starts and latency injection
    - http: real platform behind an HTTPS gateway (needs ``httpx``)
    """

    emulated = 1
    http = 2


class ClockMode(IntEnum):
    """Tick clock: ``virtual`` advances by modelled time, ``real`` sleeps."""

    virtual = 1
    real = 2


class FunctionName(IntEnum):
    """Functions hosted by the FaaS runtime; values are the wire tags."""

    ScSimulate = 1
    TerrainGenerate = 2


class ReplyStatus(IntEnum):
    """Outcome of merging a speculative reply."""

    Accepted = 1
    Stale = 2
    Late = 3


class GenTaskMode(IntEnum):
    """How a generation task is executed."""

    LocalSync = 1
    LocalAsync = 2
    Offloaded = 3


class GenTaskStatus(IntEnum):
    """Generation task lifecycle."""

    Pending = 1
    InFlight = 2
    Done = 3


class ConstructTemplate(IntEnum):
    """Reference clock constructs, named by block count."""

    Clock252 = 252
    Clock484 = 484


class ActionKind(IntEnum):
    """Player actions; values are the wire tags."""

    Move = 1
    Break = 2
    Place = 3
    Stand = 4
    Chat = 5
    SetInventory = 6


class BehaviorKind(IntEnum):
    """Bot behaviours.

    - StarWalk: walk away from spawn at a fixed speed, directions evenly spread
    - StarWalkIncreasing: as StarWalk, one block/s faster every interval
    - RandomActions: draw actions from the random-behaviour table
    - BoundedMoveOnly: walk between random points within a radius of spawn
    """

    StarWalk = 1
    StarWalkIncreasing = 2
    RandomActions = 3
    BoundedMoveOnly = 4


class PlayerAction(NamedTuple):
    """One player input.

    Properties:
     - kind: action kind
     - player_id: acting player
     - client_tick: client-side tick counter
     - pos: Move target, or the Break/Place position
     - speed: Move speed in blocks/s (1..8)
     - block_type: placed block type
     - duration_ms: Stand duration
     - text: Chat text
     - item: SetInventory item
    """

    kind: ActionKind
    player_id: PlayerId
    client_tick: int = 0
    pos: Optional[Position] = None
    speed: int = 0
    block_type: BlockType = BlockType.Air
    duration_ms: int = 0
    text: str = ""
    item: int = 0


class WorldSeed(NamedTuple):
    """Seed and generator of a world; generation is a pure function of (seed, coord, mode)."""

    seed: int
    mode: GenerationMode = GenerationMode.Flat


class ModificationEvent(NamedTuple):
    """Emitted by every block write; bumps construct logical timestamps."""

    pos: Position
    tick: int
    block: Block


class TickBreakdown(NamedTuple):
    """Where the time of one tick went, in milliseconds."""

    actions_ms: float = 0.0
    sc_ms: float = 0.0
    chunk_load_ms: float = 0.0
    emit_ms: float = 0.0


class TickSample(NamedTuple):
    """Timing record of one tick.

    Properties:
     - tick_index: world tick
     - time_ms: tick start on the tick clock
     - duration_ms: measured wall time plus modelled cost
     - breakdown: per-phase split
     - players: connected players during the tick
     - charged_ms: modelled cost included in ``duration_ms``
    """

    tick_index: int
    time_ms: float
    duration_ms: float
    breakdown: TickBreakdown
    players: int = 0
    charged_ms: float = 0.0


class InvocationRecord(NamedTuple):
    """One FaaS invocation as seen by the caller."""

    invocation_id: int
    function: FunctionName
    enqueue_tick: int
    enqueue_ms: float
    end_to_end_ms: float
    worker_duration_ms: float
    was_cold: bool
    payload_bytes: int
    reply_bytes: int
    instance_id: int = 0


class EfficiencyRecord(NamedTuple):
    """Efficiency of one speculative invocation.

    ``efficiency = (total_steps - duplicated_steps) / total_steps``.
    """

    invocation_id: int
    construct_id: ConstructId
    issued_tick: int
    total_steps: int
    duplicated_steps: int
    efficiency: float
    lead: int
    stale: bool = False


class StorageRead(NamedTuple):
    """One terrain retrieval."""

    time_ms: float
    key: str
    latency_ms: float
    hit: bool
    prefetch: bool = False


class DistanceSample(NamedTuple):
    """Distance from the avatars to the closest unloaded terrain."""

    time_s: float
    blocks: int


ScModeType = Union[ScMode, Literal["LocalOnly", "Offloaded", "LocalEveryOtherTick"]]
TerrainModeType = Union[TerrainMode, Literal["LocalSync", "LocalAsync", "Offloaded"]]
StorageModeType = Union[StorageMode, Literal["local", "emulated", "redis"]]
RuntimeModeType = Union[RuntimeType, Literal["emulated", "http"]]
ClockModeType = Union[ClockMode, Literal["virtual", "real"]]
GenerationModeType = Union[GenerationMode, Literal["Flat", "Noise"]]
ConstructTemplateType = Union[ConstructTemplate, Literal["Clock252", "Clock484"]]
BehaviorKindType = Union[BehaviorKind, Literal["StarWalk", "StarWalkIncreasing", "RandomActions", "BoundedMoveOnly"]]
OptionalLevel = Optional[Union[str, int]]


E = TypeVar("E", bound=IntEnum)


def coerce_enum(enum_cls: type[E], value: Union[E, str, int]) -> E:
    """Accept an enum member, its name or its value.

    :raises MveValueError: unknown name or value
    """
    if isinstance(value, enum_cls):
        return value
    try:
        if isinstance(value, str):
            return enum_cls[value]
        return enum_cls(value)
    except (KeyError, ValueError) as e:
        raise MveValueError(f"Invalid {enum_cls.__name__}: {value!r}.") from e
