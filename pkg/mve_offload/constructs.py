"""
Simulated constructs: connected groups of stateful blocks advanced once per tick.

Transition rules (synchronous, 6-neighbourhood, emitters are Source, Wire and Inverter):

- Source: always 15
- Wire: strongest emitting neighbour minus one, floored at 0
- Inverter: 15 if no emitting neighbour is powered, else 0
- Lamp: strongest emitting neighbour (a Lamp never emits)
- Air, Solid: 0

A construct only sees its own bounding box. Stateful blocks inside the box that
belong to another construct are masked as Solid, so simulating a construct in
isolation reproduces exactly what a world-wide update would do.

Canonical serialization (little-endian)::

    bounds: 6 × int32 (x0, y0, z0, x1, y1, z1)
    cells:  (type: uint8, power: uint8) pairs, x fastest, then z, then y
"""

import struct
import time

from collections import deque
from collections.abc import Iterable
from typing import NamedTuple, Optional, Union

import numpy as np

from mve_offload.errors import MalformedPayloadError, MveValueError
from mve_offload.typings import (
    MAX_POWER,
    STATEFUL_TYPES,
    Block,
    BlockType,
    Box,
    ConstructId,
    ConstructTemplate,
    Position,
)
from mve_offload.world import WorldState, pack


_BOUNDS = struct.Struct("<6i")
_LOOP_HEADER = struct.Struct("<III")
_SOLID = pack(BlockType.Solid, 0)
_EMITTERS = np.array([int(t) for t in (BlockType.Source, BlockType.Wire, BlockType.Inverter)], dtype=np.uint8)
_STATEFUL = np.array(sorted(int(t) for t in STATEFUL_TYPES), dtype=np.uint8)
_NEIGHBOURS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))
DEFAULT_MAX_CONSTRUCT_BLOCKS = 4096


def stateful_mask(cells: np.ndarray) -> np.ndarray:
    """Boolean mask of stateful cells in a packed array."""
    return np.isin(cells >> 4, _STATEFUL)


class ConstructState:
    """Complete state of one construct.

    ``cells`` are packed ``type << 4 | power`` bytes of shape ``bounds.shape`` and
    are read-only; every step produces a new state.

    :param construct_id: construct identifier
    :param bounds: inclusive bounding box of the members
    :param cells: packed cells in ``(y, z, x)`` order
    :param logical_ts: player-modification epoch
    :param base_tick: world tick this state corresponds to
    """

    __slots__ = ("base_tick", "bounds", "cells", "id", "logical_ts")

    def __init__(
        self, construct_id: ConstructId, bounds: Box, cells: np.ndarray, *, logical_ts: int = 0, base_tick: int = 0
    ) -> None:
        bounds = Box(*bounds)
        if cells.shape != bounds.shape:
            raise MveValueError(f"Cells shape {cells.shape} does not match bounds shape {bounds.shape}.")
        if not cells.flags.writeable and cells.dtype == np.uint8:
            self.cells = cells
        else:
            self.cells = np.array(cells, dtype=np.uint8)
            self.cells.setflags(write=False)
        self.id = construct_id
        self.bounds = bounds
        self.logical_ts = logical_ts
        self.base_tick = base_tick

    @property
    def blocks(self) -> int:
        """Number of stateful member blocks."""
        return int(np.count_nonzero(stateful_mask(self.cells)))

    def with_cells(self, cells: np.ndarray, base_tick: int) -> "ConstructState":
        """Same construct and epoch, other cells."""
        return ConstructState(self.id, self.bounds, cells, logical_ts=self.logical_ts, base_tick=base_tick)

    def block_at(self, pos: Position) -> Block:
        """Read a block by world position."""
        b = self.bounds
        cell = int(self.cells[pos.y - b.y0, pos.z - b.z0, pos.x - b.x0])
        return Block(BlockType(cell >> 4), cell & MAX_POWER)

    def same_cells(self, other: Union["ConstructState", np.ndarray]) -> bool:
        """Cell-for-cell equality, ignoring id, tick and epoch."""
        cells = other.cells if isinstance(other, ConstructState) else other
        return bool(np.array_equal(self.cells, cells))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ConstructState):
            return NotImplemented
        return (
            self.id == other.id
            and self.bounds == other.bounds
            and self.logical_ts == other.logical_ts
            and self.base_tick == other.base_tick
            and self.same_cells(other)
        )

    def __hash__(self) -> int:
        return hash((self.id, self.bounds, self.logical_ts, self.base_tick, state_hash(self)))

    def __repr__(self) -> str:
        return (
            f"{self.__class__.__name__}(id={self.id}, bounds={tuple(self.bounds)}, "
            f"logical_ts={self.logical_ts}, base_tick={self.base_tick}, blocks={self.blocks})"
        )


def step_cells(cells: np.ndarray) -> np.ndarray:
    """One synchronous automaton update of packed cells."""
    types = cells >> 4
    power = cells & MAX_POWER
    emit = np.where(np.isin(types, _EMITTERS), power, 0).astype(np.int16)
    padded = np.pad(emit, 1)
    ny, nz, nx = emit.shape
    strongest = np.zeros_like(emit)
    for dy, dz, dx in _NEIGHBOURS:
        np.maximum(strongest, padded[1 + dy : 1 + dy + ny, 1 + dz : 1 + dz + nz, 1 + dx : 1 + dx + nx], out=strongest)

    new_power = np.zeros_like(emit)
    new_power[types == BlockType.Source] = MAX_POWER
    wire = types == BlockType.Wire
    new_power[wire] = np.maximum(strongest[wire] - 1, 0)
    inverter = types == BlockType.Inverter
    new_power[inverter] = np.where(strongest[inverter] == 0, MAX_POWER, 0)
    lamp = types == BlockType.Lamp
    new_power[lamp] = strongest[lamp]
    return ((types << 4) | new_power.astype(np.uint8)).astype(np.uint8)


def step(s: ConstructState) -> ConstructState:
    """Advance a construct by one tick."""
    return s.with_cells(step_cells(s.cells), s.base_tick + 1)


def simulate(s: ConstructState, n: int) -> list[ConstructState]:
    """Return the ``n`` states following ``s``."""
    if n < 1:
        raise MveValueError("n must be >= 1.")
    states = []
    for _ in range(n):
        s = step(s)
        states.append(s)
    return states


def encode_cells(bounds: Box, cells: np.ndarray) -> bytes:
    """Canonical serialization of a cell array."""
    pairs = np.stack((cells >> 4, cells & MAX_POWER), axis=-1).astype(np.uint8)
    return _BOUNDS.pack(*bounds) + pairs.tobytes()


def decode_cells(data: bytes, offset: int = 0) -> tuple[Box, np.ndarray, int]:
    """Inverse of ``encode_cells``; returns the bounds, the cells and the offset past them."""
    if len(data) - offset < _BOUNDS.size:
        raise MalformedPayloadError("Construct payload is truncated.")
    bounds = Box(*_BOUNDS.unpack_from(data, offset))
    if bounds.x1 < bounds.x0 or bounds.y1 < bounds.y0 or bounds.z1 < bounds.z0:
        raise MalformedPayloadError(f"Invalid construct bounds: {tuple(bounds)}.")
    cells, end = _decode_body(data, offset + _BOUNDS.size, bounds)
    return bounds, cells, end


def _decode_body(data: bytes, offset: int, bounds: Box) -> tuple[np.ndarray, int]:
    size = int(np.prod(bounds.shape)) * 2
    if len(data) - offset < size:
        raise MalformedPayloadError("Construct cells are truncated.")
    pairs = np.frombuffer(data, dtype=np.uint8, count=size, offset=offset).reshape((*bounds.shape, 2))
    types, power = pairs[..., 0], pairs[..., 1]
    if (types > max(BlockType)).any() or (power > MAX_POWER).any():
        raise MalformedPayloadError("Construct payload holds an invalid block.")
    cells = (types << 4) | power
    cells.setflags(write=False)
    return cells, offset + size


def encode_state(s: ConstructState) -> bytes:
    """Canonical serialization of a construct state (cells only)."""
    return encode_cells(s.bounds, s.cells)


def decode_state(
    data: bytes, construct_id: ConstructId = 0, *, logical_ts: int = 0, base_tick: int = 0
) -> ConstructState:
    """Restore a state from ``encode_state`` output."""
    bounds, cells, end = decode_cells(data)
    if end != len(data):
        raise MalformedPayloadError("Construct payload has trailing bytes.")
    return ConstructState(construct_id, bounds, cells, logical_ts=logical_ts, base_tick=base_tick)


FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a_64(data: bytes) -> int:
    """FNV-1a over little-endian 64-bit words; a short tail is zero-padded."""
    words = np.frombuffer(data + bytes(-len(data) % 8), dtype="<u8")
    h = FNV_OFFSET
    for word in words.tolist():
        h = ((h ^ word) * FNV_PRIME) & _MASK64
    return h


def state_hash(s: Union[ConstructState, tuple[Box, np.ndarray]]) -> int:
    """64-bit digest of the canonical cell serialization."""
    bounds, cells = (s.bounds, s.cells) if isinstance(s, ConstructState) else s
    return fnv1a_64(encode_cells(bounds, cells))


class LoopDescriptor:
    """A trajectory of ``length`` states folded into a prefix and a repeating cycle.

    :param bounds: bounds of every state
    :param prefix: states before the loop entry
    :param cycle: one iteration of the loop (empty for an unfolded trajectory)
    :param length: number of states the trajectory covers
    """

    __slots__ = ("bounds", "cycle", "length", "prefix")

    def __init__(self, bounds: Box, prefix: list[np.ndarray], cycle: list[np.ndarray], length: int) -> None:
        if not cycle and len(prefix) != length:
            raise MveValueError("An unfolded trajectory must list every state.")
        if length < 1:
            raise MveValueError("length must be >= 1.")
        self.bounds = Box(*bounds)
        self.prefix = prefix
        self.cycle = cycle
        self.length = length

    @property
    def entry_index(self) -> int:
        """Index of the first state of the cycle."""
        return len(self.prefix)

    @property
    def is_loop(self) -> bool:
        """Whether a cycle was detected."""
        return bool(self.cycle)

    def __len__(self) -> int:
        return self.length

    def __repr__(self) -> str:
        return (
            f"{self.__class__.__name__}(prefix={len(self.prefix)}, cycle={len(self.cycle)}, length={self.length})"
        )


def expand(d: LoopDescriptor, k: int) -> np.ndarray:
    """Cells of the ``k``-th state (0-based) of a folded trajectory."""
    if k < 0:
        raise MveValueError("k must be >= 0.")
    if k < len(d.prefix):
        return d.prefix[k]
    if not d.cycle:
        raise MveValueError(f"Index {k} is outside the trajectory of length {d.length}.")
    return d.cycle[(k - len(d.prefix)) % len(d.cycle)]


def simulate_with_loop_detection(s: ConstructState, n: int) -> Union[LoopDescriptor, list[ConstructState]]:
    """Simulate ``n`` steps, stopping at the first repeated state.

    Each state is hashed; a hash hit is confirmed by comparing cells before the
    trajectory is folded into a ``LoopDescriptor``.
    """
    if n < 1:
        raise MveValueError("n must be >= 1.")
    seen: dict[int, list[int]] = {}
    trajectory: list[ConstructState] = []
    for k in range(n):
        s = step(s)
        digest = state_hash(s)
        for index in seen.get(digest, ()):
            if trajectory[index].same_cells(s):
                cells = [t.cells for t in trajectory]
                return LoopDescriptor(s.bounds, cells[:index], cells[index:], n)
        seen.setdefault(digest, []).append(k)
        trajectory.append(s)
    return trajectory


def as_descriptor(result: Union[LoopDescriptor, list[ConstructState]]) -> LoopDescriptor:
    """Normalize a simulation result to a ``LoopDescriptor``."""
    if isinstance(result, LoopDescriptor):
        return result
    if not result:
        raise MveValueError("Empty trajectory.")
    return LoopDescriptor(result[0].bounds, [r.cells for r in result], [], len(result))


def encode_trajectory(d: LoopDescriptor) -> bytes:
    """Serialize a trajectory: bounds, (length, prefix count, cycle count), then the cells of each state."""
    parts = [_BOUNDS.pack(*d.bounds), _LOOP_HEADER.pack(d.length, len(d.prefix), len(d.cycle))]
    for cells in (*d.prefix, *d.cycle):
        parts.append(np.stack((cells >> 4, cells & MAX_POWER), axis=-1).astype(np.uint8).tobytes())
    return b"".join(parts)


def decode_trajectory(data: bytes, offset: int = 0) -> LoopDescriptor:
    """Inverse of ``encode_trajectory``."""
    if len(data) - offset < _BOUNDS.size + _LOOP_HEADER.size:
        raise MalformedPayloadError("Trajectory payload is truncated.")
    bounds = Box(*_BOUNDS.unpack_from(data, offset))
    length, n_prefix, n_cycle = _LOOP_HEADER.unpack_from(data, offset + _BOUNDS.size)
    offset += _BOUNDS.size + _LOOP_HEADER.size
    states = []
    for _ in range(n_prefix + n_cycle):
        cells, offset = _decode_body(data, offset, bounds)
        states.append(cells)
    if offset != len(data):
        raise MalformedPayloadError("Trajectory payload has trailing bytes.")
    try:
        return LoopDescriptor(bounds, states[:n_prefix], states[n_prefix:], length)
    except MveValueError as e:
        raise MalformedPayloadError(str(e)) from e


encode_loop = encode_trajectory
decode_loop = decode_trajectory


class Region(NamedTuple):
    """A connected component of stateful blocks.

    Properties:
     - members: member positions
     - bounds: bounding box of the members
     - complete: ``False`` when the component touches an unloaded chunk or exceeds the size cap
    """

    members: frozenset[Position]
    bounds: Box
    complete: bool = True


def bounds_of(positions: Iterable[Position]) -> Box:
    """Bounding box of a set of positions."""
    xs, ys, zs = zip(*positions)
    return Box(min(xs), min(ys), min(zs), max(xs), max(ys), max(zs))


def find_constructs(
    world: WorldState, seeds: Iterable[Position], max_blocks: int = DEFAULT_MAX_CONSTRUCT_BLOCKS
) -> list[Region]:
    """Discover the connected components that contain the given positions.

    Seeds that are not stateful are ignored; seeds inside one component yield it once.
    """
    regions: list[Region] = []
    visited: set[Position] = set()
    for seed in seeds:
        seed = Position(*seed)
        if seed in visited or not world.is_loaded(seed) or world.get_block(seed).type not in STATEFUL_TYPES:
            continue
        members: set[Position] = {seed}
        queue = deque([seed])
        complete = True
        while queue:
            pos = queue.popleft()
            for dx, dy, dz in _NEIGHBOURS:
                nxt = Position(pos.x + dx, pos.y + dy, pos.z + dz)
                if nxt in members or not 0 <= nxt.y < 256:
                    continue
                if not world.is_loaded(nxt):
                    complete = False
                    continue
                if world.get_block(nxt).type in STATEFUL_TYPES:
                    members.add(nxt)
                    queue.append(nxt)
            if len(members) > max_blocks:
                complete = False
                break
        visited |= members
        regions.append(Region(frozenset(members), bounds_of(members), complete))
    return regions


def member_mask(region: Region) -> np.ndarray:
    """Boolean mask of the members inside the region's bounds."""
    b = region.bounds
    mask = np.zeros(b.shape, dtype=bool)
    for pos in region.members:
        mask[pos.y - b.y0, pos.z - b.z0, pos.x - b.x0] = True
    return mask


def state_from_world(
    world: WorldState, construct_id: ConstructId, region: Region, *, logical_ts: int = 0, base_tick: int = 0
) -> ConstructState:
    """Read a construct's state out of the world, masking foreign stateful blocks as Solid."""
    cells = world.read_box(region.bounds)
    foreign = stateful_mask(cells) & ~member_mask(region)
    cells[foreign] = _SOLID
    return ConstructState(construct_id, region.bounds, cells, logical_ts=logical_ts, base_tick=base_tick)


def apply_to_world(world: WorldState, s: ConstructState) -> int:
    """Write a construct's member cells back into the world; returns the number of changed cells."""
    return world.write_box(s.bounds, stateful_mask(s.cells), s.cells)


_TEMPLATE_BLOCKS = {ConstructTemplate.Clock252: 252, ConstructTemplate.Clock484: 484}
_ROW_WIDTH = 16
_ROW_PITCH = 4


def clock_layout(n_blocks: int) -> list[tuple[Position, Block]]:
    """Reference clock construct of exactly ``n_blocks`` blocks, relative to the origin.

    Rows of 16 lamps every 4 blocks along z. Every even column carries an
    Inverter and a Wire in front of its lamp, a two-block oscillator that
    lights the lamp. Lamps at x=15 join each row to the next. Blocks are listed
    so that every block touches an earlier one, so any prefix stays connected.
    """
    if n_blocks < 1:
        raise MveValueError("n_blocks must be >= 1.")
    blocks: list[tuple[Position, Block]] = []
    lamp = Block(BlockType.Lamp, 0)
    row = 0
    while len(blocks) < n_blocks:
        z = row * _ROW_PITCH
        xs = range(_ROW_WIDTH) if row == 0 else range(_ROW_WIDTH - 1, -1, -1)
        for x in xs:
            blocks.append((Position(x, 0, z), lamp))
            if x % 2 == 0:
                blocks.append((Position(x, 0, z + 1), Block(BlockType.Inverter, 0)))
                blocks.append((Position(x, 0, z + 2), Block(BlockType.Wire, 0)))
        for dz in range(1, _ROW_PITCH):
            blocks.append((Position(_ROW_WIDTH - 1, 0, z + dz), lamp))
        row += 1
    return blocks[:n_blocks]


def template_layout(template: Union[ConstructTemplate, str]) -> list[tuple[Position, Block]]:
    """Layout of a named reference construct."""
    if isinstance(template, str):
        try:
            template = ConstructTemplate[template]
        except KeyError as e:
            raise MveValueError(f"Unknown construct template: {template!r}.") from e
    return clock_layout(_TEMPLATE_BLOCKS[ConstructTemplate(template)])


def layout_state(
    layout: list[tuple[Position, Block]], construct_id: ConstructId = 0, origin: Optional[Position] = None
) -> ConstructState:
    """Build a standalone construct state from a block layout."""
    ox, oy, oz = origin or (0, 0, 0)
    positions = [Position(p.x + ox, p.y + oy, p.z + oz) for p, _ in layout]
    bounds = bounds_of(positions)
    cells = np.zeros(bounds.shape, dtype=np.uint8)
    for pos, (_, block) in zip(positions, layout):
        block = Block.of(block.type, block.power)
        cells[pos.y - bounds.y0, pos.z - bounds.z0, pos.x - bounds.x0] = pack(block.type, block.power)
    return ConstructState(construct_id, bounds, cells)


def throughput(template: Union[ConstructTemplate, str], steps: int = 1000) -> list[float]:
    """Measured block updates per second of a reference construct, one value per step."""
    if steps < 1:
        raise MveValueError("steps must be >= 1.")
    s = layout_state(template_layout(template))
    cells, blocks = s.cells, s.blocks
    rates = []
    for _ in range(steps):
        started = time.perf_counter()
        cells = step_cells(cells)
        elapsed = time.perf_counter() - started
        rates.append(blocks / elapsed if elapsed > 0 else float("inf"))
    return rates
