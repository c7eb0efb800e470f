"""
Voxel world model.

The world is a horizontally unbounded grid of 16×16×256 chunks. A chunk stores
its blocks in one dense ``numpy.uint8`` array of shape ``(y, z, x)`` where each
cell packs ``type << 4 | power``; flattening the array in C order therefore
walks x fastest, then z, then y, which is also the order of the wire format.

Chunk wire format (little-endian)::

    header: cx: int32, cz: int32, mode: uint8
    body:   (type: uint8, power: uint8, run: uint16) triples

``WorldState`` is owned by the tick thread. Other threads work on the immutable
``WorldSnapshot`` it hands out.
"""

import struct

from collections.abc import Iterable
from typing import NamedTuple, Optional

import numpy as np

from mve_offload.errors import ChunkNotLoadedError, MalformedPayloadError, MveValueError
from mve_offload.typings import (
    CHUNK_HEIGHT,
    CHUNK_VOLUME,
    CHUNK_WIDTH,
    MAX_POWER,
    Block,
    BlockType,
    Box,
    ChunkCoord,
    GenerationMode,
    ModificationEvent,
    PlayerId,
    Position,
)


_HEADER = struct.Struct("<iiB")
_RUN_DTYPE = np.dtype([("type", "u1"), ("power", "u1"), ("run", "<u2")])
_MAX_RUN = 0xFFFF
DEFAULT_VIEW_DISTANCE = 128


def pack(type_: int, power: int) -> int:
    """Pack a block into its cell byte."""
    return (int(type_) << 4) | int(power)


def unpack(cell: int) -> Block:
    """Unpack a cell byte."""
    return Block(BlockType(cell >> 4), cell & MAX_POWER)


def chunk_index(x: int, y: int, z: int) -> int:
    """Flat index of a chunk-local position."""
    return (y * CHUNK_WIDTH + z) * CHUNK_WIDTH + x


def chunk_local(index: int) -> tuple[int, int, int]:
    """Inverse of ``chunk_index``."""
    rest, x = divmod(index, CHUNK_WIDTH)
    y, z = divmod(rest, CHUNK_WIDTH)
    return x, y, z


class Chunk:
    """A 16×16×256 column of blocks.

    :param coord: chunk grid indices
    :param cells: packed cells of shape ``(256, 16, 16)``; all Air if omitted
    :param generated_by: generator that produced the chunk
    :param dirty: modified since last persist
    """

    __slots__ = ("_bytes", "cells", "coord", "dirty", "generated_by")

    def __init__(
        self,
        coord: ChunkCoord,
        cells: Optional[np.ndarray] = None,
        *,
        generated_by: GenerationMode = GenerationMode.Flat,
        dirty: bool = False,
    ) -> None:
        if cells is None:
            cells = np.zeros((CHUNK_HEIGHT, CHUNK_WIDTH, CHUNK_WIDTH), dtype=np.uint8)
        if cells.size != CHUNK_VOLUME:
            raise MveValueError(f"A chunk holds exactly {CHUNK_VOLUME} cells, got {cells.size}.")
        self.coord = ChunkCoord(*coord)
        self.cells = cells.reshape((CHUNK_HEIGHT, CHUNK_WIDTH, CHUNK_WIDTH)).astype(np.uint8, copy=False)
        self.generated_by = GenerationMode(generated_by)
        self.dirty = dirty
        self._bytes: Optional[bytes] = None

    @property
    def origin(self) -> tuple[int, int]:
        """World x/z of the chunk's first column."""
        return self.coord.cx * CHUNK_WIDTH, self.coord.cz * CHUNK_WIDTH

    def get(self, x: int, y: int, z: int) -> Block:
        """Read a block by chunk-local coordinates."""
        return unpack(int(self.cells[y, z, x]))

    def set(self, x: int, y: int, z: int, block: Block) -> None:
        """Write a block by chunk-local coordinates and mark the chunk dirty."""
        self.cells[y, z, x] = pack(block.type, block.power)
        self.touch()

    def touch(self) -> None:
        """Mark modified: drop cached bytes and set the dirty flag."""
        self._bytes = None
        self.dirty = True

    def count(self, type_: BlockType) -> int:
        """Number of blocks of a type."""
        return int(np.count_nonzero((self.cells >> 4) == int(type_)))

    def to_bytes(self) -> bytes:
        """Wire bytes of the chunk, cached until the next modification."""
        if self._bytes is None:
            self._bytes = encode_chunk(self)
        return self._bytes

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Chunk):
            return NotImplemented
        return (
            self.coord == other.coord
            and self.generated_by == other.generated_by
            and bool(np.array_equal(self.cells, other.cells))
        )

    def __hash__(self) -> int:
        return hash(self.coord)

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(coord={tuple(self.coord)}, mode={self.generated_by.name}, dirty={self.dirty})"


def encode_chunk(chunk: Chunk) -> bytes:
    """Serialize a chunk: header, then run-length encoded cells in x, z, y order."""
    flat = chunk.cells.reshape(-1)
    starts = np.concatenate(([0], np.flatnonzero(flat[1:] != flat[:-1]) + 1))
    lengths = np.diff(np.concatenate((starts, [flat.size])))
    values = flat[starts]
    # runs longer than a uint16 are split
    parts = (lengths + _MAX_RUN - 1) // _MAX_RUN
    values = np.repeat(values, parts)
    runs = np.full(values.size, _MAX_RUN, dtype=np.int64)
    last = np.cumsum(parts) - 1
    runs[last] = lengths - (parts - 1) * _MAX_RUN
    body = np.empty(values.size, dtype=_RUN_DTYPE)
    body["type"] = values >> 4
    body["power"] = values & MAX_POWER
    body["run"] = runs
    return _HEADER.pack(chunk.coord.cx, chunk.coord.cz, int(chunk.generated_by)) + body.tobytes()


def decode_chunk(data: bytes) -> Chunk:
    """Deserialize ``encode_chunk`` output.

    :raises MalformedPayloadError: bad header, trailing bytes, unknown types or a wrong total run length
    """
    if len(data) < _HEADER.size or (len(data) - _HEADER.size) % _RUN_DTYPE.itemsize:
        raise MalformedPayloadError(f"Chunk payload has an invalid length: {len(data)}.")
    cx, cz, mode = _HEADER.unpack_from(data)
    try:
        generated_by = GenerationMode(mode)
    except ValueError as e:
        raise MalformedPayloadError(f"Unknown generation mode: {mode}.") from e
    body = np.frombuffer(data, dtype=_RUN_DTYPE, offset=_HEADER.size)
    runs = body["run"].astype(np.int64)
    if int(runs.sum()) != CHUNK_VOLUME or (runs == 0).any():
        raise MalformedPayloadError("Chunk runs do not cover exactly one chunk.")
    if (body["type"] > max(BlockType)).any() or (body["power"] > MAX_POWER).any():
        raise MalformedPayloadError("Chunk payload holds an invalid block.")
    values = (body["type"].astype(np.uint8) << 4) | body["power"].astype(np.uint8)
    chunk = Chunk(ChunkCoord(cx, cz), np.repeat(values, runs), generated_by=generated_by)
    chunk._bytes = bytes(data)
    return chunk


def chunk_range(center: int, radius: int) -> range:
    """Chunk indices whose blocks lie within ``radius`` of ``center`` along one axis."""
    return range((center - radius) // CHUNK_WIDTH, (center + radius) // CHUNK_WIDTH + 1)


def view_square(pos: Position, radius: int) -> set[ChunkCoord]:
    """Chunks within Chebyshev block-distance ``radius`` of a position."""
    return {ChunkCoord(cx, cz) for cx in chunk_range(pos.x, radius) for cz in chunk_range(pos.z, radius)}


def chunk_distance(pos: Position, coord: ChunkCoord) -> int:
    """Chebyshev block-distance from a position to the nearest column of a chunk."""
    x0, z0 = coord.cx * CHUNK_WIDTH, coord.cz * CHUNK_WIDTH
    dx = max(0, x0 - pos.x, pos.x - (x0 + CHUNK_WIDTH - 1))
    dz = max(0, z0 - pos.z, pos.z - (z0 + CHUNK_WIDTH - 1))
    return max(dx, dz)


class WorldSnapshot(NamedTuple):
    """Read-only copy of what off-tick subsystems need."""

    tick: int
    avatars: dict[PlayerId, Position]
    loaded: frozenset[ChunkCoord]
    view_distance_blocks: int


class WorldState:
    """Loaded chunks, avatar positions and the tick counter.

    :param view_distance_blocks: radius of the view square around each avatar
    """

    def __init__(self, view_distance_blocks: int = DEFAULT_VIEW_DISTANCE) -> None:
        if not isinstance(view_distance_blocks, int) or isinstance(view_distance_blocks, bool):
            raise MveValueError("view_distance_blocks must be an integer.")
        if view_distance_blocks < 0:
            raise MveValueError("view_distance_blocks must be >= 0.")
        self.loaded: dict[ChunkCoord, Chunk] = {}
        self.avatars: dict[PlayerId, Position] = {}
        self.view_distance_blocks = view_distance_blocks
        self._tick = 0

    @property
    def tick(self) -> int:
        """Monotone tick counter."""
        return self._tick

    def advance_tick(self) -> int:
        """Increment the tick counter."""
        self._tick += 1
        return self._tick

    def _chunk_at(self, pos: Position) -> Chunk:
        if not 0 <= pos[1] < CHUNK_HEIGHT:
            raise MveValueError(f"y must be within [0, {CHUNK_HEIGHT}), got {pos[1]}.")
        coord = ChunkCoord.of_position(pos)
        chunk = self.loaded.get(coord)
        if chunk is None:
            raise ChunkNotLoadedError(f"Chunk {tuple(coord)} is not loaded.", self)
        return chunk

    def get_block(self, pos: Position) -> Block:
        """Read the block at ``pos``.

        :raises ChunkNotLoadedError: the containing chunk is not loaded
        """
        chunk = self._chunk_at(pos)
        return chunk.get(pos[0] % CHUNK_WIDTH, pos[1], pos[2] % CHUNK_WIDTH)

    def set_block(self, pos: Position, block: Block) -> ModificationEvent:
        """Replace the block at ``pos`` and mark its chunk dirty.

        :raises ChunkNotLoadedError: the containing chunk is not loaded
        :return: the modification event for construct bookkeeping
        """
        chunk = self._chunk_at(pos)
        block = Block.of(block.type, block.power)
        chunk.set(pos[0] % CHUNK_WIDTH, pos[1], pos[2] % CHUNK_WIDTH, block)
        return ModificationEvent(Position(*pos), self._tick, block)

    def is_loaded(self, pos: Position) -> bool:
        """Whether the chunk containing ``pos`` is loaded."""
        return ChunkCoord.of_position(pos) in self.loaded

    def required_chunks(self, extra_blocks: int = 0) -> set[ChunkCoord]:
        """Union of the view squares of all avatars.

        :param extra_blocks: grow the view distance by this many blocks
        """
        required: set[ChunkCoord] = set()
        for pos in self.avatars.values():
            required |= view_square(pos, self.view_distance_blocks + extra_blocks)
        return required

    def dirty_chunks(self) -> list[Chunk]:
        """Loaded chunks modified since their last persist."""
        return [chunk for chunk in self.loaded.values() if chunk.dirty]

    def insert_chunk(self, chunk: Chunk) -> None:
        """Make a chunk loaded (replacing any loaded copy)."""
        self.loaded[chunk.coord] = chunk

    def unload_far_chunks(self, keep: Iterable[ChunkCoord]) -> list[Chunk]:
        """Remove every loaded chunk outside ``keep`` and return the removed chunks."""
        keep = set(keep)
        removed = [chunk for coord, chunk in self.loaded.items() if coord not in keep]
        for chunk in removed:
            del self.loaded[chunk.coord]
        return removed

    def read_box(self, box: Box) -> np.ndarray:
        """Copy the packed cells of a box, shape ``(y, z, x)``.

        :raises ChunkNotLoadedError: the box overlaps an unloaded chunk
        """
        out = np.empty(box.shape, dtype=np.uint8)
        for coord, (xs, zs), (bx, bz) in self._box_slices(box):
            chunk = self.loaded[coord]
            out[:, bz, bx] = chunk.cells[box.y0 : box.y1 + 1, zs, xs]
        return out

    def write_box(self, box: Box, mask: np.ndarray, cells: np.ndarray) -> int:
        """Write ``cells`` where ``mask`` is set; touched chunks that change become dirty.

        :raises ChunkNotLoadedError: the box overlaps an unloaded chunk
        :return: number of changed cells
        """
        changed_total = 0
        for coord, (xs, zs), (bx, bz) in self._box_slices(box):
            chunk = self.loaded[coord]
            view = chunk.cells[box.y0 : box.y1 + 1, zs, xs]
            sub_mask = mask[:, bz, bx]
            changed = sub_mask & (view != cells[:, bz, bx])
            n = int(np.count_nonzero(changed))
            if n:
                view[changed] = cells[:, bz, bx][changed]
                chunk.touch()
                changed_total += n
        return changed_total

    def _box_slices(self, box: Box) -> list[tuple[ChunkCoord, tuple[slice, slice], tuple[slice, slice]]]:
        if box.y0 < 0 or box.y1 >= CHUNK_HEIGHT:
            raise MveValueError("Box exceeds the world height.")
        slices = []
        for coord in sorted(box.chunks()):
            if coord not in self.loaded:
                raise ChunkNotLoadedError(f"Chunk {tuple(coord)} is not loaded.", self)
            x0, z0 = coord.cx * CHUNK_WIDTH, coord.cz * CHUNK_WIDTH
            lx0, lx1 = max(box.x0, x0), min(box.x1, x0 + CHUNK_WIDTH - 1)
            lz0, lz1 = max(box.z0, z0), min(box.z1, z0 + CHUNK_WIDTH - 1)
            slices.append(
                (
                    coord,
                    (slice(lx0 - x0, lx1 - x0 + 1), slice(lz0 - z0, lz1 - z0 + 1)),
                    (slice(lx0 - box.x0, lx1 - box.x0 + 1), slice(lz0 - box.z0, lz1 - box.z0 + 1)),
                )
            )
        return slices

    def snapshot(self) -> WorldSnapshot:
        """Read-only copy for off-tick subsystems."""
        return WorldSnapshot(
            tick=self._tick,
            avatars=dict(self.avatars),
            loaded=frozenset(self.loaded),
            view_distance_blocks=self.view_distance_blocks,
        )
