import numpy as np
import pytest

from mve_offload.errors import ChunkNotLoadedError, MalformedPayloadError, MveValueError
from mve_offload.terrain import generate_chunk
from mve_offload.typings import AIR, Block, BlockType, Box, ChunkCoord, GenerationMode, Position, WorldSeed
from mve_offload.world import (
    Chunk,
    WorldState,
    chunk_distance,
    chunk_index,
    chunk_local,
    decode_chunk,
    encode_chunk,
    pack,
    unpack,
    view_square,
)
from tests.parameters import FLAT, SURFACE_Y, flat_world


class TestCells:
    @pytest.mark.parametrize(("type_", "power"), [(BlockType.Air, 0), (BlockType.Wire, 7), (BlockType.Lamp, 15)])
    def test_pack_unpack(self, type_, power):
        assert unpack(pack(type_, power)) == Block(type_, power)

    def test_chunk_index_walks_x_fastest(self):
        assert chunk_index(1, 0, 0) == 1
        assert chunk_index(0, 0, 1) == 16
        assert chunk_index(0, 1, 0) == 256
        assert chunk_local(chunk_index(3, 100, 9)) == (3, 100, 9)

    @pytest.mark.parametrize(
        ("block", "expected"),
        [
            (Block(BlockType.Solid, 9), Block(BlockType.Solid, 0)),
            (Block(BlockType.Source, 0), Block(BlockType.Source, 15)),
            (Block(BlockType.Wire, 20), Block(BlockType.Wire, 15)),
        ],
    )
    def test_block_of_normalizes_power(self, block, expected):
        assert Block.of(block.type, block.power) == expected


class TestChunkCodec:
    def test_flat_chunk_is_compact(self):
        chunk = generate_chunk(FLAT, ChunkCoord(2, -3))
        data = encode_chunk(chunk)
        # header plus two runs: Solid then Air
        assert len(data) == 9 + 2 * 4
        assert decode_chunk(data) == chunk

    def test_long_runs_are_split(self):
        chunk = Chunk(ChunkCoord(0, 0))
        data = encode_chunk(chunk)
        # 65536 Air cells do not fit one uint16 run
        assert len(data) == 9 + 2 * 4
        assert decode_chunk(data).count(BlockType.Air) == 16 * 16 * 256

    def test_noise_chunk(self):
        chunk = generate_chunk(WorldSeed(42, GenerationMode.Noise), ChunkCoord(-1, 5))
        chunk.set(3, 200, 4, Block(BlockType.Wire, 9))
        decoded = decode_chunk(chunk.to_bytes())
        assert decoded == chunk
        assert decoded.generated_by == GenerationMode.Noise
        assert decoded.get(3, 200, 4) == Block(BlockType.Wire, 9)

    def test_bytes_cache_is_dropped_on_write(self):
        chunk = generate_chunk(FLAT, ChunkCoord(0, 0))
        before = chunk.to_bytes()
        chunk.set(0, 10, 0, Block(BlockType.Solid))
        assert chunk.dirty
        assert chunk.to_bytes() != before

    @pytest.mark.parametrize(
        "mutate",
        [
            lambda d: d[:5],
            lambda d: d + b"\x00",
            lambda d: d[:9] + b"\x01\x00\x00\x00",
            lambda d: d[:8] + b"\x09" + d[9:],
            lambda d: d[:9] + b"\x0f" + d[10:],
        ],
    )
    def test_malformed(self, mutate):
        data = encode_chunk(generate_chunk(FLAT, ChunkCoord(0, 0)))
        with pytest.raises(MalformedPayloadError):
            decode_chunk(mutate(data))

    def test_wrong_cell_count(self):
        with pytest.raises(MveValueError):
            Chunk(ChunkCoord(0, 0), np.zeros(10, dtype=np.uint8))


class TestWorldState:
    def test_get_and_set(self):
        world = flat_world()
        pos = Position(-5, SURFACE_Y, 7)
        assert world.get_block(pos) == AIR
        assert world.get_block(pos._replace(y=SURFACE_Y - 1)).type == BlockType.Solid
        event = world.set_block(pos, Block(BlockType.Source, 0))
        assert event.block == Block(BlockType.Source, 15)
        assert event.tick == world.tick
        assert world.get_block(pos) == Block(BlockType.Source, 15)
        assert [c.coord for c in world.dirty_chunks()] == [ChunkCoord(-1, 0)]

    def test_unloaded_chunk(self):
        world = flat_world(0)
        with pytest.raises(ChunkNotLoadedError):
            world.get_block(Position(16, 4, 0))
        with pytest.raises(KeyError):
            world.set_block(Position(-1, 4, 0), AIR)

    @pytest.mark.parametrize("y", [-1, 256])
    def test_height_out_of_range(self, y):
        with pytest.raises(MveValueError):
            flat_world(0).get_block(Position(0, y, 0))

    @pytest.mark.parametrize("view", [-1, 1.5, True])
    def test_bad_view_distance(self, view):
        with pytest.raises(MveValueError):
            WorldState(view)

    def test_tick_is_monotone(self):
        world = WorldState()
        assert [world.advance_tick() for _ in range(3)] == [1, 2, 3]
        assert world.tick == 3

    def test_required_chunks_is_union_of_view_squares(self):
        world = WorldState(16)
        world.avatars[1] = Position(0, 4, 0)
        world.avatars[2] = Position(100, 4, 0)
        required = world.required_chunks()
        assert required == view_square(Position(0, 4, 0), 16) | view_square(Position(100, 4, 0), 16)
        assert ChunkCoord(-1, -1) in required
        assert ChunkCoord(7, 1) in required
        assert ChunkCoord(3, 0) not in required
        assert len(world.required_chunks(extra_blocks=16)) > len(required)

    def test_unload_far_chunks(self):
        world = flat_world(2)
        removed = world.unload_far_chunks({ChunkCoord(0, 0), ChunkCoord(1, 1)})
        assert len(removed) == 23
        assert set(world.loaded) == {ChunkCoord(0, 0), ChunkCoord(1, 1)}

    def test_box_spanning_chunks(self):
        world = flat_world()
        box = Box(-2, 4, -2, 1, 5, 1)
        cells = world.read_box(box)
        assert cells.shape == (2, 4, 4)
        assert not cells.any()

        new = np.full(box.shape, pack(BlockType.Lamp, 3), dtype=np.uint8)
        mask = np.zeros(box.shape, dtype=bool)
        mask[0, 0, 0] = mask[1, 3, 3] = True
        assert world.write_box(box, mask, new) == 2
        assert world.get_block(Position(-2, 4, -2)) == Block(BlockType.Lamp, 3)
        assert world.get_block(Position(1, 5, 1)) == Block(BlockType.Lamp, 3)
        assert {c.coord for c in world.dirty_chunks()} == {ChunkCoord(-1, -1), ChunkCoord(0, 0)}
        # unchanged cells do not dirty a chunk
        for chunk in world.loaded.values():
            chunk.dirty = False
        assert world.write_box(box, mask, new) == 0
        assert world.dirty_chunks() == []

    def test_box_over_unloaded_chunk(self):
        with pytest.raises(ChunkNotLoadedError):
            flat_world(0).read_box(Box(0, 4, 0, 20, 4, 0))

    def test_snapshot_is_a_copy(self):
        world = flat_world(0)
        world.avatars[1] = Position(0, 4, 0)
        snapshot = world.snapshot()
        world.avatars[1] = Position(5, 4, 5)
        world.insert_chunk(generate_chunk(FLAT, ChunkCoord(3, 3)))
        assert snapshot.avatars[1] == Position(0, 4, 0)
        assert ChunkCoord(3, 3) not in snapshot.loaded


class TestGeometry:
    @pytest.mark.parametrize(
        ("pos", "coord", "expected"),
        [
            (Position(0, 4, 0), ChunkCoord(0, 0), 0),
            (Position(0, 4, 0), ChunkCoord(1, 0), 16),
            (Position(0, 4, 0), ChunkCoord(-1, 0), 1),
            (Position(5, 4, 5), ChunkCoord(-2, 3), 43),
        ],
    )
    def test_chunk_distance(self, pos, coord, expected):
        assert chunk_distance(pos, coord) == expected

    def test_view_square_size(self):
        assert len(view_square(Position(8, 4, 8), 128)) == 17 * 17
        assert view_square(Position(0, 4, 0), 0) == {ChunkCoord(0, 0)}

    def test_chunk_key(self):
        assert ChunkCoord(-3, 12).key == "c_-3_12"
        assert ChunkCoord.from_key("c_-3_12") == ChunkCoord(-3, 12)
        with pytest.raises(MveValueError):
            ChunkCoord.from_key("x_1_2")
