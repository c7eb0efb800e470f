import numpy as np
import pytest

from mve_offload.clock import VirtualClock
from mve_offload.errors import MalformedPayloadError, MveTypeError, MveValueError, NoAvatarsError
from mve_offload.faas import EmulatedRuntime
from mve_offload.latency import CostModel, Distribution, StorageLatencyModel
from mve_offload.storages import LocalDiskStorage
from mve_offload.store import ChunkStore
from mve_offload.terrain import (
    TerrainDispatcher,
    column_heights,
    decode_generate,
    distance_to_closest_unloaded,
    encode_generate,
    generate_chunk,
    required_with_distance,
    spawn_position,
    surface_height,
)
from mve_offload.typings import (
    BlockType,
    ChunkCoord,
    GenerationMode,
    GenTaskMode,
    GenTaskStatus,
    Position,
    WorldSeed,
)
from mve_offload.world import WorldState
from tests.parameters import FAST_LATENCY, FLAT, flat_world, terrain_modes


NOISE = WorldSeed(42, GenerationMode.Noise)
STORAGE_LATENCY = StorageLatencyModel(
    local_read=Distribution.constant(1.0),
    local_write=Distribution.constant(1.0),
    blob_read=Distribution.constant(10.0),
    blob_write=Distribution.constant(10.0),
)


def world_with_avatar(view=16, pos=Position(0, 4, 0)):
    world = WorldState(view)
    world.avatars[1] = pos
    return world


class TestGeneration:
    def test_flat(self):
        chunk = generate_chunk(FLAT, ChunkCoord(-7, 3))
        assert chunk.count(BlockType.Solid) == 16 * 16 * 4
        assert chunk.generated_by == GenerationMode.Flat
        assert spawn_position(FLAT) == Position(0, 4, 0)

    def test_noise_is_deterministic(self):
        coord = ChunkCoord(3, -2)
        assert generate_chunk(NOISE, coord) == generate_chunk(WorldSeed(42, GenerationMode.Noise), coord)
        heights = column_heights(NOISE, coord)
        assert heights.shape == (16, 16)
        assert heights.min() >= 1
        assert heights.max() <= 128
        assert not np.array_equal(heights, column_heights(WorldSeed(43, GenerationMode.Noise), coord))

    def test_noise_is_continuous_across_chunks(self):
        left = column_heights(NOISE, ChunkCoord(0, 0))
        right = column_heights(NOISE, ChunkCoord(1, 0))
        # neighbouring columns on either side of the border
        assert np.abs(left[:, 15] - right[:, 0]).max() <= 8

    def test_surface_height(self):
        assert surface_height(FLAT, 123, -456) == 4
        assert surface_height(NOISE, -1, -1) == column_heights(NOISE, ChunkCoord(-1, -1))[15, 15]
        pos = spawn_position(NOISE, 5, 9)
        assert generate_chunk(NOISE, ChunkCoord(0, 0)).get(5, pos.y, 9).type == BlockType.Air
        assert generate_chunk(NOISE, ChunkCoord(0, 0)).get(5, pos.y - 1, 9).type == BlockType.Solid

    def test_generate_payload(self):
        data = encode_generate(NOISE, ChunkCoord(-5, 9))
        assert len(data) == 17
        assert decode_generate(data) == (NOISE, ChunkCoord(-5, 9))
        with pytest.raises(MalformedPayloadError):
            decode_generate(data[:-1])
        with pytest.raises(MalformedPayloadError):
            decode_generate(data[:-1] + b"\x07")


class TestDistance:
    def test_needs_avatars(self):
        with pytest.raises(NoAvatarsError):
            distance_to_closest_unloaded(WorldState(32))

    def test_closest_unloaded(self):
        world = flat_world(1, view_distance_blocks=32)
        world.avatars[1] = Position(0, 4, 0)
        # chunk -2 ends at x=-17
        assert distance_to_closest_unloaded(world) == 17

    def test_clamped_to_view(self):
        world = flat_world(2, view_distance_blocks=32)
        world.avatars[1] = Position(0, 4, 0)
        assert distance_to_closest_unloaded(world.snapshot()) == 32

    def test_required_nearest_first(self):
        needed = required_with_distance(world_with_avatar().snapshot(), 0)
        assert len(needed) == 9
        assert needed[0] == (0, ChunkCoord(0, 0))
        distances = [d for d, _ in needed]
        assert distances == sorted(distances)
        assert len(required_with_distance(world_with_avatar().snapshot(), 16)) == 25


class TestTerrainDispatcher:
    @pytest.mark.parametrize(
        ("kwargs", "error"),
        [
            ({"lookahead_blocks": -1}, MveValueError),
            ({"max_chunk_loads_per_tick": 0}, MveValueError),
            ({"max_local_generations_per_tick": 1.5}, MveTypeError),
            ({"max_chunk_loads_per_tick": True}, MveTypeError),
        ],
    )
    def test_invalid_budget(self, kwargs, error):
        with pytest.raises(error):
            TerrainDispatcher("LocalSync", FLAT, VirtualClock(), **kwargs)

    def test_invalid_mode(self):
        with pytest.raises(MveValueError):
            TerrainDispatcher("Offloaded", FLAT, VirtualClock())
        with pytest.raises(MveValueError):
            TerrainDispatcher("Remote", FLAT, VirtualClock())

    def test_local_sync_respects_budget(self):
        clock = VirtualClock()
        world = world_with_avatar()
        dispatcher = TerrainDispatcher("LocalSync", FLAT, clock, lookahead_blocks=0, max_local_generations_per_tick=4)
        created = dispatcher.dispatch(world.snapshot())
        assert len(created) == 9
        assert {t.mode for t in created} == {GenTaskMode.LocalSync}
        assert (dispatcher.ready, dispatcher.pending) == (4, 5)

        loaded = dispatcher.load_in(world)
        assert loaded[0] == ChunkCoord(0, 0)
        assert len(loaded) == 4
        assert clock.take_charged() == pytest.approx(4 * CostModel().chunk_load_ms)

        for _ in range(2):
            assert dispatcher.dispatch(world.snapshot()) == []
            dispatcher.load_in(world)
        assert set(world.loaded) == world.required_chunks()
        assert (dispatcher.generations, dispatcher.loads, dispatcher.pending) == (9, 9, 0)
        dispatcher.close()

    def test_local_async_workers(self):
        clock = VirtualClock()
        world = world_with_avatar()
        cost = CostModel(chunk_generation_ms=2.0, local_async_workers=2)
        dispatcher = TerrainDispatcher("LocalAsync", FLAT, clock, cost_model=cost, lookahead_blocks=0)
        try:
            dispatcher.dispatch(world.snapshot())
            assert {t.status for t in dispatcher.tasks()} == {GenTaskStatus.InFlight}
            assert dispatcher.collect() == 0
            # two workers finish a chunk every 2 ms each
            clock.sleep_until(4.0)
            assert dispatcher.collect() == 4
            clock.sleep_until(10.0)
            assert dispatcher.collect() == 5
            assert len(dispatcher.load_in(world)) == 9
        finally:
            dispatcher.close()

    def test_failed_generation_is_dispatched_again(self, monkeypatch):
        clock = VirtualClock()
        world = world_with_avatar()
        cost = CostModel(chunk_generation_ms=2.0, local_async_workers=2)
        dispatcher = TerrainDispatcher("LocalAsync", FLAT, clock, cost_model=cost, lookahead_blocks=0)
        failing = {ChunkCoord(0, 0)}

        def generate(coord):
            if coord in failing:
                failing.discard(coord)
                raise OSError("worker crashed")
            return generate_chunk(FLAT, coord)

        monkeypatch.setattr(dispatcher, "_generate_local", generate)
        try:
            dispatcher.dispatch(world.snapshot())
            clock.sleep_until(10.0)
            assert dispatcher.collect() == 8
            assert (dispatcher.failures, dispatcher.pending, dispatcher.ready) == (1, 0, 8)

            (task,) = dispatcher.dispatch(world.snapshot())
            assert task.coord == ChunkCoord(0, 0)
            clock.sleep_until(20.0)
            assert dispatcher.collect() == 1
            assert len(dispatcher.load_in(world)) == 9
        finally:
            dispatcher.close()

    def test_offloaded(self):
        clock = VirtualClock()
        world = world_with_avatar()
        with EmulatedRuntime(clock, latency_model=FAST_LATENCY) as runtime:
            dispatcher = TerrainDispatcher("Offloaded", FLAT, clock, runtime=runtime, lookahead_blocks=0)
            dispatcher.dispatch(world.snapshot())
            assert sorted(t.invocation_id for t in dispatcher.tasks()) == list(range(1, 10))
            assert dispatcher.collect() == 0
            clock.sleep_until(121.0)
            assert dispatcher.collect() == 9
            assert runtime.cold_starts == 9
            assert len(dispatcher.load_in(world)) == 9
            assert dispatcher.failures == 0
            dispatcher.close()

    @pytest.mark.parametrize("mode", terrain_modes)
    def test_every_mode_fills_the_view(self, mode):
        clock = VirtualClock()
        world = world_with_avatar()
        with EmulatedRuntime(clock, latency_model=FAST_LATENCY) as runtime:
            dispatcher = TerrainDispatcher(mode, FLAT, clock, runtime=runtime, lookahead_blocks=0)
            for tick in range(1, 6):
                clock.sleep_until(tick * 50.0)
                dispatcher.collect()
                dispatcher.load_in(world)
                dispatcher.dispatch(world.snapshot())
            assert set(world.loaded) == world.required_chunks()
            assert all(world.loaded[c] == generate_chunk(FLAT, c) for c in world.loaded)
            assert distance_to_closest_unloaded(world) == 16
            dispatcher.close()

    def test_unneeded_chunks_are_dropped(self):
        clock = VirtualClock()
        world = world_with_avatar()
        dispatcher = TerrainDispatcher("LocalSync", FLAT, clock, lookahead_blocks=0)
        dispatcher.dispatch(world.snapshot())
        world.avatars[1] = Position(1000, 4, 1000)
        assert dispatcher.load_in(world) == []
        assert dispatcher.ready == 0
        dispatcher.close()

    def test_stored_chunks_are_fetched(self, tmp_path):
        clock = VirtualClock()
        backend = LocalDiskStorage("world", tmp_path / "blobs")
        store = ChunkStore(backend, clock, cache_dir=tmp_path / "cache1", latency_model=STORAGE_LATENCY)
        first = TerrainDispatcher("LocalSync", FLAT, clock, store=store, lookahead_blocks=0, max_local_generations_per_tick=9)
        first.dispatch(world_with_avatar().snapshot())
        assert first.generations == 9
        assert store.flush() == 9
        store.close()

        clock = VirtualClock()
        store = ChunkStore(
            LocalDiskStorage("world", tmp_path / "blobs"), clock, cache_dir=tmp_path / "cache2", latency_model=STORAGE_LATENCY
        )
        world = world_with_avatar()
        second = TerrainDispatcher("LocalSync", FLAT, clock, store=store, lookahead_blocks=0)
        assert second.dispatch(world.snapshot()) == []
        assert store.pending == 9
        clock.sleep_until(100.0)
        assert len(store.poll()) == 9
        second.dispatch(world.snapshot())
        assert len(second.load_in(world)) == 9
        assert second.generations == 0
        store.close()

    def test_ensure(self, tmp_path):
        clock = VirtualClock()
        store = ChunkStore(LocalDiskStorage("world", tmp_path / "blobs"), clock, cache_dir=tmp_path / "cache")
        chunk = generate_chunk(FLAT, ChunkCoord(0, 0))
        chunk.set(1, 4, 1, chunk.get(1, 3, 1))
        store.write(chunk.coord.key, chunk.to_bytes())

        world = WorldState(16)
        dispatcher = TerrainDispatcher("LocalSync", FLAT, clock, store=store)
        assert dispatcher.ensure(world, [ChunkCoord(0, 0), ChunkCoord(1, 0)]) == 2
        assert dispatcher.ensure(world, [ChunkCoord(0, 0)]) == 0
        assert world.get_block(Position(1, 4, 1)).type == BlockType.Solid
        assert dispatcher.generations == 1
        assert store.has(ChunkCoord(1, 0).key)
        store.close()
