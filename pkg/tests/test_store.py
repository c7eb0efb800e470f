import json

import pytest

from mve_offload.clock import VirtualClock
from mve_offload.bench import percentile
from mve_offload.errors import BlobNotFoundError, MveTypeError, MveValueError
from mve_offload.latency import Distribution, StorageLatencyModel
from mve_offload.storages import EmulatedBlobStorage, LocalDiskStorage
from mve_offload.store import MANIFEST, CachePolicy, ChunkStore
from mve_offload.typings import Position, StorageRead
from mve_offload.world import WorldState


STORAGE_LATENCY = StorageLatencyModel(
    local_read=Distribution.constant(1.0),
    local_write=Distribution.constant(1.0),
    blob_read=Distribution.constant(10.0),
    blob_write=Distribution.constant(10.0),
)


@pytest.fixture
def clock():
    return VirtualClock()


@pytest.fixture
def backend(clock):
    storage = EmulatedBlobStorage("world", clock=clock)
    storage.put("c_0_0", b"zero")
    storage.put("c_-2_0", b"west")
    storage.put("c_2_0", b"east")
    return storage


@pytest.fixture
def store(backend, clock, tmp_path):
    s = ChunkStore(backend, clock, cache_dir=tmp_path / "cache", latency_model=STORAGE_LATENCY)
    try:
        yield s
    finally:
        s.close()


class TestCachePolicy:
    @pytest.mark.parametrize(
        ("kwargs", "error"),
        [
            ({"prefetch_margin_blocks": -1}, MveValueError),
            ({"prefetch_margin_blocks": 1.5}, MveTypeError),
            ({"eviction_idle_ms": -1.0}, MveValueError),
            ({"write_back_interval_ms": 0}, MveValueError),
        ],
    )
    def test_invalid(self, kwargs, error):
        with pytest.raises(error):
            CachePolicy(**kwargs).validate()


class TestReads:
    def test_request_and_poll(self, store, clock):
        assert store.has("c_0_0")
        assert not store.in_memory("c_0_0")
        assert store.peek("c_0_0") is None

        assert store.request("c_0_0")
        assert not store.request("c_0_0")
        assert not store.request("c_7_7")
        assert store.pending == 1
        assert store.poll() == []

        clock.sleep_until(10.0)
        assert store.poll() == ["c_0_0"]
        assert store.peek("c_0_0") == b"zero"
        assert not store.request("c_0_0")
        assert store.reads == [StorageRead(0.0, "c_0_0", 10.0, False, False)]

    def test_second_read_hits_the_cache_directory(self, store, clock):
        store.request("c_0_0")
        clock.sleep_until(10.0)
        store.poll()
        assert store.evict_idle(now_ms=10.0 + 60_001.0) == 1
        assert not store.in_memory("c_0_0")

        store.request("c_0_0")
        clock.sleep_until(11.0)
        assert store.poll() == ["c_0_0"]
        assert store.reads[-1] == StorageRead(10.0, "c_0_0", 1.0, True, False)
        summary = store.summary()
        assert (summary["reads"], summary["local_hits"], summary["evicted"]) == (2, 1, 1)

    def test_failed_fetch(self, store, backend, clock):
        backend.delete("c_2_0")
        assert store.request("c_2_0")
        clock.sleep_until(10.0)
        assert store.poll() == []
        assert store.failures == 1
        assert store.pending == 0

    def test_unexpected_error_does_not_lose_other_fetches(self, store, backend, clock, monkeypatch):
        get = backend.get

        def flaky_get(key):
            if key == "c_-2_0":
                raise RuntimeError("connection reset")
            return get(key)

        monkeypatch.setattr(backend, "get", flaky_get)
        assert store.request("c_-2_0")
        assert store.request("c_2_0")
        clock.sleep_until(10.0)
        assert store.poll() == ["c_2_0"]
        assert store.failures == 1
        assert store.pending == 0
        # the failed key can be requested again
        assert store.request("c_-2_0")

    def test_blocking_read(self, store):
        assert store.read("c_-2_0") == b"west"
        assert store.in_memory("c_-2_0")
        assert store.read("c_-2_0") == b"west"
        assert len(store.reads) == 1
        with pytest.raises(BlobNotFoundError):
            store.read("c_9_9")

    async def test_async_read_and_flush(self, store, backend):
        assert await store.read_chunk("c_0_0") == b"zero"
        store.write("c_3_3", b"three")
        assert await store.flush() == 1
        assert backend.get("c_3_3") == b"three"

    def test_prefetch_ring(self, store):
        world = WorldState(16)
        world.avatars[1] = Position(0, 4, 0)
        # view 16 plus the 32-block margin; c_0_0 is inside the view
        assert store.prefetch(world.snapshot()) == ["c_-2_0", "c_2_0"]
        assert store.pending == 2

    def test_prefetch_disabled(self, backend, clock, tmp_path):
        store = ChunkStore(backend, clock, policy=CachePolicy(prefetch_margin_blocks=0), cache_dir=tmp_path)
        world = WorldState(16)
        world.avatars[1] = Position(0, 4, 0)
        assert store.prefetch(world.snapshot()) == []
        store.close()


class TestWrites:
    def test_write_and_flush(self, store, backend, tmp_path):
        store.write("c_5_5", b"five")
        assert store.has("c_5_5")
        assert store.peek("c_5_5") == b"five"
        assert store.dirty_keys() == ["c_5_5"]
        assert json.loads((tmp_path / "cache" / MANIFEST).read_text()) == {"dirty": ["c_5_5"]}
        assert not backend.exists("c_5_5")

        assert store.flush() == 1
        assert backend.get("c_5_5") == b"five"
        assert store.dirty_keys() == []
        assert json.loads((tmp_path / "cache" / MANIFEST).read_text()) == {"dirty": []}
        assert store.flush() == 0

    def test_dirty_entries_are_not_evicted(self, store):
        store.write("c_5_5", b"five")
        assert store.evict_idle(now_ms=1e9) == 0
        assert store.in_memory("c_5_5")

    def test_periodic_write_back(self, store, clock):
        store.write("c_5_5", b"five")
        assert store.maybe_flush() is None
        clock.sleep_until(30_000.0)
        assert store.maybe_flush() == 1
        assert store.summary()["flushed"] == 1

    def test_recover_after_crash(self, clock, tmp_path):
        blobs, cache = tmp_path / "blobs", tmp_path / "cache"
        crashed = ChunkStore(LocalDiskStorage("world", blobs), clock, cache_dir=cache)
        crashed.write("c_1_2", b"unflushed")
        crashed.close(flush=False)

        store = ChunkStore(LocalDiskStorage("world", blobs), clock, cache_dir=cache)
        assert not LocalDiskStorage("world", blobs).exists("c_1_2")
        assert store.recover() == ["c_1_2"]
        assert store.dirty_keys() == ["c_1_2"]
        store.close()
        assert LocalDiskStorage("world", blobs).get("c_1_2") == b"unflushed"

    def test_unreadable_manifest(self, clock, tmp_path):
        (tmp_path / MANIFEST).write_text("not json")
        store = ChunkStore(EmulatedBlobStorage("world", clock=clock), clock, cache_dir=tmp_path)
        assert store.recover() == []
        store.close()

    def test_temporary_cache_is_removed(self, clock):
        store = ChunkStore(EmulatedBlobStorage("world", clock=clock), clock)
        cache_dir = store.cache_dir
        store.write("c_0_0", b"x")
        assert cache_dir.is_dir()
        store.close()
        assert not cache_dir.exists()


class TestReadLatency:
    @pytest.mark.timeout(120)
    def test_cached_reads_fit_in_a_tick(self, clock, tmp_path):
        backend = EmulatedBlobStorage("world", clock=clock)
        keys = [f"c_{k}_0" for k in range(4000)]
        for key in keys:
            backend.put(key, key.encode())
        store = ChunkStore(backend, clock, cache_dir=tmp_path / "cache", seed=7)
        try:
            for key in keys:
                store.request(key)
            clock.sleep_until(1_000.0)
            assert len(store.poll()) == len(keys)
            assert store.evict_idle(now_ms=1e9) == len(keys)

            for key in keys:
                store.request(key)
            clock.sleep_until(2_000.0)
            assert len(store.poll()) == len(keys)
        finally:
            store.close()

        local = [r.latency_ms for r in store.reads if r.local]
        blob = [r.latency_ms for r in store.reads if not r.local]
        assert len(local) == len(blob) == len(keys)
        assert percentile(local, 99.9) <= 34.0
        for q in (95, 99, 99.9):
            assert percentile(local, q) < percentile(blob, q)
        assert max(blob) <= 500.0
