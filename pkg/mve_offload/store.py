"""
Terrain persistence: read-through cache, distance prefetch and periodic write-back.

Three tiers hold chunk bytes:

1. memory: entries the tick thread can ``peek`` at without blocking;
2. the local cache directory: one file per key, plus ``manifest.json`` listing
   the keys written locally but not yet flushed to the back-end;
3. the blob back-end (local disk, emulated blob store or Redis).

The tick thread never blocks on the back-end. It peeks into memory and issues
asynchronous ``request``s that complete on worker threads and are released by
``poll`` at the start of a tick. Under a virtual clock a request completes after
a latency sampled from the ``StorageLatencyModel``: ``local_read`` when the key
is in the cache directory, ``blob_read`` when it has to come from a remote
back-end.
"""

import json
import tempfile
import threading
import time

from concurrent.futures import Future, ThreadPoolExecutor
from pathlib import Path
from typing import Any, NamedTuple, Optional, Union

from mve_offload.clock import BaseClock, DeferredQueue
from mve_offload.errors import BackendUnavailableError, BlobNotFoundError, MveTypeError, MveValueError
from mve_offload.latency import LatencySampler, StorageLatencyModel
from mve_offload.logs import DEFAULT_LOG_FORMAT, get_logger
from mve_offload.storages.base_storage import BaseBlobStorage
from mve_offload.storages.local import LocalDiskStorage
from mve_offload.sugar import dual
from mve_offload.typings import OptionalLevel, StorageRead
from mve_offload.world import WorldSnapshot, chunk_distance, view_square


MANIFEST = "manifest.json"


class CachePolicy(NamedTuple):
    """Cache behaviour.

    Properties:
     - prefetch_margin_blocks: prefetch this far beyond the view distance (0 = plain read-through)
     - eviction_idle_ms: clean entries idle for longer are dropped from memory
     - write_back_interval_ms: period of flushes to the back-end
    """

    prefetch_margin_blocks: int = 32
    eviction_idle_ms: float = 60_000.0
    write_back_interval_ms: float = 30_000.0

    def validate(self) -> "CachePolicy":
        """Check ranges; returns the policy."""
        if not isinstance(self.prefetch_margin_blocks, int) or isinstance(self.prefetch_margin_blocks, bool):
            raise MveTypeError("prefetch_margin_blocks must be an integer.")
        if self.prefetch_margin_blocks < 0:
            raise MveValueError("prefetch_margin_blocks must be >= 0.")
        if self.eviction_idle_ms < 0:
            raise MveValueError("eviction_idle_ms must be >= 0.")
        if self.write_back_interval_ms <= 0:
            raise MveValueError("write_back_interval_ms must be > 0.")
        return self

    def as_dict(self) -> dict[str, Any]:
        """Serialize to a config-friendly dictionary."""
        return self._asdict()


class _Entry:
    __slots__ = ("data", "dirty", "last_access_ms")

    def __init__(self, data: bytes, last_access_ms: float, dirty: bool) -> None:
        self.data = data
        self.last_access_ms = last_access_ms
        self.dirty = dirty


class _Fetch(NamedTuple):
    key: str
    issued_ms: float
    latency_ms: Optional[float]
    local: bool
    prefetch: bool


class ChunkStore:
    """Read-through chunk cache in front of a blob back-end.

    :param backend: blob storage holding the persisted world
    :param clock: tick clock
    :param policy: prefetch, eviction and write-back settings
    :param cache_dir: local cache directory; a temporary one (removed on ``close``) if omitted
    :param latency_model: modelled read latencies (virtual clock)
    :param seed: seed of the latency sampler
    :param max_workers: fetch threads
    :param name: instance name used for logging
    :param log_level: ``str`` name or ``int`` constant; ``None`` attaches no handler
    :param log_format: ``logging.Formatter`` pattern used when ``log_level`` is set
    """

    def __init__(
        self,
        backend: BaseBlobStorage,
        clock: BaseClock,
        *,
        policy: CachePolicy = CachePolicy(),
        cache_dir: Optional[Union[str, Path]] = None,
        latency_model: StorageLatencyModel = StorageLatencyModel(),
        seed: Optional[int] = 0,
        max_workers: int = 4,
        name: str = "store",
        log_level: OptionalLevel = None,
        log_format: str = DEFAULT_LOG_FORMAT,
    ) -> None:
        self.backend = backend
        self.clock = clock
        self.policy = CachePolicy(*policy).validate()
        self.latency_model = latency_model
        self.logger = get_logger(self, name, log_level, log_format)
        self._tmp: Optional[tempfile.TemporaryDirectory] = None
        if cache_dir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="mve-cache-")
            cache_dir = self._tmp.name
        self.cache_dir = Path(cache_dir)
        self._cache = LocalDiskStorage(f"{backend.name}-cache", self.cache_dir)
        self._sampler = LatencySampler(seed)
        self._memory: dict[str, _Entry] = {}
        self._pending: dict[str, bool] = {}
        self._cached: set[str] = set(self._cache.keys())
        self._known: set[str] = set(backend.keys()) | self._cached
        self._completions: DeferredQueue = DeferredQueue(clock)
        self._executor = ThreadPoolExecutor(max_workers=max_workers, thread_name_prefix="StoreFetch")
        self._lock = threading.RLock()
        self._last_flush_ms = clock.now_ms()
        self._flushing: Optional[Future] = None
        self.reads: list[StorageRead] = []
        self.flushed = 0
        self.evicted = 0
        self.failures = 0

        self._alock = None
        self._aexecutor = None
        self._loop = None

    def __contains__(self, key: object) -> bool:
        return isinstance(key, str) and self.has(key)

    def has(self, key: str) -> bool:
        """Whether the key was ever persisted or written (index loaded at start, no I/O)."""
        with self._lock:
            return key in self._known or key in self._memory

    def in_memory(self, key: str) -> bool:
        """Whether ``peek`` would hit."""
        with self._lock:
            return key in self._memory

    @property
    def pending(self) -> int:
        """Fetches not yet polled."""
        with self._lock:
            return len(self._pending)

    def peek(self, key: str) -> Optional[bytes]:
        """Non-blocking memory lookup for the tick thread."""
        with self._lock:
            entry = self._memory.get(key)
            if entry is None:
                return None
            entry.last_access_ms = self.clock.now_ms()
            return entry.data

    def _read_distribution_local(self, key: str) -> bool:
        return key in self._cached or not self.backend.remote

    def request(self, key: str, prefetch: bool = False) -> bool:
        """Issue an asynchronous fetch into memory.

        Keys already in memory, already pending, or never persisted are skipped.

        :return: whether a fetch was issued
        """
        with self._lock:
            if key in self._memory or key in self._pending or key not in self._known:
                return False
            local = key in self._cached
            dist = self.latency_model.local_read if self._read_distribution_local(key) else self.latency_model.blob_read
            latency = self._sampler.sample(dist)
            now = self.clock.now_ms()
            self._pending[key] = prefetch
        fetch = _Fetch(key, now, latency if self.clock.virtual else None, local, prefetch)
        future = self._executor.submit(self._load, key, local)
        self._completions.push(now + latency if self.clock.virtual else None, fetch, future)
        return True

    def _load(self, key: str, local: bool) -> tuple[Optional[bytes], float]:
        started = time.perf_counter()
        try:
            if local:
                data = self._cache.get(key)
            else:
                data = self.backend.get(key)
                with self._lock:
                    entry = self._memory.get(key)
                    if entry is None or not entry.dirty:
                        self._cache.put(key, data)
                        self._cached.add(key)
        except (BlobNotFoundError, BackendUnavailableError, OSError) as e:
            self.logger.error("Fetch of %s failed: %s", key, e)
            return None, (time.perf_counter() - started) * 1000.0
        return data, (time.perf_counter() - started) * 1000.0

    def poll(self) -> list[str]:
        """Move finished fetches into memory; call at tick start.

        :return: keys that became available
        """
        now = self.clock.now_ms()
        completed = []
        for deferred in self._completions.pop_ready():
            fetch: _Fetch = deferred.tag
            if deferred.error is not None:
                self.logger.error("Fetch of %s raised: %s", fetch.key, deferred.error)
                data, elapsed = None, 0.0
            else:
                data, elapsed = deferred.value
            with self._lock:
                self._pending.pop(fetch.key, None)
                if data is None:
                    self.failures += 1
                    continue
                if fetch.key not in self._memory:
                    self._memory[fetch.key] = _Entry(data, now, dirty=False)
            latency = fetch.latency_ms if fetch.latency_ms is not None else elapsed
            self.reads.append(StorageRead(fetch.issued_ms, fetch.key, latency, fetch.local, fetch.prefetch))
            completed.append(fetch.key)
        return completed

    @dual
    def read_chunk(self, key: str) -> bytes:
        """Blocking read-through; awaitable inside a running event loop.

        :raises BlobNotFoundError: the key was never persisted
        """
        return self.read(key)

    def read(self, key: str) -> bytes:
        """Blocking read-through for connect-time loading and tools.

        :raises BlobNotFoundError: the key was never persisted
        """
        with self._lock:
            entry = self._memory.get(key)
            if entry is not None:
                entry.last_access_ms = self.clock.now_ms()
                return entry.data
            if key not in self._known:
                raise BlobNotFoundError(f"Chunk {key!r} was never persisted.", self)
            local = key in self._cached
            dist = self.latency_model.local_read if self._read_distribution_local(key) else self.latency_model.blob_read
            sampled = self._sampler.sample(dist)
        now = self.clock.now_ms()
        data, elapsed = self._load(key, local)
        if data is None:
            raise BlobNotFoundError(f"Chunk {key!r} could not be read.", self)
        with self._lock:
            self._memory.setdefault(key, _Entry(data, now, dirty=False))
        self.reads.append(StorageRead(now, key, sampled if self.clock.virtual else elapsed, local, False))
        return data

    def write(self, key: str, data: bytes) -> None:
        """Store chunk bytes locally and mark them for the next flush."""
        with self._lock:
            self._memory[key] = _Entry(bytes(data), self.clock.now_ms(), dirty=True)
            self._known.add(key)
            self._cache.put(key, data)
            self._cached.add(key)
            self._write_manifest()

    def dirty_keys(self) -> list[str]:
        """Keys written since the last flush."""
        with self._lock:
            return sorted(k for k, e in self._memory.items() if e.dirty)

    def _write_manifest(self) -> None:
        keys = sorted(k for k, e in self._memory.items() if e.dirty)
        (self.cache_dir / MANIFEST).write_text(json.dumps({"dirty": keys}))

    @dual
    def flush(self) -> int:
        """Write every dirty entry to the back-end; awaitable inside a running event loop.

        :return: number of blobs written
        """
        return self.write_back()

    def write_back(self) -> int:
        """Write every dirty entry to the back-end.

        :return: number of blobs written
        """
        with self._lock:
            batch = [(k, e.data) for k, e in sorted(self._memory.items()) if e.dirty]
        written = 0
        for key, data in batch:
            try:
                self.backend.put(key, data)
            except BackendUnavailableError as e:
                self.failures += 1
                self.logger.error("Write-back of %s failed: %s", key, e)
                continue
            with self._lock:
                entry = self._memory.get(key)
                if entry is not None and entry.data is data:
                    entry.dirty = False
            written += 1
        with self._lock:
            self._write_manifest()
            self._last_flush_ms = self.clock.now_ms()
        self.flushed += written
        if written:
            self.logger.info("Flushed %s chunks", written)
        return written

    def maybe_flush(self) -> Optional[int]:
        """Flush when ``write_back_interval_ms`` passed since the last one.

        Runs inline under a virtual clock and in the background under a real one.

        :return: blobs written by an inline flush
        """
        if self.clock.now_ms() - self._last_flush_ms < self.policy.write_back_interval_ms:
            return None
        if self.clock.virtual:
            return self.write_back()
        if self._flushing is None or self._flushing.done():
            self._last_flush_ms = self.clock.now_ms()
            self._flushing = self._executor.submit(self.write_back)
        return None

    def evict_idle(self, now_ms: Optional[float] = None) -> int:
        """Drop clean memory entries idle for longer than ``eviction_idle_ms``; dirty ones always stay."""
        now = self.clock.now_ms() if now_ms is None else now_ms
        with self._lock:
            idle = [
                k
                for k, e in self._memory.items()
                if not e.dirty and now - e.last_access_ms > self.policy.eviction_idle_ms
            ]
            for key in idle:
                del self._memory[key]
        self.evicted += len(idle)
        return len(idle)

    def prefetch(self, snapshot: WorldSnapshot) -> list[str]:
        """Fetch persisted chunks in the ring between the view distance and the prefetch margin.

        :return: keys issued, nearest first
        """
        margin = self.policy.prefetch_margin_blocks
        if margin == 0 or not snapshot.avatars:
            return []
        view = snapshot.view_distance_blocks
        ring: dict[Any, int] = {}
        for pos in snapshot.avatars.values():
            for coord in view_square(pos, view + margin):
                if coord in snapshot.loaded:
                    continue
                d = chunk_distance(pos, coord)
                if d > view and d < ring.get(coord, d + 1):
                    ring[coord] = d
        issued = []
        for _, coord in sorted((d, c) for c, d in ring.items()):
            if self.request(coord.key, prefetch=True):
                issued.append(coord.key)
        return issued

    def recover(self) -> list[str]:
        """Re-queue the keys of the manifest left behind by an unclean shutdown.

        :return: recovered keys
        """
        path = self.cache_dir / MANIFEST
        if not path.is_file():
            return []
        try:
            keys = json.loads(path.read_text()).get("dirty", [])
        except (ValueError, AttributeError) as e:
            self.logger.error("Ignoring unreadable manifest: %s", e)
            return []
        recovered = []
        with self._lock:
            for key in keys:
                if not self._cache.exists(key):
                    continue
                self._memory[key] = _Entry(self._cache.get(key), self.clock.now_ms(), dirty=True)
                self._known.add(key)
                recovered.append(key)
        if recovered:
            self.logger.info("Recovered %s unflushed chunks", len(recovered))
        return recovered

    def summary(self) -> dict[str, Any]:
        """Counters for reports."""
        hits = sum(1 for r in self.reads if r.hit)
        return {
            "reads": len(self.reads),
            "local_hits": hits,
            "prefetch_reads": sum(1 for r in self.reads if r.prefetch),
            "flushed": self.flushed,
            "evicted": self.evicted,
            "failures": self.failures,
            "in_memory": len(self._memory),
        }

    def close(self, flush: bool = True) -> None:
        """Flush (optionally), stop the fetch threads and remove a temporary cache directory."""
        if flush:
            self.write_back()
        self._executor.shutdown(wait=True)
        self._completions.clear()
        if self._aexecutor is not None:
            self._aexecutor.shutdown(wait=False)
        self.backend.close()
        if self._tmp is not None:
            self._tmp.cleanup()
