"""
Emulated remote blob storage.

Blobs live in a dictionary; every read and write sleeps a latency drawn from
a ``StorageLatencyModel`` on the given clock. Under a virtual clock the sleep
is free and the chunk store models the delay instead.
"""

import threading

from typing import Optional

from mve_offload.clock import BaseClock, RealClock
from mve_offload.errors import BlobNotFoundError
from mve_offload.latency import LatencySampler, StorageLatencyModel
from mve_offload.storages.base_storage import BaseBlobStorage


class EmulatedBlobStorage(BaseBlobStorage):
    """In-memory blob store with injected latency.

    :param name: storage name
    :param latency_model: read/write latency distributions
    :param clock: clock the latency is slept on
    :param seed: seed of the latency sampler
    """

    remote = True
    injects_latency = True

    def __init__(
        self,
        name: str,
        *,
        latency_model: StorageLatencyModel = StorageLatencyModel(),
        clock: Optional[BaseClock] = None,
        seed: Optional[int] = 0,
    ) -> None:
        super().__init__(name)
        self.latency_model = latency_model
        self.clock = clock if clock is not None else RealClock()
        self._sampler = LatencySampler(seed)
        self._blobs: dict[str, bytes] = {}
        self._lock = threading.Lock()
        self.reads = 0
        self.writes = 0

    def get(self, key: str) -> bytes:
        """Read a blob after the sampled read latency."""
        self.clock.sleep(self._sampler.sample(self.latency_model.blob_read))
        with self._lock:
            self.reads += 1
            try:
                return self._blobs[key]
            except KeyError as e:
                raise BlobNotFoundError(f"Blob {key!r} does not exist.", self) from e

    def put(self, key: str, data: bytes) -> None:
        """Write a blob after the sampled write latency."""
        self.clock.sleep(self._sampler.sample(self.latency_model.blob_write))
        with self._lock:
            self.writes += 1
            self._blobs[key] = bytes(data)

    def exists(self, key: str) -> bool:
        """Whether a key was written."""
        with self._lock:
            return key in self._blobs

    def delete(self, key: str) -> None:
        """Remove a blob."""
        with self._lock:
            self._blobs.pop(key, None)

    def keys(self) -> list[str]:
        """All keys, sorted."""
        with self._lock:
            return sorted(self._blobs)
