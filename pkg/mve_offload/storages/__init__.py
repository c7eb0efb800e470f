"""
Blob storages for terrain persistence.

- ``StorageMode.local`` - files on local disk
- ``StorageMode.emulated`` - in-memory blob store with injected latency (default)
- ``StorageMode.redis`` - Redis server (needs ``redis`` (``redis-py``))
"""

import tempfile

from pathlib import Path
from typing import Any, Optional, Union

from mve_offload.clock import BaseClock
from mve_offload.errors import MveImportError, MveValueError
from mve_offload.latency import StorageLatencyModel
from mve_offload.storages.base_storage import BaseBlobStorage
from mve_offload.storages.emulated import EmulatedBlobStorage
from mve_offload.storages.local import LocalDiskStorage
from mve_offload.typings import Sentinel, StorageMode, StorageModeType, coerce_enum


try:
    import redis

    from mve_offload.storages.redis import RedisBlobStorage
except ImportError:
    redis = Sentinel
    RedisBlobStorage = Sentinel


__all__ = [
    "BaseBlobStorage",
    "EmulatedBlobStorage",
    "LocalDiskStorage",
    "RedisBlobStorage",
    "make_storage",
    "redis_client_from_url",
]


def make_storage(
    mode: StorageModeType,
    *,
    name: str = "world",
    root: Optional[Union[str, Path]] = None,
    redis_client: Optional[Any] = None,
    latency_model: StorageLatencyModel = StorageLatencyModel(),
    clock: Optional[BaseClock] = None,
    seed: Optional[int] = 0,
) -> BaseBlobStorage:
    """Build a blob storage from a ``StorageMode`` member or its name.

    :param mode: back-end kind
    :param name: storage name (Redis key hash tag)
    :param root: directory of the local back-end; a temporary one if omitted
    :param redis_client: pre-initialized client of the Redis back-end (``decode_responses=False``)
    :param latency_model: latency of the emulated back-end
    :param clock: clock the emulated back-end sleeps on
    :param seed: seed of the emulated back-end's latency sampler
    """
    try:
        mode = coerce_enum(StorageMode, mode)
    except MveValueError as e:
        raise MveValueError("Invalid `storage_mode`: must be one of `StorageMode` values.") from e
    if mode == StorageMode.local:
        return LocalDiskStorage(name, root if root is not None else tempfile.mkdtemp(prefix=f"mve-{name}-"))
    if mode == StorageMode.emulated:
        return EmulatedBlobStorage(name, latency_model=latency_model, clock=clock, seed=seed)
    if redis is Sentinel:  # no cov
        raise MveImportError(
            "Package `redis` (`redis-py`) is not installed. Please, install it manually to use Redis storage "
            "or set storage_mode to `local` or `emulated`."
        )
    return RedisBlobStorage(name, client=redis_client)


def redis_client_from_url(url: str) -> Any:
    """Create a binary-safe Redis client (``decode_responses=False``) from a URL."""
    if redis is Sentinel:  # no cov
        raise MveImportError("Package `redis` (`redis-py`) is not installed. Please install it first.")
    return redis.Redis.from_url(url, decode_responses=False)
