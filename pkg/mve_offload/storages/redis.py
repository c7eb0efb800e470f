"""
Redis-based blob storage.

This module contains a blob storage implementation using Redis as the storage engine.

Every blob is a plain Redis string under ``{<name>}:<key>``; the hash tag keeps
all keys of one world in the same cluster slot. Chunk bytes are binary, so the
client must be created with ``decode_responses=False``.

The storage supports persistence of the world: when the server is restarted,
the stored chunks are not lost.
"""

from typing import Any, Union

from redis import Redis, RedisCluster
from redis.exceptions import RedisError

from mve_offload.errors import BackendUnavailableError, BlobNotFoundError, MveConfigurationError
from mve_offload.storages.base_storage import BaseBlobStorage


def redis_client_decodes_responses(client: Union[Redis, RedisCluster]) -> bool:
    """Return True if the client's connection pool decodes responses to str."""
    if isinstance(client, Redis):
        pool = getattr(client, "connection_pool", None)
        if pool is not None:
            return bool(pool.connection_kwargs.get("decode_responses"))
        return False
    if isinstance(client, RedisCluster):
        nodes_manager = getattr(client, "nodes_manager", None)
        if nodes_manager is not None:
            for node in nodes_manager.nodes_cache.values():
                conn = getattr(node, "redis_connection", None)
                pool = getattr(conn, "connection_pool", None) if conn is not None else None
                if pool is not None and pool.connection_kwargs.get("decode_responses"):
                    return True
        return False
    return False


def validate_redis_client(client: Any) -> None:
    """Validate a Redis client and perform a connection test.

    :raises MveConfigurationError: not a client, unreachable, or decoding responses
    """
    if client is None:
        raise MveConfigurationError("Redis storage requires a pre-initialized `Redis` or `RedisCluster` client.")
    if not isinstance(client, (Redis, RedisCluster)):
        raise MveConfigurationError(
            "The 'redis_client' parameter must be a pre-initialized `Redis` or `RedisCluster` client. "
            f"Received type: {type(client)}."
        )
    try:
        client.ping()
    except Exception as e:
        raise MveConfigurationError(f"Failed to connect to Redis: {e}") from e
    if redis_client_decodes_responses(client):
        raise MveConfigurationError(
            "Redis client must have decode_responses=False. "
            "Chunk blobs are binary; create the Redis or RedisCluster client without decode_responses."
        )


class RedisBlobStorage(BaseBlobStorage):
    """Redis-based blob storage supporting both single Redis and Redis cluster.

    :param name: storage name, used as the key hash tag
    :param client: pre-initialized Redis or RedisCluster client (``decode_responses=False``)
    """

    remote = True

    def __init__(self, name: str, *, client: Union[Redis, RedisCluster]) -> None:
        validate_redis_client(client)
        super().__init__(name)
        self._client = client
        self._prefix = f"{{{name}}}:"

    def _key(self, key: str) -> str:
        return f"{self._prefix}{key}"

    def get(self, key: str) -> bytes:
        """Read a blob."""
        try:
            data = self._client.get(self._key(key))
        except RedisError as e:
            raise BackendUnavailableError(f"Redis read of {key!r} failed: {e}", self) from e
        if data is None:
            raise BlobNotFoundError(f"Blob {key!r} does not exist.", self)
        return bytes(data)

    def put(self, key: str, data: bytes) -> None:
        """Write a blob."""
        try:
            self._client.set(self._key(key), data)
        except RedisError as e:
            raise BackendUnavailableError(f"Redis write of {key!r} failed: {e}", self) from e

    def exists(self, key: str) -> bool:
        """Whether a key was written."""
        return bool(self._client.exists(self._key(key)))

    def delete(self, key: str) -> None:
        """Remove a blob."""
        self._client.delete(self._key(key))

    def keys(self) -> list[str]:
        """All keys of this storage, sorted."""
        n = len(self._prefix)
        return sorted(
            (raw.decode() if isinstance(raw, bytes) else raw)[n:] for raw in self._client.scan_iter(match=f"{self._prefix}*")
        )

    def close(self) -> None:
        """The client belongs to the caller and stays open."""
