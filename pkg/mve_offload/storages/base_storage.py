"""
Base class for blob storages.

Blob storages persist terrain chunks under their ``c_{cx}_{cz}`` keys. Three
back-ends exist: files on local disk, an in-memory emulated blob store with
injected latency, and Redis. All of them guarantee read-after-write: a
completed ``put`` is visible to every later ``get``.
"""

from abc import ABC, abstractmethod
from collections.abc import Iterator


class BaseBlobStorage(ABC):
    """BaseBlobStorage class.

    This class is a base for all blob storages.
    It provides a base interface and common methods for all storages.

    ``remote`` tells the chunk store whether a read goes over the network;
    ``injects_latency`` whether the back-end sleeps modelled latency itself.
    """

    remote: bool = False
    injects_latency: bool = False

    def __init__(self, name: str) -> None:
        self.name = name

    @abstractmethod
    def get(self, key: str) -> bytes:
        """Read a blob.

        :raises BlobNotFoundError: the key was never written
        """
        pass

    @abstractmethod
    def put(self, key: str, data: bytes) -> None:
        """Write a blob, replacing any previous value."""
        pass

    @abstractmethod
    def exists(self, key: str) -> bool:
        """Whether a key was written."""
        pass

    @abstractmethod
    def delete(self, key: str) -> None:
        """Remove a blob; missing keys are ignored."""
        pass

    @abstractmethod
    def keys(self) -> list[str]:
        """All stored keys."""
        pass

    def clear(self) -> None:
        """Remove every blob."""
        for key in self.keys():
            self.delete(key)

    def __contains__(self, key: object) -> bool:
        return isinstance(key, str) and self.exists(key)

    def __iter__(self) -> Iterator[str]:
        return iter(self.keys())

    def __len__(self) -> int:
        return len(self.keys())

    def close(self) -> None:
        """Release connections."""
