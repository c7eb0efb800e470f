"""
Local-disk blob storage.

One file per key inside a directory. Writes go to a temporary file that is
renamed over the target, so a crash never leaves a half-written chunk behind.
"""

import os
import threading

from pathlib import Path
from typing import Union

from mve_offload.errors import BlobNotFoundError, MveValueError
from mve_offload.storages.base_storage import BaseBlobStorage


_SUFFIX = ".chunk"


class LocalDiskStorage(BaseBlobStorage):
    """Blobs as files in ``root``.

    :param name: storage name
    :param root: directory holding the blobs; created if missing
    """

    def __init__(self, name: str, root: Union[str, Path]) -> None:
        super().__init__(name)
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def path(self, key: str) -> Path:
        """File of a key."""
        if not key or "/" in key or "\\" in key or key.startswith("."):
            raise MveValueError(f"Invalid blob key: {key!r}.")
        return self.root / f"{key}{_SUFFIX}"

    def get(self, key: str) -> bytes:
        """Read a blob file."""
        try:
            return self.path(key).read_bytes()
        except FileNotFoundError as e:
            raise BlobNotFoundError(f"Blob {key!r} does not exist.", self) from e

    def put(self, key: str, data: bytes) -> None:
        """Write a blob file atomically."""
        target = self.path(key)
        tmp = target.with_name(f".{target.name}.{threading.get_ident()}.tmp")
        tmp.write_bytes(data)
        with self._lock:
            os.replace(tmp, target)

    def exists(self, key: str) -> bool:
        """Whether the blob file exists."""
        return self.path(key).is_file()

    def delete(self, key: str) -> None:
        """Remove a blob file."""
        with self._lock:
            self.path(key).unlink(missing_ok=True)

    def keys(self) -> list[str]:
        """Keys of all blob files, sorted."""
        return sorted(p.name[: -len(_SUFFIX)] for p in self.root.glob(f"*{_SUFFIX}") if not p.name.startswith("."))
