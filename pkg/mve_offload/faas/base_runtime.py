"""
Base class for FaaS runtimes.

A runtime hosts the two offloaded functions and delivers replies on the
caller's ``DeferredQueue``. Invocation bodies share one wire format across all
runtimes::

    tag: uint8 (FunctionName), length: uint32 little-endian, payload

Replies travel in an envelope that carries a status byte, so a handler failure
reaches the caller as a reply instead of an exception::

    status: uint8 (0 ok, 1 malformed payload), payload
"""

import itertools
import struct
import threading

from abc import ABC, abstractmethod
from typing import Any, NamedTuple

from mve_offload.clock import BaseClock, DeferredQueue
from mve_offload.errors import MalformedPayloadError
from mve_offload.typings import FunctionName, InvocationRecord


_BODY_HEADER = struct.Struct("<BI")
STATUS_OK = 0
STATUS_MALFORMED = 1


class RuntimeReply(NamedTuple):
    """A reply as delivered to the caller.

    Properties:
     - invocation_id: runtime-wide invocation counter
     - function: invoked function
     - ok: handler succeeded
     - body: reply payload, or the error message on failure
     - worker_ms: time the handler ran
    """

    invocation_id: int
    function: FunctionName
    ok: bool
    body: bytes
    worker_ms: float = 0.0


def encode_body(fn: FunctionName, payload: bytes) -> bytes:
    """Wrap a payload into an invocation body."""
    return _BODY_HEADER.pack(int(fn), len(payload)) + payload


def decode_body(body: bytes) -> tuple[FunctionName, bytes]:
    """Split an invocation body into function and payload.

    :raises MalformedPayloadError: truncated body, length mismatch or unknown function
    """
    if len(body) < _BODY_HEADER.size:
        raise MalformedPayloadError("Invocation body is truncated.")
    tag, length = _BODY_HEADER.unpack_from(body)
    if len(body) - _BODY_HEADER.size != length:
        raise MalformedPayloadError(f"Invocation body length mismatch: header says {length}.")
    try:
        fn = FunctionName(tag)
    except ValueError as e:
        raise MalformedPayloadError(f"Unknown function tag: {tag}.") from e
    return fn, body[_BODY_HEADER.size :]


def encode_reply(status: int, payload: bytes) -> bytes:
    """Wrap a handler result into a reply envelope."""
    return bytes((status,)) + payload


def decode_reply(envelope: bytes) -> tuple[bool, bytes]:
    """Split a reply envelope into (ok, payload)."""
    if not envelope:
        raise MalformedPayloadError("Empty reply envelope.")
    return envelope[0] == STATUS_OK, envelope[1:]


class BaseRuntime(ABC):
    """Common bookkeeping of FaaS runtimes.

    :param clock: tick clock replies are timed against
    :param name: instance name used for logging
    """

    def __init__(self, clock: BaseClock, name: str) -> None:
        self.clock = clock
        self.name = name
        self.records: list[InvocationRecord] = []
        self._ids = itertools.count(1)
        self._records_lock = threading.Lock()

    @abstractmethod
    def invoke(
        self, fn: FunctionName, payload: bytes, *, channel: DeferredQueue, tag: Any = None, tick: int = 0
    ) -> int:
        """Invoke a function asynchronously.

        The reply is pushed to ``channel`` as a ``Deferred`` whose value is a
        ``RuntimeReply`` and whose tag is ``tag``.

        :param fn: function to run
        :param payload: function payload (without the body header)
        :param channel: caller's completion queue
        :param tag: caller data returned with the reply
        :param tick: world tick of the call, recorded with the invocation
        :return: invocation id
        """
        pass

    @abstractmethod
    def shutdown(self) -> None:
        """Release worker threads and connections."""
        pass

    def _record(self, record: InvocationRecord) -> None:
        with self._records_lock:
            self.records.append(record)

    def invocation_seconds(self, fn: Any = None) -> float:
        """Total worker time in seconds, optionally for one function."""
        with self._records_lock:
            return sum(r.worker_duration_ms for r in self.records if fn is None or r.function == fn) / 1000.0

    def invocation_count(self, fn: Any = None) -> int:
        """Number of recorded invocations, optionally for one function."""
        with self._records_lock:
            return sum(1 for r in self.records if fn is None or r.function == fn)

    def __enter__(self) -> "BaseRuntime":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.shutdown()
