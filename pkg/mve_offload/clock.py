"""
Tick clocks and deferred completions.

Two clocks drive the server:

- ``VirtualClock`` only moves when the tick loop advances it. Modelled costs are
  *charged* to the running tick instead of being slept, so a run is a pure
  function of its seeds and cost model and executes as fast as the host allows.
- ``RealClock`` follows ``time.perf_counter``; charged costs are slept.

``DeferredQueue`` holds work that completes at a known (virtual) or unknown
(real) time. The FaaS emulator, the storage prefetcher and the local async
generator all hand their results back to the tick thread through one.
"""

import heapq
import itertools
import threading
import time

from abc import ABC, abstractmethod
from concurrent.futures import Future
from typing import Any, Generic, NamedTuple, Optional, TypeVar, Union

from mve_offload.errors import MveValueError
from mve_offload.typings import ClockMode, ClockModeType


T = TypeVar("T")


class BaseClock(ABC):
    """Millisecond clock shared by the tick loop and its subsystems."""

    virtual: bool

    def __init__(self) -> None:
        self._charged_ms = 0.0

    @abstractmethod
    def now_ms(self) -> float:
        """Current time in milliseconds since the clock started."""
        pass

    @abstractmethod
    def sleep_until(self, t_ms: float) -> None:
        """Block (or jump) until ``t_ms``."""
        pass

    @abstractmethod
    def sleep(self, ms: float) -> None:
        """Sleep for ``ms`` on worker threads; a no-op on a virtual clock."""
        pass

    def charge(self, ms: float) -> None:
        """Account modelled cost to the running tick."""
        if ms < 0:
            raise MveValueError("Charged cost must be >= 0.")
        self._charged_ms += ms

    def take_charged(self) -> float:
        """Return the cost charged since the last call and reset it."""
        charged, self._charged_ms = self._charged_ms, 0.0
        return charged


class VirtualClock(BaseClock):
    """Clock advanced only by the tick loop."""

    virtual = True

    def __init__(self, start_ms: float = 0.0) -> None:
        super().__init__()
        self._now = float(start_ms)

    def now_ms(self) -> float:
        """Current virtual time."""
        return self._now

    def sleep_until(self, t_ms: float) -> None:
        """Jump forward to ``t_ms``; time never goes back."""
        self._now = max(self._now, float(t_ms))

    def sleep(self, ms: float) -> None:
        """Virtual time does not pass on worker threads."""


class RealClock(BaseClock):
    """Wall clock; charged costs are slept so they show up in measured tick time."""

    virtual = False

    def __init__(self) -> None:
        super().__init__()
        self._origin = time.perf_counter()

    def now_ms(self) -> float:
        """Milliseconds since the clock was created."""
        return (time.perf_counter() - self._origin) * 1000.0

    def sleep_until(self, t_ms: float) -> None:
        """Sleep until ``t_ms``; returns immediately if it already passed."""
        delay = t_ms - self.now_ms()
        if delay > 0:
            time.sleep(delay / 1000.0)

    def sleep(self, ms: float) -> None:
        """Sleep the calling thread."""
        if ms > 0:
            time.sleep(ms / 1000.0)

    def charge(self, ms: float) -> None:
        """Sleep the modelled cost on the tick thread."""
        super().charge(ms)
        self.sleep(ms)

    def take_charged(self) -> float:
        """Charged costs are already part of the measured wall time."""
        super().take_charged()
        return 0.0


def make_clock(mode: ClockModeType) -> BaseClock:
    """Build a clock from a ``ClockMode`` member or its name."""
    if isinstance(mode, str):
        try:
            mode = ClockMode[mode]
        except KeyError as e:
            raise MveValueError(f"Invalid clock mode: {mode!r}.") from e
    if mode == ClockMode.virtual:
        return VirtualClock()
    if mode == ClockMode.real:
        return RealClock()
    raise MveValueError(f"Invalid clock mode: {mode!r}.")


class Deferred(NamedTuple):
    """A completion popped from a ``DeferredQueue``.

    ``error`` holds the exception of a failed future; ``value`` is then ``None``.
    """

    ready_ms: float
    tag: Any
    value: Any
    error: Optional[BaseException] = None


class _Entry(NamedTuple):
    ready_ms: float
    seq: int
    tag: Any
    future: Union[Future, Any]


class DeferredQueue(Generic[T]):
    """Completions released to the tick thread once their ready time passed.

    Under a virtual clock ``ready_ms`` is known at submission and a pending future
    is waited for when its time comes, which keeps results deterministic. Under a
    real clock ``ready_ms`` may be ``None``: the item is released as soon as its
    future finishes, stamped with the time it was observed.

    :param clock: the tick clock
    """

    def __init__(self, clock: BaseClock) -> None:
        self._clock = clock
        self._heap: list[_Entry] = []
        self._unscheduled: list[_Entry] = []
        self._seq = itertools.count()
        self._lock = threading.Lock()

    def push(self, ready_ms: Optional[float], tag: Any, future: Union[Future, Any]) -> None:
        """Queue a completion.

        :param ready_ms: release time on the clock, or ``None`` to release on completion (real clock only)
        :param tag: caller data returned with the value
        :param future: a ``Future`` or a plain value
        """
        with self._lock:
            if ready_ms is None:
                self._unscheduled.append(_Entry(float("inf"), next(self._seq), tag, future))
            else:
                heapq.heappush(self._heap, _Entry(float(ready_ms), next(self._seq), tag, future))

    def __len__(self) -> int:
        with self._lock:
            return len(self._heap) + len(self._unscheduled)

    @staticmethod
    def _resolve(entry: Deferred) -> Deferred:
        if not isinstance(entry.value, Future):
            return entry
        try:
            return entry._replace(value=entry.value.result())
        except Exception as e:
            return entry._replace(value=None, error=e)

    def pop_ready(self, now_ms: Optional[float] = None) -> list[Deferred]:
        """Release everything due at ``now_ms`` in (ready time, submission) order.

        A failed future never holds back the rest of the batch: it is released
        with its exception in ``error``.
        """
        now = self._clock.now_ms() if now_ms is None else now_ms
        released: list[Deferred] = []
        with self._lock:
            while self._heap and self._heap[0].ready_ms <= now:
                entry = self._heap[0]
                if not self._clock.virtual and isinstance(entry.future, Future) and not entry.future.done():
                    break
                heapq.heappop(self._heap)
                released.append(Deferred(entry.ready_ms, entry.tag, entry.future))
            still_running = []
            for entry in self._unscheduled:
                if isinstance(entry.future, Future) and not entry.future.done():
                    still_running.append(entry)
                else:
                    released.append(Deferred(now, entry.tag, entry.future))
            self._unscheduled = still_running
        return [self._resolve(d) for d in released]

    def next_ready_ms(self) -> Optional[float]:
        """Earliest scheduled ready time, if any."""
        with self._lock:
            return self._heap[0].ready_ms if self._heap else None

    def clear(self) -> None:
        """Drop all pending completions."""
        with self._lock:
            self._heap.clear()
            self._unscheduled.clear()
