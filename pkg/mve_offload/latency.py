"""
Latency distributions for the emulated serverless platform and blob store.

A ``Distribution`` is a plain value (kind + parameters) so it can live in config
files; a ``LatencySampler`` owns the seeded ``numpy`` generator that draws from
it. Empirical traces are replayed in order, one cursor per trace, so a fixed
seed and a fixed call order always reproduce the same latencies.
"""

import math
import threading

from typing import Any, NamedTuple, Optional

import numpy as np

from mve_offload.errors import MveValueError


_KINDS = ("constant", "lognormal", "empirical", "two_piece")


class Distribution(NamedTuple):
    """Latency distribution in milliseconds.

    Properties:
     - kind: ``constant`` | ``lognormal`` | ``empirical`` | ``two_piece``
     - params: kind-specific parameters (see the constructors)
    """

    kind: str
    params: tuple

    @classmethod
    def constant(cls, ms: float) -> "Distribution":
        """Always ``ms``."""
        return cls._checked("constant", (float(ms),))

    @classmethod
    def lognormal(cls, median_ms: float, sigma: float) -> "Distribution":
        """Log-normal body with the given median and shape."""
        return cls._checked("lognormal", (float(median_ms), float(sigma)))

    @classmethod
    def empirical(cls, trace: list[float]) -> "Distribution":
        """Replay ``trace`` cyclically."""
        return cls._checked("empirical", tuple(float(v) for v in trace))

    @classmethod
    def two_piece(
        cls,
        median_ms: float,
        sigma: float,
        tail_prob: float,
        tail_median_ms: float,
        tail_sigma: float,
        max_ms: float,
    ) -> "Distribution":
        """Log-normal body with a heavy log-normal tail taken with probability ``tail_prob``, capped at ``max_ms``."""
        return cls._checked(
            "two_piece",
            (float(median_ms), float(sigma), float(tail_prob), float(tail_median_ms), float(tail_sigma), float(max_ms)),
        )

    @classmethod
    def _checked(cls, kind: str, params: tuple) -> "Distribution":
        if kind not in _KINDS:
            raise MveValueError(f"Unknown distribution kind: {kind!r}.")
        if kind == "empirical" and not params:
            raise MveValueError("An empirical trace needs at least one value.")
        if any(v < 0 or math.isnan(v) for v in params):
            raise MveValueError("Distribution parameters must be >= 0.")
        if kind == "two_piece" and params[2] > 1:
            raise MveValueError("tail_prob must be within [0, 1].")
        return cls(kind, params)

    def mean_ms(self) -> float:
        """Analytical mean (before the two-piece cap)."""
        if self.kind == "constant":
            return self.params[0]
        if self.kind == "lognormal":
            median, sigma = self.params
            return median * math.exp(sigma**2 / 2)
        if self.kind == "empirical":
            return sum(self.params) / len(self.params)
        median, sigma, tail_prob, tail_median, tail_sigma, _ = self.params
        body = median * math.exp(sigma**2 / 2)
        tail = tail_median * math.exp(tail_sigma**2 / 2)
        return (1 - tail_prob) * body + tail_prob * tail

    def as_dict(self) -> dict[str, Any]:
        """Serialize to a config-friendly dictionary."""
        return {"kind": self.kind, "params": list(self.params)}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Distribution":
        """Restore from ``as_dict`` output."""
        return cls._checked(str(data["kind"]), tuple(float(v) for v in data["params"]))


class LatencyModel(NamedTuple):
    """Invocation latency of the emulated FaaS platform.

    Properties:
     - warm: network + platform latency of every invocation
     - cold_extra: added when a fresh instance has to be provisioned
     - keep_warm_ms: idle time after which an instance is deallocated
    """

    warm: Distribution = Distribution.lognormal(60.0, 0.5)
    cold_extra: Distribution = Distribution.constant(400.0)
    keep_warm_ms: float = 120_000.0

    def as_dict(self) -> dict[str, Any]:
        """Serialize to a config-friendly dictionary."""
        return {"warm": self.warm.as_dict(), "cold_extra": self.cold_extra.as_dict(), "keep_warm_ms": self.keep_warm_ms}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "LatencyModel":
        """Restore from ``as_dict`` output."""
        model = cls(
            warm=Distribution.from_dict(data["warm"]) if "warm" in data else cls._field_defaults["warm"],
            cold_extra=(
                Distribution.from_dict(data["cold_extra"]) if "cold_extra" in data else cls._field_defaults["cold_extra"]
            ),
            keep_warm_ms=float(data.get("keep_warm_ms", cls._field_defaults["keep_warm_ms"])),
        )
        if model.keep_warm_ms < 0:
            raise MveValueError("keep_warm_ms must be >= 0.")
        return model


class StorageLatencyModel(NamedTuple):
    """Read/write latency of the local cache and of the emulated blob store."""

    local_read: Distribution = Distribution.lognormal(1.5, 0.6)
    local_write: Distribution = Distribution.lognormal(2.0, 0.5)
    blob_read: Distribution = Distribution.two_piece(3.0, 0.7, 0.0015, 260.0, 0.35, 500.0)
    blob_write: Distribution = Distribution.lognormal(8.0, 0.6)

    def as_dict(self) -> dict[str, Any]:
        """Serialize to a config-friendly dictionary."""
        return {name: dist.as_dict() for name, dist in self._asdict().items()}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "StorageLatencyModel":
        """Restore from ``as_dict`` output; missing entries keep their defaults."""
        return cls(**{name: Distribution.from_dict(spec) for name, spec in data.items() if name in cls._fields})


class LatencySampler:
    """Seeded sampler for ``Distribution`` values.

    Thread-safe; the draw order is the call order, so callers that need
    reproducible runs sample from a single thread.

    :param seed: seed of the ``numpy`` generator
    """

    def __init__(self, seed: Optional[int] = 0) -> None:
        self._rng = np.random.default_rng(seed)
        self._cursors: dict[tuple, int] = {}
        self._lock = threading.Lock()

    def sample(self, dist: Distribution) -> float:
        """Draw one latency in milliseconds (always >= 0)."""
        with self._lock:
            return max(0.0, self._sample_unlocked(dist))

    def _sample_unlocked(self, dist: Distribution) -> float:
        if dist.kind == "constant":
            return dist.params[0]
        if dist.kind == "lognormal":
            median, sigma = dist.params
            return float(median * math.exp(sigma * self._rng.standard_normal()))
        if dist.kind == "empirical":
            cursor = self._cursors.get(dist.params, 0)
            self._cursors[dist.params] = cursor + 1
            return dist.params[cursor % len(dist.params)]
        median, sigma, tail_prob, tail_median, tail_sigma, max_ms = dist.params
        u = self._rng.random()
        z = self._rng.standard_normal()
        if u < tail_prob:
            value = tail_median * math.exp(tail_sigma * z)
        else:
            value = median * math.exp(sigma * z)
        return float(min(value, max_ms))


class CostModel(NamedTuple):
    """Modelled compute costs charged on top of the real work.

    Properties:
     - local_sc_us_per_block_step: server-side cost of one construct block update
     - remote_sc_us_per_block_step: function-side cost of one construct block update
     - remote_invocation_overhead_ms: fixed handler cost of every invocation
     - chunk_generation_ms: cost of generating one chunk (0 = real work only)
     - chunk_load_ms: cost of inserting one chunk into the world
     - local_async_workers: background generation threads of a LocalAsync server
    """

    local_sc_us_per_block_step: float = 1.2
    remote_sc_us_per_block_step: float = 4.0
    remote_invocation_overhead_ms: float = 1.0
    chunk_generation_ms: float = 0.0
    chunk_load_ms: float = 0.5
    local_async_workers: int = 1

    def local_sc_ms(self, blocks: int, steps: int = 1) -> float:
        """Server-side cost of simulating ``blocks`` for ``steps``."""
        return self.local_sc_us_per_block_step * blocks * steps / 1000.0

    def remote_sc_ms(self, blocks: int, steps: int) -> float:
        """Handler cost of an offloaded simulation."""
        return self.remote_invocation_overhead_ms + self.remote_sc_us_per_block_step * blocks * steps / 1000.0

    def remote_generation_ms(self) -> float:
        """Handler cost of an offloaded chunk generation."""
        return self.remote_invocation_overhead_ms + self.chunk_generation_ms

    def as_dict(self) -> dict[str, Any]:
        """Serialize to a config-friendly dictionary."""
        return self._asdict()

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "CostModel":
        """Restore from ``as_dict`` output; missing entries keep their defaults."""
        model = cls(**{k: v for k, v in data.items() if k in cls._fields})
        if any(v < 0 for v in model):
            raise MveValueError("Cost model entries must be >= 0.")
        if int(model.local_async_workers) < 1:
            raise MveValueError("local_async_workers must be >= 1.")
        return model._replace(local_async_workers=int(model.local_async_workers))
