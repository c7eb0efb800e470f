"""
In-process FaaS emulator.

Every function has a pool of logical instances. An invocation claims the most
recently released idle instance; instances idle for longer than
``keep_warm_ms`` are deallocated, and an invocation that finds no idle
instance provisions a new one and pays a cold start.

The delivery time of a reply is::

    enqueue + modelled handler time + warm latency sample (+ cold start sample)

Under a virtual clock the handler still runs on the worker pool, but the
reply is released at the modelled delivery time. Under a real clock the
worker sleeps the modelled time and the sampled latency after running the
handler.
"""

import threading
import time

from concurrent.futures import ThreadPoolExecutor
from typing import Any, Optional

from mve_offload.clock import BaseClock, DeferredQueue
from mve_offload.faas.base_runtime import BaseRuntime, RuntimeReply, decode_reply, encode_body
from mve_offload.faas.handlers import handle, modelled_cost_ms
from mve_offload.latency import CostModel, LatencyModel, LatencySampler
from mve_offload.logs import DEFAULT_LOG_FORMAT, get_logger
from mve_offload.typings import FunctionName, InvocationRecord, OptionalLevel


class _Instance:
    __slots__ = ("busy_until_ms", "id", "invocations")

    def __init__(self, instance_id: int, busy_until_ms: float) -> None:
        self.id = instance_id
        self.busy_until_ms = busy_until_ms
        self.invocations = 0


class EmulatedRuntime(BaseRuntime):
    """Local serverless platform with cold starts and injected latency.

    :param clock: tick clock
    :param latency_model: warm/cold latency distributions and keep-warm time
    :param cost_model: modelled handler costs
    :param seed: seed of the latency sampler
    :param max_workers: worker threads running handlers (logical concurrency is unbounded)
    :param name: instance name used for logging
    :param log_level: ``str`` name or ``int`` constant; ``None`` attaches no handler
    :param log_format: ``logging.Formatter`` pattern used when ``log_level`` is set
    """

    def __init__(
        self,
        clock: BaseClock,
        *,
        latency_model: LatencyModel = LatencyModel(),
        cost_model: CostModel = CostModel(),
        seed: Optional[int] = 0,
        max_workers: Optional[int] = None,
        name: str = "faas",
        log_level: OptionalLevel = None,
        log_format: str = DEFAULT_LOG_FORMAT,
    ) -> None:
        super().__init__(clock, name)
        self.latency_model = latency_model
        self.cost_model = cost_model
        self.sampler = LatencySampler(seed)
        self.logger = get_logger(self, name, log_level, log_format)
        self._executor = ThreadPoolExecutor(max_workers=max_workers, thread_name_prefix="FaaSWorker")
        self._pools: dict[FunctionName, list[_Instance]] = {fn: [] for fn in FunctionName}
        self._instance_ids = 0
        self._lock = threading.Lock()
        self.cold_starts = 0

    def _claim(self, fn: FunctionName, now_ms: float) -> tuple[_Instance, bool]:
        pool = self._pools[fn]
        keep_warm = self.latency_model.keep_warm_ms
        pool[:] = [i for i in pool if i.busy_until_ms > now_ms or now_ms - i.busy_until_ms <= keep_warm]
        idle = [i for i in pool if i.busy_until_ms <= now_ms]
        if idle:
            return max(idle, key=lambda i: (i.busy_until_ms, -i.id)), False
        self._instance_ids += 1
        instance = _Instance(self._instance_ids, now_ms)
        pool.append(instance)
        return instance, True

    def instances(self, fn: FunctionName) -> int:
        """Currently allocated instances of a function."""
        with self._lock:
            return len(self._pools[fn])

    def invoke(
        self, fn: FunctionName, payload: bytes, *, channel: DeferredQueue, tag: Any = None, tick: int = 0
    ) -> int:
        """Invoke a function; the reply is pushed to ``channel`` at its delivery time."""
        fn = FunctionName(fn)
        modelled = modelled_cost_ms(fn, payload, self.cost_model)
        with self._lock:
            invocation_id = next(self._ids)
            now = self.clock.now_ms()
            instance, cold = self._claim(fn, now)
            latency = self.sampler.sample(self.latency_model.warm)
            if cold:
                latency += self.sampler.sample(self.latency_model.cold_extra)
                self.cold_starts += 1
            end_to_end = modelled + latency
            instance.busy_until_ms = now + end_to_end
            instance.invocations += 1
        if cold:
            self.logger.debug("Cold start of %s instance %s (invocation %s)", fn.name, instance.id, invocation_id)

        body = encode_body(fn, payload)
        base = InvocationRecord(
            invocation_id=invocation_id,
            function=fn,
            enqueue_tick=tick,
            enqueue_ms=now,
            end_to_end_ms=end_to_end,
            worker_duration_ms=modelled,
            was_cold=cold,
            payload_bytes=len(body),
            reply_bytes=0,
            instance_id=instance.id,
        )
        if self.clock.virtual:
            future = self._executor.submit(self._run_virtual, base, body)
            channel.push(now + end_to_end, tag, future)
        else:
            future = self._executor.submit(self._run_real, base, body, latency)
            channel.push(None, tag, future)
        return invocation_id

    def _finish(self, record: InvocationRecord, envelope: bytes, worker_ms: float) -> RuntimeReply:
        ok, reply_body = decode_reply(envelope)
        self._record(record._replace(reply_bytes=len(envelope)))
        if not ok:
            self.logger.warning("Invocation %s failed: %s", record.invocation_id, reply_body.decode(errors="replace"))
        return RuntimeReply(record.invocation_id, record.function, ok, reply_body, worker_ms)

    def _run_virtual(self, record: InvocationRecord, body: bytes) -> RuntimeReply:
        result = handle(body)
        return self._finish(record, result.envelope, record.worker_duration_ms)

    def _run_real(self, record: InvocationRecord, body: bytes, latency_ms: float) -> RuntimeReply:
        started = time.perf_counter()
        result = handle(body)
        self.clock.sleep(record.worker_duration_ms)
        worker_ms = (time.perf_counter() - started) * 1000.0
        self.clock.sleep(latency_ms)
        end_to_end = self.clock.now_ms() - record.enqueue_ms
        return self._finish(
            record._replace(worker_duration_ms=worker_ms, end_to_end_ms=max(end_to_end, worker_ms)),
            result.envelope,
            worker_ms,
        )

    def shutdown(self) -> None:
        """Wait for running handlers and stop the workers."""
        self._executor.shutdown(wait=True)
        self.logger.info(
            "Runtime stopped: %s invocations, %s cold starts, %.3f invocation-seconds",
            self.invocation_count(),
            self.cold_starts,
            self.invocation_seconds(),
        )
