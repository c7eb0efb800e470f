"""
HTTP adapter for a real serverless platform.

The gateway receives ``POST <endpoint>`` with the JSON envelope
``{"fn": <tag>, "body": "<base64 invocation body>"}`` and answers with
``{"body": "<base64 reply envelope>"}``. ``serve_body`` is the gateway-side
entry point and runs the same handlers as the emulator.

Optional dependencies:
  - ``httpx`` for the client.
"""

import base64
import json
import threading
import time

from concurrent.futures import ThreadPoolExecutor
from typing import Any, Optional

from mve_offload.clock import BaseClock, DeferredQueue
from mve_offload.errors import BackendUnavailableError, MveConfigurationError, MveImportError
from mve_offload.faas.base_runtime import BaseRuntime, RuntimeReply, decode_body, decode_reply, encode_body
from mve_offload.faas.handlers import handle
from mve_offload.logs import DEFAULT_LOG_FORMAT, get_logger
from mve_offload.typings import FunctionName, InvocationRecord, OptionalLevel, Sentinel


try:
    import httpx
except ImportError:
    httpx = Sentinel


def encode_envelope(body: bytes) -> bytes:
    """JSON envelope of an invocation body."""
    fn, _ = decode_body(body)
    return json.dumps({"fn": int(fn), "body": base64.b64encode(body).decode("ascii")}).encode()


def serve_body(request_json: bytes) -> bytes:
    """Gateway side: run the function named by a JSON envelope and wrap the reply."""
    data = json.loads(request_json)
    result = handle(base64.b64decode(data["body"]))
    return json.dumps({"body": base64.b64encode(result.envelope).decode("ascii")}).encode()


class HttpRuntime(BaseRuntime):
    """Runtime backed by an HTTPS function gateway.

    Needs a real clock: reply times are observed, not modelled.

    :param endpoint: gateway URL
    :param clock: tick clock (must be real)
    :param timeout_s: per-request timeout
    :param client: pre-initialized ``httpx.Client`` (one is created otherwise)
    :param max_workers: concurrent requests
    :param name: instance name used for logging
    :param log_level: ``str`` name or ``int`` constant; ``None`` attaches no handler
    :param log_format: ``logging.Formatter`` pattern used when ``log_level`` is set
    """

    def __init__(
        self,
        endpoint: str,
        clock: BaseClock,
        *,
        timeout_s: float = 30.0,
        client: Optional[Any] = None,
        max_workers: int = 64,
        name: str = "faas-http",
        log_level: OptionalLevel = None,
        log_format: str = DEFAULT_LOG_FORMAT,
    ) -> None:
        if httpx is Sentinel:
            raise MveImportError("Package `httpx` (`httpx`) is not installed. Please install it first.")
        if clock.virtual:
            raise MveConfigurationError("The HTTP runtime needs a real clock.")
        super().__init__(clock, name)
        self.endpoint = endpoint
        self.logger = get_logger(self, name, log_level, log_format)
        self._client = client if client is not None else httpx.Client(timeout=timeout_s)
        self._owns_client = client is None
        self._executor = ThreadPoolExecutor(max_workers=max_workers, thread_name_prefix="FaaSHttp")
        self._lock = threading.Lock()

    def invoke(
        self, fn: FunctionName, payload: bytes, *, channel: DeferredQueue, tag: Any = None, tick: int = 0
    ) -> int:
        """POST the invocation; the reply is released once the response arrived."""
        with self._lock:
            invocation_id = next(self._ids)
        body = encode_body(FunctionName(fn), payload)
        future = self._executor.submit(self._post, invocation_id, FunctionName(fn), body, tick, self.clock.now_ms())
        channel.push(None, tag, future)
        return invocation_id

    def _post(self, invocation_id: int, fn: FunctionName, body: bytes, tick: int, enqueue_ms: float) -> RuntimeReply:
        started = time.perf_counter()
        try:
            response = self._client.post(
                self.endpoint, content=encode_envelope(body), headers={"content-type": "application/json"}
            )
            response.raise_for_status()
            envelope = base64.b64decode(response.json()["body"])
        except httpx.HTTPError as e:
            self.logger.error("Invocation %s failed: %s", invocation_id, e)
            raise BackendUnavailableError(f"Function gateway failed: {e}", self) from e
        elapsed = (time.perf_counter() - started) * 1000.0
        ok, reply_body = decode_reply(envelope)
        self._record(
            InvocationRecord(
                invocation_id=invocation_id,
                function=fn,
                enqueue_tick=tick,
                enqueue_ms=enqueue_ms,
                end_to_end_ms=elapsed,
                worker_duration_ms=elapsed,
                was_cold=False,
                payload_bytes=len(body),
                reply_bytes=len(envelope),
            )
        )
        return RuntimeReply(invocation_id, fn, ok, reply_body, elapsed)

    def shutdown(self) -> None:
        """Wait for outstanding requests and close the client."""
        self._executor.shutdown(wait=True)
        if self._owns_client:
            self._client.close()
