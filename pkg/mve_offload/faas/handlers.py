"""
Handlers of the offloaded functions.

Handlers are pure: the same body always produces the same reply bytes, on any
worker and on either side of the local/remote boundary.
"""

import time

from typing import NamedTuple

from mve_offload.errors import MalformedPayloadError
from mve_offload.faas.base_runtime import STATUS_MALFORMED, STATUS_OK, decode_body, encode_reply
from mve_offload.latency import CostModel
from mve_offload.speculation import decode_request, encode_offload_reply, run_request
from mve_offload.terrain import decode_generate, generate_chunk
from mve_offload.typings import FunctionName
from mve_offload.world import encode_chunk


class HandlerResult(NamedTuple):
    """Reply envelope and the time the handler actually ran."""

    envelope: bytes
    worker_ms: float


def sc_simulate_handler(payload: bytes) -> bytes:
    """Simulate a construct ahead; echoes the logical timestamp and start tick."""
    return encode_offload_reply(run_request(decode_request(payload)))


def terrain_generate_handler(payload: bytes) -> bytes:
    """Generate one chunk and return it in the chunk wire format."""
    seed, coord = decode_generate(payload)
    return encode_chunk(generate_chunk(seed, coord))


_HANDLERS = {
    FunctionName.ScSimulate: sc_simulate_handler,
    FunctionName.TerrainGenerate: terrain_generate_handler,
}


def handle(body: bytes) -> HandlerResult:
    """Run the function named by an invocation body; never raises on bad payloads."""
    started = time.perf_counter()
    try:
        fn, payload = decode_body(body)
        envelope = encode_reply(STATUS_OK, _HANDLERS[fn](payload))
    except MalformedPayloadError as e:
        envelope = encode_reply(STATUS_MALFORMED, str(e).encode())
    return HandlerResult(envelope, (time.perf_counter() - started) * 1000.0)


def modelled_cost_ms(fn: FunctionName, payload: bytes, cost_model: CostModel) -> float:
    """Modelled handler time, known before the handler runs.

    ``sc_simulate`` is charged for every requested step; a folded trajectory
    shrinks the reply, not the charge.
    """
    if fn == FunctionName.TerrainGenerate:
        return cost_model.remote_generation_ms()
    try:
        request = decode_request(payload)
    except MalformedPayloadError:
        return cost_model.remote_invocation_overhead_ms
    return cost_model.remote_sc_ms(request.state.blocks, request.num_steps)
