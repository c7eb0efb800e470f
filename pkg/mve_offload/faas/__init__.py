"""
Function-as-a-Service runtimes hosting ``sc_simulate`` and ``terrain_generate``.

- ``RuntimeType.emulated`` - in-process emulator with cold starts and latency injection (default)
- ``RuntimeType.http`` - real platform behind an HTTPS gateway (needs ``httpx``)
"""

from typing import Any, Optional

from mve_offload.clock import BaseClock
from mve_offload.errors import MveValueError
from mve_offload.faas.base_runtime import BaseRuntime, RuntimeReply, decode_body, encode_body
from mve_offload.faas.emulator import EmulatedRuntime
from mve_offload.faas.handlers import handle, modelled_cost_ms
from mve_offload.faas.http import HttpRuntime
from mve_offload.latency import CostModel, LatencyModel
from mve_offload.typings import OptionalLevel, RuntimeModeType, RuntimeType, coerce_enum


__all__ = [
    "BaseRuntime",
    "EmulatedRuntime",
    "HttpRuntime",
    "RuntimeReply",
    "decode_body",
    "encode_body",
    "handle",
    "make_runtime",
    "modelled_cost_ms",
]


def make_runtime(
    runtime_type: RuntimeModeType,
    clock: BaseClock,
    *,
    latency_model: LatencyModel = LatencyModel(),
    cost_model: CostModel = CostModel(),
    seed: Optional[int] = 0,
    endpoint: Optional[str] = None,
    http_client: Optional[Any] = None,
    log_level: OptionalLevel = None,
) -> BaseRuntime:
    """Build a runtime from a ``RuntimeType`` member or its name.

    :param runtime_type: runtime kind
    :param clock: tick clock
    :param latency_model: emulator latency distributions
    :param cost_model: emulator handler costs
    :param seed: emulator latency seed
    :param endpoint: gateway URL of the HTTP runtime
    :param http_client: pre-initialized ``httpx.Client`` of the HTTP runtime
    :param log_level: ``str`` name or ``int`` constant; ``None`` attaches no handler
    """
    runtime_type = coerce_enum(RuntimeType, runtime_type)
    if runtime_type == RuntimeType.emulated:
        return EmulatedRuntime(clock, latency_model=latency_model, cost_model=cost_model, seed=seed, log_level=log_level)
    if not endpoint:
        raise MveValueError("The HTTP runtime needs an endpoint.")
    return HttpRuntime(endpoint, clock, client=http_client, log_level=log_level)
