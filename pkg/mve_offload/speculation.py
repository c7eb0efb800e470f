"""
Replicated speculative execution of simulated constructs.

The server keeps simulating every construct locally, one step per tick. In
parallel it asks a serverless function to simulate ``num_steps`` steps ahead
from a known state. Replies whose logical timestamp is current are buffered and
replace local stepping for the ticks they cover; ticks already simulated
locally when a reply lands are counted as duplicated work.

Timeline of one invocation issued at world tick ``t`` from the state of tick
``s``::

    issued_tick = t          start_tick = s            covers ticks s+1 .. s+num_steps
    a new request is issued once at most ``tick_lead`` buffered ticks remain

Request payload (little-endian)::

    construct_id: int64, start_tick: int64, num_steps: uint32, logical_ts: int64,
    loop_detection: uint8, then the canonical construct state

Reply payload::

    construct_id: int64, start_tick: int64, logical_ts: int64, worker_ms: float64,
    then the trajectory
"""

import struct

from typing import TYPE_CHECKING, Any, NamedTuple, Optional, Union

from mve_offload.clock import BaseClock, DeferredQueue
from mve_offload.constructs import (
    ConstructState,
    LoopDescriptor,
    as_descriptor,
    decode_state,
    decode_trajectory,
    encode_state,
    encode_trajectory,
    expand,
    simulate,
    simulate_with_loop_detection,
    step_cells,
)
from mve_offload.errors import MalformedPayloadError, MveTypeError, MveValueError, UnknownConstructError
from mve_offload.latency import CostModel
from mve_offload.logs import DEFAULT_LOG_FORMAT, get_logger
from mve_offload.typings import ConstructId, EfficiencyRecord, FunctionName, OptionalLevel, ReplyStatus


if TYPE_CHECKING:
    from mve_offload.faas.base_runtime import BaseRuntime, RuntimeReply


_REQUEST_HEADER = struct.Struct("<qqIqB")
_REPLY_HEADER = struct.Struct("<qqqd")


class OffloadPolicy(NamedTuple):
    """How constructs are offloaded.

    Properties:
     - num_steps: steps simulated per invocation
     - tick_lead: buffered ticks left when the next invocation is issued
     - loop_detection: let the function fold periodic trajectories
     - reinvoke_on_stale: stale in-flight invocations do not hold back a fresh one
     - every_other_tick: local simulation on even ticks only
    """

    num_steps: int = 100
    tick_lead: int = 20
    loop_detection: bool = False
    reinvoke_on_stale: bool = True
    every_other_tick: bool = False

    def validate(self) -> "OffloadPolicy":
        """Check ranges; returns the policy."""
        for field in ("num_steps", "tick_lead"):
            value = getattr(self, field)
            if not isinstance(value, int) or isinstance(value, bool):
                raise MveTypeError(f"{field} must be an integer, got {type(value).__name__}.")
        if self.num_steps < 1:
            raise MveValueError("num_steps must be >= 1.")
        if self.tick_lead < 0:
            raise MveValueError("tick_lead must be >= 0.")
        return self

    def as_dict(self) -> dict[str, Any]:
        """Serialize to a config-friendly dictionary."""
        return self._asdict()


class OffloadRequest(NamedTuple):
    """Input of one ``sc_simulate`` invocation."""

    construct_id: ConstructId
    state: ConstructState
    start_tick: int
    num_steps: int
    logical_ts: int
    loop_detection: bool = False


class OffloadReply(NamedTuple):
    """Output of one ``sc_simulate`` invocation.

    ``payload`` always holds a ``LoopDescriptor``; an unfolded trajectory is a
    descriptor without a cycle.
    """

    construct_id: ConstructId
    start_tick: int
    logical_ts: int
    payload: LoopDescriptor
    worker_duration_ms: float = 0.0


def encode_request(r: OffloadRequest) -> bytes:
    """Serialize a request."""
    header = _REQUEST_HEADER.pack(r.construct_id, r.start_tick, r.num_steps, r.logical_ts, int(r.loop_detection))
    return header + encode_state(r.state)


def decode_request(data: bytes) -> OffloadRequest:
    """Inverse of ``encode_request``.

    :raises MalformedPayloadError: truncated or invalid payload
    """
    if len(data) < _REQUEST_HEADER.size:
        raise MalformedPayloadError("Offload request is truncated.")
    cid, start_tick, num_steps, logical_ts, loop = _REQUEST_HEADER.unpack_from(data)
    if num_steps < 1:
        raise MalformedPayloadError("num_steps must be >= 1.")
    state = decode_state(data[_REQUEST_HEADER.size :], cid, logical_ts=logical_ts, base_tick=start_tick)
    return OffloadRequest(cid, state, start_tick, num_steps, logical_ts, bool(loop))


def encode_offload_reply(r: OffloadReply) -> bytes:
    """Serialize a reply."""
    header = _REPLY_HEADER.pack(r.construct_id, r.start_tick, r.logical_ts, r.worker_duration_ms)
    return header + encode_trajectory(r.payload)


def decode_offload_reply(data: bytes) -> OffloadReply:
    """Inverse of ``encode_offload_reply``."""
    if len(data) < _REPLY_HEADER.size:
        raise MalformedPayloadError("Offload reply is truncated.")
    cid, start_tick, logical_ts, worker_ms = _REPLY_HEADER.unpack_from(data)
    return OffloadReply(cid, start_tick, logical_ts, decode_trajectory(data, _REPLY_HEADER.size), worker_ms)


def run_request(r: OffloadRequest) -> OffloadReply:
    """Simulate a request; the body of the ``sc_simulate`` function."""
    if r.loop_detection:
        result: Union[LoopDescriptor, list[ConstructState]] = simulate_with_loop_detection(r.state, r.num_steps)
    else:
        result = simulate(r.state, r.num_steps)
    return OffloadReply(r.construct_id, r.start_tick, r.logical_ts, as_descriptor(result))


class _Segment(NamedTuple):
    start_tick: int
    end_tick: int
    trajectory: LoopDescriptor


class _InFlight:
    __slots__ = ("duplicated", "invocation_id", "issued_tick", "logical_ts", "num_steps", "start_tick")

    def __init__(self, invocation_id: int, start_tick: int, num_steps: int, logical_ts: int, issued_tick: int) -> None:
        self.invocation_id = invocation_id
        self.start_tick = start_tick
        self.num_steps = num_steps
        self.logical_ts = logical_ts
        self.issued_tick = issued_tick
        self.duplicated = 0

    @property
    def end_tick(self) -> int:
        return self.start_tick + self.num_steps

    def covers(self, tick: int) -> bool:
        return self.start_tick < tick <= self.end_tick


class _Track:
    __slots__ = ("blocks", "inflight", "segments", "state")

    def __init__(self, state: ConstructState) -> None:
        self.state = state
        self.blocks = state.blocks
        self.segments: list[_Segment] = []
        self.inflight: dict[int, _InFlight] = {}

    def buffered(self, tick: int) -> Optional[Any]:
        for seg in self.segments:
            if seg.start_tick < tick <= seg.end_tick:
                return expand(seg.trajectory, tick - seg.start_tick - 1)
        return None

    def buffer_end(self) -> int:
        return max([self.state.base_tick, *(seg.end_tick for seg in self.segments)])


class SpeculativeExecutionUnit:
    """Per-construct local simulation with speculative offloading.

    Owned by the tick thread: ``drain``, ``on_construct_tick`` and
    ``schedule_next`` must not run concurrently.

    :param policy: offloading policy
    :param clock: tick clock; local steps charge their modelled cost to it
    :param runtime: FaaS runtime; ``None`` keeps every construct local
    :param cost_model: modelled compute costs
    :param name: instance name used for logging
    :param log_level: ``str`` name or ``int`` constant; ``None`` attaches no handler
    :param log_format: ``logging.Formatter`` pattern used when ``log_level`` is set
    """

    def __init__(
        self,
        policy: OffloadPolicy,
        clock: BaseClock,
        *,
        runtime: Optional["BaseRuntime"] = None,
        cost_model: CostModel = CostModel(),
        name: str = "sc",
        log_level: OptionalLevel = None,
        log_format: str = DEFAULT_LOG_FORMAT,
    ) -> None:
        self.policy = OffloadPolicy(*policy).validate()
        self.clock = clock
        self.runtime = runtime
        self.cost_model = cost_model
        self.name = name
        self.logger = get_logger(self, name, log_level, log_format)
        if runtime is not None and self.policy.num_steps <= self.policy.tick_lead:
            self.logger.warning(
                "num_steps (%s) <= tick_lead (%s): every reply is needed before it is computed",
                self.policy.num_steps,
                self.policy.tick_lead,
            )
        self.records: list[EfficiencyRecord] = []
        self.local_steps = 0
        self.speculative_steps = 0
        self.stale_replies = 0
        self.lost_replies = 0
        self._tracks: dict[ConstructId, _Track] = {}
        self._replies: DeferredQueue = DeferredQueue(clock)

    def __contains__(self, construct_id: object) -> bool:
        return construct_id in self._tracks

    def __len__(self) -> int:
        return len(self._tracks)

    @property
    def pending_replies(self) -> int:
        """Replies not yet drained."""
        return len(self._replies)

    def state(self, construct_id: ConstructId) -> ConstructState:
        """Current authoritative state of a construct.

        :raises UnknownConstructError: no such construct
        """
        return self._track(construct_id).state

    def _track(self, construct_id: ConstructId) -> _Track:
        track = self._tracks.get(construct_id)
        if track is None:
            raise UnknownConstructError(f"Construct {construct_id} is not simulated.", self)
        return track

    def reset(self, state: ConstructState) -> None:
        """Start (or restart) a construct from an authoritative state.

        Buffered speculative states are dropped; in-flight invocations are kept
        so their replies can be accounted as stale.
        """
        track = self._tracks.get(state.id)
        if track is None:
            self._tracks[state.id] = _Track(state)
            return
        track.state = state
        track.blocks = state.blocks
        track.segments.clear()

    register = reset

    def remove(self, construct_id: ConstructId) -> None:
        """Stop simulating a construct; later replies for it raise ``UnknownConstructError``."""
        self._tracks.pop(construct_id, None)

    def on_construct_tick(self, construct_id: ConstructId, world_tick: int) -> ConstructState:
        """Advance a construct to ``world_tick``.

        Uses the buffered speculative state for the tick when there is one;
        otherwise steps locally and counts the step as duplicated against the
        in-flight invocation covering the tick.
        """
        track = self._track(construct_id)
        cells = track.buffered(world_tick)
        if cells is not None:
            self.speculative_steps += 1
        else:
            cells = step_cells(track.state.cells)
            self.clock.charge(self.cost_model.local_sc_ms(track.blocks))
            self.local_steps += 1
            for inflight in track.inflight.values():
                if inflight.logical_ts == track.state.logical_ts and inflight.covers(world_tick):
                    inflight.duplicated += 1
        track.state = track.state.with_cells(cells, world_tick)
        track.segments = [seg for seg in track.segments if seg.end_tick > world_tick]
        return track.state

    def schedule_next(self, construct_id: ConstructId, world_tick: int) -> Optional[OffloadRequest]:
        """Issue the next invocation if at most ``tick_lead`` buffered ticks remain.

        The request starts from the last buffered state, or from the current
        state when nothing is buffered.
        """
        if self.runtime is None:
            return None
        track = self._track(construct_id)
        ts = track.state.logical_ts
        buffer_end = track.buffer_end()
        if buffer_end - world_tick > self.policy.tick_lead:
            return None
        for inflight in track.inflight.values():
            if inflight.logical_ts == ts and inflight.end_tick > buffer_end:
                return None
            if inflight.logical_ts < ts and not self.policy.reinvoke_on_stale:
                return None

        if buffer_end > track.state.base_tick:
            start = track.state.with_cells(track.buffered(buffer_end), buffer_end)
        else:
            start = track.state
        request = OffloadRequest(
            construct_id, start, start.base_tick, self.policy.num_steps, ts, self.policy.loop_detection
        )
        invocation_id = self.runtime.invoke(
            FunctionName.ScSimulate, encode_request(request), channel=self._replies, tag=construct_id, tick=world_tick
        )
        track.inflight[invocation_id] = _InFlight(
            invocation_id, request.start_tick, request.num_steps, ts, world_tick
        )
        self.logger.debug(
            "Construct %s: invocation %s covers ticks %s..%s (issued at %s)",
            construct_id,
            invocation_id,
            request.start_tick + 1,
            request.start_tick + request.num_steps,
            world_tick,
        )
        return request

    def drain(self, world_tick: int) -> list[tuple[ConstructId, ReplyStatus]]:
        """Merge every reply that arrived before ``world_tick`` started."""
        outcomes = []
        for deferred in self._replies.pop_ready():
            reply: "RuntimeReply" = deferred.value
            construct_id = deferred.tag
            if deferred.error is not None:
                self._lose_unknown(construct_id, deferred.error)
                continue
            if not reply.ok:
                self._lose(construct_id, reply)
                continue
            try:
                decoded = decode_offload_reply(reply.body)._replace(worker_duration_ms=reply.worker_ms)
                outcomes.append((construct_id, self.accept_reply(decoded, world_tick, reply.invocation_id)))
            except UnknownConstructError:
                self.logger.warning(
                    "Dropped reply %s for construct %s: construct no longer exists", reply.invocation_id, construct_id
                )
            except MalformedPayloadError as e:
                self.logger.error("Dropped reply %s for construct %s: %s", reply.invocation_id, construct_id, e)
                self._lose(construct_id, reply)
        return outcomes

    def _lose_unknown(self, construct_id: ConstructId, error: BaseException) -> None:
        # the invocation id is lost with the reply; retire the oldest one in flight
        self.lost_replies += 1
        track = self._tracks.get(construct_id)
        if track is not None and track.inflight:
            inflight = track.inflight.pop(min(track.inflight))
            self._account(construct_id, inflight, inflight.num_steps, stale=False)
        self.logger.error("Invocation for construct %s raised: %s", construct_id, error)

    def _lose(self, construct_id: ConstructId, reply: "RuntimeReply") -> None:
        self.lost_replies += 1
        track = self._tracks.get(construct_id)
        inflight = track.inflight.pop(reply.invocation_id, None) if track else None
        if inflight is not None:
            self._account(construct_id, inflight, inflight.num_steps, stale=False)
        self.logger.warning("Invocation %s for construct %s failed", reply.invocation_id, construct_id)

    def accept_reply(self, reply: OffloadReply, world_tick: int, invocation_id: int = 0) -> ReplyStatus:
        """Merge one reply.

        - Stale: computed from an older logical timestamp; discarded.
        - Late: some covered ticks were already simulated locally; the rest is buffered.
        - Accepted: every covered tick is still ahead; all of it is buffered.

        :raises UnknownConstructError: the construct is no longer simulated
        """
        track = self._tracks.get(reply.construct_id)
        if track is None:
            raise UnknownConstructError(f"Construct {reply.construct_id} is not simulated.", self)
        n = reply.payload.length
        inflight = track.inflight.pop(invocation_id, None) or _InFlight(
            invocation_id, reply.start_tick, n, reply.logical_ts, world_tick
        )

        if reply.logical_ts < track.state.logical_ts:
            self.stale_replies += 1
            self._account(reply.construct_id, inflight, n, stale=True)
            self.logger.debug("Construct %s: reply %s is stale", reply.construct_id, invocation_id)
            return ReplyStatus.Stale

        applied = track.state.base_tick
        late = max(0, min(reply.start_tick + n, applied) - reply.start_tick)
        if late < n:
            track.segments.append(_Segment(reply.start_tick, reply.start_tick + n, reply.payload))
        self._account(reply.construct_id, inflight, max(inflight.duplicated, late), stale=False)
        self.logger.debug(
            "Construct %s: reply %s at tick %s, %s late, %s buffered",
            reply.construct_id,
            invocation_id,
            world_tick,
            late,
            n - late,
        )
        return ReplyStatus.Accepted if late == 0 else ReplyStatus.Late

    def _account(self, construct_id: ConstructId, inflight: _InFlight, duplicated: int, *, stale: bool) -> None:
        total = inflight.num_steps
        duplicated = total if stale else min(duplicated, total)
        self.records.append(
            EfficiencyRecord(
                invocation_id=inflight.invocation_id,
                construct_id=construct_id,
                issued_tick=inflight.issued_tick,
                total_steps=total,
                duplicated_steps=duplicated,
                efficiency=(total - duplicated) / total,
                lead=self.policy.tick_lead,
                stale=stale,
            )
        )

    def summary(self) -> dict[str, Any]:
        """Counters for reports."""
        return {
            "constructs": len(self._tracks),
            "local_steps": self.local_steps,
            "speculative_steps": self.speculative_steps,
            "stale_replies": self.stale_replies,
            "lost_replies": self.lost_replies,
            "invocations": len(self.records),
        }

    def close(self) -> None:
        """Drop pending replies."""
        self._replies.clear()
        self.logger.debug("Unit closed")
