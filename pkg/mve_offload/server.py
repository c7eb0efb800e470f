"""
The game server.

``GameServer`` runs a fixed-rate tick loop. One tick, in order:

1. ``on_tick`` hooks (in-process bots), then queued connects, disconnects and actions;
2. drain: FaaS replies, storage fetches, finished generations, chunk load-in;
3. player actions, then avatar movement;
4. one world tick of every active construct;
5. storage prefetch and terrain dispatch on a snapshot, unloading of far chunks,
   periodic persistence;
6. state updates to every session;
7. the ``TickSample``.

Tick starts are aligned to multiples of the tick budget; an overrunning tick is
followed immediately by the next one, without catch-up bursts.

Session I/O runs on other threads and only reaches the tick thread through the
inbox (``connect_player``, ``disconnect_player``, ``submit_action``).
"""

import itertools
import math
import threading
import time

from collections import Counter
from collections.abc import Iterable
from typing import Any, Callable, NamedTuple, Optional

import numpy as np

from mve_offload.clock import make_clock
from mve_offload.config import ServerConfig, Settings
from mve_offload.constructs import apply_to_world, bounds_of, state_from_world, stateful_mask
from mve_offload.errors import ChunkNotLoadedError, MveBaseError, MveConfigurationError, ServerFullError
from mve_offload.faas import make_runtime
from mve_offload.latency import CostModel, LatencyModel, StorageLatencyModel
from mve_offload.logs import DEFAULT_LOG_FORMAT, get_logger
from mve_offload.protocol import AvatarPositions, BaseSession, BlockChange, Chat, ChunkData, Welcome
from mve_offload.registry import ConstructRegistry, LiveConstruct, RegistryChange
from mve_offload.speculation import OffloadPolicy, SpeculativeExecutionUnit
from mve_offload.storages import make_storage, redis_client_from_url
from mve_offload.store import CachePolicy, ChunkStore
from mve_offload.terrain import TerrainDispatcher, distance_to_closest_unloaded, spawn_position
from mve_offload.typings import (
    AIR,
    CHUNK_WIDTH,
    ActionKind,
    Block,
    BlockType,
    Box,
    ChunkCoord,
    DistanceSample,
    ModificationEvent,
    OptionalLevel,
    PlayerAction,
    PlayerId,
    Position,
    ScMode,
    StorageMode,
    TerrainMode,
    TickBreakdown,
    TickSample,
    WorldSeed,
)
from mve_offload.world import WorldState, view_square


MILLI = 1000
MIN_SPEED = 1
MAX_SPEED = 8
TickHook = Callable[["GameServer", int], None]


def derive_seed(seed: int, stream: int) -> int:
    """Independent sub-seed of a run seed."""
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


class _Player:
    __slots__ = ("busy_until_ms", "id", "item", "known", "last_chunk", "name", "pos_mb", "session", "speed", "target_mb")

    def __init__(self, player_id: PlayerId, name: str, session: BaseSession, spawn: Position) -> None:
        self.id = player_id
        self.name = name
        self.session = session
        self.pos_mb = (spawn.x * MILLI, spawn.z * MILLI)
        self.target_mb: Optional[tuple[int, int]] = None
        self.speed = MIN_SPEED
        self.busy_until_ms = 0.0
        self.item = 0
        self.known: set[ChunkCoord] = set()
        self.last_chunk: Optional[ChunkCoord] = None


class _Inbox(NamedTuple):
    kind: str
    player_id: PlayerId
    payload: Any = None
    name: str = ""


def step_towards(pos_mb: tuple[int, int], target_mb: tuple[int, int], step_mb: float) -> tuple[int, int]:
    """Move a milli-block position at most ``step_mb`` along the straight line to the target."""
    dx, dz = target_mb[0] - pos_mb[0], target_mb[1] - pos_mb[1]
    dist = math.hypot(dx, dz)
    if dist <= step_mb:
        return target_mb
    f = step_mb / dist
    return pos_mb[0] + round(dx * f), pos_mb[1] + round(dz * f)


class GameServer:
    """Fixed-rate MVE server with offloadable construct simulation and terrain generation.

    :param config: server settings
    :param policy: construct offloading policy
    :param cache: chunk cache policy
    :param latency_model: latency of the emulated FaaS platform
    :param storage_latency: latency of the chunk cache and the emulated blob store
    :param cost_model: modelled compute costs charged to the ticks
    :param seed: run seed; latency samplers derive their seeds from it
    :param redis_client: pre-initialized client of the Redis back-end (``decode_responses=False``)
    :param http_client: pre-initialized ``httpx.Client`` of the HTTP runtime
    :param name: instance name used for logging
    :param log_level: ``str`` name or ``int`` constant; ``None`` attaches no handler
    :param log_format: ``logging.Formatter`` pattern used when ``log_level`` is set
    """

    def __init__(
        self,
        config: ServerConfig = ServerConfig(),
        *,
        policy: OffloadPolicy = OffloadPolicy(),
        cache: CachePolicy = CachePolicy(),
        latency_model: LatencyModel = LatencyModel(),
        storage_latency: StorageLatencyModel = StorageLatencyModel(),
        cost_model: CostModel = CostModel(),
        seed: int = 0,
        redis_client: Optional[Any] = None,
        http_client: Optional[Any] = None,
        name: str = "server",
        log_level: OptionalLevel = None,
        log_format: str = DEFAULT_LOG_FORMAT,
    ) -> None:
        self.config = config = ServerConfig(*config).validate()
        self.name = name
        self.seed = seed
        self.logger = get_logger(self, name, log_level, log_format)
        self.clock = make_clock(config.clock_mode)
        self.world = WorldState(config.view_distance_blocks)
        self.world_seed = WorldSeed(config.world_seed, config.generation_mode)
        self.registry = ConstructRegistry(config.max_construct_blocks)

        offload_sc = config.sc_mode == ScMode.Offloaded
        offload_terrain = config.terrain_mode == TerrainMode.Offloaded
        self.runtime = None
        if offload_sc or offload_terrain:
            self.runtime = make_runtime(
                config.runtime_type,
                self.clock,
                latency_model=latency_model,
                cost_model=cost_model,
                seed=derive_seed(seed, 1),
                endpoint=config.faas_endpoint,
                http_client=http_client,
                log_level=log_level,
            )
        if config.storage_mode == StorageMode.redis and redis_client is None:
            if not config.redis_url:
                raise MveConfigurationError("Redis storage needs `redis_client` or `redis_url`.")
            redis_client = redis_client_from_url(config.redis_url)
        backend = make_storage(
            config.storage_mode,
            root=config.storage_root,
            redis_client=redis_client,
            latency_model=storage_latency,
            clock=self.clock,
            seed=derive_seed(seed, 2),
        )
        self.store = ChunkStore(
            backend,
            self.clock,
            policy=cache,
            cache_dir=config.cache_dir,
            latency_model=storage_latency,
            seed=derive_seed(seed, 3),
            log_level=log_level,
            log_format=log_format,
        )
        self.store.recover()
        self.terrain = TerrainDispatcher(
            config.terrain_mode,
            self.world_seed,
            self.clock,
            runtime=self.runtime if offload_terrain else None,
            store=self.store,
            cost_model=cost_model,
            lookahead_blocks=config.lookahead_blocks,
            max_chunk_loads_per_tick=config.max_chunk_loads_per_tick,
            max_local_generations_per_tick=config.max_local_generations_per_tick,
            log_level=log_level,
            log_format=log_format,
        )
        self.sc = SpeculativeExecutionUnit(
            policy,
            self.clock,
            runtime=self.runtime if offload_sc else None,
            cost_model=cost_model,
            log_level=log_level,
            log_format=log_format,
        )
        self.cache_policy = cache

        self.samples: list[TickSample] = []
        self.distance: list[DistanceSample] = []
        self.errors: Counter = Counter()
        self.on_tick: list[TickHook] = []
        self.pinned: set[ChunkCoord] = set()

        self._players: dict[PlayerId, _Player] = {}
        self._ids = itertools.count(1)
        self._lock = threading.Lock()
        self._inbox: list[_Inbox] = []
        self._reserved: set[PlayerId] = set()
        self._target_ms: Optional[float] = None
        self._last_start_ms: Optional[float] = None
        self._last_persist_ms = self.clock.now_ms()
        self._block_changes: list[BlockChange] = []
        self._chat: list[Chat] = []
        self._loaded_this_tick: list[ChunkCoord] = []
        self._stopping = threading.Event()
        self._closed = False

    @classmethod
    def from_settings(cls, settings: Settings, **kwargs: Any) -> "GameServer":
        """Build a server from loaded settings; keyword arguments go to the constructor."""
        return cls(
            settings.server,
            policy=settings.policy,
            cache=settings.cache,
            latency_model=settings.latency,
            storage_latency=settings.storage_latency,
            cost_model=settings.cost,
            **kwargs,
        )

    @property
    def tick(self) -> int:
        """Last completed world tick."""
        return self.world.tick

    @property
    def players(self) -> list[PlayerId]:
        """Connected players, in id order."""
        return sorted(self._players)

    def item(self, player_id: PlayerId) -> int:
        """Inventory item of a player."""
        return self._players[player_id].item

    # session side (any thread)

    def connect_player(self, session: BaseSession, name: str = "") -> PlayerId:
        """Queue a player; it spawns at the world origin at the start of the next tick.

        :raises ServerFullError: ``max_players`` reached
        """
        with self._lock:
            if len(self._reserved) >= self.config.max_players:
                raise ServerFullError(f"Server is full ({self.config.max_players} players).", self)
            player_id = next(self._ids)
            self._reserved.add(player_id)
            self._inbox.append(_Inbox("connect", player_id, session, name))
        return player_id

    def disconnect_player(self, player_id: PlayerId) -> None:
        """Queue a disconnect; unknown ids are ignored."""
        with self._lock:
            if player_id not in self._reserved:
                return
            self._reserved.discard(player_id)
            self._inbox.append(_Inbox("disconnect", player_id))

    def submit_action(self, action: PlayerAction) -> None:
        """Queue a player action for the next tick."""
        with self._lock:
            self._inbox.append(_Inbox("action", action.player_id, action))

    # tick thread

    def run_tick(self) -> TickSample:
        """Run one tick and record its sample."""
        budget = self.config.tick_budget_ms
        if self._target_ms is not None:
            self.clock.sleep_until(self._target_ms)
        t0 = self.clock.now_ms()
        if self._target_ms is None:
            self._target_ms = t0
        dt = budget if self._last_start_ms is None else t0 - self._last_start_ms
        self._last_start_ms = t0
        tick = self.world.tick + 1

        for hook in list(self.on_tick):
            self._guard("hooks", hook, self, tick)
        self.clock.take_charged()

        started = time.perf_counter()
        charged = 0.0

        def phase(since: float) -> tuple[float, float]:
            nonlocal charged
            cost = self.clock.take_charged()
            charged += cost
            now = time.perf_counter()
            return (now - since) * 1000.0 + cost, now

        self.world.advance_tick()
        with self._lock:
            inbox, self._inbox = self._inbox, []
        actions = [e for e in inbox if e.kind == "action"]
        self._apply_membership([e for e in inbox if e.kind != "action"], tick)
        load_ms, mark = phase(started)

        self._guard("sc", self.sc.drain, tick)
        sc_ms, mark = phase(mark)

        self._drain_terrain(tick)
        ms, mark = phase(mark)
        load_ms += ms

        for entry in actions:
            self._guard("actions", self._apply_action, entry.payload, tick)
        self._move_avatars(t0, dt)
        actions_ms, mark = phase(mark)

        self._guard("sc", self._update_constructs, tick)
        ms, mark = phase(mark)
        sc_ms += ms

        self._guard("terrain", self._maintain_terrain, tick)
        ms, mark = phase(mark)
        load_ms += ms

        self._emit()
        emit_ms, mark = phase(mark)

        if self.world.avatars and tick % self.config.distance_sample_ticks == 0:
            self.distance.append(DistanceSample(t0 / 1000.0, distance_to_closest_unloaded(self.world)))
        duration = (time.perf_counter() - started) * 1000.0 + charged
        sample = TickSample(
            tick_index=tick,
            time_ms=t0,
            duration_ms=duration,
            breakdown=TickBreakdown(actions_ms=actions_ms, sc_ms=sc_ms, chunk_load_ms=load_ms, emit_ms=emit_ms),
            players=len(self._players),
            charged_ms=charged,
        )
        self.samples.append(sample)
        if self.config.warn_over_budget and duration > budget:
            self.logger.warning("Tick %s took %.1f ms (budget %.1f ms)", tick, duration, budget)

        if self.clock.virtual:
            self.clock.sleep_until(t0 + charged)
        self._target_ms += budget
        now = self.clock.now_ms()
        if now > self._target_ms:
            self._target_ms = now
        return sample

    def run(self, ticks: Optional[int] = None, seconds: Optional[float] = None) -> list[TickSample]:
        """Run ticks until ``ticks`` ran, ``seconds`` of clock time passed or ``stop`` is called.

        :return: samples recorded by this call
        """
        first = len(self.samples)
        end_ms = None if seconds is None else self.clock.now_ms() + seconds * 1000.0
        self._stopping.clear()
        counter = itertools.count() if ticks is None else iter(range(ticks))
        for _ in counter:
            if self._stopping.is_set():
                break
            if end_ms is not None and (self._target_ms or self.clock.now_ms()) >= end_ms:
                break
            self.run_tick()
        return self.samples[first:]

    def stop(self) -> None:
        """Make ``run`` return after the current tick."""
        self._stopping.set()

    def _guard(self, subsystem: str, fn: Callable, *args: Any) -> Any:
        try:
            return fn(*args)
        except Exception as e:
            self.errors[subsystem] += 1
            self.logger.error("%s failed in tick %s: %s", subsystem, self.world.tick, e, exc_info=True)
            return None

    def _apply_membership(self, entries: Iterable[_Inbox], tick: int) -> None:
        for entry in entries:
            if entry.kind == "connect":
                self._guard("connect", self._admit, entry.player_id, entry.payload, entry.name, tick)
            else:
                player = self._players.pop(entry.player_id, None)
                self.world.avatars.pop(entry.player_id, None)
                if player is not None:
                    player.session.close()
                    self.logger.info("Player %s (%s) left", player.id, player.name)

    def _admit(self, player_id: PlayerId, session: BaseSession, name: str, tick: int) -> None:
        spawn = spawn_position(self.world_seed)
        self.load_chunks(view_square(spawn, self.world.view_distance_blocks), tick - 1)
        spawn = spawn._replace(y=self._ground(spawn.x, spawn.z))
        self._players[player_id] = _Player(player_id, name, session, spawn)
        self.world.avatars[player_id] = spawn
        session.send(Welcome(player_id, self.config.tick_rate_hz))
        self.logger.info("Player %s (%s) joined at %s", player_id, name, tuple(spawn))

    def load_chunks(self, coords: Iterable[ChunkCoord], base_tick: Optional[int] = None) -> list[ChunkCoord]:
        """Load chunks synchronously and register the constructs they contain.

        :return: chunks that were not loaded before
        """
        base_tick = self.world.tick if base_tick is None else base_tick
        before = set(self.world.loaded)
        self.terrain.ensure(self.world, sorted(coords))
        added = sorted(set(self.world.loaded) - before)
        self._register_from_chunks(added, base_tick)
        return added

    def _register_from_chunks(self, coords: Iterable[ChunkCoord], base_tick: int) -> None:
        seeds: list[Position] = []
        for coord in coords:
            chunk = self.world.loaded[coord]
            mask = stateful_mask(chunk.cells)
            if not mask.any():
                continue
            x0, z0 = chunk.origin
            seeds.extend(Position(x0 + int(x), int(y), z0 + int(z)) for y, z, x in np.argwhere(mask))
        if seeds:
            self._sync(RegistryChange([], self.registry.register(self.world, seeds)), base_tick)

    def _sync(self, change: RegistryChange, base_tick: int) -> None:
        for cid in change.removed:
            self.sc.remove(cid)
        for construct in change.rebuilt:
            if construct.active:
                self.sc.reset(
                    state_from_world(
                        self.world,
                        construct.id,
                        construct.region,
                        logical_ts=construct.logical_ts,
                        base_tick=base_tick,
                    )
                )

    def place_construct(self, layout: list[tuple[Position, Block]], origin: Position) -> list[LiveConstruct]:
        """Write a construct layout into the world and start simulating it.

        The chunks under the layout (and its one-block margin) are loaded first
        and, with ``pin_construct_chunks``, never unloaded.
        """
        placed = [(Position(p.x + origin.x, p.y + origin.y, p.z + origin.z), b) for p, b in layout]
        b = bounds_of([p for p, _ in placed])
        coords = Box(b.x0 - 1, b.y0, b.z0 - 1, b.x1 + 1, b.y1, b.z1 + 1).chunks()
        self.load_chunks(coords)
        if self.config.pin_construct_chunks:
            self.pinned |= coords
        for pos, block in placed:
            self.world.set_block(pos, block)
        added = self.registry.register(self.world, [placed[0][0]])
        self._sync(RegistryChange([], added), self.world.tick)
        return added

    def _drain_terrain(self, tick: int) -> None:
        self._guard("storage", self.store.poll)
        self._guard("terrain", self.terrain.collect)
        loaded = self._guard("terrain", self.terrain.load_in, self.world) or []
        self._loaded_this_tick = loaded
        if loaded:
            self._register_from_chunks(loaded, tick - 1)
            self._sync(self.registry.refresh_activity(self.world), tick - 1)

    def _apply_action(self, action: PlayerAction, tick: int) -> None:
        player = self._players.get(action.player_id)
        if player is None:
            return
        kind = ActionKind(action.kind)
        if kind == ActionKind.Move and action.pos is not None:
            player.target_mb = (action.pos.x * MILLI, action.pos.z * MILLI)
            player.speed = min(max(int(action.speed), MIN_SPEED), MAX_SPEED)
        elif kind in (ActionKind.Break, ActionKind.Place) and action.pos is not None:
            block = AIR if kind == ActionKind.Break else Block.of(action.block_type or BlockType.Solid)
            try:
                event = self.world.set_block(action.pos, block)
            except ChunkNotLoadedError as e:
                self.errors["actions"] += 1
                self.logger.warning("Player %s: %s", player.id, e)
                return
            self._on_modification(event, tick)
            self._block_changes.append(BlockChange(event.pos, event.block))
        elif kind == ActionKind.Stand:
            player.target_mb = None
            player.busy_until_ms = self.clock.now_ms() + action.duration_ms
        elif kind == ActionKind.Chat:
            self._chat.append(Chat(player.id, action.text))
        elif kind == ActionKind.SetInventory:
            player.item = action.item

    def _on_modification(self, event: ModificationEvent, tick: int) -> None:
        self._sync(self.registry.on_modification(self.world, event), tick - 1)

    def _ground(self, x: int, z: int) -> int:
        chunk = self.world.loaded[ChunkCoord(x // CHUNK_WIDTH, z // CHUNK_WIDTH)]
        column = chunk.cells[:, z % CHUNK_WIDTH, x % CHUNK_WIDTH] >> 4
        solid = np.flatnonzero(column == int(BlockType.Solid))
        return int(solid[-1]) + 1 if solid.size else 0

    def _move_avatars(self, now_ms: float, dt_ms: float) -> None:
        for player in self._players.values():
            if player.target_mb is None or now_ms < player.busy_until_ms:
                continue
            nxt = step_towards(player.pos_mb, player.target_mb, player.speed * dt_ms)
            x, z = nxt[0] // MILLI, nxt[1] // MILLI
            if ChunkCoord(x // CHUNK_WIDTH, z // CHUNK_WIDTH) not in self.world.loaded:
                continue
            current = self.world.avatars[player.id]
            y = current.y if (x, z) == (current.x, current.z) else self._ground(x, z)
            player.pos_mb = nxt
            if nxt == player.target_mb:
                player.target_mb = None
            self.world.avatars[player.id] = Position(x, y, z)

    def _update_constructs(self, tick: int) -> int:
        mode = self.config.sc_mode
        half_rate = mode == ScMode.LocalEveryOtherTick or (mode == ScMode.LocalOnly and self.sc.policy.every_other_tick)
        if half_rate and tick % 2:
            return 0
        changed = 0
        for construct in self.registry.active():
            if construct.id not in self.sc:
                continue
            state = self.sc.on_construct_tick(construct.id, tick)
            if mode == ScMode.Offloaded:
                self.sc.schedule_next(construct.id, tick)
            changed += apply_to_world(self.world, state)
        return changed

    def _maintain_terrain(self, tick: int) -> None:
        snapshot = self.world.snapshot()
        if snapshot.avatars:
            self._guard("storage", self.store.prefetch, snapshot)
            self.terrain.dispatch(snapshot)

        keep = self.world.required_chunks(self.config.lookahead_blocks + self.config.unload_margin_blocks)
        removed = self.world.unload_far_chunks(keep | self.pinned)
        for chunk in removed:
            if chunk.dirty:
                self.store.write(chunk.coord.key, chunk.to_bytes())
                chunk.dirty = False
        if removed:
            self._sync(self.registry.refresh_activity(self.world), tick)

        now = self.clock.now_ms()
        if now - self._last_persist_ms >= self.cache_policy.write_back_interval_ms:
            self._last_persist_ms = now
            self.persist()
            self._guard("storage", self.store.maybe_flush)
        if tick % self.config.tick_rate_hz == 0:
            self.store.evict_idle(now)

    def persist(self) -> int:
        """Write every modified loaded chunk to the store; returns how many."""
        dirty = self.world.dirty_chunks()
        for chunk in dirty:
            self.store.write(chunk.coord.key, chunk.to_bytes())
            chunk.dirty = False
        return len(dirty)

    def _emit(self) -> None:
        positions = AvatarPositions(sorted(self.world.avatars.items()))
        changes, self._block_changes = self._block_changes, []
        chat, self._chat = self._chat, []
        for player_id in sorted(self._players):
            player = self._players[player_id]
            session = player.session
            if session.closed:
                continue
            if self.config.emit_chunks:
                self._send_chunks(player)
            for message in changes:
                session.send(message)
            for message in chat:
                session.send(message)
            session.send(positions)

    def _send_chunks(self, player: _Player) -> None:
        pos = self.world.avatars[player.id]
        here = ChunkCoord.of_position(pos)
        if here == player.last_chunk and not self._loaded_this_tick:
            return
        player.last_chunk = here
        visible = view_square(pos, self.world.view_distance_blocks)
        for coord in sorted(visible - player.known):
            chunk = self.world.loaded.get(coord)
            if chunk is not None:
                player.session.send(ChunkData(chunk.to_bytes()))
                player.known.add(coord)
        player.known &= visible

    def summary(self) -> dict[str, Any]:
        """Counters of the server and its subsystems."""
        return {
            "ticks": self.world.tick,
            "players": len(self._players),
            "constructs": len(self.registry),
            "loaded_chunks": len(self.world.loaded),
            "errors": dict(self.errors),
            "sc": self.sc.summary(),
            "store": self.store.summary(),
            "terrain": {
                "generations": self.terrain.generations,
                "loads": self.terrain.loads,
                "failures": self.terrain.failures,
            },
        }

    def close(self) -> None:
        """Persist modified chunks, stop every subsystem and close the sessions."""
        if self._closed:
            return
        self._closed = True
        for player in self._players.values():
            player.session.close()
        try:
            self.persist()
        except MveBaseError as e:
            self.logger.error("Could not persist the world: %s", e)
        self.terrain.close()
        self.sc.close()
        if self.runtime is not None:
            self.runtime.shutdown()
        self.store.close(flush=True)
        self.logger.info("Server stopped after %s ticks", self.world.tick)

    def __enter__(self) -> "GameServer":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()
