"""
Bot players, join schedules, construct fixtures and scenario runs.

A ``Bot`` is the client-side decision logic only: given its avatar position and
the time it returns the next ``PlayerAction`` once the previous one completed.
The same bots are driven either in-process (``InProcessDriver``, stepped at tick
boundaries, deterministic under a virtual clock) or over TCP (``run_tcp_bots``).

Every bot owns a ``numpy`` generator seeded from ``(run seed, bot index)``;
bots share nothing else.
"""

import asyncio
import math
import time

from collections import Counter
from collections.abc import Sequence
from typing import Any, NamedTuple, Optional

import numpy as np

from mve_offload.bench import MetricsLog, collect_metrics
from mve_offload.config import ScenarioConfig
from mve_offload.constructs import bounds_of, template_layout
from mve_offload.errors import MveValueError, ProtocolError
from mve_offload.logs import DEFAULT_LOG_FORMAT, get_logger
from mve_offload.protocol import Action, AvatarPositions, InProcessSession, Join, Welcome, read_message, write_message
from mve_offload.server import MAX_SPEED, MIN_SPEED, GameServer
from mve_offload.typings import (
    CHUNK_HEIGHT,
    ActionKind,
    BehaviorKind,
    BehaviorKindType,
    BlockType,
    Box,
    ConstructId,
    ConstructTemplate,
    ConstructTemplateType,
    OptionalLevel,
    PlayerAction,
    PlayerId,
    Position,
    coerce_enum,
)


# Move, Break-or-Place, Stand, Chat, SetInventory
RANDOM_ACTION_WEIGHTS = (0.40, 0.30, 0.20, 0.05, 0.05)
RANDOM_ACTION_KINDS = (ActionKind.Move, ActionKind.Break, ActionKind.Stand, ActionKind.Chat, ActionKind.SetInventory)
MOVE_RANGE_BLOCKS = 32
REACH_BLOCKS = 3
STAND_MS = (1000, 5000)
INVENTORY_SLOTS = 36
STAR_DISTANCE = 100_000
STUCK_TIMEOUT_MS = 10_000.0
MAX_TARGET_DRAWS = 10


def sample_action_kinds(rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw ``n`` random-behaviour categories (indices into ``RANDOM_ACTION_KINDS``)."""
    return rng.choice(len(RANDOM_ACTION_WEIGHTS), size=n, p=RANDOM_ACTION_WEIGHTS)


class BehaviorSpec(NamedTuple):
    """How a bot plays.

    Properties:
     - kind: behaviour
     - speed: StarWalk speed in blocks/s
     - area_radius: BoundedMoveOnly radius in blocks
     - step_interval_s: StarWalkIncreasing speed-up period
     - rng_seed: run seed the bot generators derive from
    """

    kind: BehaviorKindType = BehaviorKind.RandomActions
    speed: int = 3
    area_radius: int = 64
    step_interval_s: float = 200.0
    rng_seed: int = 0

    def validate(self) -> "BehaviorSpec":
        """Check ranges and normalize the kind."""
        if not MIN_SPEED <= self.speed <= MAX_SPEED:
            raise MveValueError(f"speed must be within [{MIN_SPEED}, {MAX_SPEED}] blocks/s.")
        if self.area_radius < 2:
            raise MveValueError("area_radius must be >= 2.")
        if self.step_interval_s <= 0:
            raise MveValueError("step_interval_s must be > 0.")
        return self._replace(kind=coerce_enum(BehaviorKind, self.kind))


class JoinSchedule(NamedTuple):
    """Bot ``k`` joins at ``k * interval_s``."""

    total_players: int
    interval_s: float = 10.0

    def join_time_s(self, k: int) -> float:
        """Join time of the ``k``-th bot."""
        return k * self.interval_s

    def players_at(self, t_s: float) -> int:
        """Bots joined by ``t_s``."""
        if self.total_players == 0 or t_s < 0:
            return 0
        return min(self.total_players, int(t_s // self.interval_s) + 1)


class ScFixture(NamedTuple):
    """A grid of reference constructs.

    Constructs are laid out in layers at ``y = base_y + layer_step * k``; within a
    layer they fill a square of ``area_blocks`` centred on the origin, which the
    first player's view square covers.
    """

    count: int = 0
    template: ConstructTemplateType = ConstructTemplate.Clock484
    spacing_x: int = 18
    spacing_z: int = 58
    base_y: int = 4
    layer_step: int = 2
    area_blocks: int = 256

    def origins(self) -> list[Position]:
        """Origin of every construct, layer by layer, then row by row."""
        cols = self.area_blocks // self.spacing_x
        rows = self.area_blocks // self.spacing_z
        per_layer = cols * rows
        if per_layer == 0:
            raise MveValueError("The fixture area is smaller than one construct.")
        half = self.area_blocks // 2
        origins = []
        for k in range(self.count):
            layer, rest = divmod(k, per_layer)
            row, col = divmod(rest, cols)
            y = self.base_y + self.layer_step * layer
            if y >= CHUNK_HEIGHT:
                raise MveValueError(f"{self.count} constructs do not fit below the world height.")
            origins.append(Position(-half + col * self.spacing_x, y, -half + row * self.spacing_z))
        return origins

    def bounds(self) -> list[Box]:
        """Bounds of every construct."""
        layout = template_layout(self.template)
        b = bounds_of([p for p, _ in layout])
        return [Box(b.x0 + o.x, b.y0 + o.y, b.z0 + o.z, b.x1 + o.x, b.y1 + o.y, b.z1 + o.z) for o in self.origins()]

    def deploy(self, server: GameServer) -> list[ConstructId]:
        """Place every construct into the server's world."""
        layout = template_layout(self.template)
        ids: list[ConstructId] = []
        for origin in self.origins():
            ids.extend(c.id for c in server.place_construct(layout, origin))
        return ids


class Bot:
    """Decision logic of one bot.

    :param index: bot index within the scenario
    :param n_players: bots in the scenario (spreads StarWalk directions)
    :param spec: behaviour
    """

    def __init__(self, index: int, n_players: int, spec: BehaviorSpec) -> None:
        self.index = index
        self.spec = spec.validate()
        self.rng = np.random.default_rng([spec.rng_seed, index])
        self.angle = 2 * math.pi * index / max(n_players, 1)
        self.player_id: PlayerId = 0
        self.spawn: Optional[Position] = None
        self.joined_ms = 0.0
        self.client_tick = 0
        self.actions: Counter = Counter()
        self._target: Optional[tuple[int, int]] = None
        self._speed = 0
        self._busy_until_ms = 0.0
        self._last_pos: Optional[Position] = None
        self._last_progress_ms = 0.0

    def join(self, player_id: PlayerId, spawn: Position, now_ms: float) -> None:
        """Bind the bot to its player after the server accepted it."""
        self.player_id = player_id
        self.spawn = spawn
        self.joined_ms = now_ms
        self._last_progress_ms = now_ms

    def next_action(self, pos: Position, now_ms: float, forbidden: Sequence[Box] = ()) -> Optional[PlayerAction]:
        """Next action, or ``None`` while the previous one is still running.

        :param pos: current avatar position
        :param now_ms: bot clock
        :param forbidden: bounds of constructs; Break/Place never targets them
        """
        if self.spawn is None:
            raise MveValueError("The bot has not joined yet.")
        self.client_tick += 1
        kind = self.spec.kind
        if kind == BehaviorKind.StarWalk:
            return self._star_walk(self.spec.speed) if self._target is None else None
        if kind == BehaviorKind.StarWalkIncreasing:
            elapsed_s = (now_ms - self.joined_ms) / 1000.0
            speed = min(MAX_SPEED, MIN_SPEED + int(elapsed_s // self.spec.step_interval_s))
            return self._star_walk(speed) if speed != self._speed else None
        if self._busy(pos, now_ms):
            return None
        if kind == BehaviorKind.BoundedMoveOnly:
            return self._bounded_move()
        return self._random_action(pos, now_ms, forbidden)

    def _action(self, kind: ActionKind, **fields: Any) -> PlayerAction:
        self.actions[kind.name] += 1
        return PlayerAction(kind=kind, player_id=self.player_id, client_tick=self.client_tick, **fields)

    def _busy(self, pos: Position, now_ms: float) -> bool:
        if now_ms < self._busy_until_ms:
            return True
        if self._target is None:
            return False
        if (pos.x, pos.z) == self._target:
            self._target = None
            return False
        if pos != self._last_pos:
            self._last_pos = pos
            self._last_progress_ms = now_ms
            return True
        if now_ms - self._last_progress_ms > STUCK_TIMEOUT_MS:
            self._target = None
            return False
        return True

    def _move(self, x: int, z: int, speed: int) -> PlayerAction:
        self._target = (x, z)
        self._speed = speed
        self._last_pos = None
        return self._action(ActionKind.Move, pos=Position(x, self.spawn.y, z), speed=speed)

    def _star_walk(self, speed: int) -> PlayerAction:
        x = self.spawn.x + round(STAR_DISTANCE * math.cos(self.angle))
        z = self.spawn.z + round(STAR_DISTANCE * math.sin(self.angle))
        return self._move(x, z, speed)

    def _bounded_move(self) -> PlayerAction:
        # two blocks of slack keep rounded avatar positions inside the radius
        radius = (self.spec.area_radius - 2) * math.sqrt(self.rng.random())
        theta = 2 * math.pi * self.rng.random()
        x = self.spawn.x + int(radius * math.cos(theta))
        z = self.spawn.z + int(radius * math.sin(theta))
        return self._move(x, z, int(self.rng.integers(MIN_SPEED, MAX_SPEED + 1)))

    def _random_action(self, pos: Position, now_ms: float, forbidden: Sequence[Box]) -> Optional[PlayerAction]:
        kind = RANDOM_ACTION_KINDS[int(sample_action_kinds(self.rng, 1)[0])]
        if kind == ActionKind.Move:
            dx, dz = self.rng.integers(-MOVE_RANGE_BLOCKS, MOVE_RANGE_BLOCKS + 1, size=2)
            return self._move(pos.x + int(dx), pos.z + int(dz), int(self.rng.integers(MIN_SPEED, MAX_SPEED + 1)))
        if kind == ActionKind.Break:
            place = bool(self.rng.random() < 0.5)
            target = self._reachable(pos, forbidden)
            if target is None:
                return None
            if place:
                return self._action(ActionKind.Place, pos=target, block_type=BlockType.Solid)
            return self._action(ActionKind.Break, pos=target)
        if kind == ActionKind.Stand:
            duration = int(self.rng.integers(STAND_MS[0], STAND_MS[1] + 1))
            self._busy_until_ms = now_ms + duration
            return self._action(ActionKind.Stand, duration_ms=duration)
        if kind == ActionKind.Chat:
            return self._action(ActionKind.Chat, text=f"bot-{self.index} #{self.client_tick}")
        return self._action(ActionKind.SetInventory, item=int(self.rng.integers(0, INVENTORY_SLOTS)))

    def _reachable(self, pos: Position, forbidden: Sequence[Box]) -> Optional[Position]:
        for _ in range(MAX_TARGET_DRAWS):
            dx, dy, dz = self.rng.integers(-REACH_BLOCKS, REACH_BLOCKS + 1, size=3)
            target = Position(pos.x + int(dx), min(max(pos.y + int(dy), 0), CHUNK_HEIGHT - 1), pos.z + int(dz))
            if not any(box.contains(target, margin=1) for box in forbidden):
                return target
        return None


class InProcessDriver:
    """Drives bots linked into the server process from its ``on_tick`` hook.

    :param server: game server
    :param spec: behaviour of every bot
    :param schedule: join schedule
    :param keep_messages: keep the messages sent to each session
    """

    def __init__(
        self, server: GameServer, spec: BehaviorSpec, schedule: JoinSchedule, keep_messages: bool = False
    ) -> None:
        self.server = server
        self.schedule = schedule
        self.bots = [Bot(k, schedule.total_players, spec) for k in range(schedule.total_players)]
        self.sessions: dict[PlayerId, InProcessSession] = {}
        self.keep_messages = keep_messages
        self._joined = 0
        self._started_ms: Optional[float] = None
        server.on_tick.append(self)

    def __call__(self, server: GameServer, tick: int) -> None:
        now = server.clock.now_ms()
        if self._started_ms is None:
            self._started_ms = now
        while self._joined < len(self.bots) and now - self._started_ms >= self.schedule.join_time_s(self._joined) * 1000:
            bot = self.bots[self._joined]
            session = InProcessSession(keep_messages=self.keep_messages)
            bot.player_id = server.connect_player(session, f"bot-{bot.index}")
            self.sessions[bot.player_id] = session
            self._joined += 1

        forbidden = server.registry.bounds()
        for bot in self.bots[: self._joined]:
            pos = server.world.avatars.get(bot.player_id)
            if pos is None:
                continue
            if bot.spawn is None:
                bot.join(bot.player_id, pos, now)
            action = bot.next_action(pos, now, forbidden)
            if action is not None:
                server.submit_action(action)

    def detach(self) -> None:
        """Stop driving the bots."""
        if self in self.server.on_tick:
            self.server.on_tick.remove(self)


async def run_tcp_bot(
    bot: Bot,
    host: str,
    port: int,
    *,
    start_delay_s: float = 0.0,
    duration_s: float = 60.0,
    tick_rate_hz: int = 20,
    forbidden: Sequence[Box] = (),
) -> Counter:
    """Play one bot over the TCP protocol.

    :raises ConnectionRefusedError: no server at ``host:port``
    :raises ProtocolError: the server did not answer ``Join`` with ``Welcome``
    :return: received message counts
    """
    await asyncio.sleep(start_delay_s)
    reader, writer = await asyncio.open_connection(host, port)
    received: Counter = Counter()
    try:
        await write_message(writer, Join(f"bot-{bot.index}"))
        welcome = await read_message(reader)
        if not isinstance(welcome, Welcome):
            raise ProtocolError(f"Expected Welcome, got {type(welcome).__name__}.")
        received["Welcome"] += 1
        positions: dict[PlayerId, Position] = {}

        async def consume() -> None:
            while True:
                message = await read_message(reader)
                received[type(message).__name__] += 1
                if isinstance(message, AvatarPositions):
                    positions.update(message.positions)

        consumer = asyncio.ensure_future(consume())
        started = time.monotonic()
        period = 1.0 / welcome.tick_rate_hz if welcome.tick_rate_hz else 1.0 / tick_rate_hz
        try:
            while time.monotonic() - started < duration_s and not consumer.done():
                now_ms = (time.monotonic() - started) * 1000.0
                pos = positions.get(welcome.player_id)
                if pos is not None:
                    if bot.spawn is None:
                        bot.join(welcome.player_id, pos, now_ms)
                    action = bot.next_action(pos, now_ms, forbidden)
                    if action is not None:
                        await write_message(writer, Action(action))
                await asyncio.sleep(period)
        finally:
            consumer.cancel()
            try:
                await consumer
            except (asyncio.CancelledError, asyncio.IncompleteReadError, ConnectionError):
                pass
    finally:
        writer.close()
    return received


async def run_tcp_bots(
    host: str,
    port: int,
    spec: BehaviorSpec,
    schedule: JoinSchedule,
    *,
    duration_s: float,
    forbidden: Sequence[Box] = (),
) -> list[Counter]:
    """Play every bot of a schedule concurrently, one task per bot; each leaves at ``duration_s``."""
    bots = [Bot(k, schedule.total_players, spec) for k in range(schedule.total_players)]
    tasks = [
        run_tcp_bot(
            bot,
            host,
            port,
            start_delay_s=schedule.join_time_s(bot.index),
            duration_s=max(0.0, duration_s - schedule.join_time_s(bot.index)),
            forbidden=forbidden,
        )
        for bot in bots
    ]
    return list(await asyncio.gather(*tasks))


class ScenarioResult(NamedTuple):
    """Outcome of one scenario repetition."""

    scenario: ScenarioConfig
    seed: int
    metrics: MetricsLog
    summary: dict[str, Any]


class ScenarioRunner:
    """Runs the repetitions of a scenario against in-process servers.

    :param scenario: scenario to run
    :param env: environment for configuration overrides (``os.environ`` if omitted)
    :param log_level: ``str`` name or ``int`` constant; ``None`` attaches no handler
    :param log_format: ``logging.Formatter`` pattern used when ``log_level`` is set
    """

    def __init__(
        self,
        scenario: ScenarioConfig,
        *,
        env: Optional[dict[str, str]] = None,
        log_level: OptionalLevel = None,
        log_format: str = DEFAULT_LOG_FORMAT,
    ) -> None:
        self.scenario = scenario.validate()
        self.settings = self.scenario.settings(env)
        self.log_level = log_level
        self.logger = get_logger(self, self.scenario.name, log_level, log_format)

    def behavior(self, seed: int) -> BehaviorSpec:
        """Bot behaviour of one repetition."""
        s = self.scenario
        return BehaviorSpec(s.behavior, s.speed, s.area_radius, s.step_interval_s, seed).validate()

    def fixture(self) -> ScFixture:
        """Constructs deployed before the first tick."""
        return ScFixture(self.scenario.sc_count, self.scenario.sc_template)

    def schedule(self) -> JoinSchedule:
        """Join schedule of the bots."""
        return JoinSchedule(self.scenario.players, self.scenario.join_interval_s)

    def run(self, seed: Optional[int] = None) -> ScenarioResult:
        """Run one repetition to its configured duration on the tick clock."""
        seed = self.scenario.seed if seed is None else seed
        s = self.scenario
        self.logger.info(
            "Scenario %s (seed %s): %s players, %s, %s constructs, %s s",
            s.name,
            seed,
            s.players,
            BehaviorKind(s.behavior).name,
            s.sc_count,
            s.duration_s,
        )
        with GameServer.from_settings(self.settings, seed=seed, name=s.name, log_level=self.log_level) as server:
            ids = self.fixture().deploy(server)
            self.logger.info("Deployed %s constructs", len(ids))
            driver = InProcessDriver(server, self.behavior(seed), self.schedule())
            server.run(seconds=s.duration_s)
            driver.detach()
            metrics = collect_metrics(server)
            summary = server.summary()
        self.logger.info("Scenario %s (seed %s) done after %s ticks", s.name, seed, summary["ticks"])
        return ScenarioResult(s, seed, metrics, summary)

    def run_all(self) -> list[ScenarioResult]:
        """Run every repetition."""
        return [self.run(seed) for seed in self.scenario.seeds]


def run_scenario(scenario: ScenarioConfig, seed: Optional[int] = None, **kwargs: Any) -> ScenarioResult:
    """Run one repetition of a scenario; keyword arguments go to ``ScenarioRunner``."""
    return ScenarioRunner(scenario, **kwargs).run(seed)
