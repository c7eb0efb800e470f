"""
Procedural terrain and the generation dispatcher.

Generation is a pure function of ``(seed, coord, mode)``:

- ``Flat``: Solid below y=4, Air above.
- ``Noise``: column height ``64 + 32 * (2n - 1)`` clamped to ``[1, 128]``, where
  ``n`` is two octaves of bilinear value noise (cells of 32 and 16 blocks, the
  second at half weight) with smoothstep interpolation. Lattice values come
  from a splitmix64 hash of ``(seed, octave, i, j)`` computed in ``uint64``
  arithmetic, so every platform produces the same bytes.

Generate payload (little-endian)::

    seed: uint64, cx: int32, cz: int32, mode: uint8

The dispatcher runs on the tick thread on world snapshots. Finished chunks wait
in a load-in queue that is drained at the start of the next tick.
"""

import struct

from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from typing import TYPE_CHECKING, Any, NamedTuple, Optional, Union

import numpy as np

from mve_offload.clock import BaseClock, DeferredQueue
from mve_offload.errors import MalformedPayloadError, MveTypeError, MveValueError, NoAvatarsError
from mve_offload.latency import CostModel
from mve_offload.logs import DEFAULT_LOG_FORMAT, get_logger
from mve_offload.typings import (
    CHUNK_HEIGHT,
    CHUNK_WIDTH,
    BlockType,
    ChunkCoord,
    FunctionName,
    GenerationMode,
    GenTaskMode,
    GenTaskStatus,
    OptionalLevel,
    Position,
    TerrainMode,
    TerrainModeType,
    WorldSeed,
    coerce_enum,
)
from mve_offload.world import Chunk, WorldSnapshot, WorldState, chunk_distance, decode_chunk, pack, view_square


if TYPE_CHECKING:
    from mve_offload.faas.base_runtime import BaseRuntime
    from mve_offload.store import ChunkStore


_GENERATE = struct.Struct("<QiiB")
_U64 = (1 << 64) - 1
_SOLID = pack(BlockType.Solid, 0)

FLAT_HEIGHT = 4
NOISE_BASE = 64
NOISE_AMPLITUDE = 32
MIN_HEIGHT = 1
MAX_HEIGHT = 128
# (cell size in blocks, weight)
NOISE_OCTAVES = ((32, 1.0), (16, 0.5))
DEFAULT_LOOKAHEAD = 32
DEFAULT_MAX_LOADS_PER_TICK = 16
DEFAULT_MAX_LOCAL_GENERATIONS_PER_TICK = 4


def encode_generate(seed: WorldSeed, coord: ChunkCoord) -> bytes:
    """Serialize a ``terrain_generate`` payload."""
    return _GENERATE.pack(seed.seed & _U64, coord.cx, coord.cz, int(seed.mode))


def decode_generate(data: bytes) -> tuple[WorldSeed, ChunkCoord]:
    """Inverse of ``encode_generate``.

    :raises MalformedPayloadError: wrong length or unknown mode
    """
    if len(data) != _GENERATE.size:
        raise MalformedPayloadError(f"Generate payload must be {_GENERATE.size} bytes, got {len(data)}.")
    seed, cx, cz, mode = _GENERATE.unpack(data)
    try:
        return WorldSeed(seed, GenerationMode(mode)), ChunkCoord(cx, cz)
    except ValueError as e:
        raise MalformedPayloadError(f"Unknown generation mode: {mode}.") from e


def _splitmix(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def lattice_values(seed: int, octave: int, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    """Hash lattice points to floats in ``[0, 1)``."""
    h = _splitmix(np.asarray(j, dtype=np.int64).astype(np.uint64))
    h = _splitmix(h ^ np.asarray(i, dtype=np.int64).astype(np.uint64))
    h = _splitmix(h ^ np.uint64(octave))
    h = _splitmix(h ^ np.uint64(seed & _U64))
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def _smoothstep(t: np.ndarray) -> np.ndarray:
    return t * t * (3.0 - 2.0 * t)


def value_noise(seed: int, xs: np.ndarray, zs: np.ndarray) -> np.ndarray:
    """Two-octave value noise in ``[0, 1)`` over the grid ``zs × xs`` (shape ``(len(zs), len(xs))``)."""
    xs = np.asarray(xs, dtype=np.int64)
    zs = np.asarray(zs, dtype=np.int64)
    total = np.zeros((zs.size, xs.size))
    weights = 0.0
    for octave, (cell, weight) in enumerate(NOISE_OCTAVES):
        ix, iz = xs // cell, zs // cell
        fx = _smoothstep((xs - ix * cell) / cell)[None, :]
        fz = _smoothstep((zs - iz * cell) / cell)[:, None]
        v00 = lattice_values(seed, octave, ix[None, :], iz[:, None])
        v10 = lattice_values(seed, octave, ix[None, :] + 1, iz[:, None])
        v01 = lattice_values(seed, octave, ix[None, :], iz[:, None] + 1)
        v11 = lattice_values(seed, octave, ix[None, :] + 1, iz[:, None] + 1)
        top = v00 + (v10 - v00) * fx
        bottom = v01 + (v11 - v01) * fx
        total += weight * (top + (bottom - top) * fz)
        weights += weight
    return total / weights


def column_heights(seed: WorldSeed, coord: ChunkCoord) -> np.ndarray:
    """Terrain height of every column of a chunk, shape ``(z, x)``."""
    if seed.mode == GenerationMode.Flat:
        return np.full((CHUNK_WIDTH, CHUNK_WIDTH), FLAT_HEIGHT, dtype=np.int64)
    xs = coord.cx * CHUNK_WIDTH + np.arange(CHUNK_WIDTH)
    zs = coord.cz * CHUNK_WIDTH + np.arange(CHUNK_WIDTH)
    n = value_noise(seed.seed, xs, zs)
    heights = np.rint(NOISE_BASE + NOISE_AMPLITUDE * (2.0 * n - 1.0)).astype(np.int64)
    return np.clip(heights, MIN_HEIGHT, MAX_HEIGHT)


def surface_height(seed: WorldSeed, x: int, z: int) -> int:
    """First Air block above the terrain at a column."""
    coord = ChunkCoord.of_position((x, 0, z))
    return int(column_heights(seed, coord)[z % CHUNK_WIDTH, x % CHUNK_WIDTH])


def generate_chunk(seed: WorldSeed, coord: ChunkCoord) -> Chunk:
    """Generate one chunk; Solid below the column height, Air above."""
    seed = WorldSeed(int(seed.seed), GenerationMode(seed.mode))
    coord = ChunkCoord(*coord)
    heights = column_heights(seed, coord)
    ys = np.arange(CHUNK_HEIGHT)[:, None, None]
    cells = np.where(ys < heights[None, :, :], _SOLID, 0).astype(np.uint8)
    return Chunk(coord, cells, generated_by=seed.mode)


class GenTask(NamedTuple):
    """One chunk generation.

    Properties:
     - coord: chunk to generate
     - requested_tick: world tick of the dispatch
     - mode: how the task runs
     - status: lifecycle state
     - invocation_id: FaaS invocation of an offloaded task
    """

    coord: ChunkCoord
    requested_tick: int
    mode: GenTaskMode
    status: GenTaskStatus = GenTaskStatus.Pending
    invocation_id: int = 0


def distance_to_closest_unloaded(snapshot: Union[WorldSnapshot, WorldState]) -> int:
    """Chebyshev block-distance from any avatar to the closest unloaded chunk in its view.

    Clamped to the view distance, which is also the value when nothing is missing.

    :raises NoAvatarsError: no avatar in the world
    """
    if isinstance(snapshot, WorldState):
        snapshot = snapshot.snapshot()
    if not snapshot.avatars:
        raise NoAvatarsError("Distance to unloaded terrain needs at least one avatar.")
    view = snapshot.view_distance_blocks
    best = view
    for pos in snapshot.avatars.values():
        for coord in view_square(pos, view):
            if coord not in snapshot.loaded:
                best = min(best, chunk_distance(pos, coord))
    return best


def required_with_distance(snapshot: WorldSnapshot, extra_blocks: int) -> list[tuple[int, ChunkCoord]]:
    """Chunks within view plus ``extra_blocks`` of any avatar, nearest first."""
    radius = snapshot.view_distance_blocks + extra_blocks
    best: dict[ChunkCoord, int] = {}
    for pos in snapshot.avatars.values():
        for coord in view_square(pos, radius):
            d = chunk_distance(pos, coord)
            if d < best.get(coord, d + 1):
                best[coord] = d
    return sorted((d, coord) for coord, d in best.items())


class TerrainDispatcher:
    """Finds missing chunks around the avatars and gets them generated or fetched.

    - ``LocalSync``: generation runs on the tick thread, at most
      ``max_local_generations_per_tick`` chunks per tick, and its modelled cost
      is charged to the tick.
    - ``LocalAsync``: a bounded pool of ``CostModel.local_async_workers``
      background generators.
    - ``Offloaded``: every task is a concurrent ``terrain_generate`` invocation.

    Chunks already persisted in the store are fetched instead of regenerated.

    :param mode: where generation runs
    :param seed: world seed and generator
    :param clock: tick clock
    :param runtime: FaaS runtime (``Offloaded`` only)
    :param store: chunk store; generated chunks are written to it
    :param cost_model: modelled generation and load-in costs
    :param lookahead_blocks: generate this far beyond the view distance
    :param max_chunk_loads_per_tick: load-in budget per tick
    :param max_local_generations_per_tick: ``LocalSync`` generation budget per tick
    :param name: instance name used for logging
    :param log_level: ``str`` name or ``int`` constant; ``None`` attaches no handler
    :param log_format: ``logging.Formatter`` pattern used when ``log_level`` is set
    """

    @staticmethod
    def _validate_budget(name: str, value: Any, minimum: int) -> int:
        if not isinstance(value, int) or isinstance(value, bool):
            raise MveTypeError(f"{name} must be an integer, got {type(value).__name__}.")
        if value < minimum:
            raise MveValueError(f"{name} must be >= {minimum}.")
        return value

    def __init__(
        self,
        mode: TerrainModeType,
        seed: WorldSeed,
        clock: BaseClock,
        *,
        runtime: Optional["BaseRuntime"] = None,
        store: Optional["ChunkStore"] = None,
        cost_model: CostModel = CostModel(),
        lookahead_blocks: int = DEFAULT_LOOKAHEAD,
        max_chunk_loads_per_tick: int = DEFAULT_MAX_LOADS_PER_TICK,
        max_local_generations_per_tick: int = DEFAULT_MAX_LOCAL_GENERATIONS_PER_TICK,
        name: str = "terrain",
        log_level: OptionalLevel = None,
        log_format: str = DEFAULT_LOG_FORMAT,
    ) -> None:
        self.mode = coerce_enum(TerrainMode, mode)
        if self.mode == TerrainMode.Offloaded and runtime is None:
            raise MveValueError("Offloaded terrain generation needs a FaaS runtime.")
        self.seed = WorldSeed(int(seed.seed), coerce_enum(GenerationMode, seed.mode))
        self.clock = clock
        self.runtime = runtime
        self.store = store
        self.cost_model = cost_model
        self.lookahead_blocks = self._validate_budget("lookahead_blocks", lookahead_blocks, 0)
        self.max_chunk_loads_per_tick = self._validate_budget("max_chunk_loads_per_tick", max_chunk_loads_per_tick, 1)
        self.max_local_generations_per_tick = self._validate_budget(
            "max_local_generations_per_tick", max_local_generations_per_tick, 1
        )
        self.logger = get_logger(self, name, log_level, log_format)

        self._tasks: dict[ChunkCoord, GenTask] = {}
        self._ready: OrderedDict[ChunkCoord, Chunk] = OrderedDict()
        self._completions: DeferredQueue = DeferredQueue(clock)
        self._worker_free_ms = [0.0] * cost_model.local_async_workers
        self._executor: Optional[ThreadPoolExecutor] = None
        if self.mode == TerrainMode.LocalAsync:
            self._executor = ThreadPoolExecutor(
                max_workers=cost_model.local_async_workers, thread_name_prefix="TerrainWorker"
            )
        self.generated: set[ChunkCoord] = set()
        self.generations = 0
        self.loads = 0
        self.failures = 0

    @property
    def pending(self) -> int:
        """Tasks not yet done."""
        return len(self._tasks)

    @property
    def ready(self) -> int:
        """Chunks waiting for load-in."""
        return len(self._ready)

    def tasks(self) -> list[GenTask]:
        """Snapshot of the open tasks."""
        return list(self._tasks.values())

    def dispatch(self, snapshot: WorldSnapshot) -> list[GenTask]:
        """Create tasks for the missing chunks around the avatars, nearest first.

        :return: tasks created by this call
        """
        created: list[GenTask] = []
        view = snapshot.view_distance_blocks
        needed = required_with_distance(snapshot, self.lookahead_blocks)
        for distance, coord in needed:
            if coord in snapshot.loaded or coord in self._ready or coord in self._tasks:
                continue
            if self.store is not None and self.store.has(coord.key):
                self._fetch(coord, prefetch=distance > view)
                continue
            task = GenTask(coord, snapshot.tick, GenTaskMode(int(self.mode)))
            self._tasks[coord] = task
            created.append(task)

        if self.mode == TerrainMode.Offloaded:
            for task in created:
                self._invoke(task)
        elif self.mode == TerrainMode.LocalAsync:
            for task in created:
                self._submit_local(task)
        else:
            self._generate_sync([coord for _, coord in needed])
        if created:
            self.logger.debug("Tick %s: %s generation tasks (%s)", snapshot.tick, len(created), self.mode.name)
        return created

    def _fetch(self, coord: ChunkCoord, prefetch: bool) -> None:
        data = self.store.peek(coord.key)  # type: ignore[union-attr]
        if data is None:
            self.store.request(coord.key, prefetch=prefetch)  # type: ignore[union-attr]
            return
        try:
            self._ready[coord] = decode_chunk(data)
        except MalformedPayloadError as e:
            self.failures += 1
            self.logger.error("Stored chunk %s is corrupt: %s", coord.key, e)

    def _invoke(self, task: GenTask) -> None:
        invocation_id = self.runtime.invoke(  # type: ignore[union-attr]
            FunctionName.TerrainGenerate,
            encode_generate(self.seed, task.coord),
            channel=self._completions,
            tag=task.coord,
            tick=task.requested_tick,
        )
        self._tasks[task.coord] = task._replace(status=GenTaskStatus.InFlight, invocation_id=invocation_id)

    def _submit_local(self, task: GenTask) -> None:
        # modelled start on the earliest free worker
        now = self.clock.now_ms()
        worker = min(range(len(self._worker_free_ms)), key=lambda i: (self._worker_free_ms[i], i))
        start = max(now, self._worker_free_ms[worker])
        ready = start + self.cost_model.chunk_generation_ms
        self._worker_free_ms[worker] = ready
        future = self._executor.submit(self._generate_local, task.coord)  # type: ignore[union-attr]
        self._completions.push(ready if self.clock.virtual else None, task.coord, future)
        self._tasks[task.coord] = task._replace(status=GenTaskStatus.InFlight)

    def _generate_local(self, coord: ChunkCoord) -> Chunk:
        chunk = generate_chunk(self.seed, coord)
        self.clock.sleep(self.cost_model.chunk_generation_ms)
        return chunk

    def _generate_sync(self, needed: list[ChunkCoord]) -> None:
        wanted = set(needed)
        for coord in [c for c in self._tasks if c not in wanted]:
            del self._tasks[coord]
        budget = self.max_local_generations_per_tick
        for coord in needed:
            if budget == 0:
                break
            if coord not in self._tasks:
                continue
            self.clock.charge(self.cost_model.chunk_generation_ms)
            self._complete(coord, generate_chunk(self.seed, coord))
            budget -= 1

    def _complete(self, coord: ChunkCoord, chunk: Chunk) -> None:
        self._tasks.pop(coord, None)
        if coord in self.generated:
            self.logger.warning("Chunk %s generated twice", coord.key)
        self.generated.add(coord)
        self.generations += 1
        self._ready[coord] = chunk
        if self.store is not None:
            self.store.write(coord.key, chunk.to_bytes())

    def collect(self) -> int:
        """Move finished generations into the load-in queue; returns how many finished."""
        finished = 0
        for deferred in self._completions.pop_ready():
            coord: ChunkCoord = deferred.tag
            value = deferred.value
            if deferred.error is not None:
                self.logger.error("Generation of %s raised: %s", coord.key, deferred.error)
            elif isinstance(value, Chunk):
                self._complete(coord, value)
                finished += 1
                continue
            elif value.ok:
                try:
                    self._complete(coord, decode_chunk(value.body))
                    finished += 1
                    continue
                except MalformedPayloadError as e:
                    self.logger.error("Invocation %s returned a corrupt chunk: %s", value.invocation_id, e)
            self.failures += 1
            self._tasks.pop(coord, None)
            self.logger.warning("Generation of %s failed; it will be dispatched again", coord.key)
        return finished

    def load_in(self, world: WorldState) -> list[ChunkCoord]:
        """Insert up to ``max_chunk_loads_per_tick`` ready chunks, charging ``chunk_load_ms`` each.

        Ready chunks that are no longer needed are dropped (they are already persisted).
        """
        if not self._ready:
            return []
        wanted = world.required_chunks(self.lookahead_blocks)
        loaded: list[ChunkCoord] = []
        for coord in list(self._ready):
            if len(loaded) >= self.max_chunk_loads_per_tick:
                break
            chunk = self._ready.pop(coord)
            if coord in world.loaded or coord not in wanted:
                continue
            world.insert_chunk(chunk)
            self.clock.charge(self.cost_model.chunk_load_ms)
            loaded.append(coord)
        self.loads += len(loaded)
        return loaded

    def ensure(self, world: WorldState, coords: list[ChunkCoord]) -> int:
        """Load chunks synchronously (connect time); returns how many were inserted.

        Stored chunks are read through the store, missing ones generated locally.
        """
        inserted = 0
        for coord in coords:
            if coord in world.loaded:
                continue
            chunk = self._ready.pop(coord, None)
            if chunk is None and self.store is not None and self.store.has(coord.key):
                try:
                    chunk = decode_chunk(self.store.read(coord.key))
                except (KeyError, MalformedPayloadError) as e:
                    self.logger.error("Could not read stored chunk %s: %s", coord.key, e)
            if chunk is None:
                chunk = generate_chunk(self.seed, coord)
                self._complete(coord, chunk)
                self._ready.pop(coord, None)
            world.insert_chunk(chunk)
            inserted += 1
        return inserted

    def close(self) -> None:
        """Stop local workers and drop pending completions."""
        if self._executor is not None:
            self._executor.shutdown(wait=True)
        self._completions.clear()
        self.logger.info("Dispatcher stopped: %s generated, %s loaded", self.generations, self.loads)


def spawn_position(seed: WorldSeed, x: int = 0, z: int = 0) -> Position:
    """Standing position on top of the terrain."""
    return Position(x, surface_height(seed, x, z), z)

