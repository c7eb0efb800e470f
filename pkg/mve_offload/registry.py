"""
Live construct registry.

Tracks which connected components of the world are simulated constructs, their
identifiers and logical timestamps. Block writes inside (or next to) a
construct's bounds bump its timestamp; writes that split or merge constructs
retire the old identifiers and mint new ones.
"""

import itertools

from collections.abc import Iterable, Iterator
from typing import NamedTuple

from mve_offload.constructs import DEFAULT_MAX_CONSTRUCT_BLOCKS, Region, find_constructs
from mve_offload.errors import MveValueError, UnknownConstructError
from mve_offload.typings import STATEFUL_TYPES, Box, ConstructId, ModificationEvent, Position
from mve_offload.world import WorldState


class LiveConstruct(NamedTuple):
    """Registry entry.

    Properties:
     - id: construct identifier
     - region: members and bounds
     - logical_ts: player-modification epoch
     - active: every chunk under the bounds is loaded
    """

    id: ConstructId
    region: Region
    logical_ts: int = 0
    active: bool = True


class RegistryChange(NamedTuple):
    """Constructs retired and (re)built by one registry update."""

    removed: list[ConstructId]
    rebuilt: list[LiveConstruct]


class ConstructRegistry:
    """Constructs bound to one world.

    :param max_blocks: components larger than this are not simulated
    """

    def __init__(self, max_blocks: int = DEFAULT_MAX_CONSTRUCT_BLOCKS) -> None:
        if not isinstance(max_blocks, int) or max_blocks < 1:
            raise MveValueError("max_blocks must be a positive integer.")
        self.max_blocks = max_blocks
        self._constructs: dict[ConstructId, LiveConstruct] = {}
        self._ids = itertools.count(1)

    def __len__(self) -> int:
        return len(self._constructs)

    def __contains__(self, construct_id: object) -> bool:
        return construct_id in self._constructs

    def __iter__(self) -> Iterator[LiveConstruct]:
        return iter(list(self._constructs.values()))

    def get(self, construct_id: ConstructId) -> LiveConstruct:
        """Look up a construct.

        :raises UnknownConstructError: no such construct
        """
        try:
            return self._constructs[construct_id]
        except KeyError:
            raise UnknownConstructError(f"Construct {construct_id} does not exist.", self) from None

    def active(self) -> list[LiveConstruct]:
        """Constructs whose chunks are all loaded, in id order."""
        return [c for _, c in sorted(self._constructs.items()) if c.active]

    def bounds(self) -> list[Box]:
        """Bounds of every construct."""
        return [c.region.bounds for c in self._constructs.values()]

    def register(self, world: WorldState, seeds: Iterable[Position]) -> list[LiveConstruct]:
        """Discover and register the constructs containing ``seeds``.

        Positions already owned by a construct and incomplete components are skipped.
        """
        owned = set().union(*(c.region.members for c in self._constructs.values()))
        fresh = [Position(*p) for p in seeds if Position(*p) not in owned]
        added = []
        for region in find_constructs(world, fresh, self.max_blocks):
            if not region.complete:
                continue
            construct = LiveConstruct(next(self._ids), region)
            self._constructs[construct.id] = construct
            added.append(construct)
        return added

    def on_modification(self, world: WorldState, event: ModificationEvent) -> RegistryChange:
        """Re-derive the constructs affected by a block write.

        A construct keeps its id when it is the only predecessor of exactly one
        successor component; its timestamp then increments by one. Otherwise the
        old ids are retired and successors get new ids.
        """
        affected = [c for c in self._constructs.values() if c.region.bounds.contains(event.pos, margin=1)]
        if not affected:
            if event.block.type in STATEFUL_TYPES:
                return RegistryChange([], self.register(world, [event.pos]))
            return RegistryChange([], [])

        seeds = set().union(*(c.region.members for c in affected)) | {event.pos}
        for c in affected:
            del self._constructs[c.id]
        regions = [r for r in find_constructs(world, sorted(seeds), self.max_blocks) if r.complete]
        next_ts = max(c.logical_ts for c in affected) + 1

        successors: dict[ConstructId, list[Region]] = {c.id: [] for c in affected}
        predecessors: list[list[LiveConstruct]] = []
        for region in regions:
            preds = [c for c in affected if c.region.members & region.members]
            predecessors.append(preds)
            for c in preds:
                successors[c.id].append(region)

        rebuilt = []
        kept: set[ConstructId] = set()
        for region, preds in zip(regions, predecessors):
            if len(preds) == 1 and len(successors[preds[0].id]) == 1:
                construct = LiveConstruct(preds[0].id, region, preds[0].logical_ts + 1)
                kept.add(construct.id)
            else:
                construct = LiveConstruct(next(self._ids), region, next_ts)
            self._constructs[construct.id] = construct
            rebuilt.append(construct)
        removed = [c.id for c in affected if c.id not in kept]
        return RegistryChange(removed, rebuilt)

    def refresh_activity(self, world: WorldState) -> RegistryChange:
        """Halt constructs over unloaded chunks and resume those whose chunks came back.

        Resumed constructs get a new epoch, so replies computed before the halt are stale.

        :return: halted ids in ``removed`` and resumed constructs in ``rebuilt``
        """
        halted, resumed = [], []
        for cid, c in list(self._constructs.items()):
            loaded = all(coord in world.loaded for coord in c.region.bounds.chunks())
            if c.active and not loaded:
                self._constructs[cid] = c._replace(active=False)
                halted.append(cid)
            elif not c.active and loaded:
                c = c._replace(active=True, logical_ts=c.logical_ts + 1)
                self._constructs[cid] = c
                resumed.append(c)
        return RegistryChange(halted, resumed)
