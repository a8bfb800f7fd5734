"""Heap-driven agglomeration: the generic global pass and the chunked pass.

:func:`agglomerate_generic` pops the maximal edge, stops at the first edge
below the threshold, and otherwise merges. :func:`agglomerate_chunk` is the
same loop made safe for partial input: segments touching artificial chunk
faces start frozen, any popped edge touching a frozen segment freezes both
endpoints and is kept for the parent, and sub-threshold edges are skipped
instead of ending the loop (the freeze test comes first). With no boundary
segments the two produce identical dendrograms.

Both functions mutate the graph they are given; it is the residual graph on
return.
"""

from __future__ import annotations

import heapq
import itertools
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Literal, NamedTuple

from ragglom.errors import SpecError
from ragglom.linkage import (
    AffinityStat,
    FixedAffinity,
    LinkageKind,
    Ordering,
    at_least,
    compare,
    exact_value,
)
from ragglom.rag import Dendrogram, EdgeKey, RegionGraph, SegmentId

PopAction = Literal["merge", "freeze", "discard", "stop"]
MergeHook = Callable[[RegionGraph, SegmentId, SegmentId], None]


class MaxAffinityQueue:
    """Max-priority queue of graph edges with lazy deletion.

    Each live edge has exactly one current entry; pushing a key again or
    discarding it leaves older entries in the heap, where :meth:`pop` skips
    them because their version is no longer the live one. Among equal
    affinities the smaller EdgeKey pops first.
    """

    def __init__(self, kind: LinkageKind):
        self.kind = kind
        self._heap: list[tuple] = []
        self._live: dict[EdgeKey, int] = {}
        self._tick = itertools.count()

    @classmethod
    def from_graph(cls, g: RegionGraph, kind: LinkageKind) -> "MaxAffinityQueue":
        queue = cls(kind)
        for key, stat in g.edges.items():
            version = next(queue._tick)
            queue._live[key] = version
            queue._heap.append(queue._entry(key, stat, version))
        heapq.heapify(queue._heap)
        return queue

    def _entry(self, key: EdgeKey, stat: AffinityStat, version: int) -> tuple:
        return (-exact_value(self.kind, stat), key.lo, key.hi, version, stat)

    def __len__(self) -> int:
        return len(self._live)

    def __contains__(self, key: object) -> bool:
        return key in self._live

    def push(self, key: EdgeKey, stat: AffinityStat) -> None:
        """Insert ``key`` or replace its current entry."""
        version = next(self._tick)
        self._live[key] = version
        heapq.heappush(self._heap, self._entry(key, stat, version))

    def discard(self, key: EdgeKey) -> None:
        self._live.pop(key, None)

    def pop(self) -> tuple[EdgeKey, AffinityStat] | None:
        """Remove and return the maximal live edge, or None when empty."""
        while self._heap:
            _, lo, hi, version, stat = heapq.heappop(self._heap)
            key = EdgeKey(lo, hi)
            if self._live.get(key) == version:
                del self._live[key]
                return key, stat
        return None


class PopEvent(NamedTuple):
    key: EdgeKey
    stat: AffinityStat
    action: PopAction


@dataclass
class AgglomerationTrace:
    """Pop-by-pop record of one run, collected when ``trace=True``."""

    initial_frozen: frozenset[SegmentId] = frozenset()
    events: list[PopEvent] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)

    def record(self, key: EdgeKey, stat: AffinityStat, action: PopAction) -> None:
        self.events.append(PopEvent(key, stat, action))

    def merged_keys(self) -> list[EdgeKey]:
        return [e.key for e in self.events if e.action == "merge"]


@dataclass
class FrozenState:
    """Frozen segments F and the frozen edges G_F they accumulate."""

    frozen: set[SegmentId]
    frozen_graph: RegionGraph = field(default_factory=RegionGraph)

    def touches(self, key: EdgeKey) -> bool:
        return key.lo in self.frozen or key.hi in self.frozen

    def freeze(self, key: EdgeKey, stat: AffinityStat, kind: LinkageKind) -> None:
        self.frozen.add(key.lo)
        self.frozen.add(key.hi)
        self.frozen_graph.add_edge(key.lo, key.hi, stat, kind)


@dataclass
class ChunkResult:
    """Output of one agglomeration pass.

    ``residual`` is the input graph after all merges; ``frozen_graph`` is G_F
    (empty for a generic run or an empty boundary).
    """

    dendrogram: Dendrogram
    frozen_graph: RegionGraph
    residual: RegionGraph
    frozen: set[SegmentId]
    trace: AgglomerationTrace | None = None
    pops: int = 0
    freezes: int = 0
    discards: int = 0

    @property
    def merges(self) -> int:
        return len(self.dendrogram)


def _max_incident_live(
    g: RegionGraph, queue: MaxAffinityQueue, nodes: Iterable[SegmentId], kind: LinkageKind
) -> AffinityStat | None:
    best: AffinityStat | None = None
    for u in nodes:
        for w in g.adjacency.get(u, ()):
            key = EdgeKey(u, w) if u < w else EdgeKey(w, u)
            if key in queue:
                s = g.edges[key]
                if best is None or compare(kind, s, best) is Ordering.GT:
                    best = s
    return best


def _agglomerate(
    g: RegionGraph,
    kind: LinkageKind,
    threshold: FixedAffinity,
    state: FrozenState | None,
    trace: bool,
    on_merge: MergeHook | None,
) -> ChunkResult:
    queue = MaxAffinityQueue.from_graph(g, kind)
    dendrogram = Dendrogram(kind, threshold)
    recorder = AgglomerationTrace(frozenset(state.frozen) if state else frozenset()) if trace else None
    pops = freezes = discards = 0

    while (item := queue.pop()) is not None:
        key, stat = item
        pops += 1
        if state is not None and state.touches(key):
            state.freeze(key, stat, kind)
            freezes += 1
            if recorder:
                recorder.record(key, stat, "freeze")
            continue
        if not at_least(kind, stat, threshold):
            if state is None:
                if recorder:
                    recorder.record(key, stat, "stop")
                break
            discards += 1
            if recorder:
                recorder.record(key, stat, "discard")
                higher = _max_incident_live(g, queue, key, kind)
                if higher is not None and compare(kind, higher, stat) is Ordering.GT:
                    recorder.violations.append(
                        f"discard of {tuple(key)} left a higher incident edge in the queue"
                    )
            continue
        if on_merge is not None:
            on_merge(g, key.lo, key.hi)
        result = g.merge_nodes(key.lo, key.hi, kind)
        dendrogram.append(result.survivor, result.absorbed, result.stat)
        if recorder:
            recorder.record(key, stat, "merge")
        for removed in result.removed:
            queue.discard(removed)
        for updated in result.updated:
            queue.push(updated, g.edges[updated])

    return ChunkResult(
        dendrogram=dendrogram,
        frozen_graph=state.frozen_graph if state else RegionGraph(),
        residual=g,
        frozen=state.frozen if state else set(),
        trace=recorder,
        pops=pops,
        freezes=freezes,
        discards=discards,
    )


def agglomerate_generic(
    g: RegionGraph,
    kind: LinkageKind,
    threshold: FixedAffinity,
    *,
    trace: bool = False,
    on_merge: MergeHook | None = None,
) -> ChunkResult:
    """Global agglomeration: merge the maximal edge until it falls below ``threshold``."""
    return _agglomerate(g, kind, threshold, None, trace, on_merge)


def agglomerate_chunk(
    g: RegionGraph,
    boundary: Iterable[SegmentId],
    kind: LinkageKind,
    threshold: FixedAffinity,
    *,
    trace: bool = False,
    on_merge: MergeHook | None = None,
) -> ChunkResult:
    """Chunk agglomeration with boundary segments frozen from the start.

    Every edge is popped exactly once. Returns the partial dendrogram and the
    frozen graph, whose edges name current cluster ids (frozen segments never
    merge, so ids of split interfaces still match across chunks).
    """
    frozen = set(boundary)
    missing = frozen.difference(g.nodes)
    if missing:
        sample = sorted(missing)[:5]
        raise ValueError(f"{len(missing)} boundary segments are not graph nodes, e.g. {sample}")
    return _agglomerate(g, kind, threshold, FrozenState(frozen), trace, on_merge)


# -- audits over a recorded trace --------------------------------------------


def audit_frozen_reachability(result: ChunkResult) -> bool:
    """Every finally-frozen segment is initially frozen or reached via frozen edges."""
    if result.trace is None:
        raise ValueError("audit needs a run made with trace=True")
    adjacency: dict[SegmentId, list[SegmentId]] = {}
    for event in result.trace.events:
        if event.action == "freeze":
            adjacency.setdefault(event.key.lo, []).append(event.key.hi)
            adjacency.setdefault(event.key.hi, []).append(event.key.lo)
    reached = set(result.trace.initial_frozen)
    todo = deque(reached)
    while todo:
        u = todo.popleft()
        for w in adjacency.get(u, ()):
            if w not in reached:
                reached.add(w)
                todo.append(w)
    return result.frozen <= reached


def audit_frozen_monotonic(result: ChunkResult) -> bool:
    """No segment takes part in a merge after it was frozen."""
    if result.trace is None:
        raise ValueError("audit needs a run made with trace=True")
    frozen = set(result.trace.initial_frozen)
    for event in result.trace.events:
        if event.action == "freeze":
            frozen.update(event.key)
        elif event.action == "merge" and (event.key.lo in frozen or event.key.hi in frozen):
            return False
    return True


def audit_non_increasing_pops(result: ChunkResult) -> bool:
    """Popped affinities never increase, re-inserted merge edges included."""
    if result.trace is None:
        raise ValueError("audit needs a run made with trace=True")
    kind = result.dendrogram.kind
    events = result.trace.events
    return all(
        compare(kind, later.stat, earlier.stat) <= Ordering.EQ
        for earlier, later in zip(events, events[1:])
    )


def audit_safe_discards(result: ChunkResult) -> bool:
    """No discarded edge had a higher incident edge still waiting in the queue."""
    if result.trace is None:
        raise ValueError("audit needs a run made with trace=True")
    return not result.trace.violations


class TieAudit:
    """Merge hook recording merge decisions that rest on a tie.

    Before ``(u, v)`` merges, its stat must be strictly above every other edge
    at ``u`` or ``v``. An equal one means the nearest neighbour of ``u`` or
    ``v`` was ambiguous and only the key tie-break picked this merge. Equal
    values on edges without a common endpoint do not change which merges
    happen and are not recorded.
    """

    def __init__(self, kind: LinkageKind, keep: int = 10):
        self.kind = kind
        self.keep = keep
        self.merges = 0
        self.ties = 0
        self.examples: list[str] = []

    def __call__(self, g: RegionGraph, u: SegmentId, v: SegmentId) -> None:
        self.merges += 1
        value = exact_value(self.kind, g.stat(u, v))
        for x, y in ((u, v), (v, u)):
            for w in g.adjacency.get(x, ()):
                if w != y and exact_value(self.kind, g.stat(x, w)) == value:
                    self.ties += 1
                    if len(self.examples) < self.keep:
                        self.examples.append(f"({u}, {v}) ties ({min(x, w)}, {max(x, w)}) at {value}")

    def check(self) -> None:
        """Raise SpecError when any merge was decided by a tie."""
        if self.ties:
            sample = "\n  - ".join(self.examples)
            raise SpecError(
                f"{self.ties} tied merge decisions under {self.kind.name} in {self.merges:,} merges; "
                f"the input is not in generic position:\n  - {sample}"
            )
