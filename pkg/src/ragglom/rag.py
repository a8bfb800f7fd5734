"""Region adjacency graph with exact per-edge statistics.

Nodes are SegmentIds (positive integers, unique across the whole dataset).
Edges are keyed by the canonical pair ``EdgeKey(lo, hi)`` with ``lo < hi``
and carry an :class:`~ragglom.linkage.AffinityStat`. ``adjacency`` mirrors
the edge map; :meth:`RegionGraph.audit` checks that the two agree.

Merging keeps the smaller id (``survivor = min(u, v)``) so that a global run
and any chunked run name clusters identically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

from loguru import logger

from ragglom.errors import InputFormatError
from ragglom.linkage import AffinityStat, FixedAffinity, LinkageKind, Ordering, combine, compare

SegmentId = int

# Soft sparsity contract for 3D contact graphs.
SPARSITY_FACTOR = 10


class EdgeKey(NamedTuple):
    lo: SegmentId
    hi: SegmentId


def edge_key(u: SegmentId, v: SegmentId) -> EdgeKey:
    """Canonical key of the unordered pair ``{u, v}``; self-loops are rejected."""
    if u == v:
        raise InputFormatError(f"self-loop on segment {u}")
    return EdgeKey(u, v) if u < v else EdgeKey(v, u)


class DendrogramRow(NamedTuple):
    survivor: SegmentId
    absorbed: SegmentId
    stat: AffinityStat


@dataclass
class Dendrogram:
    """Merge records in the order they were applied.

    ``threshold`` is the T that produced the rows; every row's value is >= T.
    """

    kind: LinkageKind
    threshold: FixedAffinity
    rows: list[DendrogramRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self) -> Iterator[DendrogramRow]:
        return iter(self.rows)

    def append(self, survivor: SegmentId, absorbed: SegmentId, stat: AffinityStat) -> None:
        self.rows.append(DendrogramRow(survivor, absorbed, stat))

    def extend(self, other: "Dendrogram") -> None:
        if other.kind is not self.kind or other.threshold != self.threshold:
            raise ValueError("cannot concatenate dendrograms with different headers")
        self.rows.extend(other.rows)


@dataclass(frozen=True, slots=True)
class MergeResult:
    """What :meth:`RegionGraph.merge_nodes` changed.

    ``removed`` are keys that no longer exist (edges of the absorbed node);
    ``updated`` are survivor edges that were created or whose stat changed.
    """

    survivor: SegmentId
    absorbed: SegmentId
    stat: AffinityStat
    removed: tuple[EdgeKey, ...]
    updated: tuple[EdgeKey, ...]


class RegionGraph:
    """Sparse RAG owned by one worker at a time.

    Attributes:
        edges: EdgeKey -> AffinityStat
        adjacency: SegmentId -> set of neighbouring SegmentIds
    """

    __slots__ = ("edges", "adjacency")

    def __init__(self) -> None:
        self.edges: dict[EdgeKey, AffinityStat] = {}
        self.adjacency: dict[SegmentId, set[SegmentId]] = {}

    # -- construction -------------------------------------------------------

    def add_node(self, u: SegmentId) -> None:
        if u <= 0:
            raise InputFormatError(f"segment ids must be positive, got {u}")
        self.adjacency.setdefault(u, set())

    def add_edge(self, u: SegmentId, v: SegmentId, stat: AffinityStat, kind: LinkageKind) -> EdgeKey:
        """Insert an edge, or combine ``stat`` into the existing one."""
        key = edge_key(u, v)
        old = self.edges.get(key)
        if old is None:
            self.add_node(key.lo)
            self.add_node(key.hi)
            self.edges[key] = stat
            self.adjacency[key.lo].add(key.hi)
            self.adjacency[key.hi].add(key.lo)
        else:
            self.edges[key] = combine(kind, old, stat)
        return key

    def copy(self) -> "RegionGraph":
        g = RegionGraph()
        g.edges = dict(self.edges)
        g.adjacency = {u: set(n) for u, n in self.adjacency.items()}
        return g

    # -- queries ------------------------------------------------------------

    @property
    def nodes(self):
        return self.adjacency.keys()

    def node_count(self) -> int:
        return len(self.adjacency)

    def edge_count(self) -> int:
        return len(self.edges)

    def __contains__(self, u: object) -> bool:
        return u in self.adjacency

    def stat(self, u: SegmentId, v: SegmentId) -> AffinityStat:
        return self.edges[edge_key(u, v)]

    def neighbors(self, u: SegmentId) -> set[SegmentId]:
        return self.adjacency[u]

    def degree(self, u: SegmentId) -> int:
        return len(self.adjacency[u])

    def incident(self, u: SegmentId) -> list[EdgeKey]:
        return sorted(edge_key(u, w) for w in self.adjacency[u])

    def sorted_edges(self) -> list[tuple[EdgeKey, AffinityStat]]:
        """Edges in canonical key order, the order used for serialization."""
        return sorted(self.edges.items())

    def nearest_neighbor(self, u: SegmentId, kind: LinkageKind) -> SegmentId | None:
        """Neighbour with the highest affinity; ties go to the smaller id."""
        if u not in self.adjacency:
            raise KeyError(f"segment {u} is not in the graph")
        best: SegmentId | None = None
        best_stat: AffinityStat | None = None
        for w in self.adjacency[u]:
            s = self.edges[edge_key(u, w)]
            if best_stat is None:
                best, best_stat = w, s
                continue
            order = compare(kind, s, best_stat)
            if order is Ordering.GT or (order is Ordering.EQ and w < best):
                best, best_stat = w, s
        return best

    def is_mutual_nearest_pair(self, u: SegmentId, v: SegmentId, kind: LinkageKind) -> bool:
        return self.nearest_neighbor(u, kind) == v and self.nearest_neighbor(v, kind) == u

    # -- mutation -----------------------------------------------------------

    def merge_nodes(self, u: SegmentId, v: SegmentId, kind: LinkageKind) -> MergeResult:
        """Contract edge ``{u, v}`` into ``min(u, v)``.

        Edges of the absorbed node are re-keyed onto the survivor; where the
        survivor already has that neighbour the two stats are combined.
        """
        key = edge_key(u, v)
        if key not in self.edges:
            raise KeyError(f"cannot merge {u} and {v}: edge {tuple(key)} does not exist")
        survivor, absorbed = key
        stat = self.edges.pop(key)
        survivor_adj = self.adjacency[survivor]
        absorbed_adj = self.adjacency.pop(absorbed)
        survivor_adj.discard(absorbed)
        absorbed_adj.discard(survivor)

        removed: list[EdgeKey] = []
        updated: list[EdgeKey] = []
        for w in absorbed_adj:
            old_key = edge_key(w, absorbed)
            moved = self.edges.pop(old_key)
            w_adj = self.adjacency[w]
            w_adj.discard(absorbed)
            new_key = edge_key(w, survivor)
            if w in survivor_adj:
                self.edges[new_key] = combine(kind, self.edges[new_key], moved)
            else:
                self.edges[new_key] = moved
                survivor_adj.add(w)
                w_adj.add(survivor)
            removed.append(old_key)
            updated.append(new_key)
        return MergeResult(survivor, absorbed, stat, tuple(removed), tuple(updated))

    # -- audits -------------------------------------------------------------

    def audit(self) -> list[str]:
        """Problems where adjacency and the edge map disagree (empty when consistent)."""
        problems: list[str] = []
        for key in self.edges:
            lo, hi = key
            if lo >= hi:
                problems.append(f"non-canonical key {tuple(key)}")
                continue
            if hi not in self.adjacency.get(lo, ()) or lo not in self.adjacency.get(hi, ()):
                problems.append(f"edge {tuple(key)} missing from adjacency")
        for u, nbrs in self.adjacency.items():
            for w in nbrs:
                if u == w:
                    problems.append(f"self-loop in adjacency of {u}")
                elif edge_key(u, w) not in self.edges:
                    problems.append(f"adjacency {u}->{w} has no edge")
        return problems

    def check_sparsity(self) -> bool:
        """Warn (never raise) when |E| exceeds SPARSITY_FACTOR * |V|."""
        n, m = self.node_count(), self.edge_count()
        if m > SPARSITY_FACTOR * max(n, 1):
            logger.warning(f"Graph is denser than expected: |E|={m:,} > {SPARSITY_FACTOR}*|V|={n:,}")
            return False
        return True
