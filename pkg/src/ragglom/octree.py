"""Octree chunking of the voxel lattice and the recursive stitching driver.

Leaves are pre-chunked at level 0; a chunk at level L covers up to 2x2x2
chunks of level L-1. Addresses print as ``"L/x_y_z"``, the form used as a path
inside the store.

Boxes are half-open voxel ranges ``[lo, hi)``. For face tests a box is taken
as the closed region of space it occupies, so a supervoxel lying flush
against a chunk face from the outside still touches that face. That is what
lets a leaf which holds an edge to such a supervoxel (voxel pairs are
attributed to the chunk of their lower voxel) freeze it.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Iterator, Mapping, NamedTuple

import numpy as np
from loguru import logger

from ragglom.agglomerate import ChunkResult, agglomerate_chunk
from ragglom.errors import InputFormatError
from ragglom.linkage import FixedAffinity, LinkageKind
from ragglom.rag import Dendrogram, RegionGraph, SegmentId

if TYPE_CHECKING:
    from ragglom.store import ChunkStore

DEFAULT_LEAF_THRESHOLD = 4_000_000

Triple = tuple[int, int, int]


class Box(NamedTuple):
    """Axis-aligned voxel range ``[lo, hi)`` per axis."""

    lo: Triple
    hi: Triple

    @property
    def shape(self) -> Triple:
        return tuple(h - l for l, h in zip(self.lo, self.hi))  # type: ignore[return-value]

    def contains(self, other: "Box") -> bool:
        return all(a <= b for a, b in zip(self.lo, other.lo)) and all(
            a >= b for a, b in zip(self.hi, other.hi)
        )

    def touches(self, other: "Box") -> bool:
        """Closed regions intersect (sharing only a face, edge or corner counts)."""
        return all(a <= d and c <= b for a, b, c, d in zip(self.lo, self.hi, other.lo, other.hi))

    def __str__(self) -> str:
        return "x".join(f"[{l},{h})" for l, h in zip(self.lo, self.hi))


class ChunkAddress(NamedTuple):
    level: int
    x: int
    y: int
    z: int

    @property
    def coords(self) -> Triple:
        return (self.x, self.y, self.z)

    def parent(self) -> "ChunkAddress":
        return ChunkAddress(self.level + 1, self.x >> 1, self.y >> 1, self.z >> 1)

    @property
    def path(self) -> str:
        return f"{self.level}/{self.x}_{self.y}_{self.z}"

    @classmethod
    def parse(cls, text: str) -> "ChunkAddress":
        """Inverse of :attr:`path`, e.g. ``"2/0_1_0"``."""
        try:
            level, coords = text.strip().strip("/").split("/")
            x, y, z = (int(c) for c in coords.split("_"))
            return cls(int(level), x, y, z)
        except ValueError:
            raise InputFormatError(f"not a chunk address: {text!r} (expected L/x_y_z)") from None

    def __str__(self) -> str:
        return self.path


@dataclass(frozen=True)
class ChunkDescriptor:
    address: ChunkAddress
    bounds: Box
    dataset_bounds: Box

    def interior_faces(self) -> list[tuple[int, int]]:
        """``(axis, plane)`` of every face that is not a dataset face."""
        faces = []
        for axis in range(3):
            if self.bounds.lo[axis] > self.dataset_bounds.lo[axis]:
                faces.append((axis, self.bounds.lo[axis]))
            if self.bounds.hi[axis] < self.dataset_bounds.hi[axis]:
                faces.append((axis, self.bounds.hi[axis]))
        return faces


NODE_DTYPE = np.dtype([("id", "<u8"), ("lo", "<i8", (3,)), ("hi", "<i8", (3,))])


@dataclass
class NodeTable:
    """Supervoxel extents as a structured array sorted by id."""

    records: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=NODE_DTYPE))

    def __post_init__(self) -> None:
        self.records = np.asarray(self.records, dtype=NODE_DTYPE)
        if len(self.records) > 1 and not np.all(np.diff(self.records["id"].astype(np.int64)) > 0):
            _, first = np.unique(self.records["id"], return_index=True)
            self.records = self.records[first]

    @classmethod
    def from_mapping(cls, extents: Mapping[SegmentId, Box]) -> "NodeTable":
        records = np.zeros(len(extents), dtype=NODE_DTYPE)
        for i, (sid, box) in enumerate(sorted(extents.items())):
            records[i] = (sid, box.lo, box.hi)
        return cls(records)

    @classmethod
    def concat(cls, tables: Iterable["NodeTable"]) -> "NodeTable":
        parts = [t.records for t in tables]
        if not parts:
            return cls()
        return cls(np.concatenate(parts))

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ids(self) -> np.ndarray:
        return self.records["id"]

    def box(self, sid: SegmentId) -> Box:
        i = int(np.searchsorted(self.ids, sid))
        if i >= len(self.records) or int(self.ids[i]) != sid:
            raise KeyError(f"segment {sid} has no extent")
        r = self.records[i]
        return Box(tuple(int(v) for v in r["lo"]), tuple(int(v) for v in r["hi"]))

    def select(self, ids: Iterable[SegmentId]) -> "NodeTable":
        wanted = np.fromiter(ids, dtype="<u8")
        return NodeTable(self.records[np.isin(self.ids, wanted)])

    def to_mapping(self) -> dict[SegmentId, Box]:
        return {int(r["id"]): Box(tuple(map(int, r["lo"])), tuple(map(int, r["hi"]))) for r in self.records}


def boundary_set(
    chunk: ChunkDescriptor, node_extents: NodeTable | Mapping[SegmentId, Box]
) -> frozenset[SegmentId]:
    """Supervoxels whose extent touches an interior face of ``chunk``.

    Raises InputFormatError when an extent does not even touch the chunk.
    """
    table = node_extents if isinstance(node_extents, NodeTable) else NodeTable.from_mapping(node_extents)
    if not len(table):
        return frozenset()
    lo = table.records["lo"]
    hi = table.records["hi"]
    c_lo = np.asarray(chunk.bounds.lo)
    c_hi = np.asarray(chunk.bounds.hi)
    touching = np.all((lo <= c_hi) & (c_lo <= hi), axis=1)
    if not touching.all():
        bad = table.ids[~touching][:5].tolist()
        raise InputFormatError(f"{(~touching).sum()} node boxes lie outside chunk {chunk.address}, e.g. {bad}")
    member = np.zeros(len(table), dtype=bool)
    for axis, plane in chunk.interior_faces():
        member |= (lo[:, axis] <= plane) & (plane <= hi[:, axis])
    return frozenset(int(i) for i in table.ids[member])


def combine_edges(acc: RegionGraph, part: RegionGraph, kind: LinkageKind) -> RegionGraph:
    """Fold ``part`` into ``acc``: nodes unioned, shared EdgeKeys combined. Returns ``acc``."""
    for u in part.nodes:
        acc.add_node(u)
    for key, stat in part.edges.items():
        acc.add_edge(key.lo, key.hi, stat, kind)
    return acc


class OctreeLayout:
    """Level grids of an octree over the leaf-chunk grid of a dataset.

    The dataset box starts at the origin and its dims are multiples of the
    leaf dims. Level l has ``ceil(g / 2**l)`` chunks per axis; chunks beyond
    the data are never created, and chunk bounds are clipped to the dataset.
    """

    def __init__(self, dims: Triple, leaf_dims: Triple):
        problems = []
        for axis, (d, l) in enumerate(zip(dims, leaf_dims)):
            if l <= 0 or d <= 0:
                problems.append(f"axis {'xyz'[axis]}: dims must be positive ({d}, leaf {l})")
            elif d % l:
                problems.append(f"axis {'xyz'[axis]}: leaf size {l} does not divide {d}")
        if problems:
            raise InputFormatError("invalid chunk layout: " + "; ".join(problems))
        self.dims = tuple(dims)
        self.leaf_dims = tuple(leaf_dims)
        self.leaf_grid: Triple = tuple(d // l for d, l in zip(dims, leaf_dims))  # type: ignore[assignment]
        self.top_level = max(math.ceil(math.log2(g)) if g > 1 else 0 for g in self.leaf_grid)
        self.dataset_bounds = Box((0, 0, 0), self.dims)

    def grid(self, level: int) -> Triple:
        return tuple(-(-g // (1 << level)) for g in self.leaf_grid)  # type: ignore[return-value]

    @property
    def root(self) -> ChunkAddress:
        return ChunkAddress(self.top_level, 0, 0, 0)

    def exists(self, address: ChunkAddress) -> bool:
        if not 0 <= address.level <= self.top_level:
            return False
        return all(0 <= c < g for c, g in zip(address.coords, self.grid(address.level)))

    def addresses(self, level: int) -> Iterator[ChunkAddress]:
        gx, gy, gz = self.grid(level)
        for x, y, z in itertools.product(range(gx), range(gy), range(gz)):
            yield ChunkAddress(level, x, y, z)

    def children(self, address: ChunkAddress) -> list[ChunkAddress]:
        if address.level == 0:
            return []
        out = []
        for off in itertools.product((0, 1), repeat=3):
            child = ChunkAddress(address.level - 1, *(2 * c + o for c, o in zip(address.coords, off)))
            if self.exists(child):
                out.append(child)
        return sorted(out)

    def leaves_under(self, address: ChunkAddress) -> list[ChunkAddress]:
        span = 1 << address.level
        ranges = [
            range(c * span, min((c + 1) * span, g)) for c, g in zip(address.coords, self.leaf_grid)
        ]
        return [ChunkAddress(0, x, y, z) for x, y, z in itertools.product(*ranges)]

    def bounds(self, address: ChunkAddress) -> Box:
        size = [l << address.level for l in self.leaf_dims]
        lo = tuple(min(c * s, d) for c, s, d in zip(address.coords, size, self.dims))
        hi = tuple(min((c + 1) * s, d) for c, s, d in zip(address.coords, size, self.dims))
        return Box(lo, hi)  # type: ignore[arg-type]

    def descriptor(self, address: ChunkAddress) -> ChunkDescriptor:
        if not self.exists(address):
            raise KeyError(f"chunk {address} is outside the octree")
        return ChunkDescriptor(address, self.bounds(address), self.dataset_bounds)


@dataclass(frozen=True)
class PlanNode:
    """One executed chunk task.

    An effective leaf (no ``children``) loads and combines ``leaves``;
    an inner task consumes the frozen graphs of ``children``.
    """

    address: ChunkAddress
    children: tuple[ChunkAddress, ...] = ()
    leaves: tuple[ChunkAddress, ...] = ()

    @property
    def is_leaf(self) -> bool:
        return not self.children


class TaskPlan:
    """The executed subtree of the octree.

    ``depth`` counts executed levels including the root (None: every level).
    A node is an effective leaf when it sits at the deepest executed level,
    at level 0, or when its subtree holds at most ``leaf_threshold`` leaf edges.
    """

    def __init__(
        self,
        layout: OctreeLayout,
        *,
        depth: int | None = None,
        leaf_threshold: int = DEFAULT_LEAF_THRESHOLD,
        leaf_edges: Mapping[ChunkAddress, int] | None = None,
    ):
        if depth is not None and depth < 1:
            raise InputFormatError(f"octree depth must be >= 1, got {depth}")
        self.layout = layout
        self.depth = depth
        self.leaf_threshold = leaf_threshold
        self.deepest_level = 0 if depth is None else max(0, layout.top_level - depth + 1)
        self.nodes: dict[ChunkAddress, PlanNode] = {}
        self._edges = dict(leaf_edges) if leaf_edges is not None else None
        self._build(layout.root)

    def _subtree_edges(self, address: ChunkAddress) -> float:
        if self._edges is None:
            return math.inf
        return sum(self._edges.get(leaf, 0) for leaf in self.layout.leaves_under(address))

    def _build(self, address: ChunkAddress) -> None:
        small = self._subtree_edges(address) <= self.leaf_threshold
        if address.level <= self.deepest_level or small:
            self.nodes[address] = PlanNode(address, (), tuple(self.layout.leaves_under(address)))
            return
        children = tuple(self.layout.children(address))
        self.nodes[address] = PlanNode(address, children, ())
        for child in children:
            self._build(child)

    @property
    def root(self) -> PlanNode:
        return self.nodes[self.layout.root]

    def __len__(self) -> int:
        return len(self.nodes)

    def __getitem__(self, address: ChunkAddress) -> PlanNode:
        return self.nodes[address]

    def post_order(self, address: ChunkAddress | None = None) -> list[PlanNode]:
        """Children (by address) before parents; the assembly order of rows."""
        node = self.nodes[address or self.layout.root]
        out: list[PlanNode] = []
        for child in node.children:
            out.extend(self.post_order(child))
        out.append(node)
        return out

    def parent(self, address: ChunkAddress) -> ChunkAddress | None:
        if address == self.layout.root:
            return None
        return address.parent()


@dataclass
class ChunkOutput:
    """What one chunk task commits: its rows, its frozen graph, and counters."""

    address: ChunkAddress
    dendrogram: Dendrogram
    frozen_graph: RegionGraph
    frozen_nodes: NodeTable
    input_edges: int
    input_nodes: int
    boundary: int
    freezes: int = 0
    discards: int = 0

    @property
    def merges(self) -> int:
        return len(self.dendrogram)


def solve_chunk(
    descriptor: ChunkDescriptor,
    g: RegionGraph,
    extents: NodeTable,
    kind: LinkageKind,
    threshold: FixedAffinity,
    boundary: set[SegmentId] | None = None,
) -> ChunkOutput:
    """Run the chunk agglomeration on an assembled input graph.

    ``boundary`` defaults to the segments of ``extents`` touching the
    chunk's artificial faces.
    """
    extents = extents.select(g.nodes)
    input_edges, input_nodes = g.edge_count(), g.node_count()
    g.check_sparsity()
    if boundary is None:
        boundary = boundary_set(descriptor, extents)
    result: ChunkResult = agglomerate_chunk(g, boundary, kind, threshold)
    return ChunkOutput(
        address=descriptor.address,
        dendrogram=result.dendrogram,
        frozen_graph=result.frozen_graph,
        frozen_nodes=extents.select(result.frozen_graph.nodes),
        input_edges=input_edges,
        input_nodes=input_nodes,
        boundary=len(boundary),
        freezes=result.freezes,
        discards=result.discards,
    )


@dataclass
class LoadedLeaves:
    """Level-0 leaf inputs folded into one graph.

    ``boundaries`` holds the boundary ids stored with each leaf, i.e. the
    segments touching that leaf's own artificial faces.
    """

    graph: RegionGraph
    extents: NodeTable
    boundaries: dict[ChunkAddress, np.ndarray] = field(default_factory=dict)

    def boundary_for(self, address: ChunkAddress) -> set[SegmentId] | None:
        """Stored boundary of a task that is exactly one level-0 leaf, else None."""
        if address.level != 0 or set(self.boundaries) != {address}:
            return None
        return set(self.boundaries[address].tolist())


def load_leaves(store: "ChunkStore", leaves: Iterable[ChunkAddress], kind: LinkageKind) -> LoadedLeaves:
    """Combine level-0 leaf inputs into one graph."""
    g = RegionGraph()
    tables = []
    boundaries = {}
    for address in leaves:
        leaf = store.get_leaf(address)
        combine_edges(g, leaf.to_graph(kind), kind)
        tables.append(leaf.nodes)
        boundaries[address] = leaf.boundary
    return LoadedLeaves(g, NodeTable.concat(tables), boundaries)


def combine_children(
    outputs: Iterable[tuple[RegionGraph, NodeTable]], kind: LinkageKind
) -> tuple[RegionGraph, NodeTable]:
    """G_res: the children's frozen graphs folded with :func:`combine_edges`."""
    g = RegionGraph()
    tables = []
    for frozen_graph, nodes in outputs:
        combine_edges(g, frozen_graph, kind)
        tables.append(nodes)
    return g, NodeTable.concat(tables)


@dataclass
class RecursiveResult:
    dendrogram: Dendrogram
    frozen_graph: RegionGraph
    provenance: list[ChunkAddress]
    outputs: dict[ChunkAddress, ChunkOutput]

    def levels(self) -> list[int]:
        return [a.level for a in self.provenance]


def agglomerate_recursive(
    plan: TaskPlan,
    store: "ChunkStore",
    kind: LinkageKind,
    threshold: FixedAffinity,
    address: ChunkAddress | None = None,
) -> RecursiveResult:
    """In-process recursive driver over the plan rooted at ``address``.

    Children are solved first (sorted by address); their frozen graphs form
    the parent's input. Rows come out children-first, then the parent's.
    """
    node = plan[address or plan.layout.root]
    dendrogram = Dendrogram(kind, threshold)
    provenance: list[ChunkAddress] = []
    outputs: dict[ChunkAddress, ChunkOutput] = {}
    stored_boundary = None
    if node.is_leaf:
        loaded = load_leaves(store, node.leaves, kind)
        g, extents, stored_boundary = loaded.graph, loaded.extents, loaded.boundary_for(node.address)
    else:
        child_results = [agglomerate_recursive(plan, store, kind, threshold, c) for c in node.children]
        for child in child_results:
            dendrogram.extend(child.dendrogram)
            provenance.extend(child.provenance)
            outputs.update(child.outputs)
        g, extents = combine_children(
            ((outputs[c].frozen_graph, outputs[c].frozen_nodes) for c in node.children), kind
        )
    out = solve_chunk(plan.layout.descriptor(node.address), g, extents, kind, threshold, stored_boundary)
    outputs[node.address] = out
    dendrogram.extend(out.dendrogram)
    provenance.extend([node.address] * out.merges)
    logger.debug(
        f"chunk {node.address}: {out.input_edges:,} edges in, {out.merges:,} merges, "
        f"{out.frozen_graph.edge_count():,} frozen"
    )
    return RecursiveResult(dendrogram, out.frozen_graph, provenance, outputs)


def merge_level_histogram(
    dendrogram: Dendrogram, provenance: Iterable[int | ChunkAddress]
) -> dict[int, int]:
    """Merge count per octree level, keyed by level (every level seen is present)."""
    levels = [p.level if isinstance(p, ChunkAddress) else int(p) for p in provenance]
    if len(levels) != len(dendrogram):
        raise ValueError(f"provenance has {len(levels)} entries for {len(dendrogram)} rows")
    counts: dict[int, int] = {}
    for level in levels:
        counts[level] = counts.get(level, 0) + 1
    return dict(sorted(counts.items()))
