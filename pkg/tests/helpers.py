"""Builders for small graphs, hand-made stores and generated datasets."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ragglom.linkage import LinkageKind, make_stat
from ragglom.octree import Box, ChunkAddress, NodeTable, OctreeLayout, boundary_set
from ragglom.rag import RegionGraph
from ragglom.store import FORMAT_VERSION, LEAF_EDGE_DTYPE, ChunkStore, LeafInput


def make_graph(edges, kind: LinkageKind = LinkageKind.MEAN) -> RegionGraph:
    """Graph from ``(u, v, affinity, count)`` tuples."""
    g = RegionGraph()
    for u, v, a, n in edges:
        g.add_edge(u, v, make_stat(kind, a, n), kind)
    return g


def random_graph(seed: int, nodes: int = 40, edges: int = 120, kind: LinkageKind = LinkageKind.MEAN) -> RegionGraph:
    """Connected-ish random graph whose initial affinities are pairwise distinct."""
    rng = np.random.default_rng(seed)
    values = rng.permutation(1_000_000)[:edges]
    g = RegionGraph()
    pairs = set()
    for u in range(2, nodes + 1):
        pairs.add((int(rng.integers(1, u)), u))
    while len(pairs) < edges:
        u, v = sorted(int(x) for x in rng.choice(np.arange(1, nodes + 1), size=2, replace=False))
        pairs.add((u, v))
    for (u, v), a in zip(sorted(pairs), values.tolist()):
        g.add_edge(u, v, make_stat(kind, a, int(rng.integers(1, 6))), kind)
    return g


def write_store(
    root: Path,
    dims: tuple[int, int, int],
    leaf: tuple[int, int, int],
    extents: dict[int, Box],
    leaf_edges: dict[tuple[int, int, int], list[tuple[int, int, int, int]]],
) -> ChunkStore:
    """Hand-made store: one leaf file per leaf (``(lo, hi, affinity, count)`` edges) plus a manifest."""
    store = ChunkStore(root)
    layout = OctreeLayout(dims, leaf)
    table = NodeTable.from_mapping(extents)
    for address in layout.addresses(0):
        rows = leaf_edges.get(address.coords, [])
        edges = np.zeros(len(rows), dtype=LEAF_EDGE_DTYPE)
        for i, (lo, hi, a, n) in enumerate(rows):
            edges[i] = (lo, hi, a * n, 0, n, a)
        ids = sorted({u for lo, hi, _, _ in rows for u in (lo, hi)})
        nodes = table.select(ids)
        boundary = np.asarray(sorted(boundary_set(layout.descriptor(address), nodes)), dtype="<u8")
        store.put_leaf(LeafInput(address, nodes, boundary, edges))
    store.write_manifest({"format_version": FORMAT_VERSION, "dims": list(dims), "leaf": list(leaf)})
    return store


# Chain 1-2-3-4 over two x-adjacent leaves; the 2|3 interface lies on the leaf face.
CHAIN_EXTENTS = {
    1: Box((0, 0, 0), (8, 16, 16)),
    2: Box((8, 0, 0), (16, 16, 16)),
    3: Box((16, 0, 0), (24, 16, 16)),
    4: Box((24, 0, 0), (32, 16, 16)),
}
CHAIN_LEAF_EDGES = {
    (0, 0, 0): [(1, 2, 900_000, 1), (2, 3, 700_000, 1)],
    (1, 0, 0): [(3, 4, 800_000, 1)],
}

SMALL_SPEC = dict(dims=(32, 32, 32), leaf=(8, 8, 8), box_min=2, box_max=6, seed=3)

LEAF0 = ChunkAddress(0, 0, 0, 0)
