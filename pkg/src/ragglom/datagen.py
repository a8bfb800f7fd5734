"""Deterministic synthetic datasets: box supervoxels, planted objects, leaf RAGs.

The voxel lattice is cut into axis-aligned boxes (one box = one supervoxel)
with seeded widths per axis. Boxes are grouped into planted objects; an
interface between boxes of the same object gets a high affinity, others a
low one.

Each band is split into equal slots, one per interface, taken in a seeded
permutation. An interface's base value sits in the middle of its slot and
every voxel pair of it draws its own seeded jitter around the base, small
enough to stay inside the slot. The MEAN and MAX of an interface therefore stay
inside its own slot, so no two interfaces of the input tie under either
linkage, and merged MEAN values are sums of independent draws rather than
points of a regular grid.

A voxel pair straddling a leaf face belongs to the leaf of its lower voxel,
so interfaces lying on or crossing leaf faces are split into partial stats
across several leaves.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Mapping

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, ConfigDict
from scipy import sparse

from ragglom.errors import InputFormatError, SpecError
from ragglom.linkage import AffinityStat, LinkageKind, exact_value, format_affinity, parse_affinity
from ragglom.octree import NODE_DTYPE, Box, NodeTable, OctreeLayout, boundary_set
from ragglom.rag import RegionGraph
from ragglom.store import LEAF_EDGE_DTYPE, FORMAT_VERSION, ChunkStore, LeafInput

MIN_SLOT_SPACING = 4

Triple = tuple[int, int, int]


class SyntheticSpec(BaseModel):
    """Parameters of a synthetic dataset. Validated as a whole by :meth:`check`."""

    model_config = ConfigDict(extra="forbid")

    dims: Triple = (64, 64, 64)
    leaf: Triple = (16, 16, 16)
    box_min: int = 2
    box_max: int = 6
    align_boxes_to_leaves: bool = False
    planting: Literal["blocks", "leaf_interior"] = "blocks"
    object_boxes: int = 2
    intra_low: float = 0.75
    intra_high: float = 0.95
    inter_low: float = 0.05
    inter_high: float = 0.25
    seed: int = 0

    def check(self) -> None:
        """Raise SpecError listing every problem found."""
        problems = []
        for axis, (d, l) in enumerate(zip(self.dims, self.leaf)):
            name = "xyz"[axis]
            if d <= 0 or l <= 0:
                problems.append(f"{name}: dims and leaf size must be positive (got {d}, {l})")
            elif d % l:
                problems.append(f"{name}: leaf size {l} does not divide dataset size {d}")
        if self.box_min < 1:
            problems.append(f"box_min must be >= 1 (got {self.box_min})")
        if self.box_max < self.box_min:
            problems.append(f"box_max {self.box_max} < box_min {self.box_min}")
        if self.object_boxes < 1:
            problems.append(f"object_boxes must be >= 1 (got {self.object_boxes})")
        bands = {}
        for band in ("intra", "inter"):
            lo_text, hi_text = repr(getattr(self, f"{band}_low")), repr(getattr(self, f"{band}_high"))
            try:
                lo, hi = parse_affinity(lo_text), parse_affinity(hi_text)
            except InputFormatError as e:
                problems.append(f"{band} band: {e}")
                continue
            if hi - lo < 2:
                problems.append(f"{band} band [{lo_text}, {hi_text}] is too narrow for distinct values")
            bands[band] = (lo, hi)
        if len(bands) == 2 and bands["inter"][1] >= bands["intra"][0]:
            problems.append("inter band must lie strictly below the intra band")
        if problems:
            raise SpecError("invalid synthetic spec:\n  - " + "\n  - ".join(problems))

    def band(self, which: Literal["intra", "inter"]) -> tuple[int, int]:
        return parse_affinity(repr(getattr(self, f"{which}_low"))), parse_affinity(repr(getattr(self, f"{which}_high")))


@dataclass
class GroundTruth:
    """Planted object of every supervoxel, aligned arrays sorted by segment id."""

    segment_ids: np.ndarray
    objects: np.ndarray

    def __len__(self) -> int:
        return len(self.segment_ids)

    def as_dict(self) -> dict[int, int]:
        return dict(zip(self.segment_ids.tolist(), self.objects.tolist()))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"segment_id": self.segment_ids, "object_id": self.objects})

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "GroundTruth":
        df = df.sort_values("segment_id")
        return cls(df["segment_id"].to_numpy(np.int64), df["object_id"].to_numpy(np.int64))


# -- lattice ------------------------------------------------------------------


def _axis_cuts(length: int, leaf: int, rng: np.random.Generator, lo: int, hi: int, align: bool) -> np.ndarray:
    spans = [(s, min(s + leaf, length)) for s in range(0, length, leaf)] if align else [(0, length)]
    cuts = [0]
    for start, end in spans:
        pos = start
        while pos < end:
            pos = min(pos + int(rng.integers(lo, hi + 1)), end)
            cuts.append(pos)
    return np.asarray(cuts, dtype=np.int64)


@dataclass
class Lattice:
    """Box tiling given by cut positions per axis; box ``(ix, iy, iz)`` spans
    ``[cuts[a][i], cuts[a][i+1])`` and has id ``1 + ix + nx*(iy + ny*iz)``."""

    cuts: tuple[np.ndarray, np.ndarray, np.ndarray]

    @classmethod
    def draw(cls, spec: SyntheticSpec, rng: np.random.Generator) -> "Lattice":
        return cls(
            tuple(  # type: ignore[arg-type]
                _axis_cuts(d, l, rng, spec.box_min, spec.box_max, spec.align_boxes_to_leaves)
                for d, l in zip(spec.dims, spec.leaf)
            )
        )

    @property
    def shape(self) -> Triple:
        return tuple(len(c) - 1 for c in self.cuts)  # type: ignore[return-value]

    @property
    def size(self) -> int:
        nx, ny, nz = self.shape
        return nx * ny * nz

    def box_id(self, ix, iy, iz):
        nx, ny, _ = self.shape
        return 1 + ix + nx * (iy + ny * iz)

    def box_index(self, ids: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        nx, ny, _ = self.shape
        k = np.asarray(ids, dtype=np.int64) - 1
        return k % nx, (k // nx) % ny, k // (nx * ny)

    def box(self, sid: int) -> Box:
        ix, iy, iz = (int(v) for v in self.box_index(np.asarray([sid])))
        idx = (ix, iy, iz)
        return Box(
            tuple(int(self.cuts[a][idx[a]]) for a in range(3)),  # type: ignore[arg-type]
            tuple(int(self.cuts[a][idx[a] + 1]) for a in range(3)),  # type: ignore[arg-type]
        )

    def node_table(self) -> NodeTable:
        """Extents of every box, in id order."""
        records = np.zeros(self.size, dtype=NODE_DTYPE)
        ix, iy, iz = self.box_index(np.arange(1, self.size + 1))
        records["id"] = np.arange(1, self.size + 1)
        for a, idx in enumerate((ix, iy, iz)):
            records["lo"][:, a] = self.cuts[a][idx]
            records["hi"][:, a] = self.cuts[a][idx + 1]
        return NodeTable(records)


# -- planting -----------------------------------------------------------------


def plant_objects(spec: SyntheticSpec, lattice: Lattice) -> GroundTruth:
    """Object id per box.

    ``blocks``: blocks of ``object_boxes`` boxes per axis. ``leaf_interior``:
    boxes strictly inside one leaf (touching none of its faces) form such
    blocks within their leaf; every other box is its own object.
    """
    ids = np.arange(1, lattice.size + 1)
    idx = lattice.box_index(ids)
    ob = spec.object_boxes
    block = [i // ob for i in idx]
    nb = [-(-n // ob) for n in lattice.shape]
    block_key = block[0] + nb[0] * (block[1] + nb[1] * block[2])
    if spec.planting == "blocks":
        key = block_key
    else:
        interior = np.ones(len(ids), dtype=bool)
        leaf_key = np.zeros(len(ids), dtype=np.int64)
        grid = [d // l for d, l in zip(spec.dims, spec.leaf)]
        for a in range(3):
            lo = lattice.cuts[a][idx[a]]
            hi = lattice.cuts[a][idx[a] + 1]
            leaf = spec.leaf[a]
            home = lo // leaf
            interior &= (lo > home * leaf) & (hi < (home + 1) * leaf)
            leaf_key = leaf_key * grid[a] + home
        n_blocks = nb[0] * nb[1] * nb[2]
        key = np.where(interior, leaf_key * n_blocks + block_key, -ids)
    _, objects = np.unique(key, return_inverse=True)
    return GroundTruth(ids, objects.astype(np.int64) + 1)


# -- interfaces -----------------------------------------------------------------


@dataclass
class _AxisSegments:
    """Pieces of every box along one axis cut at leaf faces."""

    box: np.ndarray
    leaf: np.ndarray
    lo: np.ndarray
    hi: np.ndarray


def _axis_segments(cuts: np.ndarray, leaf: int) -> _AxisSegments:
    box, lf, lo, hi = [], [], [], []
    for i in range(len(cuts) - 1):
        a, b = int(cuts[i]), int(cuts[i + 1])
        for l in range(a // leaf, (b - 1) // leaf + 1):
            box.append(i)
            lf.append(l)
            lo.append(max(a, l * leaf))
            hi.append(min(b, (l + 1) * leaf))
    return _AxisSegments(*(np.asarray(v, dtype=np.int64) for v in (box, lf, lo, hi)))


def interface_table(lattice: Lattice) -> pd.DataFrame:
    """Every box-box interface with its global contact area.

    Columns: ``iface`` (index), ``lo``, ``hi`` (segment ids), ``axis``, ``area``.
    """
    frames = []
    offset = 0
    n = lattice.shape
    for a in range(3):
        b, c = [x for x in range(3) if x != a]
        if n[a] < 2:
            continue
        grid = np.indices((n[a] - 1, n[b], n[c])).reshape(3, -1)
        lower = [None, None, None]
        lower[a], lower[b], lower[c] = grid[0], grid[1], grid[2]
        upper = list(lower)
        upper[a] = grid[0] + 1
        wb = np.diff(lattice.cuts[b])[grid[1]]
        wc = np.diff(lattice.cuts[c])[grid[2]]
        frames.append(
            pd.DataFrame(
                {
                    "iface": offset + np.arange(grid.shape[1]),
                    "lo": lattice.box_id(*lower),
                    "hi": lattice.box_id(*upper),
                    "axis": a,
                    "area": wb * wc,
                }
            )
        )
        offset += grid.shape[1]
    if not frames:
        return pd.DataFrame({"iface": [], "lo": [], "hi": [], "axis": [], "area": []}, dtype=np.int64)
    return pd.concat(frames, ignore_index=True)


@dataclass
class InterfaceValues:
    """Base value and jitter bound of every interface, indexed like :func:`interface_table`."""

    base: np.ndarray
    jitter: np.ndarray
    tie_free: bool

    def slot(self, iface: np.ndarray | int) -> tuple[np.ndarray, np.ndarray]:
        """Closed range ``[base - jitter, base + jitter]`` that every value of the interface stays in."""
        return self.base[iface] - self.jitter[iface], self.base[iface] + self.jitter[iface]


def _assign_bases(spec: SyntheticSpec, intra: np.ndarray, rng: np.random.Generator) -> InterfaceValues:
    """One slot per interface; ``tie_free`` is False when a band ran out of slots."""
    base = np.zeros(len(intra), dtype=np.int64)
    jitter = np.zeros(len(intra), dtype=np.int64)
    tie_free = True
    for which, mask in (("intra", intra), ("inter", ~intra)):
        m = int(mask.sum())
        if not m:
            continue
        lo, hi = spec.band(which)
        width = hi - lo + 1
        spacing = max(MIN_SLOT_SPACING, width // m)
        slots = max(1, width // spacing)
        if m <= slots:
            picks = rng.permutation(slots)[:m]
        else:
            logger.warning(
                f"{which} band [{format_affinity(lo)}, {format_affinity(hi)}] has {slots:,} distinct "
                f"slots for {m:,} interfaces; the dataset is not tie-free"
            )
            tie_free = False
            picks = rng.integers(0, slots, size=m)
        half = (spacing - 1) // 2
        base[mask] = lo + half + spacing * picks
        jitter[mask] = half
    return InterfaceValues(base, jitter, tie_free)


def leaf_portions(
    spec: SyntheticSpec, lattice: Lattice, values: InterfaceValues, rng: np.random.Generator
) -> pd.DataFrame:
    """Partial interface stats per leaf.

    One row per (interface, leaf) with columns ``leaf_x``, ``leaf_y``,
    ``leaf_z``, ``iface``, ``lo``, ``hi``, ``count``, ``sum``, ``max``. Voxel
    pair jitters are drawn in row order, so the table is a pure function of
    the seed.
    """
    n = lattice.shape
    segs = [_axis_segments(lattice.cuts[a], spec.leaf[a]) for a in range(3)]
    columns = ["leaf_x", "leaf_y", "leaf_z", "iface", "lo", "hi", "count", "sum", "max"]
    frames = []
    offset = 0
    for a in range(3):
        b, c = [x for x in range(3) if x != a]
        if n[a] < 2:
            continue
        sb, sc = segs[b], segs[c]
        ii, jb, kc = (
            g.ravel()
            for g in np.meshgrid(
                np.arange(n[a] - 1), np.arange(len(sb.box)), np.arange(len(sc.box)), indexing="ij"
            )
        )
        box_b, box_c = sb.box[jb], sc.box[kc]
        lower = [None, None, None]
        lower[a], lower[b], lower[c] = ii, box_b, box_c
        upper = list(lower)
        upper[a] = ii + 1
        iface = offset + ii * (n[b] * n[c]) + box_b * n[c] + box_c
        offset += (n[a] - 1) * n[b] * n[c]

        # the lower voxel of each pair sits just below the cut
        leaf = [None, None, None]
        leaf[a] = (lattice.cuts[a][ii + 1] - 1) // spec.leaf[a]
        leaf[b], leaf[c] = sb.leaf[jb], sc.leaf[kc]
        frames.append(
            pd.DataFrame(
                {
                    "leaf_x": leaf[0], "leaf_y": leaf[1], "leaf_z": leaf[2],
                    "iface": iface,
                    "lo": lattice.box_id(*lower),
                    "hi": lattice.box_id(*upper),
                    "count": (sb.hi[jb] - sb.lo[jb]) * (sc.hi[kc] - sc.lo[kc]),
                }
            )
        )
    if not frames:
        return pd.DataFrame({k: np.zeros(0, dtype=np.int64) for k in columns})
    df = pd.concat(frames, ignore_index=True).sort_values(
        ["leaf_x", "leaf_y", "leaf_z", "lo", "hi"], ignore_index=True
    )

    iface = df["iface"].to_numpy(np.int64)
    count = df["count"].to_numpy(np.int64)
    bound = np.repeat(values.jitter[iface], count)
    draws = rng.integers(-bound, bound, endpoint=True, dtype=np.int64)
    starts = np.concatenate(([0], np.cumsum(count)[:-1]))
    base = values.base[iface]
    df["sum"] = base * count + np.add.reduceat(draws, starts)
    df["max"] = base + np.maximum.reduceat(draws, starts)
    return df[columns]


# -- generation ---------------------------------------------------------------


@dataclass
class GenerateResult:
    leaves: int
    segments: int
    edges: int
    leaf_edges: int
    tie_free: bool
    truth: GroundTruth
    extents: NodeTable
    objects: int


def _interface_graph(totals: pd.DataFrame, kind: LinkageKind) -> RegionGraph:
    g = RegionGraph()
    value = totals["sum"] if kind is LinkageKind.MEAN else totals["max"]
    for (lo, hi), v, n in zip(totals.index.tolist(), value.tolist(), totals["count"].tolist()):
        g.add_edge(lo, hi, AffinityStat(v, n), kind)
    return g


def generate(spec: SyntheticSpec, store: ChunkStore) -> GenerateResult:
    """Write leaf inputs, ground truth and the manifest of ``spec`` into ``store``."""
    spec.check()
    rng = np.random.default_rng(spec.seed)
    layout = OctreeLayout(spec.dims, spec.leaf)
    lattice = Lattice.draw(spec, rng)
    truth = plant_objects(spec, lattice)
    interfaces = interface_table(lattice)
    obj = truth.objects
    intra = obj[interfaces["lo"].to_numpy() - 1] == obj[interfaces["hi"].to_numpy() - 1]
    values = _assign_bases(spec, intra, rng)
    tie_free = values.tie_free
    portions = leaf_portions(spec, lattice, values, rng)
    if tie_free:
        totals = portions.groupby(["lo", "hi"], sort=True).agg(
            sum=("sum", "sum"), count=("count", "sum"), max=("max", "max")
        )
        for kind in LinkageKind:
            audit_tie_free(_interface_graph(totals, kind), kind)
    extents = lattice.node_table()

    grouped = {key: df for key, df in portions.groupby(["leaf_x", "leaf_y", "leaf_z"], sort=True)}
    for address in layout.addresses(0):
        df = grouped.get(address.coords)
        edges = np.zeros(0 if df is None else len(df), dtype=LEAF_EDGE_DTYPE)
        if df is not None:
            edges["lo"] = df["lo"].to_numpy()
            edges["hi"] = df["hi"].to_numpy()
            edges["sum_lo"] = df["sum"].to_numpy()
            edges["count"] = df["count"].to_numpy()
            edges["max"] = df["max"].to_numpy()
        ids = np.unique(np.concatenate([edges["lo"], edges["hi"]]))
        nodes = NodeTable(extents.records[ids.astype(np.int64) - 1])
        boundary = np.asarray(sorted(boundary_set(layout.descriptor(address), nodes)), dtype="<u8")
        store.put_leaf(LeafInput(address, nodes, boundary, edges))

    store.put_truth(truth.to_frame())
    manifest = {
        "format_version": FORMAT_VERSION,
        "dims": list(spec.dims),
        "leaf": list(spec.leaf),
        "leaf_grid": list(layout.leaf_grid),
        "boxes": list(lattice.shape),
        "segments": lattice.size,
        "edges": len(interfaces),
        "leaf_edges": len(portions),
        "objects": int(obj.max()) if len(obj) else 0,
        "tie_free": tie_free,
        "spec": spec.model_dump(mode="json"),
    }
    store.write_manifest(manifest)
    result = GenerateResult(
        leaves=sum(1 for _ in layout.addresses(0)),
        segments=lattice.size,
        edges=len(interfaces),
        leaf_edges=len(portions),
        tie_free=tie_free,
        truth=truth,
        extents=extents,
        objects=manifest["objects"],
    )
    logger.info(
        f"Generated {result.segments:,} supervoxels, {result.edges:,} interfaces "
        f"({result.leaf_edges:,} leaf edges) in {result.leaves} leaves, {result.objects:,} objects"
    )
    return result


def spec_from_manifest(manifest: Mapping) -> SyntheticSpec:
    return SyntheticSpec.model_validate(manifest["spec"])


def audit_tie_free(g: RegionGraph, kind: LinkageKind) -> None:
    """Raise SpecError when two edges of ``g`` have the same exact value."""
    seen: dict = {}
    for key, stat in g.edges.items():
        value = exact_value(kind, stat)
        if value in seen:
            raise SpecError(
                f"affinity collision under {kind.name}: edges {tuple(seen[value])} and {tuple(key)} "
                f"both have value {value}"
            )
        seen[value] = key


# -- quality scores ---------------------------------------------------------


@dataclass
class QualityScores:
    """Agreement of a flat segmentation with the planted objects.

    ``splits``/``merges`` are excess counts: sum over objects of (segments it
    spans - 1), and over segments of (objects it mixes - 1).
    """

    splits: int
    merges: int
    split_objects: int
    merged_segments: int
    rand_index: float
    adjusted_rand_index: float
    vi_split: float
    vi_merge: float

    @property
    def vi(self) -> float:
        return self.vi_split + self.vi_merge


def _entropy_terms(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log2(p)).sum())


def score_against_truth(
    partition: Mapping[int, int] | pd.DataFrame, truth: GroundTruth | pd.DataFrame
) -> QualityScores:
    """Score ``partition`` (segment -> label) against ``truth`` (segment -> object)."""
    if isinstance(truth, pd.DataFrame):
        truth = GroundTruth.from_frame(truth)
    if isinstance(partition, pd.DataFrame):
        labels = dict(zip(partition["segment_id"].tolist(), partition["label"].tolist()))
    else:
        labels = dict(partition)
    missing = [s for s in truth.segment_ids.tolist() if s not in labels]
    if missing:
        raise InputFormatError(f"partition misses {len(missing)} supervoxels, e.g. {missing[:5]}")

    seg = np.asarray([labels[s] for s in truth.segment_ids.tolist()])
    _, obj_codes = np.unique(truth.objects, return_inverse=True)
    _, seg_codes = np.unique(seg, return_inverse=True)
    n = len(seg)
    table = sparse.coo_matrix(
        (np.ones(n, dtype=np.int64), (obj_codes, seg_codes)),
        shape=(obj_codes.max() + 1 if n else 0, seg_codes.max() + 1 if n else 0),
    ).tocsr()
    table.sum_duplicates()

    per_object = np.diff(table.indptr)
    per_segment = np.diff(table.tocsc().indptr)
    cells = table.data.astype(np.int64)
    rows = np.asarray(table.sum(axis=1)).ravel()
    cols = np.asarray(table.sum(axis=0)).ravel()

    def pairs(x: np.ndarray) -> int:
        return int((x * (x - 1) // 2).sum())

    total = n * (n - 1) // 2
    same_both, same_obj, same_seg = pairs(cells), pairs(rows), pairs(cols)
    if total:
        rand = (total + 2 * same_both - same_obj - same_seg) / total
        expected = same_obj * same_seg / total
        denom = 0.5 * (same_obj + same_seg) - expected
        ari = (same_both - expected) / denom if denom else 1.0
    else:
        rand = ari = 1.0
    h_joint = _entropy_terms(cells, n) if n else 0.0
    h_obj = _entropy_terms(rows, n) if n else 0.0
    h_seg = _entropy_terms(cols, n) if n else 0.0
    return QualityScores(
        splits=int((per_object - 1).sum()),
        merges=int((per_segment - 1).sum()),
        split_objects=int((per_object > 1).sum()),
        merged_segments=int((per_segment > 1).sum()),
        rand_index=float(rand),
        adjusted_rand_index=float(ari),
        vi_split=max(h_joint - h_obj, 0.0),
        vi_merge=max(h_joint - h_seg, 0.0),
    )

