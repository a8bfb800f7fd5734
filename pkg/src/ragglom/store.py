"""Durable chunk store: binary codecs, atomic commits, completion markers.

Layout under the store root::

    dataset.toml               dataset manifest (SyntheticSpec + facts)
    truth.parquet              planted ground truth (segment -> object)
    leaves/0/x_y_z.rag         leaf inputs
    <run>/L/x_y_z.dend         per-chunk dendrogram fragment
    <run>/L/x_y_z.frozen       per-chunk frozen graph (+ node extents)
    <run>/L/x_y_z.ok           completion marker, written last
    <run>/dendrogram.ragd      assembled global dendrogram
    <run>/provenance.parquet   row -> level, chunk
    <run>/report.jsonl         per-level run report
    <run>/run_config.toml      parameters of the run

``<run>`` defaults to ``out``. Binary files are little-endian, start with a
magic and format version, and end in a CRC-64 (ECMA-182) footer over all
preceding bytes. Every file is written to a temporary name, fsynced and
renamed into place, so readers never observe a partial entry.
"""

from __future__ import annotations

import json
import os
import shutil
import struct
import threading
import tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import tomli_w
from crc import Calculator, Crc64
from loguru import logger

from ragglom.errors import MissingDependencyError, StoreCorruptionError
from ragglom.linkage import SCALE, AffinityStat, LinkageKind, pack_stats, unpack_stats
from ragglom.octree import NODE_DTYPE, ChunkAddress, ChunkOutput, NodeTable
from ragglom.rag import Dendrogram, DendrogramRow, EdgeKey, RegionGraph

FORMAT_VERSION = 1

MAGIC_LEAF = b"RAGL"
MAGIC_FROZEN = b"RAGF"
MAGIC_DENDROGRAM = b"RAGD"

# magic, version, level, (pad), x, y, z, n_nodes, n_boundary, n_edges
LEAF_HEADER = struct.Struct("<4sHBxiiiQQQ")
# magic, version, kind, (pad), n_nodes, n_edges
FROZEN_HEADER = struct.Struct("<4sHBxQQ")
# magic, version, kind, (pad), threshold, n_rows
DENDROGRAM_HEADER = struct.Struct("<4sHBxIQ")
FOOTER = struct.Struct("<Q")

LEAF_EDGE_DTYPE = np.dtype(
    [("lo", "<u8"), ("hi", "<u8"), ("sum_lo", "<u8"), ("sum_hi", "<u8"), ("count", "<u8"), ("max", "<u8")]
)
STAT_EDGE_DTYPE = np.dtype(
    [("lo", "<u8"), ("hi", "<u8"), ("sum_lo", "<u8"), ("sum_hi", "<u8"), ("count", "<u8")]
)
ROW_DTYPE = np.dtype(
    [("survivor", "<u8"), ("absorbed", "<u8"), ("sum_lo", "<u8"), ("sum_hi", "<u8"), ("count", "<u8")]
)

DEFAULT_RUN = "out"

_CRC64 = Calculator(Crc64.CRC64, optimized=True)


def crc64(data: bytes) -> int:
    return _CRC64.checksum(data)


def seal(body: bytes) -> bytes:
    return body + FOOTER.pack(crc64(body))


def unseal(data: bytes, what: str) -> bytes:
    """Strip and verify the CRC footer."""
    if len(data) < FOOTER.size:
        raise StoreCorruptionError(f"{what}: truncated ({len(data)} bytes)")
    body, (stored,) = data[: -FOOTER.size], FOOTER.unpack(data[-FOOTER.size :])
    actual = crc64(body)
    if actual != stored:
        raise StoreCorruptionError(f"{what}: checksum mismatch (stored {stored:016x}, computed {actual:016x})")
    return body


def footer_crc(path: Path) -> int:
    """Stored CRC of a sealed file, read without loading the body."""
    with open(path, "rb") as fh:
        fh.seek(0, os.SEEK_END)
        if fh.tell() < FOOTER.size:
            raise StoreCorruptionError(f"{path}: truncated")
        fh.seek(-FOOTER.size, os.SEEK_END)
        return FOOTER.unpack(fh.read(FOOTER.size))[0]


def atomic_write(path: Path, data: bytes) -> None:
    """Write-then-rename commit; the entry is visible only once complete."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    finally:
        tmp.unlink(missing_ok=True)


def _read_table(data: bytes, offset: int, dtype: np.dtype, n: int, what: str) -> tuple[np.ndarray, int]:
    if n == 0:
        return np.zeros(0, dtype=dtype), offset
    end = offset + n * dtype.itemsize
    if end > len(data):
        raise StoreCorruptionError(f"{what}: record table overruns the file")
    return np.frombuffer(data, dtype=dtype, count=n, offset=offset).copy(), end


def _check_header(magic: bytes, version: int, expected: bytes, what: str) -> None:
    if magic != expected:
        raise StoreCorruptionError(f"{what}: bad magic {magic!r}, expected {expected!r}")
    if version != FORMAT_VERSION:
        raise StoreCorruptionError(f"{what}: unsupported format version {version}")


def _kind_byte(value: int, what: str) -> LinkageKind:
    try:
        return LinkageKind(value)
    except ValueError:
        raise StoreCorruptionError(f"{what}: unknown linkage byte {value}") from None


def _edge_records(g: RegionGraph) -> np.ndarray:
    items = g.sorted_edges()
    records = np.zeros(len(items), dtype=STAT_EDGE_DTYPE)
    if items:
        records["lo"] = [k.lo for k, _ in items]
        records["hi"] = [k.hi for k, _ in items]
        records["sum_lo"], records["sum_hi"], records["count"] = pack_stats([s for _, s in items])
    return records


def _graph_from_records(records: np.ndarray, stats: list[AffinityStat], what: str) -> RegionGraph:
    if len(records) and not np.all(records["lo"] < records["hi"]):
        raise StoreCorruptionError(f"{what}: non-canonical edge key")
    g = RegionGraph()
    for lo, hi, stat in zip(records["lo"].tolist(), records["hi"].tolist(), stats):
        key = EdgeKey(lo, hi)
        if key in g.edges:
            raise StoreCorruptionError(f"{what}: duplicate edge {tuple(key)}")
        g.edges[key] = stat
        g.adjacency.setdefault(lo, set()).add(hi)
        g.adjacency.setdefault(hi, set()).add(lo)
    return g


# -- leaf inputs --------------------------------------------------------------


@dataclass
class LeafInput:
    """One pre-chunked leaf: node extents, boundary ids and kind-agnostic edges.

    Each edge record carries the MEAN aggregate (sum, count) and the maximum,
    so the same file serves both linkage kinds.
    """

    address: ChunkAddress
    nodes: NodeTable
    boundary: np.ndarray
    edges: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=LEAF_EDGE_DTYPE))

    def to_graph(self, kind: LinkageKind) -> RegionGraph:
        what = f"leaf {self.address}"
        if kind is LinkageKind.MEAN:
            stats = unpack_stats(self.edges["sum_lo"], self.edges["sum_hi"], self.edges["count"])
        else:
            stats = [AffinityStat(m, c) for m, c in zip(self.edges["max"].tolist(), self.edges["count"].tolist())]
        return _graph_from_records(self.edges, stats, what)


def encode_leaf(leaf: LeafInput) -> bytes:
    edges = np.ascontiguousarray(leaf.edges, dtype=LEAF_EDGE_DTYPE)
    boundary = np.ascontiguousarray(leaf.boundary, dtype="<u8")
    header = LEAF_HEADER.pack(
        MAGIC_LEAF, FORMAT_VERSION, leaf.address.level, *leaf.address.coords,
        len(leaf.nodes), len(boundary), len(edges),
    )
    return seal(header + leaf.nodes.records.tobytes() + boundary.tobytes() + edges.tobytes())


def decode_leaf(data: bytes, what: str = "leaf") -> LeafInput:
    body = unseal(data, what)
    if len(body) < LEAF_HEADER.size:
        raise StoreCorruptionError(f"{what}: truncated header")
    magic, version, level, x, y, z, n_nodes, n_boundary, n_edges = LEAF_HEADER.unpack_from(body)
    _check_header(magic, version, MAGIC_LEAF, what)
    offset = LEAF_HEADER.size
    nodes, offset = _read_table(body, offset, NODE_DTYPE, n_nodes, what)
    boundary, offset = _read_table(body, offset, np.dtype("<u8"), n_boundary, what)
    edges, offset = _read_table(body, offset, LEAF_EDGE_DTYPE, n_edges, what)
    if offset != len(body):
        raise StoreCorruptionError(f"{what}: {len(body) - offset} trailing bytes")
    if len(edges):
        if np.any(edges["count"] == 0):
            raise StoreCorruptionError(f"{what}: edge with zero contact count")
        if np.any(edges["max"] > SCALE):
            raise StoreCorruptionError(f"{what}: affinity above {SCALE}")
    return LeafInput(ChunkAddress(level, x, y, z), NodeTable(nodes), boundary, edges)


# -- frozen graphs ------------------------------------------------------------


def encode_frozen(kind: LinkageKind, g: RegionGraph, nodes: NodeTable) -> bytes:
    records = _edge_records(g)
    header = FROZEN_HEADER.pack(MAGIC_FROZEN, FORMAT_VERSION, int(kind), len(nodes), len(records))
    return seal(header + nodes.records.tobytes() + records.tobytes())


def decode_frozen(data: bytes, what: str = "frozen graph") -> tuple[LinkageKind, RegionGraph, NodeTable]:
    body = unseal(data, what)
    if len(body) < FROZEN_HEADER.size:
        raise StoreCorruptionError(f"{what}: truncated header")
    magic, version, kind_byte, n_nodes, n_edges = FROZEN_HEADER.unpack_from(body)
    _check_header(magic, version, MAGIC_FROZEN, what)
    kind = _kind_byte(kind_byte, what)
    offset = FROZEN_HEADER.size
    nodes, offset = _read_table(body, offset, NODE_DTYPE, n_nodes, what)
    records, offset = _read_table(body, offset, STAT_EDGE_DTYPE, n_edges, what)
    if offset != len(body):
        raise StoreCorruptionError(f"{what}: {len(body) - offset} trailing bytes")
    stats = unpack_stats(records["sum_lo"], records["sum_hi"], records["count"])
    return kind, _graph_from_records(records, stats, what), NodeTable(nodes)


# -- dendrograms --------------------------------------------------------------


def encode_dendrogram(d: Dendrogram) -> bytes:
    rows = np.zeros(len(d), dtype=ROW_DTYPE)
    if len(d):
        rows["survivor"] = [r.survivor for r in d.rows]
        rows["absorbed"] = [r.absorbed for r in d.rows]
        rows["sum_lo"], rows["sum_hi"], rows["count"] = pack_stats([r.stat for r in d.rows])
    header = DENDROGRAM_HEADER.pack(MAGIC_DENDROGRAM, FORMAT_VERSION, int(d.kind), d.threshold, len(rows))
    return seal(header + rows.tobytes())


def decode_dendrogram(data: bytes, what: str = "dendrogram") -> Dendrogram:
    body = unseal(data, what)
    if len(body) < DENDROGRAM_HEADER.size:
        raise StoreCorruptionError(f"{what}: truncated header")
    magic, version, kind_byte, threshold, n_rows = DENDROGRAM_HEADER.unpack_from(body)
    _check_header(magic, version, MAGIC_DENDROGRAM, what)
    kind = _kind_byte(kind_byte, what)
    if threshold > SCALE:
        raise StoreCorruptionError(f"{what}: threshold {threshold} above {SCALE}")
    rows, offset = _read_table(body, DENDROGRAM_HEADER.size, ROW_DTYPE, n_rows, what)
    if offset != len(body):
        raise StoreCorruptionError(f"{what}: {len(body) - offset} trailing bytes")
    if len(rows) and (np.any(rows["count"] == 0) or np.any(rows["survivor"] >= rows["absorbed"])):
        raise StoreCorruptionError(f"{what}: malformed merge row")
    stats = unpack_stats(rows["sum_lo"], rows["sum_hi"], rows["count"])
    d = Dendrogram(kind, threshold)
    d.rows = [
        DendrogramRow(s, a, stat)
        for s, a, stat in zip(rows["survivor"].tolist(), rows["absorbed"].tolist(), stats)
    ]
    return d


def write_dendrogram(path: Path, d: Dendrogram) -> None:
    atomic_write(Path(path), encode_dendrogram(d))


def read_dendrogram(path: Path) -> Dendrogram:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dendrogram file not found: {path}")
    return decode_dendrogram(path.read_bytes(), str(path))


# -- the store ----------------------------------------------------------------


class ChunkStore:
    """Shared directory through which chunk tasks exchange inputs and outputs.

    Distinct entries may be written concurrently; each entry has one writer.
    """

    def __init__(self, root: Path | str, run: str = DEFAULT_RUN):
        self.root = Path(root)
        self.run = run

    def __repr__(self) -> str:
        return f"ChunkStore({str(self.root)!r}, run={self.run!r})"

    # -- paths ---------------------------------------------------------------

    @property
    def out_dir(self) -> Path:
        return self.root / self.run

    @property
    def manifest_path(self) -> Path:
        return self.root / "dataset.toml"

    @property
    def truth_path(self) -> Path:
        return self.root / "truth.parquet"

    @property
    def dendrogram_path(self) -> Path:
        return self.out_dir / "dendrogram.ragd"

    @property
    def provenance_path(self) -> Path:
        return self.out_dir / "provenance.parquet"

    @property
    def report_path(self) -> Path:
        return self.out_dir / "report.jsonl"

    @property
    def run_config_path(self) -> Path:
        return self.out_dir / "run_config.toml"

    def leaf_path(self, address: ChunkAddress) -> Path:
        return self.root / "leaves" / f"{address.path}.rag"

    def output_path(self, address: ChunkAddress, suffix: str) -> Path:
        return self.out_dir / f"{address.path}.{suffix}"

    # -- manifest & truth ----------------------------------------------------

    def exists(self) -> bool:
        return self.manifest_path.is_file()

    def write_manifest(self, manifest: dict[str, Any]) -> None:
        atomic_write(self.manifest_path, tomli_w.dumps(manifest).encode())

    def read_manifest(self) -> dict[str, Any]:
        if not self.manifest_path.is_file():
            raise FileNotFoundError(f"no dataset manifest in {self.root} (run `ragglom generate` first)")
        try:
            return tomllib.loads(self.manifest_path.read_text())
        except tomllib.TOMLDecodeError as e:
            raise StoreCorruptionError(f"{self.manifest_path}: {e}") from e

    def put_truth(self, truth: pd.DataFrame) -> None:
        self._put_parquet(self.truth_path, truth)

    def get_truth(self) -> pd.DataFrame:
        if not self.truth_path.is_file():
            raise FileNotFoundError(f"no ground truth in {self.root}")
        return pd.read_parquet(self.truth_path)

    def _put_parquet(self, path: Path, df: pd.DataFrame) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
        df.to_parquet(tmp, index=False)
        os.replace(tmp, path)

    # -- leaves --------------------------------------------------------------

    def put_leaf(self, leaf: LeafInput) -> None:
        atomic_write(self.leaf_path(leaf.address), encode_leaf(leaf))

    def get_leaf(self, address: ChunkAddress) -> LeafInput:
        path = self.leaf_path(address)
        if not path.is_file():
            raise MissingDependencyError(f"leaf input {address} is missing ({path})")
        leaf = decode_leaf(path.read_bytes(), str(path))
        if leaf.address != address:
            raise StoreCorruptionError(f"{path}: header names chunk {leaf.address}")
        return leaf

    def leaf_edge_count(self, address: ChunkAddress) -> int:
        """Edge count from the header alone (no checksum pass)."""
        path = self.leaf_path(address)
        if not path.is_file():
            raise MissingDependencyError(f"leaf input {address} is missing ({path})")
        with open(path, "rb") as fh:
            head = fh.read(LEAF_HEADER.size)
        if len(head) < LEAF_HEADER.size:
            raise StoreCorruptionError(f"{path}: truncated header")
        fields = LEAF_HEADER.unpack(head)
        _check_header(fields[0], fields[1], MAGIC_LEAF, str(path))
        return fields[-1]

    def leaf_addresses(self) -> list[ChunkAddress]:
        base = self.root / "leaves" / "0"
        return sorted(ChunkAddress.parse(f"0/{p.stem}") for p in base.glob("*.rag"))

    # -- chunk outputs -------------------------------------------------------

    def is_committed(self, address: ChunkAddress) -> bool:
        """Marker present and consistent with both payload files."""
        marker = self.output_path(address, "ok")
        if not marker.is_file():
            return False
        try:
            info = json.loads(marker.read_text())
            return (
                footer_crc(self.output_path(address, "dend")) == info["dend_crc"]
                and footer_crc(self.output_path(address, "frozen")) == info["frozen_crc"]
            )
        except (OSError, ValueError, KeyError, StoreCorruptionError) as e:
            logger.warning(f"Ignoring inconsistent completion marker for {address}: {e}")
            return False

    def put_output(self, out: ChunkOutput, kind: LinkageKind) -> dict[str, Any]:
        """Commit a chunk's payloads, then its marker. Returns the marker record."""
        dend_bytes = encode_dendrogram(out.dendrogram)
        frozen_bytes = encode_frozen(kind, out.frozen_graph, out.frozen_nodes)
        atomic_write(self.output_path(out.address, "dend"), dend_bytes)
        atomic_write(self.output_path(out.address, "frozen"), frozen_bytes)
        marker = {
            "address": out.address.path,
            "merges": out.merges,
            "input_edges": out.input_edges,
            "input_nodes": out.input_nodes,
            "boundary": out.boundary,
            "frozen_edges": out.frozen_graph.edge_count(),
            "frozen_nodes": out.frozen_graph.node_count(),
            "freezes": out.freezes,
            "discards": out.discards,
            "dend_crc": FOOTER.unpack(dend_bytes[-FOOTER.size :])[0],
            "frozen_crc": FOOTER.unpack(frozen_bytes[-FOOTER.size :])[0],
        }
        atomic_write(self.output_path(out.address, "ok"), (json.dumps(marker, sort_keys=True) + "\n").encode())
        return marker

    def read_marker(self, address: ChunkAddress) -> dict[str, Any]:
        if not self.is_committed(address):
            raise MissingDependencyError(f"chunk {address} has no committed output")
        return json.loads(self.output_path(address, "ok").read_text())

    def get_output_dendrogram(self, address: ChunkAddress) -> Dendrogram:
        if not self.is_committed(address):
            raise MissingDependencyError(f"chunk {address} has no committed output")
        return read_dendrogram(self.output_path(address, "dend"))

    def get_output_frozen(self, address: ChunkAddress, kind: LinkageKind) -> tuple[RegionGraph, NodeTable]:
        if not self.is_committed(address):
            raise MissingDependencyError(f"chunk {address} has no committed output")
        path = self.output_path(address, "frozen")
        stored_kind, g, nodes = decode_frozen(path.read_bytes(), str(path))
        if stored_kind is not kind:
            raise StoreCorruptionError(f"{path}: frozen graph is {stored_kind.name}, run is {kind.name}")
        return g, nodes

    def clear_outputs(self) -> None:
        if self.out_dir.exists():
            logger.warning(f"Removing previous outputs in {self.out_dir}")
            shutil.rmtree(self.out_dir)

    # -- run-level files -----------------------------------------------------

    def put_dendrogram(self, d: Dendrogram) -> None:
        write_dendrogram(self.dendrogram_path, d)

    def get_dendrogram(self) -> Dendrogram:
        if not self.dendrogram_path.is_file():
            raise FileNotFoundError(f"no assembled dendrogram in {self.out_dir} (run `ragglom run-dist` first)")
        return read_dendrogram(self.dendrogram_path)

    def put_provenance(self, provenance: list[ChunkAddress]) -> None:
        df = pd.DataFrame(
            {
                "row": np.arange(len(provenance), dtype=np.int64),
                "level": np.asarray([a.level for a in provenance], dtype=np.int64),
                "chunk": [a.path for a in provenance],
            }
        )
        self._put_parquet(self.provenance_path, df)

    def get_provenance(self) -> pd.DataFrame:
        if not self.provenance_path.is_file():
            raise FileNotFoundError(f"no provenance in {self.out_dir} (run `ragglom run-dist` first)")
        return pd.read_parquet(self.provenance_path)

    def put_report(self, records: list[dict[str, Any]]) -> None:
        text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
        atomic_write(self.report_path, text.encode())

    def get_report(self) -> list[dict[str, Any]]:
        if not self.report_path.is_file():
            raise FileNotFoundError(f"no run report in {self.out_dir}")
        return [json.loads(line) for line in self.report_path.read_text().splitlines() if line.strip()]

    def checksums(self) -> dict[str, int]:
        """Footer CRC of every sealed file, keyed by store-relative path."""
        out = {}
        for pattern in ("leaves/**/*.rag", f"{self.run}/**/*.dend", f"{self.run}/**/*.frozen", f"{self.run}/*.ragd"):
            for path in self.root.glob(pattern):
                out[path.relative_to(self.root).as_posix()] = footer_crc(path)
        return dict(sorted(out.items()))

