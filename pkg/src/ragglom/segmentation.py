"""Flat segmentations from dendrograms, and dendrogram comparison."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from ragglom.errors import HeaderMismatchError, InputFormatError, StoreCorruptionError
from ragglom.linkage import FixedAffinity, at_least, format_affinity, value_rounded
from ragglom.rag import Dendrogram, DendrogramRow

MAX_DIFF_ROWS = 10


def flatten(
    dendrogram: Dendrogram,
    ids: Iterable[int] | np.ndarray,
    threshold: FixedAffinity | None = None,
) -> pd.DataFrame:
    """Partition of ``ids`` induced by the dendrogram's merges.

    Each supervoxel maps to the smallest id of its component; the frame
    (``segment_id``, ``label``) is sorted by segment id. With ``threshold``
    only rows whose value is at least that are applied; it may not be below
    the threshold the dendrogram was cut at.
    """
    if threshold is not None and threshold < dendrogram.threshold:
        raise InputFormatError(
            f"cannot flatten at {format_affinity(threshold)}: dendrogram was cut at "
            f"{format_affinity(dendrogram.threshold)}"
        )
    segment_ids = np.unique(np.asarray(ids if isinstance(ids, np.ndarray) else list(ids), dtype=np.int64))
    rows = [
        r for r in dendrogram.rows
        if threshold is None or at_least(dendrogram.kind, r.stat, threshold)
    ]
    survivors = np.fromiter((r.survivor for r in rows), dtype=np.int64, count=len(rows))
    absorbed = np.fromiter((r.absorbed for r in rows), dtype=np.int64, count=len(rows))
    ends = np.concatenate([survivors, absorbed])
    pos = np.searchsorted(segment_ids, ends)
    known = pos < len(segment_ids)
    known[known] = segment_ids[pos[known]] == ends[known]
    if not known.all():
        unknown = np.unique(ends[~known])[:5].tolist()
        raise StoreCorruptionError(f"dendrogram names {len(np.unique(ends[~known]))} unknown segment ids, e.g. {unknown}")

    n = len(segment_ids)
    if n == 0:
        return pd.DataFrame({"segment_id": segment_ids, "label": segment_ids})
    graph = sparse.coo_matrix(
        (np.ones(len(rows), dtype=np.int8), (pos[: len(rows)], pos[len(rows) :])), shape=(n, n)
    )
    _, component = connected_components(graph, directed=False)
    representative = np.full(component.max() + 1 if n else 0, np.iinfo(np.int64).max, dtype=np.int64)
    np.minimum.at(representative, component, segment_ids)
    return pd.DataFrame({"segment_id": segment_ids, "label": representative[component]})


def write_segmentation(df: pd.DataFrame, path: Path) -> None:
    """Write a flat segmentation as parquet (``.parquet``) or TSV (anything else)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".parquet":
        df.to_parquet(path, index=False)
    else:
        df.to_csv(path, sep="\t", index=False)


def read_segmentation(path: Path) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"segmentation file not found: {path}")
    if path.suffix == ".parquet":
        return pd.read_parquet(path)
    return pd.read_csv(path, sep="\t")


class VerifyStatus(str, Enum):
    EQUAL = "EQUAL"
    PARTITION_EQUAL = "PARTITION_EQUAL"
    DIFFERENT = "DIFFERENT"

    @property
    def exit_code(self) -> int:
        return 1 if self is VerifyStatus.DIFFERENT else 0


@dataclass
class RowDiff:
    side: str  # "a" or "b": the file that has the row the other lacks
    row: DendrogramRow

    def describe(self, kind) -> str:
        r = self.row
        return (
            f"only in {self.side}: survivor={r.survivor} absorbed={r.absorbed} "
            f"sum={r.stat.sum} count={r.stat.count} (~{format_affinity(value_rounded(kind, r.stat))})"
        )


@dataclass
class VerifyResult:
    status: VerifyStatus
    rows_a: int
    rows_b: int
    differing: int = 0
    sample: list[RowDiff] = field(default_factory=list)


def _row_key(r: DendrogramRow) -> tuple[int, int, int, int]:
    return (r.survivor, r.absorbed, r.stat.sum, r.stat.count)


def verify(a: Dendrogram, b: Dendrogram) -> VerifyResult:
    """Compare two dendrograms of the same kind and threshold.

    EQUAL: identical row multisets. PARTITION_EQUAL: different merge pairs
    but the same flat partition. DIFFERENT otherwise, including rows that
    agree on the pair but not on the stat.
    """
    if a.kind is not b.kind or a.threshold != b.threshold:
        raise HeaderMismatchError(
            f"dendrogram headers differ: {a.kind.name}@{format_affinity(a.threshold)} vs "
            f"{b.kind.name}@{format_affinity(b.threshold)}"
        )
    count_a, count_b = Counter(a.rows), Counter(b.rows)
    only_a, only_b = count_a - count_b, count_b - count_a
    if not only_a and not only_b:
        return VerifyResult(VerifyStatus.EQUAL, len(a), len(b))

    sample: list[RowDiff] = []
    for side, diff in (("a", only_a), ("b", only_b)):
        for row in sorted(diff.elements(), key=_row_key):
            if len(sample) >= MAX_DIFF_ROWS:
                break
            sample.append(RowDiff(side, row))
    differing = sum(only_a.values()) + sum(only_b.values())

    pairs_a = Counter((r.survivor, r.absorbed) for r in a.rows)
    pairs_b = Counter((r.survivor, r.absorbed) for r in b.rows)
    status = VerifyStatus.DIFFERENT
    if pairs_a != pairs_b:
        ids = {i for r in a.rows for i in (r.survivor, r.absorbed)}
        ids |= {i for r in b.rows for i in (r.survivor, r.absorbed)}
        ids_arr = np.fromiter(ids, dtype=np.int64, count=len(ids))
        if flatten(a, ids_arr).equals(flatten(b, ids_arr)):
            status = VerifyStatus.PARTITION_EQUAL
    return VerifyResult(status, len(a), len(b), differing, sample)
