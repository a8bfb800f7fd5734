"""``ragglom``: generate datasets, agglomerate them globally or chunk-wise, compare results.

    ragglom generate --dims 64,64,64 --leaf 16,16,16 --seed 7 --out ./ds
    ragglom run --store ./ds --threshold 0.3
    ragglom run-dist --store ./ds --threshold 0.3 --depth 2 --workers 4
    ragglom verify ./ds/global.ragd ./ds/out/dendrogram.ragd
    ragglom stats --store ./ds --plot merges.pdf
    ragglom flatten --store ./ds --out seg.parquet
    ragglom score --store ./ds --segmentation seg.parquet

Exit codes: 0 success (also EQUAL and PARTITION_EQUAL), 1 DIFFERENT,
2 usage or input errors, 3 store corruption. A run that gives up on a task
also exits 1.
"""

from __future__ import annotations

import json
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Annotated, Any, Literal

import cyclopts
import numpy as np
import pydantic
from loguru import logger

from ragglom import executor, stats
from ragglom.config import RunConfig, load_defaults
from ragglom.datagen import SyntheticSpec, generate, score_against_truth
from ragglom.errors import HeaderMismatchError, InputFormatError, RagglomError, SpecError, StoreCorruptionError
from ragglom.linkage import parse_threshold
from ragglom.octree import ChunkAddress
from ragglom.segmentation import VerifyStatus, flatten, read_segmentation, verify, write_segmentation
from ragglom.store import DEFAULT_RUN, ChunkStore, read_dendrogram, write_dendrogram

EXIT_OK = 0
EXIT_DIFFERENT = 1
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_CORRUPT = 3

app = cyclopts.App(
    name="ragglom",
    help="Exact hierarchical agglomeration of region adjacency graphs, globally or over an octree of chunks.",
)

LogOption = Annotated[Path | None, cyclopts.Parameter(name=["--log"], help="Also write the log to this file.")]
StoreOption = Annotated[
    Path | None, cyclopts.Parameter(name=["--store"], help="Dataset store (default: $RAGGLOM_STORE).")
]
JsonOption = Annotated[bool, cyclopts.Parameter(name=["--json"], help="Emit one JSON record per line.")]


def _setup_file_logging(log_path: Path | None) -> None:
    if log_path is None:
        return
    log_path.parent.mkdir(parents=True, exist_ok=True)
    logger.add(
        log_path,
        format="{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {message}",
        level="INFO",
        mode="w",
    )
    logger.info(f"Logging to {log_path}")


def _triple(text: str, flag: str) -> tuple[int, int, int]:
    parts = [p.strip() for p in text.split(",")]
    try:
        values = tuple(int(p) for p in parts)
    except ValueError:
        raise InputFormatError(f"{flag} expects three comma-separated integers, got {text!r}") from None
    if len(values) != 3:
        raise InputFormatError(f"{flag} expects three comma-separated integers, got {text!r}")
    return values  # type: ignore[return-value]


def _open_store(store: Path | None, run: str = DEFAULT_RUN) -> ChunkStore:
    root = store if store is not None else RunConfig.from_defaults().store
    chunk_store = ChunkStore(root, run)
    if not chunk_store.exists():
        raise FileNotFoundError(f"no dataset store at {root} (run `ragglom generate --out {root}` first)")
    return chunk_store


def _segment_ids(store: ChunkStore) -> np.ndarray:
    """All supervoxel ids of the dataset: ground truth when present, else the leaf node tables."""
    if store.truth_path.is_file():
        return store.get_truth()["segment_id"].to_numpy(np.int64)
    ids = [store.get_leaf(address).nodes.ids for address in store.leaf_addresses()]
    return np.unique(np.concatenate(ids)).astype(np.int64) if ids else np.zeros(0, dtype=np.int64)


def _emit(record: dict[str, Any]) -> None:
    print(json.dumps(record, default=str))


@app.command(name="generate")
def generate_cmd(
    *,
    out: Annotated[Path, cyclopts.Parameter(name=["--out"])],
    dims: Annotated[str, cyclopts.Parameter(name=["--dims"], help="Voxel lattice size x,y,z.")] = "64,64,64",
    leaf: Annotated[str, cyclopts.Parameter(name=["--leaf"], help="Leaf chunk size x,y,z.")] = "16,16,16",
    seed: int | None = None,
    box_min: Annotated[int | None, cyclopts.Parameter(name=["--box-min"])] = None,
    box_max: Annotated[int | None, cyclopts.Parameter(name=["--box-max"])] = None,
    align: Annotated[bool | None, cyclopts.Parameter(name=["--align"])] = None,
    planting: Annotated[Literal["blocks", "leaf_interior"] | None, cyclopts.Parameter(name=["--planting"])] = None,
    object_boxes: Annotated[int | None, cyclopts.Parameter(name=["--object-boxes"])] = None,
    log: LogOption = None,
) -> int:
    """Write a synthetic dataset (leaf inputs, ground truth, manifest) into ``--out``."""
    _setup_file_logging(log)
    values = dict(load_defaults()["generate"])
    values["dims"] = _triple(dims, "--dims")
    values["leaf"] = _triple(leaf, "--leaf")
    overrides = {
        "seed": seed,
        "box_min": box_min,
        "box_max": box_max,
        "align_boxes_to_leaves": align,
        "planting": planting,
        "object_boxes": object_boxes,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    spec = SyntheticSpec.model_validate(values)
    result = generate(spec, ChunkStore(out))
    print(
        f"|V|={result.segments} |E|={result.edges} leaves={result.leaves} "
        f"objects={result.objects} tie_free={str(result.tie_free).lower()}"
    )
    return EXIT_OK


@app.command
def run(
    *,
    store: StoreOption = None,
    linkage: Annotated[Literal["mean", "max"] | None, cyclopts.Parameter(name=["--linkage"])] = None,
    threshold: Annotated[str | None, cyclopts.Parameter(name=["--threshold", "-t"])] = None,
    output: Annotated[Path | None, cyclopts.Parameter(name=["--output", "-o"])] = None,
    audit_ties: Annotated[
        bool,
        cyclopts.Parameter(name=["--audit-ties"], help="Fail (exit 2) when a merge is decided by tied affinities."),
    ] = False,
    json_output: JsonOption = False,
    log: LogOption = None,
) -> int:
    """Agglomerate the whole dataset as one graph (the reference result)."""
    _setup_file_logging(log)
    config = RunConfig.from_defaults(store=store, linkage=linkage, threshold=threshold)
    chunk_store = _open_store(config.store)
    result = executor.run_global(chunk_store, config, audit_ties=audit_ties)
    path = output if output is not None else chunk_store.root / "global.ragd"
    write_dendrogram(path, result.dendrogram)
    if json_output:
        _emit({"record": "run", "mode": "global", "dendrogram": str(path), "nodes": result.nodes,
               "edges": result.edges, "merges": len(result.dendrogram), "wall_time": round(result.wall_time, 3),
               "config": config.to_report_dict()})
    else:
        print(f"{len(result.dendrogram)} merges -> {path} ({result.wall_time:.2f}s)")
    return EXIT_OK


@app.command(name="run-dist")
def run_dist(
    *,
    store: StoreOption = None,
    linkage: Annotated[Literal["mean", "max"] | None, cyclopts.Parameter(name=["--linkage"])] = None,
    threshold: Annotated[str | None, cyclopts.Parameter(name=["--threshold", "-t"])] = None,
    depth: Annotated[
        int | None,
        cyclopts.Parameter(name=["--depth"], help="Executed octree levels, root included (default: all)."),
    ] = None,
    leaf_threshold: Annotated[
        int | None,
        cyclopts.Parameter(
            name=["--leaf-threshold"],
            help="A chunk whose subtree holds at most this many leaf edges runs as one task. "
            "With the default (4e6) small datasets run as a single task whatever --depth says; "
            "use 0 to keep every level.",
        ),
    ] = None,
    workers: Annotated[int | None, cyclopts.Parameter(name=["--workers", "-j"])] = None,
    executor_mode: Annotated[Literal["thread", "process"] | None, cyclopts.Parameter(name=["--executor"])] = None,
    max_retries: Annotated[int | None, cyclopts.Parameter(name=["--max-retries"])] = None,
    run_name: Annotated[str, cyclopts.Parameter(name=["--run-name"])] = DEFAULT_RUN,
    plan_only: Annotated[bool, cyclopts.Parameter(name=["--plan-only"])] = False,
    json_output: JsonOption = False,
    log: LogOption = None,
) -> int:
    """Agglomerate chunk-wise over the octree and assemble the global dendrogram.

    Flags left unset fall back to the run's stored ``run_config.toml`` (so an
    interrupted run resumes with the same parameters), then to the packaged
    defaults. ``--plan-only`` writes the configuration and exits; external
    schedulers then run the tasks with ``ragglom task``.
    """
    _setup_file_logging(log)
    chunk_store = _open_store(store, run_name)
    flags = {
        "linkage": linkage,
        "threshold": threshold,
        "depth": depth,
        "leaf_threshold": leaf_threshold,
        "workers": workers,
        "executor": executor_mode,
        "max_retries": max_retries,
        "store": chunk_store.root,
    }
    if chunk_store.run_config_path.is_file():
        stored = RunConfig.from_toml(chunk_store.run_config_path).model_dump()
        stored.update({k: v for k, v in flags.items() if v is not None})
        config = RunConfig.model_validate(stored)
    else:
        config = RunConfig.from_defaults(**flags)

    if plan_only:
        config = executor.prepare_run(chunk_store, config)
        plan = executor.build_plan(chunk_store, config)
        logger.info(f"Planned {len(plan)} tasks (levels {plan.deepest_level}..{plan.layout.top_level})")
        print(f"{len(plan)} tasks, run configuration in {chunk_store.run_config_path}")
        return EXIT_OK

    report = executor.run_distributed(chunk_store, config)
    stats.log_run_summary(report, chunk_store.dendrogram_path)
    if json_output:
        for record in report.records():
            _emit(record)
    else:
        print(stats.render_text(stats.level_table(report), report))
    return EXIT_OK


@app.command
def task(
    *,
    address: Annotated[str, cyclopts.Parameter(name=["--address"], help="Chunk address LEVEL/x_y_z.")],
    store: StoreOption = None,
    run_name: Annotated[str, cyclopts.Parameter(name=["--run-name"])] = DEFAULT_RUN,
    log: LogOption = None,
) -> int:
    """Run a single chunk task of a planned run (for external schedulers)."""
    _setup_file_logging(log)
    chunk_store = _open_store(store, run_name)
    try:
        executor.run_task(chunk_store, ChunkAddress.parse(address))
    except KeyError as e:
        raise InputFormatError(e.args[0]) from None
    return EXIT_OK


@app.command(name="flatten")
def flatten_cmd(
    *,
    out: Annotated[Path, cyclopts.Parameter(name=["--out"], help="Output .parquet or .tsv.")],
    store: StoreOption = None,
    dendrogram: Annotated[Path | None, cyclopts.Parameter(name=["--dendrogram"])] = None,
    threshold: Annotated[str | None, cyclopts.Parameter(name=["--threshold", "-t"])] = None,
    run_name: Annotated[str, cyclopts.Parameter(name=["--run-name"])] = DEFAULT_RUN,
    log: LogOption = None,
) -> int:
    """Cut a dendrogram into a flat segmentation of every supervoxel of the store.

    Defaults to the distributed run's dendrogram; each supervoxel maps to the
    smallest id of its segment.
    """
    _setup_file_logging(log)
    chunk_store = _open_store(store, run_name)
    dend = read_dendrogram(dendrogram) if dendrogram is not None else chunk_store.get_dendrogram()
    df = flatten(dend, _segment_ids(chunk_store), parse_threshold(threshold) if threshold is not None else None)
    write_segmentation(df, out)
    print(f"{len(df)} supervoxels in {df['label'].nunique()} segments -> {out}")
    return EXIT_OK


@app.command(name="verify")
def verify_cmd(
    a: Path,
    b: Path,
    /,
    *,
    json_output: JsonOption = False,
    log: LogOption = None,
) -> int:
    """Compare two dendrogram files: EQUAL, PARTITION_EQUAL or DIFFERENT."""
    _setup_file_logging(log)
    dend_a, dend_b = read_dendrogram(a), read_dendrogram(b)
    result = verify(dend_a, dend_b)
    if json_output:
        _emit({"record": "verify", "status": result.status.value, "rows_a": result.rows_a,
               "rows_b": result.rows_b, "differing": result.differing})
        for diff in result.sample:
            _emit({"record": "diff", "side": diff.side, "survivor": diff.row.survivor,
                   "absorbed": diff.row.absorbed, "sum": diff.row.stat.sum, "count": diff.row.stat.count})
    else:
        print(f"{result.status.value} ({result.rows_a} vs {result.rows_b} rows)")
        for diff in result.sample:
            print(f"  {diff.describe(dend_a.kind)}")
        if result.differing > len(result.sample):
            print(f"  ... {result.differing - len(result.sample)} more")
    if result.status is VerifyStatus.PARTITION_EQUAL:
        logger.warning("Merge trees differ but the flat partitions agree")
    return result.status.exit_code


@app.command(name="stats")
def stats_cmd(
    *,
    store: StoreOption = None,
    run_name: Annotated[str, cyclopts.Parameter(name=["--run-name"])] = DEFAULT_RUN,
    plot: Annotated[Path | None, cyclopts.Parameter(name=["--plot"])] = None,
    json_output: JsonOption = False,
    log: LogOption = None,
) -> int:
    """Per-level merge counts, fractions, graph sizes and timings of a finished run."""
    _setup_file_logging(log)
    chunk_store = _open_store(store, run_name)
    report = executor.RunReport.from_records(chunk_store.get_report())
    table = stats.level_table(report, chunk_store.get_provenance())
    if json_output:
        print(stats.render_json_lines(table))
    else:
        print(stats.render_text(table, report))
    if plot is not None:
        stats.plot_merge_fractions(table, plot)
        logger.info(f"Merge-fraction chart written to {plot}")
    return EXIT_OK


@app.command
def score(
    *,
    segmentation: Annotated[Path, cyclopts.Parameter(name=["--segmentation"])],
    store: StoreOption = None,
    json_output: JsonOption = False,
    log: LogOption = None,
) -> int:
    """Score a flat segmentation against the store's planted objects."""
    _setup_file_logging(log)
    chunk_store = _open_store(store)
    scores = score_against_truth(read_segmentation(segmentation), chunk_store.get_truth())
    record = {**asdict(scores), "vi": scores.vi}
    if json_output:
        _emit({"record": "score", **record})
    else:
        for key, value in record.items():
            print(f"{key:>20}: {value:.4f}" if isinstance(value, float) else f"{key:>20}: {value}")
    return EXIT_OK


def main(tokens: list[str] | None = None) -> int:
    """Entry point of the ``ragglom`` script; maps failures to the documented exit codes."""
    try:
        result = app(tokens, exit_on_error=False)
    except cyclopts.CycloptsError:
        return EXIT_USAGE
    except StoreCorruptionError as e:
        logger.error(f"Store corruption: {e}")
        return EXIT_CORRUPT
    except (InputFormatError, SpecError, HeaderMismatchError, pydantic.ValidationError, FileNotFoundError) as e:
        logger.error(str(e))
        return EXIT_USAGE
    except RagglomError as e:
        logger.error(str(e))
        return EXIT_FAILED
    return result if isinstance(result, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
