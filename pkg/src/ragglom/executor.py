"""Dependency-respecting execution of the chunk task DAG over a store.

Each octree task is a pure function of the store: it reads its level-0
leaves (effective leaf) or its children's committed frozen graphs, runs the
chunk agglomeration, and commits ``.dend`` + ``.frozen`` followed by the
``.ok`` marker. The scheduler here is the only component that changes task
states. Tasks whose marker is already valid are skipped, which is what makes
an interrupted run resumable.

Worker modes: inline (``workers == 1``), thread pool, or process pool. A
failed task is retried up to ``max_retries`` times; store corruption is
fatal immediately.
"""

from __future__ import annotations

import resource
import sys
import time
from collections import defaultdict
from concurrent.futures import FIRST_COMPLETED, Executor, Future, ProcessPoolExecutor, ThreadPoolExecutor, wait
from concurrent.futures.process import BrokenProcessPool
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Callable

from loguru import logger

from ragglom.agglomerate import TieAudit, agglomerate_generic
from ragglom.config import RunConfig
from ragglom.errors import RagglomError, StoreCorruptionError, TaskPoisonedError
from ragglom.linkage import FixedAffinity, LinkageKind, format_affinity
from ragglom.octree import (
    ChunkAddress,
    OctreeLayout,
    PlanNode,
    TaskPlan,
    combine_children,
    load_leaves,
    merge_level_histogram,
    solve_chunk,
)
from ragglom.rag import Dendrogram
from ragglom.store import ChunkStore

# Rough resident bytes per edge of a working graph (edge dict + two adjacency
# entries + heap entry). Only used for the memory prediction in the report.
BYTES_PER_EDGE = 420


class TaskState(Enum):
    PENDING = "pending"
    READY = "ready"
    RUNNING = "running"
    DONE = "done"
    FAILED = "failed"


class TaskGraph:
    """Task states keyed by ChunkAddress; a task is ready iff all children are done."""

    def __init__(self, plan: TaskPlan):
        self.plan = plan
        self.state: dict[ChunkAddress, TaskState] = {a: TaskState.PENDING for a in plan.nodes}
        self.resumed: set[ChunkAddress] = set()

    def __len__(self) -> int:
        return len(self.state)

    def _children_done(self, address: ChunkAddress) -> bool:
        return all(self.state[c] is TaskState.DONE for c in self.plan[address].children)

    def ready(self) -> list[ChunkAddress]:
        """Pending tasks whose children are done, promoted to READY, in address order."""
        out = []
        for address, state in sorted(self.state.items()):
            if state in (TaskState.PENDING, TaskState.READY) and self._children_done(address):
                self.state[address] = TaskState.READY
                out.append(address)
        return out

    def start(self, address: ChunkAddress) -> None:
        if self.state[address] is not TaskState.READY:
            raise RuntimeError(f"task {address} started in state {self.state[address].value}")
        self.state[address] = TaskState.RUNNING

    def finish(self, address: ChunkAddress) -> None:
        self.state[address] = TaskState.DONE

    def mark_resumed(self, address: ChunkAddress) -> None:
        self.state[address] = TaskState.DONE
        self.resumed.add(address)

    def retry(self, address: ChunkAddress) -> None:
        self.state[address] = TaskState.PENDING

    def fail(self, address: ChunkAddress) -> None:
        self.state[address] = TaskState.FAILED

    def finished(self) -> bool:
        return all(s is TaskState.DONE for s in self.state.values())

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = defaultdict(int)
        for s in self.state.values():
            out[s.value] += 1
        return dict(out)


@dataclass(frozen=True)
class TaskSpec:
    """Everything a worker needs to run one chunk task; picklable."""

    store_root: str
    run: str
    address: ChunkAddress
    children: tuple[ChunkAddress, ...]
    leaves: tuple[ChunkAddress, ...]
    dims: tuple[int, int, int]
    leaf_dims: tuple[int, int, int]
    kind: int
    threshold: FixedAffinity


@dataclass
class TaskOutcome:
    address: ChunkAddress
    marker: dict[str, Any]
    wall_time: float
    peak_rss_mb: float


def peak_rss_mb() -> float:
    rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    # ru_maxrss is KiB on Linux, bytes on macOS
    return rss / (1024 * 1024) if sys.platform == "darwin" else rss / 1024


def execute_chunk_task(spec: TaskSpec) -> TaskOutcome:
    """Run one chunk task against the store and commit its outputs."""
    start = time.perf_counter()
    store = ChunkStore(spec.store_root, spec.run)
    kind = LinkageKind(spec.kind)
    layout = OctreeLayout(spec.dims, spec.leaf_dims)
    boundary = None
    if spec.children:
        g, extents = combine_children((store.get_output_frozen(c, kind) for c in spec.children), kind)
    else:
        loaded = load_leaves(store, spec.leaves, kind)
        g, extents, boundary = loaded.graph, loaded.extents, loaded.boundary_for(spec.address)
    out = solve_chunk(layout.descriptor(spec.address), g, extents, kind, spec.threshold, boundary)
    marker = store.put_output(out, kind)
    return TaskOutcome(spec.address, marker, time.perf_counter() - start, peak_rss_mb())


TaskRunner = Callable[[TaskSpec], TaskOutcome]


def build_plan(store: ChunkStore, config: RunConfig) -> TaskPlan:
    """The task plan for ``config`` over the dataset in ``store``."""
    manifest = store.read_manifest()
    layout = OctreeLayout(tuple(manifest["dims"]), tuple(manifest["leaf"]))
    leaf_edges = {a: store.leaf_edge_count(a) for a in layout.addresses(0)}
    return TaskPlan(layout, depth=config.depth, leaf_threshold=config.leaf_threshold, leaf_edges=leaf_edges)


def task_spec(store: ChunkStore, plan: TaskPlan, node: PlanNode, config: RunConfig) -> TaskSpec:
    return TaskSpec(
        store_root=str(store.root),
        run=store.run,
        address=node.address,
        children=node.children,
        leaves=node.leaves,
        dims=plan.layout.dims,
        leaf_dims=plan.layout.leaf_dims,
        kind=int(config.kind),
        threshold=config.threshold_fixed,
    )


@dataclass
class LevelReport:
    level: int
    tasks: int
    merges: int
    fraction: float
    input_edges_peak: int
    input_edges_total: int
    frozen_edges: int
    wall_time: float
    peak_rss_mb: float
    predicted_memory_mb: float
    resumed: int = 0


@dataclass
class RunReport:
    """Summary of one distributed run; ``levels`` runs leaf level first."""

    config: dict[str, Any]
    tasks: int
    merges: int
    wall_time: float
    resumed: int
    levels: list[LevelReport] = field(default_factory=list)

    def histogram(self) -> dict[int, int]:
        return {lv.level: lv.merges for lv in self.levels}

    def records(self) -> list[dict[str, Any]]:
        """One run record followed by one record per level (the report.jsonl lines)."""
        head = {"record": "run", "tasks": self.tasks, "merges": self.merges,
                "wall_time": round(self.wall_time, 3), "resumed": self.resumed, "config": self.config}
        return [head] + [{"record": "level", **asdict(lv)} for lv in self.levels]

    @classmethod
    def from_records(cls, records: list[dict[str, Any]]) -> "RunReport":
        head = next(r for r in records if r.get("record") == "run")
        levels = [
            LevelReport(**{k: v for k, v in r.items() if k != "record"})
            for r in records
            if r.get("record") == "level"
        ]
        return cls(head["config"], head["tasks"], head["merges"], head["wall_time"], head["resumed"], levels)


def _level_reports(
    store: ChunkStore,
    plan: TaskPlan,
    histogram: dict[int, int],
    outcomes: dict[ChunkAddress, TaskOutcome],
    resumed: set[ChunkAddress],
) -> list[LevelReport]:
    total = sum(histogram.values())
    by_level: dict[int, list[ChunkAddress]] = defaultdict(list)
    for address in plan.nodes:
        by_level[address.level].append(address)
    levels = []
    for level in sorted(by_level):
        markers = [store.read_marker(a) for a in by_level[level]]
        ran = [outcomes[a] for a in by_level[level] if a in outcomes]
        peak = max(m["input_edges"] for m in markers)
        merges = histogram.get(level, 0)
        levels.append(
            LevelReport(
                level=level,
                tasks=len(markers),
                merges=merges,
                fraction=round(merges / total, 6) if total else 0.0,
                input_edges_peak=peak,
                input_edges_total=sum(m["input_edges"] for m in markers),
                frozen_edges=sum(m["frozen_edges"] for m in markers),
                wall_time=round(sum(o.wall_time for o in ran), 3),
                peak_rss_mb=round(max((o.peak_rss_mb for o in ran), default=0.0), 1),
                predicted_memory_mb=round(peak * BYTES_PER_EDGE / 2**20, 1),
                resumed=sum(1 for a in by_level[level] if a in resumed),
            )
        )
    return levels


def assemble(
    store: ChunkStore, plan: TaskPlan, kind: LinkageKind, threshold: FixedAffinity
) -> tuple[Dendrogram, list[ChunkAddress]]:
    """Concatenate committed fragments post-order and commit the global outputs.

    Raises RagglomError when the root left a non-empty frozen graph.
    """
    root_marker = store.read_marker(plan.layout.root)
    if root_marker["frozen_edges"]:
        raise RagglomError(f"root chunk left {root_marker['frozen_edges']} frozen edges")
    dendrogram = Dendrogram(kind, threshold)
    provenance: list[ChunkAddress] = []
    for node in plan.post_order():
        part = store.get_output_dendrogram(node.address)
        dendrogram.extend(part)
        provenance.extend([node.address] * len(part))
    store.put_dendrogram(dendrogram)
    store.put_provenance(provenance)
    return dendrogram, provenance


def _make_pool(mode: str, workers: int) -> Executor | None:
    if workers == 1:
        return None
    if mode == "process":
        return ProcessPoolExecutor(max_workers=workers)
    return ThreadPoolExecutor(max_workers=workers, thread_name_prefix="ragglom")


def prepare_run(store: ChunkStore, config: RunConfig) -> RunConfig:
    """Record the dataset seed in ``config`` and write it as the run's configuration.

    Outputs of a stored run with other algorithm parameters, or made on a
    dataset generated from another seed, are discarded first.
    """
    spec = store.read_manifest().get("spec", {})
    if "seed" in spec:
        config = config.model_copy(update={"seed": int(spec["seed"])})
    if store.run_config_path.is_file():
        previous = RunConfig.from_toml(store.run_config_path)
        if not previous.same_algorithm(config):
            logger.info(f"Stored run in {store.out_dir} used other parameters; clearing its outputs")
            store.clear_outputs()
    config.to_toml(store.run_config_path)
    return config


def run_distributed(
    store: ChunkStore,
    config: RunConfig,
    *,
    runner: TaskRunner = execute_chunk_task,
) -> RunReport:
    """Execute the octree task DAG over ``store`` and assemble the global outputs.

    Already committed tasks are skipped. A stored run with different
    algorithm parameters is discarded first.
    """
    start = time.perf_counter()
    config = prepare_run(store, config)
    kind, threshold = config.kind, config.threshold_fixed

    plan = build_plan(store, config)
    graph = TaskGraph(plan)
    for address in plan.nodes:
        if store.is_committed(address):
            graph.mark_resumed(address)
    logger.info(
        f"Octree: top level {plan.layout.top_level}, {len(plan)} tasks "
        f"({len(graph.resumed)} already committed), workers={config.workers} ({config.executor})"
    )

    outcomes: dict[ChunkAddress, TaskOutcome] = {}
    attempts: dict[ChunkAddress, list[str]] = defaultdict(list)

    def on_success(outcome: TaskOutcome) -> None:
        graph.finish(outcome.address)
        outcomes[outcome.address] = outcome
        m = outcome.marker
        logger.info(
            f"Task {outcome.address} done: {m['input_edges']:,} edges in, {m['merges']:,} merges, "
            f"{m['frozen_edges']:,} frozen ({outcome.wall_time:.2f}s)"
        )

    def on_failure(address: ChunkAddress, error: BaseException) -> None:
        if isinstance(error, StoreCorruptionError):
            graph.fail(address)
            logger.error(f"Task {address}: {error}")
            raise error
        attempts[address].append(f"{type(error).__name__}: {error}")
        if len(attempts[address]) > config.max_retries:
            graph.fail(address)
            logger.error(f"Task {address} failed {len(attempts[address])} times, aborting the run")
            raise TaskPoisonedError(address.path, attempts[address]) from error
        logger.warning(
            f"Task {address} failed (attempt {len(attempts[address])}/{config.max_retries + 1}): {error}; retrying"
        )
        graph.retry(address)

    pool = _make_pool(config.executor, config.workers)
    running: dict[Future, ChunkAddress] = {}
    try:
        while not graph.finished():
            ready = graph.ready()
            if pool is None:
                if not ready:
                    raise RuntimeError(f"scheduler stalled with states {graph.counts()}")
                address = ready[0]
                graph.start(address)
                try:
                    outcome = runner(task_spec(store, plan, plan[address], config))
                except Exception as e:
                    on_failure(address, e)
                else:
                    on_success(outcome)
                continue

            for address in ready:
                graph.start(address)
                running[pool.submit(runner, task_spec(store, plan, plan[address], config))] = address
            if not running:
                raise RuntimeError(f"scheduler stalled with states {graph.counts()}")
            done, _ = wait(running, return_when=FIRST_COMPLETED)
            broken = False
            for future in done:
                address = running.pop(future)
                try:
                    outcome = future.result()
                except BrokenProcessPool as e:
                    broken = True
                    on_failure(address, e)
                except Exception as e:
                    on_failure(address, e)
                else:
                    on_success(outcome)
            if broken:
                logger.warning("Worker pool broke; rebuilding it and resubmitting in-flight tasks")
                for address in running.values():
                    graph.retry(address)
                running.clear()
                pool.shutdown(wait=False, cancel_futures=True)
                pool = _make_pool(config.executor, config.workers)
    finally:
        if pool is not None:
            pool.shutdown(wait=True, cancel_futures=True)

    dendrogram, provenance = assemble(store, plan, kind, threshold)
    histogram = merge_level_histogram(dendrogram, provenance)
    report = RunReport(
        config=config.to_report_dict(),
        tasks=len(plan),
        merges=len(dendrogram),
        wall_time=time.perf_counter() - start,
        resumed=len(graph.resumed),
        levels=_level_reports(store, plan, histogram, outcomes, graph.resumed),
    )
    store.put_report(report.records())
    return report


@dataclass
class GlobalRunResult:
    dendrogram: Dendrogram
    nodes: int
    edges: int
    wall_time: float


def run_global(store: ChunkStore, config: RunConfig, *, audit_ties: bool = False) -> GlobalRunResult:
    """Load every leaf into one graph and run the generic agglomeration.

    With ``audit_ties`` every merge is checked by :class:`TieAudit`; a merge
    decided by a tie raises SpecError, since the dataset then does not
    guarantee a chunking-independent result.
    """
    start = time.perf_counter()
    kind, threshold = config.kind, config.threshold_fixed
    g = load_leaves(store, store.leaf_addresses(), kind).graph
    nodes, edges = g.node_count(), g.edge_count()
    g.check_sparsity()
    logger.info(f"Global run: {nodes:,} segments, {edges:,} edges, {kind.name} linkage, T={format_affinity(threshold)}")
    audit = TieAudit(kind) if audit_ties else None
    result = agglomerate_generic(g, kind, threshold, on_merge=audit)
    if audit is not None:
        audit.check()
        logger.info(f"Tie audit: {audit.merges:,} merges, none decided by a tie")
    return GlobalRunResult(result.dendrogram, nodes, edges, time.perf_counter() - start)


def run_task(store: ChunkStore, address: ChunkAddress) -> TaskOutcome | None:
    """Run one task of the stored run (external schedulers). None when already committed."""
    if not store.run_config_path.is_file():
        raise FileNotFoundError(f"no run configuration in {store.out_dir} (run `ragglom run-dist --plan-only` first)")
    config = RunConfig.from_toml(store.run_config_path)
    plan = build_plan(store, config)
    if address not in plan.nodes:
        raise KeyError(f"chunk {address} is not a task of this run")
    if store.is_committed(address):
        logger.info(f"Task {address} already committed")
        return None
    outcome = execute_chunk_task(task_spec(store, plan, plan[address], config))
    logger.info(f"Task {address} done: {outcome.marker['merges']:,} merges ({outcome.wall_time:.2f}s)")
    return outcome
