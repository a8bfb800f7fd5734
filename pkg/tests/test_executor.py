"""Tests for the task DAG scheduler, resume, retries and report assembly."""

import pytest

from ragglom.config import RunConfig
from ragglom.datagen import SyntheticSpec, generate
from ragglom.errors import StoreCorruptionError, TaskPoisonedError
from ragglom.executor import (
    RunReport,
    TaskGraph,
    assemble,
    build_plan,
    execute_chunk_task,
    run_distributed,
    run_global,
    run_task,
)
from ragglom.octree import ChunkAddress
from ragglom.segmentation import VerifyStatus, verify
from ragglom.store import ChunkStore, read_dendrogram
from tests.helpers import SMALL_SPEC


def _config(**kw) -> RunConfig:
    kw.setdefault("leaf_threshold", 0)
    return RunConfig(**kw)


def _run_dendrogram(store: ChunkStore):
    return read_dendrogram(store.dendrogram_path)


def _run_checksums(store: ChunkStore) -> dict[str, int]:
    """CRCs of the run's sealed outputs, keyed by path below the run directory."""
    prefix = f"{store.run}/"
    return {k[len(prefix):]: v for k, v in store.checksums().items() if k.startswith(prefix)}


class TestTaskGraph:
    def test_leaves_are_ready_first(self, dataset):
        plan = build_plan(dataset, _config())
        graph = TaskGraph(plan)
        ready = graph.ready()
        assert ready == sorted(a for a in plan.nodes if a.level == 0)
        graph.start(ready[0])
        with pytest.raises(RuntimeError):
            graph.start(ready[0])

    def test_parent_waits_for_all_children(self, dataset):
        plan = build_plan(dataset, _config())
        graph = TaskGraph(plan)
        parent = ChunkAddress(1, 0, 0, 0)
        children = plan[parent].children
        for child in children[:-1]:
            graph.ready()
            graph.start(child)
            graph.finish(child)
        assert parent not in graph.ready()
        graph.start(children[-1])
        graph.finish(children[-1])
        assert parent in graph.ready()


class TestRunDistributed:
    def test_matches_global_run(self, dataset):
        config = _config()
        report = run_distributed(dataset, config)
        global_run = run_global(dataset, config)
        result = verify(_run_dendrogram(dataset), global_run.dendrogram)
        assert result.status is VerifyStatus.EQUAL
        assert report.merges == len(global_run.dendrogram) > 0
        assert report.tasks == len(build_plan(dataset, config))

    def test_report_levels(self, dataset):
        report = run_distributed(dataset, _config())
        assert [lv.level for lv in report.levels] == [0, 1, 2]
        assert sum(report.histogram().values()) == report.merges
        assert sum(lv.fraction for lv in report.levels) == pytest.approx(1.0, abs=1e-5)
        assert report.levels[0].tasks == 64
        assert report.levels[-1].frozen_edges == 0
        back = RunReport.from_records(dataset.get_report())
        assert back.histogram() == report.histogram()
        assert back.config["threshold"] == "0.3"
        assert back.config["threshold_fixed"] == 300_000

    def test_provenance_matches_histogram(self, dataset):
        report = run_distributed(dataset, _config())
        prov = dataset.get_provenance()
        assert len(prov) == report.merges
        assert prov.groupby("level").size().to_dict() == {k: v for k, v in report.histogram().items() if v}

    def test_worker_count_does_not_change_output(self, dataset):
        """One worker and an eight-thread pool commit byte-identical outputs."""
        serial = ChunkStore(dataset.root, "serial")
        pooled = ChunkStore(dataset.root, "pooled")
        run_distributed(serial, _config(workers=1))
        run_distributed(pooled, _config(workers=8))
        assert serial.dendrogram_path.read_bytes() == pooled.dendrogram_path.read_bytes()
        assert _run_checksums(serial) == _run_checksums(pooled)
        assert len(_run_checksums(serial)) == 2 * len(build_plan(dataset, _config())) + 1

    def test_depth_limit_matches_full_octree(self, dataset):
        full = ChunkStore(dataset.root, "full")
        shallow = ChunkStore(dataset.root, "shallow")
        run_distributed(full, _config())
        report = run_distributed(shallow, _config(depth=2))
        assert report.tasks == 9
        assert verify(_run_dendrogram(full), _run_dendrogram(shallow)).status is VerifyStatus.EQUAL

    @pytest.mark.slow
    def test_process_pool(self, dataset):
        serial = ChunkStore(dataset.root, "serial")
        pooled = ChunkStore(dataset.root, "procs")
        run_distributed(serial, _config())
        run_distributed(pooled, _config(workers=2, executor="process"))
        assert serial.dendrogram_path.read_bytes() == pooled.dendrogram_path.read_bytes()


class TestFailures:
    def test_kill_and_resume(self, dataset):
        """A run that dies at the root resumes with every other task skipped."""
        config = _config(max_retries=0)
        plan = build_plan(dataset, config)
        root = plan.layout.root

        def dies_at_root(spec):
            if spec.address == root:
                raise OSError("worker killed")
            return execute_chunk_task(spec)

        with pytest.raises(TaskPoisonedError) as info:
            run_distributed(dataset, config, runner=dies_at_root)
        assert info.value.task == root.path
        assert not dataset.is_committed(root)
        assert not dataset.dendrogram_path.exists()

        report = run_distributed(dataset, config)
        assert report.resumed == len(plan) - 1
        fresh = ChunkStore(dataset.root, "fresh")
        run_distributed(fresh, config)
        assert dataset.dendrogram_path.read_bytes() == fresh.dendrogram_path.read_bytes()
        assert _run_checksums(dataset) == _run_checksums(fresh)

    def test_transient_failure_is_retried(self, dataset):
        failed = set()

        def flaky(spec):
            if spec.address.level == 1 and spec.address not in failed:
                failed.add(spec.address)
                raise TimeoutError("lost worker")
            return execute_chunk_task(spec)

        report = run_distributed(dataset, _config(max_retries=1), runner=flaky)
        assert len(failed) == 8
        assert report.resumed == 0
        assert dataset.dendrogram_path.is_file()

    def test_retry_budget_exhausted(self, dataset):
        calls = []

        def always_fails(spec):
            calls.append(spec.address)
            raise OSError("disk full")

        with pytest.raises(TaskPoisonedError) as info:
            run_distributed(dataset, _config(max_retries=2), runner=always_fails)
        assert len(info.value.attempts) == 3
        assert calls == [calls[0]] * 3

    def test_corruption_is_fatal(self, dataset):
        calls = []

        def corrupt(spec):
            calls.append(spec.address)
            raise StoreCorruptionError("checksum mismatch")

        with pytest.raises(StoreCorruptionError):
            run_distributed(dataset, _config(max_retries=5), runner=corrupt)
        assert len(calls) == 1

    def test_changed_threshold_discards_outputs(self, dataset):
        run_distributed(dataset, _config(threshold="0.3"))
        report = run_distributed(dataset, _config(threshold="0.5"))
        assert report.resumed == 0
        assert _run_dendrogram(dataset).threshold == 500_000

    def test_changed_workers_keeps_outputs(self, dataset):
        first = run_distributed(dataset, _config())
        again = run_distributed(dataset, _config(workers=2))
        assert again.resumed == first.tasks

    def test_run_records_dataset_seed(self, dataset):
        run_distributed(dataset, _config())
        stored = RunConfig.from_toml(dataset.run_config_path)
        assert stored.seed == dataset.read_manifest()["spec"]["seed"] == SMALL_SPEC["seed"]

    def test_regenerated_dataset_discards_outputs(self, dataset):
        """Same parameters, but the dataset was regenerated from another seed."""
        first = run_distributed(dataset, _config())
        generate(SyntheticSpec(**{**SMALL_SPEC, "seed": 4}), dataset)
        again = run_distributed(dataset, _config())
        assert first.resumed == again.resumed == 0
        assert RunConfig.from_toml(dataset.run_config_path).seed == 4
        assert verify(_run_dendrogram(dataset), run_global(dataset, _config()).dendrogram).status is VerifyStatus.EQUAL


class TestRunTask:
    def test_external_scheduling(self, dataset):
        """Running every task by address, then assembling, gives the scheduler's result."""
        config = _config()
        with pytest.raises(FileNotFoundError):
            run_task(dataset, ChunkAddress(0, 0, 0, 0))
        config.to_toml(dataset.run_config_path)
        plan = build_plan(dataset, config)
        for node in plan.post_order():
            assert run_task(dataset, node.address) is not None
        assert run_task(dataset, plan.layout.root) is None
        assemble(dataset, plan, config.kind, config.threshold_fixed)

        reference = ChunkStore(dataset.root, "reference")
        run_distributed(reference, config)
        assert verify(_run_dendrogram(dataset), _run_dendrogram(reference)).status is VerifyStatus.EQUAL

    def test_unknown_address(self, dataset):
        _config().to_toml(dataset.run_config_path)
        with pytest.raises(KeyError):
            run_task(dataset, ChunkAddress(0, 9, 9, 9))

    def test_missing_child_output(self, dataset):
        _config().to_toml(dataset.run_config_path)
        with pytest.raises(FileNotFoundError):
            run_task(dataset, ChunkAddress(1, 0, 0, 0))
