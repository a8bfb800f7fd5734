"""Tests for the per-level statistics table, summary and plot."""

import json

import pandas as pd
import pytest
from loguru import logger

from ragglom.executor import LevelReport, RunReport
from ragglom.stats import LEVEL_COLUMNS, level_table, log_run_summary, plot_merge_fractions, render_json_lines, render_text


def _level(level, tasks, merges, fraction):
    return LevelReport(
        level=level,
        tasks=tasks,
        merges=merges,
        fraction=fraction,
        input_edges_peak=100 * (level + 1),
        input_edges_total=100 * tasks,
        frozen_edges=0 if level == 2 else 5,
        wall_time=0.5,
        peak_rss_mb=42.0,
        predicted_memory_mb=0.1,
    )


@pytest.fixture
def report():
    return RunReport(
        config={"linkage": "mean", "threshold": "0.3", "depth": None},
        tasks=73,
        merges=100,
        wall_time=1.25,
        resumed=0,
        levels=[_level(0, 64, 90, 0.9), _level(1, 8, 8, 0.08), _level(2, 1, 2, 0.02)],
    )


class TestLevelTable:
    def test_columns_and_order(self, report):
        df = level_table(report)
        assert list(df.columns) == LEVEL_COLUMNS
        assert df["level"].tolist() == [0, 1, 2]
        assert df["merges"].sum() == 100

    def test_provenance_overrides_counts(self, report):
        """Counts come from provenance; a level with no rows reports zero."""
        provenance = pd.DataFrame({"row": range(10), "level": [0] * 6 + [2] * 4, "chunk": ["x"] * 10})
        df = level_table(report, provenance)
        assert df["merges"].tolist() == [6, 0, 4]
        assert df["fraction"].tolist() == pytest.approx([0.6, 0.0, 0.4])


class TestRendering:
    def test_text(self, report):
        text = render_text(level_table(report), report)
        lines = text.splitlines()
        assert lines[0].startswith("linkage=mean threshold=0.3")
        assert "fraction" in lines[1]
        assert len(lines) == 5
        assert "90.00%" in lines[2]

    def test_json_lines(self, report):
        records = [json.loads(line) for line in render_json_lines(level_table(report)).splitlines()]
        assert [r["level"] for r in records] == [0, 1, 2]
        assert records[2]["frozen_edges"] == 0

    def test_summary_logs(self, report, tmp_path):
        messages = []
        sink = logger.add(messages.append, format="{message}")
        try:
            log_run_summary(report, tmp_path / "dendrogram.ragd")
        finally:
            logger.remove(sink)
        text = "".join(messages)
        assert "DISTRIBUTED AGGLOMERATION SUMMARY" in text
        assert "Merges in the top chunk: 2.0%" in text

    def test_plot(self, report, tmp_path):
        path = plot_merge_fractions(level_table(report), tmp_path / "plots" / "merges.png")
        assert path.is_file()
        assert path.stat().st_size > 0
