"""Per-level merge statistics of a distributed run: tables, summaries, plots."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
from loguru import logger  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

from ragglom.executor import RunReport  # noqa: E402

LEVEL_COLUMNS = [
    "level",
    "tasks",
    "merges",
    "fraction",
    "input_edges_peak",
    "frozen_edges",
    "wall_time",
    "peak_rss_mb",
    "predicted_memory_mb",
]


def level_table(report: RunReport, provenance: pd.DataFrame | None = None) -> pd.DataFrame:
    """One row per executed octree level, leaf level first.

    When ``provenance`` (row -> level) is given the merge counts are taken
    from it, and a disagreement with the report is logged.
    """
    df = pd.DataFrame([{c: getattr(lv, c) for c in LEVEL_COLUMNS} for lv in report.levels], columns=LEVEL_COLUMNS)
    if provenance is not None and len(df):
        counts = provenance.groupby("level").size()
        merges = df["level"].map(counts).fillna(0).astype("int64")
        if not merges.equals(df["merges"].astype("int64")):
            logger.warning("Provenance merge counts disagree with the run report; using provenance")
        df["merges"] = merges
        total = int(merges.sum())
        df["fraction"] = merges / total if total else 0.0
    return df


def render_text(df: pd.DataFrame, report: RunReport | None = None) -> str:
    lines = []
    if report is not None:
        cfg = report.config
        lines.append(
            f"linkage={cfg.get('linkage')} threshold={cfg.get('threshold')} depth={cfg.get('depth')} "
            f"tasks={report.tasks} merges={report.merges} wall={report.wall_time:.2f}s"
        )
    header = (
        f"{'level':>5} {'tasks':>6} {'merges':>10} {'fraction':>9} "
        f"{'edges_peak':>11} {'frozen':>9} {'wall_s':>8} {'rss_mb':>8} {'pred_mb':>8}"
    )
    lines.append(header)
    for row in df.itertuples(index=False):
        lines.append(
            f"{row.level:>5} {row.tasks:>6} {row.merges:>10,} {100 * row.fraction:>8.2f}% "
            f"{row.input_edges_peak:>11,} {row.frozen_edges:>9,} {row.wall_time:>8.2f} "
            f"{row.peak_rss_mb:>8.1f} {row.predicted_memory_mb:>8.1f}"
        )
    return "\n".join(lines)


def render_json_lines(df: pd.DataFrame) -> str:
    return "\n".join(json.dumps(rec) for rec in df.to_dict(orient="records"))


def log_run_summary(report: RunReport, dendrogram_path: Path) -> None:
    """Ruled summary block of a finished run."""
    cfg = report.config
    top = report.levels[-1] if report.levels else None
    logger.info("=" * 60)
    logger.info("DISTRIBUTED AGGLOMERATION SUMMARY")
    logger.info("=" * 60)
    logger.info(f"Linkage / threshold: {cfg['linkage']} / {cfg['threshold']}")
    logger.info(f"Dendrogram:          {dendrogram_path}")
    logger.info(f"Tasks:               {report.tasks:,} ({report.resumed:,} resumed)")
    logger.info(f"Merges:              {report.merges:,}")
    logger.info("-" * 60)
    for lv in report.levels:
        logger.info(
            f"  level {lv.level}: {lv.tasks:,} tasks, {lv.merges:,} merges ({100 * lv.fraction:.1f}%), "
            f"peak {lv.input_edges_peak:,} edges"
        )
    logger.info("-" * 60)
    if top is not None:
        logger.info(f"Merges in the top chunk: {100 * top.fraction:.1f}%")
    logger.info(f"Wall time: {report.wall_time:.2f}s")
    logger.info("=" * 60)


def merge_fraction_figure(df: pd.DataFrame) -> Figure:
    """Bar chart of the fraction of merges per octree level."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(df["level"].astype(str), 100 * df["fraction"], color="steelblue")
    ax.set_xlabel("octree level (0 = leaves)")
    ax.set_ylabel("merges [%]")
    ax.set_title("Where merges happen")
    for x, (frac, n) in enumerate(zip(df["fraction"], df["merges"])):
        ax.annotate(f"{n:,}", (x, 100 * frac), ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    return fig


def plot_merge_fractions(df: pd.DataFrame, path: Path) -> Path:
    fig = merge_fraction_figure(df)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path
