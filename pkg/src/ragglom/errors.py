"""Exception hierarchy shared by the ragglom modules and the CLI.

Every class also derives from the closest built-in so callers that only know
``ValueError`` / ``FileNotFoundError`` keep working. The CLI maps these onto
its exit codes (see :mod:`ragglom.cli`).
"""

from __future__ import annotations


class RagglomError(Exception):
    """Base class for all ragglom errors."""


class InputFormatError(RagglomError, ValueError):
    """Malformed input: bad stat, self-loop key, box outside chunk, bad affinity text."""


class SpecError(RagglomError, ValueError):
    """Invalid synthetic dataset specification."""


class HeaderMismatchError(RagglomError, ValueError):
    """Two dendrogram files disagree on linkage kind or threshold."""


class StoreCorruptionError(RagglomError):
    """A store entry failed magic, version, size or checksum validation."""


class MissingDependencyError(RagglomError, FileNotFoundError):
    """A task input (leaf or child output) is not committed yet. Retriable."""


class TaskPoisonedError(RagglomError, RuntimeError):
    """A task failed more often than the retry budget allows."""

    def __init__(self, task: str, attempts: list[str]):
        self.task = task
        self.attempts = attempts
        lines = "\n  - ".join(attempts)
        super().__init__(f"task {task} failed {len(attempts)} times:\n  - {lines}")
