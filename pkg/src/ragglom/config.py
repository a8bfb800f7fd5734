"""Run configuration: packaged YAML defaults, validation, TOML round trip.

``RunConfig`` is what a run was asked to do. It is written to
``<run>/run_config.toml`` before any task starts so that externally scheduled
tasks (Snakemake mode) read the same parameters back.
"""

from __future__ import annotations

import os
import tomllib
from functools import lru_cache
from pathlib import Path
from typing import Any, Literal

import tomli_w
import yaml
from pydantic import BaseModel, ConfigDict, field_validator

from ragglom.linkage import FixedAffinity, LinkageKind, parse_threshold

STORE_ENV = "RAGGLOM_STORE"
DEFAULTS_FILE = Path(__file__).parent / "config" / "defaults.yml"

# Fields that change committed outputs; a stored run with different values is stale.
ALGORITHM_FIELDS = ("linkage", "threshold_fixed", "depth", "leaf_threshold", "seed")


@lru_cache(maxsize=1)
def load_defaults() -> dict[str, Any]:
    """The packaged ``defaults.yml`` as a dict with ``run`` and ``generate`` blocks."""
    with open(DEFAULTS_FILE) as f:
        return yaml.safe_load(f)


def default_store() -> Path:
    """``$RAGGLOM_STORE`` when set, else the packaged default."""
    env = os.environ.get(STORE_ENV)
    return Path(env) if env else Path(load_defaults()["run"]["store"])


class RunConfig(BaseModel):
    """Parameters of one agglomeration run.

    ``threshold`` keeps the text the user typed; :attr:`threshold_fixed` is
    the exact fixed-point value every algorithm uses.
    """

    model_config = ConfigDict(extra="forbid")

    linkage: Literal["mean", "max"] = "mean"
    threshold: str = "0.3"
    depth: int | None = None
    leaf_threshold: int = 4_000_000
    workers: int = 1
    executor: Literal["thread", "process"] = "thread"
    max_retries: int = 2
    # seed of the dataset the run was made on, filled from the store manifest
    seed: int | None = None
    store: Path = Path("./ragglom-store")

    @field_validator("linkage", mode="before")
    @classmethod
    def _lower_linkage(cls, v: Any) -> Any:
        return v.lower() if isinstance(v, str) else v

    @field_validator("threshold", mode="before")
    @classmethod
    def _check_threshold(cls, v: Any) -> str:
        text = str(v).strip()
        parse_threshold(text)
        return text

    @field_validator("depth")
    @classmethod
    def _check_depth(cls, v: int | None) -> int | None:
        if v is not None and v < 1:
            raise ValueError("depth must be >= 1 (or unset for the full octree)")
        return v

    @field_validator("workers")
    @classmethod
    def _check_workers(cls, v: int) -> int:
        if v < 1:
            raise ValueError("workers must be >= 1")
        return v

    @field_validator("leaf_threshold", "max_retries")
    @classmethod
    def _non_negative(cls, v: int) -> int:
        if v < 0:
            raise ValueError("must be >= 0")
        return v

    @property
    def kind(self) -> LinkageKind:
        return LinkageKind.parse(self.linkage)

    @property
    def threshold_fixed(self) -> FixedAffinity:
        return parse_threshold(self.threshold)

    @classmethod
    def from_defaults(cls, **overrides: Any) -> "RunConfig":
        """Packaged defaults, then ``$RAGGLOM_STORE``, then non-None ``overrides``."""
        values = dict(load_defaults()["run"])
        values["store"] = default_store()
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.model_validate(values)

    def same_algorithm(self, other: "RunConfig") -> bool:
        return all(getattr(self, f) == getattr(other, f) for f in ALGORITHM_FIELDS)

    def to_report_dict(self) -> dict[str, Any]:
        """Parsed values as given, plus the fixed-point threshold."""
        doc = self.model_dump(mode="json")
        doc["threshold_fixed"] = self.threshold_fixed
        return doc

    # -- TOML round-trip ----------------------------------------------------

    def to_toml_dict(self) -> dict[str, Any]:
        # TOML has no null; an unset depth is simply omitted.
        return {k: v for k, v in self.model_dump(mode="json").items() if v is not None}

    @classmethod
    def from_toml_dict(cls, doc: dict[str, Any]) -> "RunConfig":
        return cls.model_validate(doc)

    def to_toml(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            tomli_w.dump(self.to_toml_dict(), fh)

    @classmethod
    def from_toml(cls, path: str | Path) -> "RunConfig":
        with open(path, "rb") as fh:
            return cls.from_toml_dict(tomllib.load(fh))
