"""Tests for RunConfig defaults, validation and the TOML round trip."""

import tomllib
import unittest
from pathlib import Path

import pytest
from pydantic import ValidationError

from ragglom.config import STORE_ENV, RunConfig, load_defaults
from ragglom.linkage import LinkageKind


class TestDefaults:
    def test_packaged_defaults(self, monkeypatch):
        monkeypatch.delenv(STORE_ENV, raising=False)
        config = RunConfig.from_defaults()
        assert config.linkage == "mean"
        assert config.threshold == "0.3"
        assert config.threshold_fixed == 300_000
        assert config.depth is None
        assert config.leaf_threshold == 4_000_000
        assert config.seed is None
        assert config.store == Path(load_defaults()["run"]["store"])

    def test_store_from_environment(self, monkeypatch, tmp_path):
        monkeypatch.setenv(STORE_ENV, str(tmp_path))
        assert RunConfig.from_defaults().store == tmp_path

    def test_overrides_win_and_none_is_ignored(self, monkeypatch, tmp_path):
        monkeypatch.setenv(STORE_ENV, str(tmp_path))
        config = RunConfig.from_defaults(store=tmp_path / "other", threshold="0.5", depth=None)
        assert config.store == tmp_path / "other"
        assert config.threshold_fixed == 500_000
        assert config.depth is None


class TestValidation(unittest.TestCase):
    def test_threshold_precision(self):
        with self.assertRaises(ValidationError):
            RunConfig(threshold="0.1234567")

    def test_threshold_text_is_kept(self):
        config = RunConfig(threshold=0.25)
        self.assertEqual(config.threshold, "0.25")
        self.assertEqual(config.threshold_fixed, 250_000)

    def test_linkage_case_insensitive(self):
        config = RunConfig(linkage="MAX")
        self.assertEqual(config.linkage, "max")
        self.assertIs(config.kind, LinkageKind.MAX)

    def test_unknown_field(self):
        with self.assertRaises(ValidationError):
            RunConfig(thresold="0.3")

    def test_ranges(self):
        for bad in ({"depth": 0}, {"workers": 0}, {"max_retries": -1}, {"executor": "mpi"}):
            with self.subTest(**bad), self.assertRaises(ValidationError):
                RunConfig(**bad)


class TestToml:
    def test_round_trip_omits_unset_depth(self, tmp_path):
        config = RunConfig(linkage="max", threshold="0.45", workers=3, store=tmp_path)
        path = tmp_path / "out" / "run_config.toml"
        config.to_toml(path)
        with open(path, "rb") as fh:
            assert "depth" not in tomllib.load(fh)
        assert RunConfig.from_toml(path) == config

    def test_depth_survives(self, tmp_path):
        config = RunConfig(depth=2)
        config.to_toml(tmp_path / "c.toml")
        assert RunConfig.from_toml(tmp_path / "c.toml").depth == 2

    def test_same_algorithm(self):
        base = RunConfig()
        assert base.same_algorithm(RunConfig(workers=8, executor="process", max_retries=0))
        assert base.same_algorithm(RunConfig(threshold="0.30"))
        assert not base.same_algorithm(RunConfig(threshold="0.30001"))
        assert not base.same_algorithm(RunConfig(depth=2))
        assert not base.same_algorithm(RunConfig(linkage="max"))

    def test_dataset_seed_is_an_algorithm_field(self):
        """Outputs made on a dataset generated from another seed are stale."""
        assert RunConfig(seed=1).same_algorithm(RunConfig(seed=1, workers=4))
        assert not RunConfig(seed=1).same_algorithm(RunConfig(seed=2))
        assert not RunConfig().same_algorithm(RunConfig(seed=0))

    def test_report_dict(self):
        doc = RunConfig(threshold="0.30").to_report_dict()
        assert doc["threshold"] == "0.30"
        assert doc["threshold_fixed"] == 300_000


@pytest.mark.parametrize("block", ["run", "generate"])
def test_defaults_file_has_block(block):
    assert isinstance(load_defaults()[block], dict)
