"""Tests for the region adjacency graph."""

import unittest

import numpy as np
import pytest

from ragglom.errors import InputFormatError
from ragglom.linkage import AffinityStat, LinkageKind, exact_value, make_stat
from ragglom.rag import Dendrogram, EdgeKey, RegionGraph, edge_key
from tests.helpers import make_graph, random_graph

MEAN, MAX = LinkageKind.MEAN, LinkageKind.MAX


class TestEdgeKey:
    def test_canonical_order(self):
        assert edge_key(5, 2) == EdgeKey(2, 5)
        assert edge_key(2, 5) == EdgeKey(2, 5)

    def test_self_loop_rejected(self):
        with pytest.raises(InputFormatError, match="self-loop"):
            edge_key(3, 3)


class TestConstruction:
    def test_parallel_contributions_combine(self):
        """Adding the same pair twice combines the stats."""
        g = RegionGraph()
        g.add_edge(1, 2, make_stat(MEAN, 500_000, 2), MEAN)
        g.add_edge(2, 1, make_stat(MEAN, 900_000, 1), MEAN)
        assert g.edge_count() == 1
        assert g.stat(1, 2) == AffinityStat(1_900_000, 3)

    def test_non_positive_ids_rejected(self):
        with pytest.raises(InputFormatError):
            RegionGraph().add_node(0)

    def test_copy_is_independent(self):
        g = make_graph([(1, 2, 100, 1)])
        h = g.copy()
        h.merge_nodes(1, 2, MEAN)
        assert g.edge_count() == 1
        assert h.edge_count() == 0

    def test_degree_and_incident(self):
        g = make_graph([(1, 2, 100, 1), (3, 1, 200, 1)])
        assert g.degree(1) == 2
        assert g.incident(1) == [EdgeKey(1, 2), EdgeKey(1, 3)]


class TestMergeNodes(unittest.TestCase):
    """Edge contraction into the smaller id."""

    def test_path_rekeys_only(self):
        """Path 1-2-3, merge (1,2): the 2-3 edge becomes 1-3 unchanged."""
        g = make_graph([(1, 2, 400_000, 1), (2, 3, 600_000, 1)])
        g.merge_nodes(1, 2, MEAN)
        self.assertEqual(set(g.nodes), {1, 3})
        self.assertEqual(g.edges, {EdgeKey(1, 3): AffinityStat(600_000, 1)})

    def test_triangle_combines_parallel_edges(self):
        """Merging (1,2) folds 2-3 into 1-3: {600000,1} + {200000,1} = {800000,2}."""
        g = make_graph([(1, 2, 900_000, 1), (2, 3, 600_000, 1), (1, 3, 200_000, 1)])
        result = g.merge_nodes(2, 1, MEAN)
        self.assertEqual((result.survivor, result.absorbed), (1, 2))
        self.assertEqual(result.stat, AffinityStat(900_000, 1))
        self.assertEqual(result.removed, (EdgeKey(2, 3),))
        self.assertEqual(result.updated, (EdgeKey(1, 3),))
        self.assertEqual(g.stat(1, 3), AffinityStat(800_000, 2))
        self.assertEqual(exact_value(MEAN, g.stat(1, 3)), 400_000)
        self.assertEqual(g.audit(), [])

    def test_triangle_max(self):
        g = make_graph([(1, 2, 900_000, 1), (2, 3, 600_000, 1), (1, 3, 200_000, 1)], MAX)
        g.merge_nodes(1, 2, MAX)
        self.assertEqual(g.stat(1, 3), AffinityStat(600_000, 2))

    def test_missing_edge(self):
        g = make_graph([(1, 2, 900_000, 1), (3, 4, 600_000, 1)])
        with self.assertRaises(KeyError):
            g.merge_nodes(1, 3, MEAN)


class TestNearestNeighbor:
    def test_tie_goes_to_smaller_id(self):
        g = make_graph([(5, 3, 700_000, 1), (5, 1, 700_000, 2), (5, 9, 100_000, 1)])
        assert g.nearest_neighbor(5, MEAN) == 1

    def test_isolated_and_absent(self):
        g = make_graph([(1, 2, 100, 1)])
        g.add_node(7)
        assert g.nearest_neighbor(7, MEAN) is None
        with pytest.raises(KeyError):
            g.nearest_neighbor(8, MEAN)

    def test_mutual_nearest_pair(self):
        """The top pair of a chain point at each other; other pairs do not."""
        g = make_graph([(1, 2, 300_000, 1), (2, 3, 500_000, 1), (3, 4, 900_000, 1), (4, 5, 800_000, 1)])
        assert g.is_mutual_nearest_pair(3, 4, MEAN)
        assert not g.is_mutual_nearest_pair(2, 3, MEAN)
        assert not g.is_mutual_nearest_pair(4, 5, MEAN)


class TestAudits:
    def test_inconsistent_adjacency_reported(self):
        g = make_graph([(1, 2, 100, 1)])
        g.adjacency[1].add(3)
        g.adjacency[3] = {1}
        assert any("has no edge" in p for p in g.audit())

    def test_sparsity_contract(self):
        """A complete graph on 22 nodes has 231 > 220 edges."""
        dense = RegionGraph()
        for u in range(1, 23):
            for v in range(u + 1, 23):
                dense.add_edge(u, v, AffinityStat(1, 1), MAX)
        assert not dense.check_sparsity()
        assert make_graph([(1, 2, 100, 1)]).check_sparsity()


class TestDendrogram:
    def test_extend_requires_same_header(self):
        d = Dendrogram(MEAN, 300_000)
        d.append(1, 2, AffinityStat(900_000, 1))
        d.extend(Dendrogram(MEAN, 300_000, []))
        assert len(d) == 1
        with pytest.raises(ValueError):
            d.extend(Dendrogram(MAX, 300_000))
        with pytest.raises(ValueError):
            d.extend(Dendrogram(MEAN, 400_000))


def _random_merges(g, rng, steps):
    """Keys of ``steps`` random edges, each drawn after the caller merged the previous one."""
    for _ in range(steps):
        if not g.edges:
            return
        keys = sorted(g.edges)
        key = keys[int(rng.integers(len(keys)))]
        yield key


class TestRandomMergeSequences:
    """Graph invariants over arbitrary merge orders, not only the agglomeration's."""

    @pytest.mark.parametrize("kind", [MEAN, MAX])
    @pytest.mark.parametrize("seed", range(5))
    def test_audit_stays_clean(self, kind, seed):
        g = random_graph(seed, nodes=80, edges=240, kind=kind)
        rng = np.random.default_rng(seed)
        for key in _random_merges(g, rng, 70):
            result = g.merge_nodes(key.hi, key.lo, kind)
            assert result.survivor == key.lo
            assert key.hi not in g
            assert g.audit() == []

    @pytest.mark.parametrize("seed", range(5))
    def test_mean_mass_conserved(self, seed):
        """Merged interface sums and counts plus the remaining edges add up to the input."""
        g = random_graph(seed, nodes=80, edges=240)
        total_sum = sum(s.sum for s in g.edges.values())
        total_count = sum(s.count for s in g.edges.values())
        merged_sum = merged_count = 0
        rng = np.random.default_rng(100 + seed)
        for key in _random_merges(g, rng, 70):
            survivor_side = {w: g.stat(key.lo, w) for w in g.neighbors(key.lo) - {key.hi}}
            absorbed_side = {w: g.stat(key.hi, w) for w in g.neighbors(key.hi) - {key.lo}}
            result = g.merge_nodes(key.lo, key.hi, MEAN)
            merged_sum += result.stat.sum
            merged_count += result.stat.count
            for w in survivor_side.keys() | absorbed_side.keys():
                a = survivor_side.get(w, AffinityStat(0, 0))
                b = absorbed_side.get(w, AffinityStat(0, 0))
                assert g.stat(key.lo, w) == AffinityStat(a.sum + b.sum, a.count + b.count)
            assert sum(s.sum for s in g.edges.values()) + merged_sum == total_sum
            assert sum(s.count for s in g.edges.values()) + merged_count == total_count

    @pytest.mark.parametrize("kind", [MEAN, MAX])
    @pytest.mark.parametrize("seed", range(5))
    def test_nearest_neighbors_change_only_around_the_merge(self, kind, seed):
        g = random_graph(seed, nodes=80, edges=240, kind=kind)
        rng = np.random.default_rng(200 + seed)
        for key in _random_merges(g, rng, 40):
            touched = g.neighbors(key.lo) | g.neighbors(key.hi)
            before = {u: g.nearest_neighbor(u, kind) for u in g.nodes}
            g.merge_nodes(key.lo, key.hi, kind)
            for u in g.nodes:
                if u not in touched:
                    assert g.nearest_neighbor(u, kind) == before[u], u
