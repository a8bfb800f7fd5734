import pytest

from ragglom.datagen import SyntheticSpec, generate
from ragglom.store import ChunkStore
from tests.helpers import CHAIN_EXTENTS, CHAIN_LEAF_EDGES, SMALL_SPEC, write_store


@pytest.fixture
def chain_store(tmp_path) -> ChunkStore:
    """Chain 1-2-3-4 split over two leaves, boundary segments 2 and 3."""
    return write_store(tmp_path / "chain", (32, 16, 16), (16, 16, 16), CHAIN_EXTENTS, CHAIN_LEAF_EDGES)


@pytest.fixture
def dataset(tmp_path) -> ChunkStore:
    """A generated 4x4x4-leaf dataset (blocks planting, tie-free)."""
    store = ChunkStore(tmp_path / "ds")
    generate(SyntheticSpec(**SMALL_SPEC), store)
    return store
