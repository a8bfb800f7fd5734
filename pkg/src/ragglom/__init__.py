"""ragglom - exact hierarchical agglomeration of region adjacency graphs, globally or chunk-wise over an octree."""

__version__ = "0.1.0"
