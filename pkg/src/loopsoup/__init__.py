"""Random walk loop soups on finite graphs: exact cluster laws, exact sampling and limit checks."""

from .errors import LoopSoupError
from .graph import WeightedGraph, build_graph, complete_graph, cycle_graph, path_graph
from .partition import Partition

__version__ = "0.1.0"

__all__ = [
    "LoopSoupError",
    "Partition",
    "WeightedGraph",
    "build_graph",
    "complete_graph",
    "cycle_graph",
    "path_graph",
    "__version__",
]
