"""Heterogeneous graph decoupled learning: construction, propagation, training."""
from .apm import ApmConfig, PropagationStack, dense_oracle, propagate, propagate_chunked
from .graph import HeteroGraph, add_reverse_edges, build_graph, in_neighbors
from .labels import LabelMatrix
from .metrics import EvalReport, evaluate

__version__ = "0.1.0"
