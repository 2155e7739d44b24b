"""Ontology-grounded road-infrastructure improvement annotation toolkit."""

from .graph_filter import FilterVerdict, filter_record_graph
from .ontology import Module, NodeRef, OntologyConfig, TypedDiGraph, load_ontology, reference_graph

__version__ = "0.1.0"

__all__ = [
    "FilterVerdict",
    "Module",
    "NodeRef",
    "OntologyConfig",
    "TypedDiGraph",
    "filter_record_graph",
    "load_ontology",
    "reference_graph",
]
