"""Ontology-driven filtering of generated annotation graphs.

A generated graph is intersected with the expert reference graph, nodes left
without any incident edge are pruned, and the record is judged untrustworthy
when the edges linking two modules do not survive.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .ontology import Edge, Module, NodeRef, TypedDiGraph


class Reason(str, enum.Enum):
    KEPT = "Kept"
    NO_SURVIVING_INTER_MODULE_EDGES = "NoSurvivingInterModuleEdges"


@dataclass(frozen=True)
class IsolatedNodeSet:
    nodes: frozenset[NodeRef]

    def __contains__(self, node: object) -> bool:
        return node in self.nodes

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass(frozen=True)
class FilterVerdict:
    kept: bool
    filtered_graph: TypedDiGraph
    removed_nodes: frozenset[NodeRef]
    removed_edges: frozenset[Edge]
    reason: Reason

    def __post_init__(self) -> None:
        if self.kept != (self.reason is Reason.KEPT):
            raise ValueError("kept flag and reason disagree")


def intersect_with_reference(g_b: TypedDiGraph, g_a: TypedDiGraph) -> TypedDiGraph:
    # Surviving edges lie in E_A, so their endpoints lie in V_A; they also lie
    # in V_B because g_b is a valid graph.
    return TypedDiGraph(g_b.nodes & g_a.nodes, g_b.edges & g_a.edges)


def isolated_nodes(g: TypedDiGraph) -> IsolatedNodeSet:
    touched: set[NodeRef] = set()
    for src, dst in g.edges:
        touched.add(src)
        touched.add(dst)
    return IsolatedNodeSet(frozenset(g.nodes - touched))


def prune_isolated(g: TypedDiGraph) -> TypedDiGraph:
    iso = isolated_nodes(g).nodes
    kept_nodes = g.nodes - iso
    kept_edges = frozenset(e for e in g.edges if e[0] in kept_nodes and e[1] in kept_nodes)
    assert kept_edges == g.edges, "an isolated node had an incident edge"
    return TypedDiGraph(kept_nodes, kept_edges)


def module_pair(edge: Edge) -> frozenset[Module] | None:
    """The unordered module pair an inter-module edge connects, else None."""
    src, dst = edge
    if src.module is dst.module:
        return None
    return frozenset((src.module, dst.module))


def inter_module_pairs(edges: frozenset[Edge]) -> set[frozenset[Module]]:
    return {p for p in map(module_pair, edges) if p is not None}


def filter_record_graph(g_b: TypedDiGraph, g_a: TypedDiGraph) -> FilterVerdict:
    """Intersect, prune isolated nodes and apply the trust rule.

    A record is discarded when every edge of some adjacent module pair present
    in the input was removed, or when the input has no inter-module edge at
    all. With the bipartite road-safety ontology the only pair is
    structure -> improvement.
    """
    filtered = prune_isolated(intersect_with_reference(g_b, g_a))
    before = inter_module_pairs(g_b.edges)
    after = inter_module_pairs(filtered.edges)
    trusted = bool(before) and before == after
    if trusted:
        return FilterVerdict(
            kept=True,
            filtered_graph=filtered,
            removed_nodes=g_b.nodes - filtered.nodes,
            removed_edges=g_b.edges - filtered.edges,
            reason=Reason.KEPT,
        )
    return FilterVerdict(
        kept=False,
        filtered_graph=TypedDiGraph(),
        removed_nodes=g_b.nodes,
        removed_edges=g_b.edges,
        reason=Reason.NO_SURVIVING_INTER_MODULE_EDGES,
    )
