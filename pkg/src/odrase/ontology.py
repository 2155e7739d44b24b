"""Category vocabularies and the expert reference graph.

The ontology is a bipartite directed graph from accident-causing road
structures to infrastructure improvements. It is read from an INI-style file
with three value-less sections::

    [structures]
    sharp_curve

    [improvements]
    improve_road_alignment

    [edges]
    sharp_curve -> improve_road_alignment
"""

from __future__ import annotations

import configparser
import enum
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator

DEFAULT_ONTOLOGY = "default_ontology.ini"
EDGE_ARROW = "->"


class OntologyError(ValueError):
    """Raised for malformed configs and labels outside the vocabulary."""


class Module(str, enum.Enum):
    ROAD_STRUCTURE = "RoadStructure"
    IMPROVEMENT = "Improvement"

    @property
    def rank(self) -> int:
        return _MODULE_RANK[self]


_MODULE_RANK = {Module.ROAD_STRUCTURE: 0, Module.IMPROVEMENT: 1}


@dataclass(frozen=True, order=False)
class NodeRef:
    module: Module
    label: str

    def __str__(self) -> str:
        return self.label


Edge = tuple[NodeRef, NodeRef]


@dataclass(frozen=True)
class TypedDiGraph:
    """Directed graph with set semantics over ``NodeRef`` nodes."""

    nodes: frozenset[NodeRef] = frozenset()
    edges: frozenset[Edge] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes", frozenset(self.nodes))
        object.__setattr__(self, "edges", frozenset(self.edges))
        for src, dst in self.edges:
            if src not in self.nodes or dst not in self.nodes:
                raise OntologyError(f"edge endpoint not in node set: {src} -> {dst}")

    @classmethod
    def from_edges(cls, edges: Iterable[Edge], extra_nodes: Iterable[NodeRef] = ()) -> "TypedDiGraph":
        edges = frozenset(edges)
        nodes = set(extra_nodes)
        for src, dst in edges:
            nodes.add(src)
            nodes.add(dst)
        return cls(frozenset(nodes), edges)

    def is_empty(self) -> bool:
        return not self.nodes

    def labels(self, module: Module) -> frozenset[str]:
        return frozenset(n.label for n in self.nodes if n.module is module)

    def is_subgraph_of(self, other: "TypedDiGraph") -> bool:
        return self.nodes <= other.nodes and self.edges <= other.edges


@dataclass(frozen=True)
class CategoryVocabulary:
    structures: tuple[str, ...]
    improvements: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self) -> None:
        for name, labels in (("structures", self.structures), ("improvements", self.improvements)):
            if not labels:
                raise OntologyError(f"empty vocabulary: [{name}] has no labels")
            seen = set()
            for label in labels:
                if not label or not label.isascii() or any(ch.isspace() for ch in label) or EDGE_ARROW in label or "," in label:
                    raise OntologyError(f"invalid identifier {label!r} in [{name}]")
                if label in seen:
                    raise OntologyError(f"duplicate identifier {label!r} in [{name}]")
                seen.add(label)
        shared = set(self.structures) & set(self.improvements)
        if shared:
            raise OntologyError(f"duplicate identifier across modules: {sorted(shared)}")
        index = {}
        for i, label in enumerate(self.structures):
            index[(Module.ROAD_STRUCTURE, label)] = i
        for i, label in enumerate(self.improvements):
            index[(Module.IMPROVEMENT, label)] = i
        object.__setattr__(self, "_index", index)

    def labels(self, module: Module) -> tuple[str, ...]:
        return self.structures if module is Module.ROAD_STRUCTURE else self.improvements

    def contains(self, module: Module, label: str) -> bool:
        return (module, label) in self._index

    def position(self, node: NodeRef) -> int:
        return self._index[(node.module, node.label)]

    def sort_key(self, node: NodeRef) -> tuple[int, int]:
        """Vocabulary order: structures first, then improvements."""
        return (node.module.rank, self.position(node))

    @property
    def n_classes(self) -> int:
        return len(self.improvements)


@dataclass(frozen=True)
class OntologyConfig:
    vocabulary: CategoryVocabulary
    reference_edges: tuple[tuple[str, str], ...]

    def __post_init__(self) -> None:
        seen = set()
        for src, dst in self.reference_edges:
            if (src, dst) in seen:
                raise OntologyError(f"duplicate edge {src} -> {dst}")
            seen.add((src, dst))
            src_is_s = self.vocabulary.contains(Module.ROAD_STRUCTURE, src)
            dst_is_i = self.vocabulary.contains(Module.IMPROVEMENT, dst)
            if src_is_s and dst_is_i:
                continue
            known = {*self.vocabulary.structures, *self.vocabulary.improvements}
            if src in known and dst in known:
                raise OntologyError(f"edge direction must be structure -> improvement: {src} -> {dst}")
            unknown = [x for x in (src, dst) if x not in known]
            raise OntologyError(f"edge references unknown label(s) {unknown}: {src} -> {dst}")

    def node(self, module: Module | str, label: str) -> NodeRef:
        """Build a validated node; labels are trimmed, otherwise matched exactly."""
        module = Module(module)
        label = label.strip()
        if not self.vocabulary.contains(module, label):
            raise OntologyError(f"unknown {module.value} label {label!r}")
        return NodeRef(module, label)

    def structure(self, label: str) -> NodeRef:
        return self.node(Module.ROAD_STRUCTURE, label)

    def improvement(self, label: str) -> NodeRef:
        return self.node(Module.IMPROVEMENT, label)

    def validate_graph(self, graph: TypedDiGraph) -> None:
        for n in graph.nodes:
            if not self.vocabulary.contains(n.module, n.label):
                raise OntologyError(f"unknown {n.module.value} label {n.label!r}")

    def neighbours(self, structure: str) -> tuple[str, ...]:
        """Improvements linked to ``structure``, in class-index order."""
        linked = {dst for src, dst in self.reference_edges if src == structure}
        return tuple(i for i in self.vocabulary.improvements if i in linked)

    def sorted_nodes(self, nodes: Iterable[NodeRef]) -> list[NodeRef]:
        return sorted(nodes, key=self.vocabulary.sort_key)

    def sorted_edges(self, edges: Iterable[Edge]) -> list[Edge]:
        key = self.vocabulary.sort_key
        return sorted(edges, key=lambda e: (key(e[0]), key(e[1])))

    def content_hash(self) -> str:
        """SHA-256 over the canonical content (not the file bytes)."""
        payload = {
            "structures": list(self.vocabulary.structures),
            "improvements": list(self.vocabulary.improvements),
            "edges": [list(e) for e in self.reference_edges],
        }
        blob = json.dumps(payload, separators=(",", ":"), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def _section_lines(parser: configparser.ConfigParser, name: str) -> list[str]:
    if not parser.has_section(name):
        raise OntologyError(f"missing section [{name}]")
    out = []
    for key, value in parser.items(name, raw=True):
        if value is not None:
            raise OntologyError(f"[{name}] entries take no value: {key!r}")
        out.append(key.strip())
    return out


def parse_ontology(text: str) -> OntologyConfig:
    parser = configparser.ConfigParser(
        allow_no_value=True,
        delimiters=("=",),
        comment_prefixes=("#", ";"),
        inline_comment_prefixes=("#",),
        strict=True,
        interpolation=None,
        default_section="__unused__",
    )
    parser.optionxform = str  # keep labels case-sensitive
    try:
        parser.read_string(text)
    except configparser.DuplicateOptionError as exc:
        raise OntologyError(f"duplicate identifier {exc.option!r} in [{exc.section}]") from exc
    except configparser.Error as exc:
        raise OntologyError(f"cannot parse ontology config: {exc}") from exc

    vocab = CategoryVocabulary(
        structures=tuple(_section_lines(parser, "structures")),
        improvements=tuple(_section_lines(parser, "improvements")),
    )
    edges = []
    for line in _section_lines(parser, "edges"):
        parts = line.split(EDGE_ARROW)
        if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
            raise OntologyError(f"malformed edge line {line!r}; expected 'structure -> improvement'")
        edges.append((parts[0].strip(), parts[1].strip()))
    return OntologyConfig(vocab, tuple(edges))


def load_ontology(path: str | Path | None = None) -> OntologyConfig:
    """Load and validate an ontology config; ``None`` loads the shipped default."""
    if path is None:
        text = default_ontology_text()
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise OntologyError(f"cannot read ontology config {path}: {exc}") from exc
    return parse_ontology(text)


def default_ontology_text() -> str:
    return resources.files("odrase.data").joinpath(DEFAULT_ONTOLOGY).read_text(encoding="utf-8")


def reference_graph(cfg: OntologyConfig) -> TypedDiGraph:
    """The expert reference graph: every vocabulary label plus the reference edges."""
    nodes = [NodeRef(Module.ROAD_STRUCTURE, s) for s in cfg.vocabulary.structures]
    nodes += [NodeRef(Module.IMPROVEMENT, i) for i in cfg.vocabulary.improvements]
    edges = [
        (NodeRef(Module.ROAD_STRUCTURE, s), NodeRef(Module.IMPROVEMENT, i))
        for s, i in cfg.reference_edges
    ]
    return TypedDiGraph(frozenset(nodes), frozenset(edges))


def class_index(cfg: OntologyConfig, label: str) -> int:
    label = label.strip()
    if not cfg.vocabulary.contains(Module.IMPROVEMENT, label):
        raise OntologyError(f"unknown improvement label {label!r}")
    return cfg.vocabulary.position(NodeRef(Module.IMPROVEMENT, label))


def label_of(cfg: OntologyConfig, index: int) -> str:
    improvements = cfg.vocabulary.improvements
    if not 0 <= index < len(improvements):
        raise OntologyError(f"class index {index} out of range 0..{len(improvements) - 1}")
    return improvements[index]


def iter_nodes(cfg: OntologyConfig) -> Iterator[NodeRef]:
    for s in cfg.vocabulary.structures:
        yield NodeRef(Module.ROAD_STRUCTURE, s)
    for i in cfg.vocabulary.improvements:
        yield NodeRef(Module.IMPROVEMENT, i)
