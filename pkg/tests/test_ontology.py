import configparser

import pytest
from hypothesis import given, strategies as st

from odrase.ontology import (
    Module,
    NodeRef,
    OntologyError,
    class_index,
    default_ontology_text,
    label_of,
    load_ontology,
    parse_ontology,
    reference_graph,
)


def test_default_vocabulary_sizes(cfg):
    assert len(cfg.vocabulary.structures) == 11
    assert len(cfg.vocabulary.improvements) == 10
    assert cfg.vocabulary.n_classes == 10


def test_default_edge_count_matches_edge_table(cfg):
    # count arrow lines in the [edges] section of the shipped file, independently
    lines, section = [], None
    for raw in default_ontology_text().splitlines():
        line = raw.strip()
        if line.startswith("["):
            section = line
        elif section == "[edges]" and "->" in line and not line.startswith("#"):
            lines.append(line)
    g = reference_graph(cfg)
    assert len(g.edges) == len(lines) == len(cfg.reference_edges)


def test_every_reference_edge_is_structure_to_improvement(cfg):
    for src, dst in reference_graph(cfg).edges:
        assert src.module is Module.ROAD_STRUCTURE
        assert dst.module is Module.IMPROVEMENT


@pytest.mark.parametrize(
    "text, message",
    [
        ("[structures]\na\n[improvements]\n[edges]\n", "empty vocabulary"),
        ("[structures]\na\n[improvements]\nb\n[edges]\nb -> a\n", "edge direction"),
        ("[structures]\na\n[improvements]\nb\n[edges]\na -> zzz\n", "unknown label"),
        ("[structures]\na\na\n[improvements]\nb\n[edges]\n", "duplicate identifier"),
        ("[structures]\na\n[improvements]\na\n[edges]\n", "duplicate identifier"),
        ("[structures]\na\n[improvements]\nb\n[edges]\na >> b\n", "malformed edge"),
        ("[structures]\na\n[improvements]\nb\n", "missing section"),
        ("structures\n", "cannot parse"),
        ("[structures]\na = 1\n[improvements]\nb\n[edges]\n", "take no value"),
    ],
)
def test_invalid_configs_rejected(text, message):
    with pytest.raises(OntologyError, match=message):
        parse_ontology(text)


def test_load_missing_file(tmp_path):
    with pytest.raises(OntologyError, match="cannot read"):
        load_ontology(tmp_path / "nope.ini")


def test_load_from_path_roundtrip(tmp_path, cfg):
    p = tmp_path / "o.ini"
    p.write_text(default_ontology_text(), encoding="utf-8")
    assert load_ontology(p) == cfg


def test_labels_are_case_sensitive_and_trimmed(tiny):
    assert tiny.node(Module.ROAD_STRUCTURE, "  s1 ") == NodeRef(Module.ROAD_STRUCTURE, "s1")
    with pytest.raises(OntologyError):
        tiny.node(Module.ROAD_STRUCTURE, "S1")
    with pytest.raises(OntologyError):
        tiny.node(Module.IMPROVEMENT, "s1")


def test_reference_graph_small(tiny):
    g = reference_graph(tiny)
    s1, i1 = tiny.structure("s1"), tiny.improvement("i1")
    assert {s1, i1} <= g.nodes
    assert (s1, i1) in g.edges
    assert len(g.nodes) == 6


def test_reference_graph_without_edges():
    cfg = parse_ontology("[structures]\na\nb\n[improvements]\nc\n[edges]\n")
    g = reference_graph(cfg)
    assert len(g.nodes) == 3
    assert g.edges == frozenset()


def test_reference_graph_is_pure(cfg):
    assert reference_graph(cfg) == reference_graph(load_ontology())


def test_class_index_ordering(cfg):
    imps = cfg.vocabulary.improvements
    assert class_index(cfg, imps[0]) == 0
    assert class_index(cfg, imps[-1]) == len(imps) - 1
    for c in range(len(imps)):
        assert class_index(cfg, label_of(cfg, c)) == c
    with pytest.raises(OntologyError):
        class_index(cfg, cfg.vocabulary.structures[0])
    with pytest.raises(OntologyError):
        label_of(cfg, len(imps))


def test_content_hash_ignores_formatting(cfg):
    text = default_ontology_text().replace("\n", "\n\n").replace("\n[edges]\n", "\n# comment\n[edges]\n")
    assert parse_ontology(text).content_hash() == cfg.content_hash()
    changed = default_ontology_text().replace("sharp_curve -> install_speed_reduction\n", "")
    assert parse_ontology(changed).content_hash() != cfg.content_hash()


@given(st.text(max_size=20), st.sampled_from(list(Module)))
def test_random_labels_rejected_unless_in_vocabulary(cfg, label, module):
    known = label.strip() in cfg.vocabulary.labels(module)
    if known:
        assert cfg.node(module, label).label == label.strip()
    else:
        with pytest.raises(OntologyError):
            cfg.node(module, label)
