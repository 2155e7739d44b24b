import json

import pytest
from hypothesis import given, settings, strategies as st

from odrase.dataset import (
    DatasetError,
    OntologyMismatchError,
    dumps_dataset,
    edit_prompt,
    edit_prompt_rows,
    filter_records,
    label_vector,
    loads_dataset,
    read_dataset,
    record_targets,
    split_of,
    write_dataset,
    write_transcripts,
)
from odrase.g2cot import BackendError, BackendResponse, MockBackend, annotate_many, run_g2cot
from odrase.ontology import parse_ontology

from conftest import TINY_ONTOLOGY
from oracles import brute_force_filter


class Scripted:
    def __init__(self, answers):
        self.answers = answers

    def complete(self, request):
        ans = self.answers[int(request.stage)]
        if isinstance(ans, Exception):
            raise ans
        return BackendResponse(ans, "scripted", 1.5)


SIX = {
    "r1": ("s1", "i1"),
    "r2": ("s1", "i2"),
    "r3": ("s1, s2", "i1, i2"),
    "r4": ("s3", "i1\ni2"),
    "r5": ("bogus", "i1"),
    "r6": None,
}


def six_records(tiny):
    out = []
    for rid, ans in SIX.items():
        if ans is None:
            backend = Scripted({1: "risk", 2: "s1", 3: BackendError("timeout"), 4: "i1"})
        else:
            backend = Scripted({1: f"risk of {rid}", 2: ans[0], 3: "process", 4: ans[1]})
        out.append(run_g2cot(rid, f"{rid}.jpg", tiny, backend))
    return out


def test_six_record_fixture(tiny):
    recs = six_records(tiny)
    kept, report = filter_records(recs, tiny)
    assert [r["record_id"] for r in report] == list(SIX)
    assert [r["kept"] for r in report] == [True, False, True, True, False, False]
    assert [r["reason"] for r in report][-1] == "Failed"
    by_id = {r.record_id: r for r in kept}
    assert by_id["r1"].final_structures == {"s1"} and by_id["r1"].final_improvements == {"i1"}
    assert by_id["r3"].final_structures == {"s1", "s2"} and by_id["r3"].final_improvements == {"i1", "i2"}
    assert by_id["r4"].final_structures == {"s3"} and by_id["r4"].final_improvements == {"i1"}
    assert {r["record_id"]: r["removed_edges"] for r in report}["r3"] == 2
    assert {r["record_id"]: r["removed_nodes"] for r in report}["r4"] == 1

    from odrase.ontology import reference_graph

    g_a = reference_graph(tiny)
    for rec in recs[:5]:
        g_b = rec.instance_graph
        ok, nodes, _ = brute_force_filter(g_b.nodes, g_b.edges, g_a.nodes, g_a.edges)
        assert ok == (rec.record_id in by_id)
        if ok:
            v = by_id[rec.record_id].verdict
            assert set(v.filtered_graph.nodes) == nodes


def test_roundtrip_structural_equality(tiny):
    recs = six_records(tiny)
    kept, _ = filter_records(recs, tiny)
    for batch in (recs, kept):
        text = dumps_dataset(batch, tiny)
        assert loads_dataset(text, tiny).records == list(batch)
        assert dumps_dataset(loads_dataset(text, tiny).records, tiny) == text


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1), st.integers(1, 25))
def test_roundtrip_fuzz(cfg, seed, noise, n):
    recs = annotate_many([(f"id-{k}", f"img/{k}.jpg") for k in range(n)], cfg, MockBackend(seed, noise, cfg))
    kept, _ = filter_records(recs, cfg)
    for batch in (recs, kept):
        text = dumps_dataset(batch, cfg)
        back = loads_dataset(text, cfg).records
        assert back == list(batch)
        assert dumps_dataset(back, cfg) == text


def test_header_and_hash_mismatch(tiny, cfg, tmp_path):
    path = tmp_path / "d.jsonl"
    write_dataset(path, six_records(tiny), tiny)
    header = json.loads(path.read_text().split("\n")[0])
    assert header == {"format": "odrase-dataset", "version": 1,
                      "ontology_hash": tiny.content_hash(), "n_records": 6}
    with pytest.raises(OntologyMismatchError):
        read_dataset(path, cfg)
    edited = parse_ontology(TINY_ONTOLOGY.replace("s3 -> i1\n", ""))
    with pytest.raises(OntologyMismatchError):
        read_dataset(path, edited)
    assert len(read_dataset(path).records) == 6


def test_malformed_files(tiny):
    with pytest.raises(DatasetError):
        loads_dataset("", tiny)
    with pytest.raises(DatasetError):
        loads_dataset('{"format": "other"}\n', tiny)
    good = dumps_dataset(six_records(tiny)[:1], tiny)
    with pytest.raises(DatasetError, match=":2:"):
        loads_dataset(good.split("\n")[0] + "\n{not json\n", tiny)
    rec_line = good.split("\n")[1]
    with pytest.raises(DatasetError):
        loads_dataset(good + rec_line + "\n", tiny)


def test_duplicate_ids_refused_on_write(tiny):
    rec = six_records(tiny)[0]
    with pytest.raises(DatasetError):
        dumps_dataset([rec, rec], tiny)


def test_filter_idempotent(cfg):
    recs = annotate_many([(f"r{k}", "x") for k in range(100)], cfg, MockBackend(2, 0.5, cfg))
    kept, first = filter_records(recs, cfg)
    again, report = filter_records(kept, cfg)
    assert again == kept
    assert report == [r for r in first if r["kept"]]
    assert dumps_dataset(again, cfg) == dumps_dataset(kept, cfg)


def test_filter_noise_one_discards_all(cfg):
    recs = annotate_many([(f"r{k}", "x") for k in range(50)], cfg, MockBackend(2, 1.0, cfg))
    kept, report = filter_records(recs, cfg)
    assert kept == [] and not any(r["kept"] for r in report)


def test_transcripts_file(tiny, tmp_path):
    path = tmp_path / "t.jsonl"
    recs = six_records(tiny)
    write_transcripts(path, recs)
    rows = [json.loads(x) for x in path.read_text().splitlines()]
    assert len(rows) == 5 * 4 + 2
    assert rows[0]["record_id"] == "r1" and rows[0]["stage"] == 1 and rows[0]["response"] == "risk of r1"


def test_targets_and_vectors(tiny):
    recs = six_records(tiny)
    kept, _ = filter_records(recs, tiny)
    r4 = next(r for r in kept if r.record_id == "r4")
    assert record_targets(r4) == {"i1"}
    assert record_targets(recs[3]) == {"i1", "i2"}
    assert label_vector({"i1", "i3"}, tiny) == [1, 0, 1]


def test_split_is_deterministic_and_balanced():
    ids = [f"rec{k}" for k in range(5000)]
    splits = [split_of(i) for i in ids]
    assert splits == [split_of(i) for i in ids]
    frac = splits.count("train") / len(ids)
    assert 0.77 < frac < 0.83
    assert 0.08 < splits.count("test") / len(ids) < 0.12


@pytest.mark.parametrize("n", [0, 1, 2, 5])
def test_edit_prompt_connectives(cfg, n):
    labels = list(cfg.vocabulary.improvements)[::-1][:n]
    prompt = edit_prompt(labels, cfg)
    assert prompt.count(" and ") == max(n - 1, 0)
    assert (prompt != "") == (n > 0)


def test_edit_prompt_order_and_examples(tiny):
    assert edit_prompt({"i3", "i1"}, tiny) == "i1 and i3"
    assert edit_prompt({"i2"}, tiny) == "i2"
    rows = edit_prompt_rows([{"record_id": "a", "labels": []}, {"record_id": "b", "labels": ["i3", "i1"]}], tiny)
    assert rows[0] == {"record_id": "a", "prompt": "", "no_improvements_needed": True,
                       "note": "no improvements needed"}
    assert rows[1] == {"record_id": "b", "prompt": "i1 and i3", "no_improvements_needed": False}
    with pytest.raises(Exception):
        edit_prompt({"nope"}, tiny)
