"""JSONL persistence of annotation records, filter reports and predictions.

A dataset file starts with a header line::

    {"format": "odrase-dataset", "version": 1, "ontology_hash": "...", "n_records": N}

followed by one record per line. Nodes are stored as ``[module, label]``
pairs and edges as pairs of nodes, so files decode without the ontology;
the header hash ties a file to the ontology it was built against.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .g2cot import AnnotationRecord, Stage, StageOutput
from .graph_filter import FilterVerdict, Reason, filter_record_graph
from .ontology import Module, NodeRef, OntologyConfig, TypedDiGraph, class_index, reference_graph

FORMAT = "odrase-dataset"
VERSION = 1
NO_IMPROVEMENTS_MARKER = "no improvements needed"


class DatasetError(ValueError):
    pass


class OntologyMismatchError(DatasetError):
    pass


def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# encoding


def _node(n: NodeRef) -> list[str]:
    return [n.module.value, n.label]


def _unnode(x) -> NodeRef:
    return NodeRef(Module(x[0]), x[1])


class _Codec:
    def __init__(self, cfg: OntologyConfig | None):
        self.cfg = cfg

    def nodes(self, nodes: Iterable[NodeRef]) -> list:
        if self.cfg is not None:
            return [_node(n) for n in self.cfg.sorted_nodes(nodes)]
        return sorted(_node(n) for n in nodes)

    def edges(self, edges) -> list:
        if self.cfg is not None:
            return [[_node(a), _node(b)] for a, b in self.cfg.sorted_edges(edges)]
        return sorted([_node(a), _node(b)] for a, b in edges)

    def labels(self, labels: Iterable[str], module: Module) -> list[str]:
        if self.cfg is not None:
            order = self.cfg.vocabulary.labels(module)
            return [lab for lab in order if lab in set(labels)]
        return sorted(labels)

    def graph(self, g: TypedDiGraph) -> dict:
        return {"nodes": self.nodes(g.nodes), "edges": self.edges(g.edges)}


def _ungraph(d: dict) -> TypedDiGraph:
    return TypedDiGraph(
        frozenset(_unnode(n) for n in d["nodes"]),
        frozenset((_unnode(a), _unnode(b)) for a, b in d["edges"]),
    )


def record_to_json(rec: AnnotationRecord, cfg: OntologyConfig | None = None) -> dict:
    c = _Codec(cfg)
    out = {
        "record_id": rec.record_id,
        "image_ref": rec.image_ref,
        "status": rec.status,
        "failure": rec.failure,
        "stages": [
            {
                "stage": int(s.stage),
                "name": s.stage.title,
                "raw_text": s.raw_text,
                "labels": c.nodes(s.parsed_labels),
                "unknown_count": s.unknown_count,
            }
            for s in rec.stages
        ],
        "instance_graph": c.graph(rec.instance_graph),
        "verdict": None,
        "final_structures": c.labels(rec.final_structures, Module.ROAD_STRUCTURE),
        "final_improvements": c.labels(rec.final_improvements, Module.IMPROVEMENT),
    }
    if rec.verdict is not None:
        v = rec.verdict
        out["verdict"] = {
            "kept": v.kept,
            "reason": v.reason.value,
            "filtered_graph": c.graph(v.filtered_graph),
            "removed_nodes": c.nodes(v.removed_nodes),
            "removed_edges": c.edges(v.removed_edges),
        }
    return out


def record_from_json(d: dict) -> AnnotationRecord:
    verdict = None
    if d.get("verdict") is not None:
        v = d["verdict"]
        verdict = FilterVerdict(
            kept=bool(v["kept"]),
            filtered_graph=_ungraph(v["filtered_graph"]),
            removed_nodes=frozenset(_unnode(n) for n in v["removed_nodes"]),
            removed_edges=frozenset((_unnode(a), _unnode(b)) for a, b in v["removed_edges"]),
            reason=Reason(v["reason"]),
        )
    return AnnotationRecord(
        record_id=d["record_id"],
        image_ref=d["image_ref"],
        stages=tuple(
            StageOutput(
                Stage(s["stage"]),
                s["raw_text"],
                frozenset(_unnode(n) for n in s["labels"]),
                int(s.get("unknown_count", 0)),
            )
            for s in d["stages"]
        ),
        instance_graph=_ungraph(d["instance_graph"]),
        verdict=verdict,
        final_structures=frozenset(d["final_structures"]),
        final_improvements=frozenset(d["final_improvements"]),
        status=d.get("status", "ok"),
        failure=d.get("failure"),
    )


# ---------------------------------------------------------------------------
# files


@dataclass
class DatasetFile:
    ontology_hash: str
    records: list[AnnotationRecord]

    def header(self) -> dict:
        return {
            "format": FORMAT,
            "version": VERSION,
            "ontology_hash": self.ontology_hash,
            "n_records": len(self.records),
        }


def dumps_dataset(records: Sequence[AnnotationRecord], cfg: OntologyConfig) -> str:
    ids = [r.record_id for r in records]
    if len(set(ids)) != len(ids):
        raise DatasetError("record_ids must be unique")
    ds = DatasetFile(cfg.content_hash(), list(records))
    lines = [_dumps(ds.header())] + [_dumps(record_to_json(r, cfg)) for r in records]
    return "\n".join(lines) + "\n"


def write_dataset(path: str | Path, records: Sequence[AnnotationRecord], cfg: OntologyConfig) -> None:
    Path(path).write_text(dumps_dataset(records, cfg), encoding="utf-8")


def loads_dataset(text: str, cfg: OntologyConfig | None = None, source: str = "<string>") -> DatasetFile:
    lines = [ln for ln in text.split("\n") if ln.strip()]
    if not lines:
        raise DatasetError(f"{source}: empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{source}:1: bad header: {exc}") from exc
    if header.get("format") != FORMAT or header.get("version") != VERSION:
        raise DatasetError(f"{source}: not an {FORMAT} v{VERSION} file")
    if cfg is not None and header.get("ontology_hash") != cfg.content_hash():
        raise OntologyMismatchError(
            f"{source}: dataset was built against ontology {header.get('ontology_hash')}, "
            f"but the supplied ontology hashes to {cfg.content_hash()}"
        )
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            records.append(record_from_json(json.loads(line)))
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
            raise DatasetError(f"{source}:{lineno}: bad record: {exc}") from exc
    ids = [r.record_id for r in records]
    if len(set(ids)) != len(ids):
        raise DatasetError(f"{source}: duplicate record_id")
    if cfg is not None:
        for r in records:
            cfg.validate_graph(r.instance_graph)
    return DatasetFile(header["ontology_hash"], records)


def read_dataset(path: str | Path, cfg: OntologyConfig | None = None) -> DatasetFile:
    return loads_dataset(Path(path).read_text(encoding="utf-8"), cfg, source=str(path))


def write_transcripts(path: str | Path, records: Sequence[AnnotationRecord]) -> None:
    lines = []
    for r in records:
        for t in r.transcripts:
            lines.append(_dumps({
                "record_id": r.record_id,
                "stage": int(t.stage),
                "prompt": t.prompt,
                "response": t.response,
                "backend_id": t.backend_id,
                "latency_ms": t.latency_ms,
            }))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


# ---------------------------------------------------------------------------
# filtering


def filter_records(
    records: Sequence[AnnotationRecord], cfg: OntologyConfig
) -> tuple[list[AnnotationRecord], list[dict]]:
    """Apply the reference filter; returns (kept records, one report row per input)."""
    g_a = reference_graph(cfg)
    kept, report = [], []
    for rec in records:
        if rec.failed:
            report.append({
                "record_id": rec.record_id, "kept": False, "reason": "Failed",
                "removed_nodes": len(rec.instance_graph.nodes),
                "removed_edges": len(rec.instance_graph.edges),
            })
            continue
        verdict = filter_record_graph(rec.instance_graph, g_a)
        report.append({
            "record_id": rec.record_id,
            "kept": verdict.kept,
            "reason": verdict.reason.value,
            "removed_nodes": len(verdict.removed_nodes),
            "removed_edges": len(verdict.removed_edges),
        })
        if verdict.kept:
            kept.append(rec.with_verdict(verdict))
    return kept, report


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    text = "".join(_dumps(r) + "\n" for r in rows)
    Path(path).write_text(text, encoding="utf-8")


def read_jsonl(path: str | Path) -> list[dict]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").split("\n"), start=1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from exc
    return rows


# ---------------------------------------------------------------------------
# training targets and splits


def record_targets(rec: AnnotationRecord) -> frozenset[str]:
    """Improvement labels a record teaches.

    Filtered records use their final labels; unfiltered records fall back to
    every improvement parsed at stage 4, which is what an unfiltered
    ablation trains on.
    """
    if rec.verdict is not None:
        return rec.final_improvements
    return rec.instance_graph.labels(Module.IMPROVEMENT)


def usable(rec: AnnotationRecord) -> bool:
    return not rec.failed and not rec.excluded


def label_vector(labels: Iterable[str], cfg: OntologyConfig) -> list[int]:
    y = [0] * cfg.vocabulary.n_classes
    for lab in labels:
        y[class_index(cfg, lab)] = 1
    return y


SPLITS = ("train", "val", "test")


def split_of(record_id: str, fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> str:
    """Deterministic split assignment from a hash of the record id."""
    digest = hashlib.sha256(record_id.encode("utf-8")).digest()
    u = int.from_bytes(digest[:8], "big") / 2**64
    if u < fractions[0]:
        return "train"
    if u < fractions[0] + fractions[1]:
        return "val"
    return "test"


# ---------------------------------------------------------------------------
# edit prompts


def edit_prompt(labels: Iterable[str], cfg: OntologyConfig) -> str:
    """Join improvement labels with " and " in class-index order."""
    labels = set(labels)
    ordered = sorted(labels, key=lambda lab: class_index(cfg, lab))
    return " and ".join(ordered)


def edit_prompt_rows(predictions: Sequence[dict], cfg: OntologyConfig) -> list[dict]:
    rows = []
    for p in predictions:
        prompt = edit_prompt(p["labels"], cfg)
        row = {"record_id": p["record_id"], "prompt": prompt, "no_improvements_needed": not prompt}
        if not prompt:
            row["note"] = NO_IMPROVEMENTS_MARKER
        rows.append(row)
    return rows
