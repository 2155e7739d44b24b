"""``odrase`` command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 backend error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import dataset as ds
from .editing import EditServiceError, edit_image_client
from .evaluation import evaluate, format_table
from .g2cot import BackendError, annotate_many, backend_from_spec
from .model import TrainConfig, TrainingError, labels_from_probs, predict_proba, train
from .ontology import OntologyConfig, OntologyError, load_ontology
from .synthetic import SyntheticSpec, write_record_embeddings
from .tensorio import FormatError, embedding_path, read_checkpoint, read_embedding, write_checkpoint

log = logging.getLogger("odrase")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_BACKEND = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _summary(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------------------
# helpers


def read_manifest(path: str | Path) -> list[tuple[str, str]]:
    """One image per line: ``image_ref`` or ``record_id<TAB>image_ref``.

    Without an explicit id the file stem is used. Blank and ``#`` lines are
    skipped.
    """
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    items = []
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "\t" in line:
            rid, ref = (x.strip() for x in line.split("\t", 1))
        else:
            ref = line
            rid = Path(ref).stem
        items.append((rid, ref))
    if not items:
        raise DataError("empty manifest")
    ids = [rid for rid, _ in items]
    if len(set(ids)) != len(ids):
        raise DataError("manifest yields duplicate record ids; give explicit ids")
    return items


def _ontology(path: str | None) -> OntologyConfig:
    return load_ontology(path)


def load_samples(records, emb_dir, cfg: OntologyConfig):
    xs_t, xs_i, ys, kept = [], [], [], []
    for rec in records:
        if not ds.usable(rec):
            continue
        paths = [embedding_path(emb_dir, rec.record_id, m) for m in ("txt", "img")]
        for p in paths:
            if not p.exists():
                raise DataError(f"missing embedding file for record {rec.record_id}: {p}")
        try:
            xs_t.append(read_embedding(paths[0]))
            xs_i.append(read_embedding(paths[1]))
        except FormatError as exc:
            raise DataError(f"record {rec.record_id}: {exc}") from exc
        ys.append(np.asarray(ds.label_vector(ds.record_targets(rec), cfg), dtype=np.float64))
        kept.append(rec)
    if not kept:
        raise DataError("no usable records in dataset")
    for name, arrs in (("text", xs_t), ("image", xs_i)):
        shapes = {a.shape for a in arrs}
        if len(shapes) != 1:
            raise DataError(f"{name} embeddings have inconsistent shapes {sorted(shapes)}")
    return kept, np.stack(xs_t), np.stack(xs_i), np.stack(ys)


def _select_split(records, split: str):
    if split == "all":
        return records
    return [r for r in records if ds.split_of(r.record_id) == split]


def _train_config(path: str | None, seed: int | None) -> TrainConfig:
    values = {}
    if path:
        try:
            values = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read train config {path}: {exc}") from exc
        allowed = {f.name for f in fields(TrainConfig)}
        unknown = set(values) - allowed
        if unknown:
            raise DataError(f"unknown train config keys {sorted(unknown)}")
    if seed is not None:
        values["seed"] = seed
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid train config: {exc}") from exc


def _load_model(path: str, dataset_file: ds.DatasetFile):
    try:
        params, meta = read_checkpoint(path)
    except (OSError, FormatError) as exc:
        raise DataError(f"cannot load model {path}: {exc}") from exc
    if meta.get("ontology_hash") != dataset_file.ontology_hash:
        raise DataError("model and dataset were built against different ontologies")
    return params, meta


# ---------------------------------------------------------------------------
# commands


def cmd_build_dataset(args) -> int:
    cfg = _ontology(args.ontology)
    items = read_manifest(args.manifest)
    spec = args.backend or os.environ.get("ODRASE_BACKEND_URL")
    if not spec:
        raise UsageError("no backend: pass --backend or set ODRASE_BACKEND_URL")
    try:
        backend = backend_from_spec(spec, cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    records = annotate_many(items, cfg, backend, jobs=args.jobs)
    ds.write_dataset(args.out, records, cfg)
    transcripts = args.transcripts or str(Path(args.out).with_suffix(".transcripts.jsonl"))
    ds.write_transcripts(transcripts, records)
    failed = sum(r.failed for r in records)
    _, report = ds.filter_records(records, cfg)
    would_discard = sum(1 for row in report if row["reason"] != "Failed" and not row["kept"])
    ok = len(records) - failed
    _summary({
        "records": len(records),
        "ok": ok,
        "failed": failed,
        "would_discard": would_discard,
        "would_discard_fraction": would_discard / ok if ok else 0.0,
    })
    if failed == len(records):
        print("all records failed", file=sys.stderr)
        return EXIT_BACKEND
    return EXIT_OK


def cmd_filter(args) -> int:
    cfg = _ontology(args.ontology)
    data = ds.read_dataset(args.inp, cfg)
    records = data.records
    if args.jobs > 1:
        chunks = [records[i::args.jobs] for i in range(args.jobs)]
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(lambda c: ds.filter_records(c, cfg), chunks))
        # restore input order
        kept_ids = {r.record_id: r for res in results for r in res[0]}
        rows = {row["record_id"]: row for res in results for row in res[1]}
        kept = [kept_ids[r.record_id] for r in records if r.record_id in kept_ids]
        report = [rows[r.record_id] for r in records]
    else:
        kept, report = ds.filter_records(records, cfg)
    ds.write_dataset(args.out, kept, cfg)
    ds.write_jsonl(args.report, report)
    discarded = len(report) - len(kept)
    _summary({
        "records": len(report),
        "kept": len(kept),
        "discarded": discarded,
        "discarded_fraction": discarded / len(report) if report else 0.0,
    })
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _ontology(args.ontology)
    data = ds.read_dataset(args.dataset, cfg)
    records = _select_split(data.records, args.split)
    _, xt, xi, y = load_samples(records, args.emb, cfg)
    tcfg = _train_config(args.config, args.seed)
    try:
        result = train(list(zip(xt, xi, y)), tcfg)
    except TrainingError as exc:
        raise DataError(str(exc)) from exc
    meta = {
        "ontology_hash": cfg.content_hash(),
        "labels": list(cfg.vocabulary.improvements),
        "train_config": asdict(tcfg),
        "epoch_losses": result.epoch_losses,
        "n_samples": int(len(y)),
    }
    write_checkpoint(args.out, result.params, meta)
    _summary({
        "samples": int(len(y)),
        "epochs": tcfg.epochs,
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
    })
    return EXIT_OK


def _predict_all(args):
    data = ds.read_dataset(args.dataset)
    params, meta = _load_model(args.model, data)
    cfg = _ontology(args.ontology)
    if cfg.content_hash() != data.ontology_hash:
        raise DataError("ontology does not match the dataset header hash")
    records = _select_split(data.records, args.split)
    kept, xt, xi, _ = load_samples(records, args.emb, cfg)
    probs = predict_proba(xt, xi, params)
    return cfg, meta, kept, probs


def cmd_eval(args) -> int:
    cfg, meta, kept, probs = _predict_all(args)
    threshold = args.threshold if args.threshold is not None else meta["train_config"]["threshold"]
    labels = meta["labels"]
    preds = [labels_from_probs(p, threshold, labels) for p in probs]
    truths = [set(ds.record_targets(r)) for r in kept]
    report = evaluate(preds, truths, labels)
    print(format_table([(Path(args.dataset).stem, report)]))
    if args.json:
        Path(args.json).write_text(report.dumps() + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg, meta, kept, probs = _predict_all(args)
    labels = meta["labels"]
    rows = []
    for rec, p in zip(kept, probs):
        hits = labels_from_probs(p, args.threshold, labels)
        rows.append({
            "record_id": rec.record_id,
            "image_ref": rec.image_ref,
            "labels": [lab for lab in labels if lab in hits],
            "probabilities": {lab: float(v) for lab, v in zip(labels, p)},
        })
    ds.write_jsonl(args.out, rows)
    _summary({"records": len(rows), "with_labels": sum(bool(r["labels"]) for r in rows)})
    return EXIT_OK


def cmd_edit_prompt(args) -> int:
    cfg = _ontology(args.ontology)
    preds = ds.read_jsonl(args.pred)
    try:
        rows = ds.edit_prompt_rows(preds, cfg)
    except OntologyError as exc:
        raise DataError(f"predictions contain an unknown label: {exc}") from exc
    ds.write_jsonl(args.out, rows)
    _summary({"records": len(rows), "empty": sum(r["no_improvements_needed"] for r in rows)})
    return EXIT_OK


def cmd_edit(args) -> int:
    cfg = _ontology(args.ontology)
    preds = ds.read_jsonl(args.pred)
    rows = ds.edit_prompt_rows(preds, cfg)
    done = skipped = 0
    for pred, row in zip(preds, rows):
        if row["no_improvements_needed"]:
            skipped += 1
            continue
        image = _find_image(args.images, pred)
        try:
            edit_image_client(row["record_id"], image, row["prompt"], args.service, args.out)
        except EditServiceError as exc:
            print(f"record {row['record_id']}: {exc}", file=sys.stderr)
            return EXIT_BACKEND
        done += 1
    _summary({"edited": done, "skipped_no_improvements": skipped})
    return EXIT_OK


def _find_image(images_dir: str, pred: dict) -> Path:
    candidates = []
    if pred.get("image_ref"):
        candidates.append(Path(images_dir) / Path(pred["image_ref"]).name)
    candidates.append(Path(images_dir) / f"{pred['record_id']}.png")
    for c in candidates:
        if c.exists():
            return c
    raise DataError(f"no image for record {pred['record_id']} in {images_dir}")


def cmd_synth_embeddings(args) -> int:
    cfg = _ontology(args.ontology)
    data = ds.read_dataset(args.dataset, cfg)
    n = write_record_embeddings(data.records, cfg, args.out, SyntheticSpec(seed=args.seed))
    _summary({"records": n})
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="odrase", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def onto(sp):
        sp.add_argument("--ontology", help="ontology config (default: bundled)")

    def split(sp):
        sp.add_argument("--split", choices=("all",) + ds.SPLITS, default="all")

    sp = sub.add_parser("build-dataset", help="annotate images with the four-stage protocol")
    sp.add_argument("--manifest", required=True)
    onto(sp)
    sp.add_argument("--backend", help="mock:<seed>:<noise> or URL (default $ODRASE_BACKEND_URL)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--transcripts", help="transcript JSONL (default <out>.transcripts.jsonl)")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_build_dataset)

    sp = sub.add_parser("filter", help="apply the ontology filter")
    sp.add_argument("--in", dest="inp", required=True)
    onto(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--report", required=True)
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_filter)

    sp = sub.add_parser("train", help="train the grounding classifier")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--emb", required=True)
    sp.add_argument("--config", help="JSON file with TrainConfig fields")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    onto(sp)
    split(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score a model on a dataset")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--emb", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--json", help="also write the metrics report as JSON")
    onto(sp)
    split(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("predict", help="write per-record label sets and probabilities")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--emb", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--out", required=True)
    onto(sp)
    split(sp)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("edit-prompt", help="turn predictions into edit prompts")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--out", required=True)
    onto(sp)
    sp.set_defaults(func=cmd_edit_prompt)

    sp = sub.add_parser("edit", help="send images and prompts to an image-editing service")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--images", required=True)
    sp.add_argument("--service", required=True)
    sp.add_argument("--out", required=True)
    onto(sp)
    sp.set_defaults(func=cmd_edit)

    sp = sub.add_parser("synth-embeddings", help="write synthetic stand-in embeddings for a dataset")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    onto(sp)
    sp.set_defaults(func=cmd_synth_embeddings)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    if getattr(args, "threshold", None) is not None and not 0.0 < args.threshold < 1.0:
        parser.error("--threshold must lie in (0, 1)")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"odrase: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ds.DatasetError, OntologyError, FormatError) as exc:
        print(f"odrase: {exc}", file=sys.stderr)
        return EXIT_DATA
    except BackendError as exc:
        print(f"odrase: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
