"""Synthetic embedding fixtures whose labels are linearly decodable."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import label_vector, record_targets, usable
from .tensorio import embedding_path, write_embedding


@dataclass(frozen=True)
class SyntheticSpec:
    n_samples: int = 200
    n_classes: int = 10
    seq_len: int = 8
    image_tokens: int = 6
    text_dim: int = 32
    image_dim: int = 16
    label_rate: float = 0.3
    noise: float = 0.1
    seed: int = 0


def make_fixture(spec: SyntheticSpec = SyntheticSpec()):
    """Return (text, image, labels) with shapes (N, S, Dt), (N, S', Di), (N, C).

    Every text token is ``y @ M + noise`` for a fixed random code book ``M``,
    so the mean text token recovers ``y`` by least squares; image tokens carry
    a weaker copy of the same code plus noise. Embeddings are float32, as on
    disk.
    """
    rng = np.random.default_rng(spec.seed)
    y = (rng.random((spec.n_samples, spec.n_classes)) < spec.label_rate).astype(np.float64)
    code_t = rng.normal(size=(spec.n_classes, spec.text_dim))
    code_i = rng.normal(size=(spec.n_classes, spec.image_dim))
    text = (y @ code_t)[:, None, :] + spec.noise * rng.normal(
        size=(spec.n_samples, spec.seq_len, spec.text_dim)
    )
    image = 0.5 * (y @ code_i)[:, None, :] + rng.normal(
        size=(spec.n_samples, spec.image_tokens, spec.image_dim)
    )
    return text.astype(np.float32), image.astype(np.float32), y


def linear_decodability(text: np.ndarray, y: np.ndarray) -> float:
    """Subset accuracy of a least-squares read-out from the mean text token.

    Used by the fixture tests to confirm the labels really are linearly
    decodable before a model is asked to learn them.
    """
    x = np.asarray(text, dtype=np.float64).mean(axis=1)
    x = np.hstack([x, np.ones((len(x), 1))])
    w, *_ = np.linalg.lstsq(x, 2 * y - 1, rcond=None)
    pred = (x @ w) > 0
    return float(np.mean(np.all(pred == (y > 0.5), axis=1)))


def _record_rng(seed: int, record_id: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}|{record_id}".encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def write_record_embeddings(records, cfg, out_dir, spec: SyntheticSpec = SyntheticSpec()) -> int:
    """Write ``<id>.txt.odre`` / ``<id>.img.odre`` encoding each record's targets.

    Stands in for frozen encoders: the code books depend only on
    ``spec.seed`` and the per-record noise only on (seed, record_id), so the
    output is independent of record order. Returns the number of records
    written.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    n_classes = cfg.vocabulary.n_classes
    code_t = rng.normal(size=(n_classes, spec.text_dim))
    code_i = rng.normal(size=(n_classes, spec.image_dim))
    count = 0
    for rec in records:
        if not usable(rec):
            continue
        y = np.asarray(label_vector(record_targets(rec), cfg), dtype=np.float64)
        r = _record_rng(spec.seed, rec.record_id)
        text = y @ code_t + spec.noise * r.normal(size=(spec.seq_len, spec.text_dim))
        image = 0.5 * (y @ code_i) + r.normal(size=(spec.image_tokens, spec.image_dim))
        write_embedding(embedding_path(out_dir, rec.record_id, "txt"), text)
        write_embedding(embedding_path(out_dir, rec.record_id, "img"), image)
        count += 1
    return count
