"""Multi-label metrics: example-averaged recall/precision/F1 and subset accuracy.

Per sample, precision is |pred & truth| / |pred| and recall is
|pred & truth| / |truth|. A sample with empty truth and empty prediction
scores 1 on both. A sample where exactly one side is empty scores 0 on
both. The averaged ratios give the headline precision and recall; F1 is the
harmonic mean of those two averages. Accuracy is exact set match. Every
figure is a percentage.

Micro- and macro-averaged variants are reported alongside under their own
keys.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Collection, Sequence

COLUMNS = ("recall", "precision", "f1", "accuracy")
HEADERS = ("Recall", "Precision", "F1", "Acc")


def harmonic(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p > 0 and r > 0 else 0.0


@dataclass(frozen=True)
class ClassCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0


@dataclass(frozen=True)
class MetricsReport:
    recall: float
    precision: float
    f1: float
    accuracy: float
    n_samples: int
    n_classes: int
    per_class_counts: dict[str, ClassCounts] = field(default_factory=dict)
    micro: dict[str, float] = field(default_factory=dict)
    macro: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        out = asdict(self)
        out["per_class_counts"] = {k: asdict(v) for k, v in self.per_class_counts.items()}
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, data: dict) -> "MetricsReport":
        data = dict(data)
        data["per_class_counts"] = {k: ClassCounts(**v) for k, v in data.get("per_class_counts", {}).items()}
        return cls(**data)

    def table(self, title: str = "") -> str:
        return format_table([(title, self)])


def evaluate(
    predictions: Sequence[Collection[str]],
    truths: Sequence[Collection[str]],
    labels: Sequence[str] | int,
) -> MetricsReport:
    """Score predicted label sets against truths.

    ``labels`` is the class vocabulary in index order; an integer C means
    labels are the class indices ``0..C-1``.
    """
    if isinstance(labels, int):
        labels = list(range(labels))
    labels = list(labels)
    known = set(labels)
    if len(predictions) != len(truths):
        raise ValueError(f"{len(predictions)} predictions for {len(truths)} truths")
    if not truths:
        raise ValueError("cannot evaluate an empty sample list")

    counts = {lab: [0, 0, 0] for lab in labels}
    p_sum = r_sum = exact = 0.0
    for pred, truth in zip(predictions, truths):
        pred, truth = set(pred), set(truth)
        bad = (pred | truth) - known
        if bad:
            raise ValueError(f"unknown label(s) {sorted(map(str, bad))}")
        hit = len(pred & truth)
        if not pred and not truth:
            p_i = r_i = 1.0
        else:
            p_i = hit / len(pred) if pred else 0.0
            r_i = hit / len(truth) if truth else 0.0
        p_sum += p_i
        r_sum += r_i
        exact += pred == truth
        for lab in pred & truth:
            counts[lab][0] += 1
        for lab in pred - truth:
            counts[lab][1] += 1
        for lab in truth - pred:
            counts[lab][2] += 1

    n = len(truths)
    precision = p_sum / n
    recall = r_sum / n

    tp = sum(c[0] for c in counts.values())
    fp = sum(c[1] for c in counts.values())
    fn = sum(c[2] for c in counts.values())
    micro_p = tp / (tp + fp) if tp + fp else 0.0
    micro_r = tp / (tp + fn) if tp + fn else 0.0
    # classes never predicted nor present carry no information; skip them
    active = [c for c in counts.values() if any(c)]
    macro_p = sum(c[0] / (c[0] + c[1]) if c[0] + c[1] else 0.0 for c in active) / len(active) if active else 1.0
    macro_r = sum(c[0] / (c[0] + c[2]) if c[0] + c[2] else 0.0 for c in active) / len(active) if active else 1.0

    def pct(x: float) -> float:
        return 100.0 * x

    return MetricsReport(
        recall=pct(recall),
        precision=pct(precision),
        f1=pct(harmonic(precision, recall)),
        accuracy=pct(exact / n),
        n_samples=n,
        n_classes=len(labels),
        per_class_counts={str(k): ClassCounts(*v) for k, v in counts.items()},
        micro={"recall": pct(micro_r), "precision": pct(micro_p), "f1": pct(harmonic(micro_p, micro_r))},
        macro={"recall": pct(macro_r), "precision": pct(macro_p), "f1": pct(harmonic(macro_p, macro_r))},
    )


def compare_runs(a: MetricsReport, b: MetricsReport) -> dict[str, float]:
    """Signed differences ``a - b`` for each headline metric."""
    if a.n_classes != b.n_classes:
        raise ValueError(f"class counts differ: {a.n_classes} vs {b.n_classes}")
    return {k: round(getattr(a, k) - getattr(b, k), 10) for k in COLUMNS}


def format_delta(delta: dict[str, float]) -> str:
    head = "".join(f"{h:>10}" for h in HEADERS)
    row = "".join(f"{delta[k]:>+10.2f}" for k in COLUMNS)
    return f"{'':<12}{head}\n{'delta':<12}{row}"


def format_table(rows: Sequence[tuple[str, MetricsReport]]) -> str:
    width = max([12] + [len(name) + 2 for name, _ in rows])
    lines = [f"{'':<{width}}" + "".join(f"{h:>10}" for h in HEADERS)]
    for name, rep in rows:
        lines.append(f"{name:<{width}}" + "".join(f"{getattr(rep, k):>10.2f}" for k in COLUMNS))
    return "\n".join(lines)
