"""Confusion-matrix metrics: accuracy, balanced accuracy, macro P/R/F.

Precision, recall and F1 are macro-averaged (unweighted mean over the three
polarity classes). A 0/0 ratio counts as 0, so a class that is never
predicted drags the macro scores down.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InputError, LabelError

CLASSES = ("POSITIVE", "NEUTRAL", "NEGATIVE")
REPORT_SCHEMA_VERSION = 1
AVERAGING = "macro"


def label_index(label) -> int:
    if isinstance(label, (int, np.integer)):
        if not 0 <= label < len(CLASSES):
            raise LabelError(f"class index {label} out of range")
        return int(label)
    try:
        return CLASSES.index(str(label).upper())
    except ValueError:
        raise LabelError(f"unknown polarity label {label!r}") from None


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted, in ``CLASSES`` order."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((len(CLASSES),) * 2, np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)


def confusion(true_labels: Sequence, predicted_labels: Sequence) -> ConfusionMatrix:
    if len(true_labels) != len(predicted_labels):
        raise InputError(f"{len(true_labels)} true labels vs {len(predicted_labels)} predictions")
    cm = np.zeros((len(CLASSES),) * 2, np.int64)
    if len(true_labels):
        t = np.fromiter((label_index(x) for x in true_labels), np.int64, len(true_labels))
        p = np.fromiter((label_index(x) for x in predicted_labels), np.int64, len(predicted_labels))
        np.add.at(cm, (t, p), 1)
    return ConfusionMatrix(cm)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


@dataclass
class MetricsReport:
    accuracy: float
    balanced_accuracy: float
    precision: dict[str, float]
    recall: dict[str, float]
    f1: dict[str, float]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    support: dict[str, int]
    n_samples: int
    confusion: list[list[int]]
    by_language: dict[str, "MetricsReport"] = field(default_factory=dict)
    by_domain: dict[str, "MetricsReport"] = field(default_factory=dict)

    @property
    def f_score(self) -> float:
        return self.macro_f1

    def to_dict(self) -> dict:
        d = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "averaging": AVERAGING,
            "classes": list(CLASSES),
            "accuracy": self.accuracy,
            "balanced_accuracy": self.balanced_accuracy,
            "f_score": self.macro_f1,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "precision": dict(self.precision),
            "recall": dict(self.recall),
            "f1": dict(self.f1),
            "support": dict(self.support),
            "n_samples": self.n_samples,
            "confusion": self.confusion,
        }
        if self.by_language:
            d["by_language"] = {k: v.to_dict() for k, v in self.by_language.items()}
        if self.by_domain:
            d["by_domain"] = {k: v.to_dict() for k, v in self.by_domain.items()}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise InputError(f"unsupported report schema version {d.get('schema_version')!r}")
        return cls(
            accuracy=d["accuracy"],
            balanced_accuracy=d["balanced_accuracy"],
            precision=dict(d["precision"]),
            recall=dict(d["recall"]),
            f1=dict(d["f1"]),
            macro_precision=d["macro_precision"],
            macro_recall=d["macro_recall"],
            macro_f1=d["macro_f1"],
            support=dict(d["support"]),
            n_samples=d["n_samples"],
            confusion=[list(r) for r in d["confusion"]],
            by_language={k: cls.from_dict(v) for k, v in d.get("by_language", {}).items()},
            by_domain={k: cls.from_dict(v) for k, v in d.get("by_domain", {}).items()},
        )


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    c = cm.counts.astype(np.float64)
    total = c.sum()
    if total <= 0:
        raise InputError("cannot compute metrics on an empty confusion matrix")
    tp = np.diag(c)
    prec = [_ratio(tp[i], c[:, i].sum()) for i in range(len(CLASSES))]
    rec = [_ratio(tp[i], c[i, :].sum()) for i in range(len(CLASSES))]
    f1 = [_ratio(2 * p * r, p + r) for p, r in zip(prec, rec)]
    k = len(CLASSES)
    return MetricsReport(
        accuracy=float(tp.sum() / total),
        balanced_accuracy=float(np.sum(rec) / k),
        precision=dict(zip(CLASSES, map(float, prec))),
        recall=dict(zip(CLASSES, map(float, rec))),
        f1=dict(zip(CLASSES, map(float, f1))),
        macro_precision=float(np.sum(prec) / k),
        macro_recall=float(np.sum(rec) / k),
        macro_f1=float(np.sum(f1) / k),
        support={cls: int(cm.counts[i].sum()) for i, cls in enumerate(CLASSES)},
        n_samples=int(total),
        confusion=cm.counts.tolist(),
    )


def evaluate(
    true_labels: Sequence,
    predicted_labels: Sequence,
    languages: Sequence[str] | None = None,
    domains: Sequence[str] | None = None,
) -> MetricsReport:
    """Overall report plus per-language / per-domain sub-reports."""
    report = metrics(confusion(true_labels, predicted_labels))
    for attr, keys in (("by_language", languages), ("by_domain", domains)):
        if keys is None:
            continue
        groups: dict[str, list[int]] = {}
        for i, key in enumerate(keys):
            groups.setdefault(str(key), []).append(i)
        sub = {
            key: metrics(confusion([true_labels[i] for i in idx], [predicted_labels[i] for i in idx]))
            for key, idx in sorted(groups.items())
        }
        setattr(report, attr, sub)
    return report


def relative_improvement(new_value: float, old_value: float) -> float:
    """Percentage change ``100 * (new - old) / old`` (unrounded)."""
    if old_value <= 0:
        raise InputError("baseline value must be positive")
    return 100.0 * (new_value - old_value) / old_value


def format_improvement(pct: float) -> str:
    return f"{pct:.1f}%"


def render_report(report: MetricsReport, fmt: str = "json", label: str = "model") -> str:
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2)
    if fmt != "table":
        raise ValueError(f"unknown report format {fmt!r}")
    rows = [(label, report)]
    rows += [(f"{label}[lang={k}]", v) for k, v in report.by_language.items()]
    rows += [(f"{label}[domain={k}]", v) for k, v in report.by_domain.items()]
    return render_table(rows)


def render_table(rows: Iterable[tuple[str, MetricsReport]]) -> str:
    """Aligned ``Accuracy BAC F-score`` columns, two decimals."""
    rows = list(rows)
    width = max([len("Model")] + [len(name) for name, _ in rows])
    lines = [f"# averaging: {AVERAGING}", f"{'Model':<{width}} {'Accuracy':>8} {'BAC':>8} {'F-score':>8}"]
    for name, r in rows:
        lines.append(f"{name:<{width}} {r.accuracy:>8.2f} {r.balanced_accuracy:>8.2f} {r.macro_f1:>8.2f}")
    return "\n".join(lines) + "\n"


def report_from_json(text: str) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(text))
