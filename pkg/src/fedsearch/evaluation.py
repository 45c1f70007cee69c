"""Retrieval-as-classification evaluation.

Every test image becomes a query.  The predicted label is the majority
label over the K retrieved hits, with an exact tie broken by the single
nearest hit.  Predictions accumulate into a confusion matrix with the
malignant/cancerous class as positive, from which accuracy, precision,
and F1 derive.

For the cross-magnification scenario the report carries one confusion
matrix per magnification group plus a pooled matrix whose prediction
majority-votes across all groups at once.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import autoencoder as ae
from . import retrieval as rt
from .datasets import DatasetManifest, load_image
from .errors import ConfigError, EvaluationError

POSITIVE_LABEL = "malignant"


@dataclass
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    positive_class: str = POSITIVE_LABEL

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def add(self, true_label: str, predicted_label: str) -> None:
        actual_positive = true_label == self.positive_class
        predicted_positive = predicted_label == self.positive_class
        if actual_positive and predicted_positive:
            self.tp += 1
        elif not actual_positive and predicted_positive:
            self.fp += 1
        elif actual_positive and not predicted_positive:
            self.fn += 1
        else:
            self.tn += 1


def predict_label(hits: list[rt.Hit]) -> str:
    """Majority label over the hits; exact ties go to the nearest hit."""
    if not hits:
        raise ConfigError("cannot predict a label from zero hits")
    counts = Counter(h.label for h in hits)
    best = counts.most_common()
    if len(best) > 1 and best[0][1] == best[1][1]:
        return hits[0].label
    return best[0][0]


def metrics(cm: ConfusionMatrix) -> tuple[float, float, float]:
    """(accuracy, precision, f1); zero-denominator cases resolve to 0."""
    if cm.total == 0:
        raise ConfigError("confusion matrix is empty")
    accuracy = (cm.tp + cm.tn) / cm.total
    precision = cm.tp / (cm.tp + cm.fp) if (cm.tp + cm.fp) else 0.0
    recall = cm.tp / (cm.tp + cm.fn) if (cm.tp + cm.fn) else 0.0
    f1 = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
    return accuracy, precision, f1


@dataclass(frozen=True)
class QueryRecord:
    query_id: str
    true_label: str
    predicted_label: str
    nearest_distance: float
    seconds: float


@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    accuracy: float
    precision: float
    f1: float
    k: int
    scenario: str
    mean_search_seconds: float
    per_query: list[QueryRecord] = field(repr=False, default_factory=list)
    per_magnification: dict[str, ConfusionMatrix] | None = None  # sen2 only
    flags: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class QueryVector:
    """A prepared query for vector-level evaluation and fixtures."""

    id: str
    label: str
    vector: np.ndarray
    magnification: str = "40x"


def timing_summary(seconds: list[float]) -> tuple[float, float]:
    """Mean and nearest-rank 95th percentile of per-query wall times."""
    if not seconds:
        raise ConfigError("timing summary needs at least one record")
    ordered = sorted(seconds)
    rank = math.ceil(0.95 * len(ordered))
    return sum(ordered) / len(ordered), ordered[rank - 1]


def _guard_leakage(index: rt.FeatureIndex, query_ids: list[str]) -> None:
    indexed = {e.id for e in index.entries}
    leaked = sorted(indexed.intersection(query_ids))
    if leaked:
        raise EvaluationError(f"test ids present in the index: {leaked[:5]} (leakage)")


def _score_results(
    scored: list[tuple[str, str, rt.RetrievalResult]],
    k: int,
    scenario: str,
) -> EvalReport:
    """Fold per-query retrieval results into the report."""
    confusion = ConfusionMatrix()
    per_magnification: dict[str, ConfusionMatrix] | None = None
    records: list[QueryRecord] = []
    if scenario == "sen2":
        per_magnification = {}
    for query_id, true_label, result in scored:
        predicted = predict_label(result.hits)
        confusion.add(true_label, predicted)
        if scenario == "sen2":
            for magnification, hits in result.groups:
                if hits:
                    group_cm = per_magnification.setdefault(magnification, ConfusionMatrix())
                    group_cm.add(true_label, predict_label(hits))
        records.append(
            QueryRecord(
                query_id=query_id,
                true_label=true_label,
                predicted_label=predicted,
                nearest_distance=min(h.distance for h in result.hits),
                seconds=result.elapsed_seconds,
            )
        )
    accuracy, precision, f1 = metrics(confusion)
    flags = []
    if confusion.tp + confusion.fp == 0:
        flags.append("precision defaulted to 0: no positive predictions")
    if confusion.tp + confusion.fn == 0:
        flags.append("recall denominator empty: no positive queries")
    return EvalReport(
        confusion=confusion,
        accuracy=accuracy,
        precision=precision,
        f1=f1,
        k=k,
        scenario=scenario,
        mean_search_seconds=sum(r.seconds for r in records) / len(records),
        per_query=records,
        per_magnification=per_magnification,
        flags=flags,
    )


def evaluate_queries(
    index: rt.FeatureIndex,
    queries: list[QueryVector],
    k: int = 5,
    scenario: str = "sen1",
) -> EvalReport:
    """Vector-level evaluation; each query ranks the index directly."""
    if not queries:
        raise EvaluationError("no queries to evaluate")
    _guard_leakage(index, [q.id for q in queries])
    scored = []
    for q in queries:
        result = rt.search_vector(
            index, q.vector, k, scenario,
            query_magnification=q.magnification, query_id=q.id,
        )
        scored.append((q.id, q.label, result))
    return _score_results(scored, k, scenario)


def evaluate(
    index: rt.FeatureIndex,
    model: ae.AutoencoderModel,
    test_manifest: DatasetManifest,
    k: int = 5,
    scenario: str = "sen1",
) -> EvalReport:
    """Run every test-split image as a query against the index.

    Per-query seconds cover feature extraction plus the scan.  Test ids
    must be disjoint from the index (checked, not assumed).
    """
    records = test_manifest.split_records("test")
    if not records:
        raise EvaluationError("test manifest has no test-split records")
    _guard_leakage(index, [r.id for r in records])
    scored = []
    for record in records:
        image = load_image(record.path)
        result = rt.search(
            index, model, image, k, scenario,
            query_magnification=record.magnification, query_id=record.id,
        )
        scored.append((record.id, record.label, result))
    return _score_results(scored, k, scenario)


def write_report(report: EvalReport, path) -> None:
    """Structured text: a header line, one line per metric, then one CSV
    line per query: ``query-id, true, predicted, nearest-distance, seconds``."""
    lines = [
        f"fedsearch-eval scenario={report.scenario} k={report.k} "
        f"queries={len(report.per_query)} positive={report.confusion.positive_class}"
    ]
    cm = report.confusion
    lines.append(f"accuracy {report.accuracy:.6f}")
    lines.append(f"precision {report.precision:.6f}")
    lines.append(f"f1 {report.f1:.6f}")
    lines.append(f"tp {cm.tp}")
    lines.append(f"fp {cm.fp}")
    lines.append(f"fn {cm.fn}")
    lines.append(f"tn {cm.tn}")
    lines.append(f"mean_search_seconds {report.mean_search_seconds:.6f}")
    if report.per_magnification is not None:
        for magnification in sorted(report.per_magnification):
            group = report.per_magnification[magnification]
            g_acc, g_prec, g_f1 = metrics(group)
            lines.append(
                f"group {magnification} tp={group.tp} fp={group.fp} fn={group.fn} tn={group.tn} "
                f"accuracy={g_acc:.6f} precision={g_prec:.6f} f1={g_f1:.6f}"
            )
    for flag in report.flags:
        lines.append(f"flag {flag}")
    for r in report.per_query:
        lines.append(
            f"{r.query_id},{r.true_label},{r.predicted_label},{r.nearest_distance:.9g},{r.seconds:.6f}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
