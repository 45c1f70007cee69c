"""Label prediction, metric arithmetic, and evaluation-run checks."""

import math

import numpy as np
import pytest

from fedsearch import autoencoder as ae
from fedsearch import datasets as ds
from fedsearch import evaluation as ev
from fedsearch import retrieval as rt
from fedsearch.errors import ConfigError, EvaluationError
from fixtures import hand_enumerated_fixture


def hit(label, distance=1.0, magnification="40x", entry_id="e"):
    return rt.Hit(entry_id=entry_id, distance=distance, label=label, magnification=magnification)


class TestPredictLabel:
    def test_majority(self):
        hits = [hit("malignant"), hit("malignant"), hit("malignant"), hit("benign"), hit("benign")]
        assert ev.predict_label(hits) == "malignant"

    def test_k1_takes_nearest(self):
        assert ev.predict_label([hit("benign")]) == "benign"

    def test_tie_breaks_to_nearest(self):
        hits = [hit("benign", 0.1), hit("malignant", 0.2), hit("benign", 0.3), hit("malignant", 0.4)]
        assert ev.predict_label(hits) == "benign"

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            ev.predict_label([])

    def test_order_permutation_preserving_ranking_is_irrelevant(self):
        hits = [hit("malignant", 0.1), hit("benign", 0.5), hit("malignant", 0.5)]
        swapped = [hits[0], hits[2], hits[1]]  # equal-distance tail swapped
        assert ev.predict_label(hits) == ev.predict_label(swapped)


class TestMetrics:
    def test_worked_example(self):
        cm = ev.ConfusionMatrix(tp=50, fp=10, fn=10, tn=30)
        accuracy, precision, f1 = ev.metrics(cm)
        assert accuracy == pytest.approx(0.8)
        assert precision == pytest.approx(50 / 60)
        assert f1 == pytest.approx(50 / 60)  # precision == recall here

    def test_all_correct(self):
        cm = ev.ConfusionMatrix(tp=5, tn=5)
        assert ev.metrics(cm) == (1.0, 1.0, 1.0)

    def test_degenerate_precision_is_zero(self):
        cm = ev.ConfusionMatrix(tp=0, fp=0, fn=2, tn=3)
        accuracy, precision, f1 = ev.metrics(cm)
        assert precision == 0.0 and f1 == 0.0
        assert accuracy == pytest.approx(0.6)

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            ev.metrics(ev.ConfusionMatrix())

    def test_metrics_always_in_unit_interval(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            tp, fp, fn, tn = rng.integers(0, 20, size=4)
            if tp + fp + fn + tn == 0:
                continue
            cm = ev.ConfusionMatrix(tp=int(tp), fp=int(fp), fn=int(fn), tn=int(tn))
            for value in ev.metrics(cm):
                assert 0.0 <= value <= 1.0


class TestTimingSummary:
    def test_constant_records(self):
        assert ev.timing_summary([1.0, 1.0, 1.0]) == (1.0, 1.0)

    def test_nearest_rank_percentile(self):
        mean, p95 = ev.timing_summary([float(i) for i in range(1, 101)])
        assert mean == pytest.approx(50.5)
        assert p95 == 95.0

    def test_matches_independent_summary(self):
        rng = np.random.default_rng(1)
        values = rng.random(37).tolist()
        mean, p95 = ev.timing_summary(values)
        ordered = sorted(values)
        assert mean == pytest.approx(sum(values) / 37, rel=1e-9)
        assert p95 == ordered[math.ceil(0.95 * 37) - 1]

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            ev.timing_summary([])


class TestHandEnumeratedFixture:
    def test_confusion_matrix_exact(self):
        index, queries = hand_enumerated_fixture()
        report = ev.evaluate_queries(index, queries, k=3, scenario="sen1")
        cm = report.confusion
        assert (cm.tp, cm.fp, cm.fn, cm.tn) == (3, 1, 1, 3)
        assert report.accuracy == 0.75
        assert report.precision == 0.75
        assert report.f1 == 0.75

    def test_report_metrics_recomputable_from_confusion(self):
        index, queries = hand_enumerated_fixture()
        report = ev.evaluate_queries(index, queries, k=3, scenario="sen1")
        assert ev.metrics(report.confusion) == (report.accuracy, report.precision, report.f1)

    def test_per_query_records_consistent(self):
        index, queries = hand_enumerated_fixture()
        report = ev.evaluate_queries(index, queries, k=3, scenario="sen1")
        assert len(report.per_query) == 8
        recount = ev.ConfusionMatrix()
        for r in report.per_query:
            recount.add(r.true_label, r.predicted_label)
        assert (recount.tp, recount.fp, recount.fn, recount.tn) == (3, 1, 1, 3)


class TestEvaluateQueries:
    def test_perfect_index_gives_accuracy_one(self):
        rng = np.random.default_rng(2)
        entries = []
        queries = []
        for i in range(10):
            label = "malignant" if i % 2 else "benign"
            center = rng.standard_normal(4) * 10
            for j in range(3):
                entries.append(
                    rt.IndexEntry(id=f"e{i}-{j}", vector=(center + rng.normal(0, 0.01, 4)).astype(np.float32),
                                  label=label, magnification="40x", center="c", split="train")
                )
            queries.append(ev.QueryVector(id=f"q{i}", label=label,
                                          vector=(center + rng.normal(0, 0.01, 4)).astype(np.float32)))
        index = rt.FeatureIndex(entries=tuple(entries), layout_id=bytes(8), feature_dim=4)
        report = ev.evaluate_queries(index, queries, k=3)
        assert report.accuracy == 1.0

    def test_leakage_guard(self):
        index, queries = hand_enumerated_fixture()
        poisoned = [ev.QueryVector(id="entry0", label="benign", vector=queries[0].vector)]
        with pytest.raises(EvaluationError, match="leakage"):
            ev.evaluate_queries(index, poisoned, k=1)

    def test_sen2_emits_group_and_pooled_matrices(self):
        rng = np.random.default_rng(3)
        entries = []
        for g, magnification in enumerate(ds.MAGNIFICATIONS):
            for i in range(8):
                label = "malignant" if i % 2 else "benign"
                entries.append(
                    rt.IndexEntry(id=f"{magnification}-{i}", vector=rng.standard_normal(4).astype(np.float32),
                                  label=label, magnification=magnification, center="c", split="train")
                )
        index = rt.FeatureIndex(entries=tuple(entries), layout_id=bytes(8), feature_dim=4)
        queries = [ev.QueryVector(id=f"q{i}", label="benign", vector=rng.standard_normal(4).astype(np.float32),
                                  magnification="40x") for i in range(5)]
        report = ev.evaluate_queries(index, queries, k=3, scenario="sen2")
        assert set(report.per_magnification) == set(ds.MAGNIFICATIONS)
        for cm in report.per_magnification.values():
            assert cm.total == 5
        assert report.confusion.total == 5  # pooled majority, one verdict per query


class TestEvaluateWithModel:
    def test_end_to_end_on_synthetic_images(self, tmp_path):
        config = ds.SynthConfig(clients=1, train_per_client=12, val_per_client=4,
                                test_per_client=6, image_size=16, seed=21)
        (manifest,) = ds.synth_generate(config, tmp_path)
        model = ae.build_model(ae.tiny_config(seed=4))
        index = rt.build_index(model, manifest)
        report = ev.evaluate(index, model, manifest, k=3, scenario="sen1")
        assert report.confusion.total == 6
        assert len(report.per_query) == 6
        assert all(r.seconds > 0 for r in report.per_query)
        assert 0.0 <= report.accuracy <= 1.0

    def test_report_file_format(self, tmp_path):
        index, queries = hand_enumerated_fixture()
        report = ev.evaluate_queries(index, queries, k=3)
        path = tmp_path / "report.txt"
        ev.write_report(report, path)
        lines = path.read_text().splitlines()
        assert lines[0].startswith("fedsearch-eval scenario=sen1 k=3 queries=8")
        assert lines[1] == "accuracy 0.750000"
        assert lines[2] == "precision 0.750000"
        assert lines[3] == "f1 0.750000"
        per_query = [l for l in lines if l.startswith("q")]
        assert len(per_query) == 8
        first = per_query[0].split(",")
        assert first[0] == "q0" and first[1] == "malignant" and first[2] == "malignant"
