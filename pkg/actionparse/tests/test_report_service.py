"""
Tests for report rendering
"""

import json

import pytest

from services.evaluation_service import NO_PARENT, ConfusionTables, evaluate_pairs
from services.grammar_service import make_tree
from services.report_service import (
    CONFUSION_FILE,
    METRICS_FILE,
    ReportService,
    categorical_summary,
    format_confusion,
    format_metrics,
    summarize_row,
)


@pytest.fixture
def evaluated(toy_schema, toy_tree):
    wrong = make_tree(toy_schema, 4, {"cmd:verb": "Go"}, {"cmd:count": (3, 3)})
    return evaluate_pairs([(toy_tree, toy_tree), (wrong, toy_tree)], toy_schema)


class TestSummaries:
    def test_sorted_by_fraction_then_name(self):
        row = {"b": 1.0, "a": 1.0, "c": 2.0}
        assert summarize_row(row) == [("total", 4.0), ("c", 0.5), ("a", 0.25), ("b", 0.25)]

    def test_rounding(self):
        assert summarize_row({"x": 1.0, "y": 2.0}) == [("total", 3.0), ("y", 0.6667), ("x", 0.3333)]

    def test_empty_row(self):
        assert summarize_row({}) == [("total", 0.0)]

    def test_categorical_nesting(self, evaluated):
        _, tables = evaluated
        summary = categorical_summary(tables)
        assert summary["target:side"]["LEFT"] == [("total", 2.0), ("LEFT", 0.5), (NO_PARENT, 0.5)]


class TestFormatting:
    def test_confusion_sections(self, evaluated):
        _, tables = evaluated
        text = format_confusion(tables)
        assert text.index("Internal node predictions") < text.index("Categorical node predictions")
        assert text.index("Categorical node predictions") < text.index("Span node predictions")
        assert "'target:name'" in text

    def test_empty_tables(self):
        text = format_confusion(ConfusionTables())
        assert text.count("{}") == 3

    def test_metrics_header(self, evaluated):
        metrics, _ = evaluated
        text = format_metrics(metrics)
        assert text.startswith("Tree accuracy: 0.5000 (2 examples)")
        assert "precision" in text


class TestReportService:
    def test_write(self, evaluated, tmp_path):
        metrics, tables = evaluated
        paths = ReportService(tmp_path / "out").write(metrics, tables, "abc123", {"beam": {"width": 3}})

        assert paths == {"metrics": tmp_path / "out" / METRICS_FILE,
                         "confusion": tmp_path / "out" / CONFUSION_FILE}
        document = json.loads(paths["metrics"].read_text(encoding="utf-8"))
        assert document["config_digest"] == "abc123"
        assert document["beam"] == {"width": 3}
        assert document["metrics"]["tree_accuracy"] == 0.5
        assert set(document["confusion"]) == {"internal", "categorical", "span"}

        text = paths["confusion"].read_text(encoding="utf-8")
        assert text.startswith("# config_digest: abc123\nTree accuracy: 0.5000")

    def test_write_is_deterministic(self, evaluated, tmp_path):
        metrics, tables = evaluated
        first = ReportService(tmp_path / "a").write(metrics, tables, "d")
        second = ReportService(tmp_path / "b").write(metrics, tables, "d")
        for kind in ("metrics", "confusion"):
            assert first[kind].read_bytes() == second[kind].read_bytes()
