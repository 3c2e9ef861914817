"""
Report Generation Service
Renders evaluation metrics and confusion tables as text and JSON files
"""

import json
import pprint
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import structlog

from services.evaluation_service import ConfusionTables, MetricsReport

logger = structlog.get_logger(__name__)

METRICS_FILE = "metrics.json"
CONFUSION_FILE = "confusion.txt"

Summary = List[Tuple[str, float]]


def summarize_row(row: Dict[str, float]) -> Summary:
    """``[('total', n), (outcome, fraction), ...]`` with fractions rounded and sorted high to low"""
    total = float(sum(row.values()))
    if total == 0:
        return [("total", 0.0)]
    fractions = sorted(((outcome, round(count / total, 4)) for outcome, count in row.items()),
                       key=lambda item: (-item[1], item[0]))
    return [("total", round(total, 4))] + fractions


def internal_summary(tables: ConfusionTables) -> Dict[str, Summary]:
    return {node_id: summarize_row(row) for node_id, row in tables.internal.items()}


def categorical_summary(tables: ConfusionTables) -> Dict[str, Dict[str, Summary]]:
    return {node_id: {label: summarize_row(row) for label, row in rows.items()}
            for node_id, rows in tables.categorical.items()}


def span_summary(tables: ConfusionTables) -> Dict[str, Summary]:
    return {node_id: summarize_row(row) for node_id, row in tables.span.items()}


def format_confusion(tables: ConfusionTables, width: int = 100) -> str:
    """The three tables as printed mappings, one section each"""
    sections = [
        ("Internal node predictions", internal_summary(tables)),
        ("Categorical node predictions", categorical_summary(tables)),
        ("Span node predictions", span_summary(tables)),
    ]
    return "\n\n".join(f"{title}\n{pprint.pformat(body, width=width)}" for title, body in sections) + "\n"


def format_metrics(metrics: MetricsReport) -> str:
    frame = metrics.to_frame()
    return (f"Tree accuracy: {metrics.tree_accuracy:.4f} ({metrics.examples} examples)\n"
            f"{frame.to_string(float_format=lambda v: f'{v:.4f}')}\n")


class ReportService:
    """Writes evaluation artifacts for one run"""

    def __init__(self, output_dir: Union[str, Path]):
        self.output_dir = Path(output_dir)

    def render_text(self, metrics: MetricsReport, tables: ConfusionTables, config_digest: str = "") -> str:
        header = f"# config_digest: {config_digest}\n" if config_digest else ""
        return f"{header}{format_metrics(metrics)}\n{format_confusion(tables)}"

    def write(self, metrics: MetricsReport, tables: ConfusionTables, config_digest: str = "",
              extra: Optional[Dict[str, Any]] = None) -> Dict[str, Path]:
        """
        Write ``metrics.json`` and ``confusion.txt``

        Args:
            metrics: Accuracy and node counts
            tables: Confusion tables
            config_digest: Provenance digest recorded in both files
            extra: Additional JSON fields, e.g. beam statistics

        Returns:
            Paths written, keyed by kind
        """
        try:
            self.output_dir.mkdir(parents=True, exist_ok=True)
            document = {
                "config_digest": config_digest,
                "metrics": metrics.to_dict(),
                "confusion": tables.to_dict(),
                **(extra or {}),
            }
            metrics_path = self.output_dir / METRICS_FILE
            with open(metrics_path, "w", encoding="utf-8") as f:
                json.dump(document, f, indent=2, sort_keys=True)

            confusion_path = self.output_dir / CONFUSION_FILE
            with open(confusion_path, "w", encoding="utf-8", newline="\n") as f:
                f.write(self.render_text(metrics, tables, config_digest))

            logger.info("Evaluation report written", output_dir=str(self.output_dir),
                        tree_accuracy=metrics.tree_accuracy)
            return {"metrics": metrics_path, "confusion": confusion_path}
        except Exception as e:
            logger.error("Report writing failed", output_dir=str(self.output_dir), error=str(e))
            raise
