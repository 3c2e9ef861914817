"""
Evaluation service
Tree-level accuracy, per-node precision/recall/F1 and confusion tables
"""

from dataclasses import dataclass, field
from typing import Any, Dict, Sequence, Tuple

import pandas as pd
import structlog

from services.grammar_service import ActionTree, GrammarSchema, NodeKind, tree_equal

logger = structlog.get_logger(__name__)

Pair = Tuple[ActionTree, ActionTree]  # (predicted, gold)

KIND_LABELS = {NodeKind.INTERNAL: "INT", NodeKind.CATEGORICAL: "CAT", NodeKind.SPAN: "SPAN"}

NO_PARENT = "NO-PARENT"
ABSENT = "ABSENT"
MATCH_SPAN = "MATCH-SPAN"
MIS_SPAN = "MIS-SPAN"
UNATTRIBUTED = "UNATTRIBUTED"


def tree_accuracy(pairs: Sequence[Pair]) -> float:
    """
    Fraction of (predicted, gold) pairs whose trees match exactly

    Raises:
        ValueError: On an empty list
    """
    if not pairs:
        raise ValueError("Cannot compute accuracy over zero pairs")
    return sum(1 for predicted, gold in pairs if tree_equal(predicted, gold)) / len(pairs)


@dataclass
class KindCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


@dataclass
class MetricsReport:
    """Tree accuracy plus per-kind node counts"""
    tree_accuracy: float
    counts: Dict[str, KindCounts] = field(default_factory=dict)
    examples: int = 0

    def prf(self) -> Dict[str, Dict[str, float]]:
        return {kind: {"precision": c.precision, "recall": c.recall, "f1": c.f1}
                for kind, c in self.counts.items()}

    def to_frame(self) -> pd.DataFrame:
        rows = [{"kind": kind, "precision": c.precision, "recall": c.recall, "f1": c.f1,
                 "tp": c.tp, "fp": c.fp, "fn": c.fn} for kind, c in self.counts.items()]
        return pd.DataFrame(rows, columns=["kind", "precision", "recall", "f1", "tp", "fp", "fn"]).set_index("kind")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "tree_accuracy": self.tree_accuracy,
            "examples": self.examples,
            "prf": self.prf(),
            "counts": {kind: {"tp": c.tp, "fp": c.fp, "fn": c.fn} for kind, c in self.counts.items()},
        }


def _node_matches(node_id: str, kind: NodeKind, predicted: ActionTree, gold: ActionTree) -> bool:
    if kind == NodeKind.CATEGORICAL:
        return predicted.categories.get(node_id) == gold.categories.get(node_id)
    if kind == NodeKind.SPAN:
        return predicted.spans.get(node_id) == gold.spans.get(node_id)
    return True


def per_node_prf(pairs: Sequence[Pair], schema: GrammarSchema) -> Dict[str, KindCounts]:
    """
    Count node-level true/false positives and false negatives per node kind

    The root is excluded. A node active in both trees with a different label or span counts as
    one false positive and one false negative.
    """
    counts = {label: KindCounts() for label in KIND_LABELS.values()}
    nodes = [n for n in schema.dfs_order() if n != schema.root]
    for predicted, gold in pairs:
        for node_id in nodes:
            kind = schema.kind_of(node_id)
            row = counts[KIND_LABELS[kind]]
            in_pred, in_gold = predicted.is_active(node_id), gold.is_active(node_id)
            if in_pred and in_gold:
                if _node_matches(node_id, kind, predicted, gold):
                    row.tp += 1
                else:
                    row.fp += 1
                    row.fn += 1
            elif in_pred:
                row.fp += 1
            elif in_gold:
                row.fn += 1
    return counts


@dataclass
class ConfusionTables:
    """
    Outcome mass per gold node occurrence

    ``internal``: gold node → outcome node (or UNATTRIBUTED) → count.
    ``categorical``: node → gold label → predicted label, NO-PARENT or ABSENT → count.
    ``span``: node → MATCH-SPAN, MIS-SPAN, NO-PARENT or ABSENT → count.
    """
    internal: Dict[str, Dict[str, float]] = field(default_factory=dict)
    categorical: Dict[str, Dict[str, Dict[str, float]]] = field(default_factory=dict)
    span: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def merge(self, other: "ConfusionTables") -> "ConfusionTables":
        """Elementwise sum of two tables"""

        def add(a: Dict[str, Dict[str, float]], b: Dict[str, Dict[str, float]]) -> Dict[str, Dict[str, float]]:
            out = {k: dict(v) for k, v in a.items()}
            for key, row in b.items():
                target = out.setdefault(key, {})
                for outcome, count in row.items():
                    target[outcome] = target.get(outcome, 0.0) + count
            return out

        categorical = {k: {label: dict(row) for label, row in v.items()} for k, v in self.categorical.items()}
        for node_id, rows in other.categorical.items():
            categorical[node_id] = add(categorical.get(node_id, {}), rows)
        return ConfusionTables(add(self.internal, other.internal), categorical, add(self.span, other.span))

    def to_dict(self) -> Dict[str, Any]:
        return {"internal": self.internal, "categorical": self.categorical, "span": self.span}


def _bump(row: Dict[str, float], outcome: str, amount: float = 1.0) -> None:
    row[outcome] = row.get(outcome, 0.0) + amount


def confusion_tables(pairs: Sequence[Pair], schema: GrammarSchema) -> ConfusionTables:
    """
    Build the three confusion tables

    Internal nodes: a gold node also active in the prediction adds 1 to itself; otherwise each
    predicted internal node absent from the gold tree gets 1/#such nodes (UNATTRIBUTED when there
    are none). Categorical and span nodes: a gold-active node is scored against the prediction
    when present there, and otherwise as NO-PARENT (parent missing) or ABSENT (parent present).
    """
    tables = ConfusionTables()
    internals = schema.nodes_of_kind(NodeKind.INTERNAL)
    categoricals = schema.nodes_of_kind(NodeKind.CATEGORICAL)
    spans = schema.nodes_of_kind(NodeKind.SPAN)

    def missing_outcome(node_id: str, predicted: ActionTree) -> str:
        return ABSENT if predicted.is_active(schema.parent_of(node_id)) else NO_PARENT

    for predicted, gold in pairs:
        unmatched = [n for n in internals if predicted.is_active(n) and not gold.is_active(n)]
        for node_id in internals:
            if not gold.is_active(node_id):
                continue
            row = tables.internal.setdefault(node_id, {})
            if predicted.is_active(node_id):
                _bump(row, node_id)
            elif unmatched:
                for other in unmatched:
                    _bump(row, other, 1.0 / len(unmatched))
            else:
                _bump(row, UNATTRIBUTED)

        for node_id in categoricals:
            if not gold.is_active(node_id):
                continue
            row = tables.categorical.setdefault(node_id, {}).setdefault(gold.categories[node_id], {})
            if predicted.is_active(node_id):
                _bump(row, predicted.categories[node_id])
            else:
                _bump(row, missing_outcome(node_id, predicted))

        for node_id in spans:
            if not gold.is_active(node_id):
                continue
            row = tables.span.setdefault(node_id, {})
            if predicted.is_active(node_id):
                _bump(row, MATCH_SPAN if predicted.spans[node_id] == gold.spans[node_id] else MIS_SPAN)
            else:
                _bump(row, missing_outcome(node_id, predicted))

    return tables


def evaluate_pairs(pairs: Sequence[Pair], schema: GrammarSchema) -> Tuple[MetricsReport, ConfusionTables]:
    """Accuracy, node counts and confusion tables in one pass"""
    report = MetricsReport(tree_accuracy(pairs), per_node_prf(pairs, schema), len(pairs))
    tables = confusion_tables(pairs, schema)
    logger.info("Evaluation finished", examples=len(pairs), tree_accuracy=report.tree_accuracy)
    return report, tables


def row_totals(table: Dict[str, Dict[str, float]]) -> Dict[str, float]:
    return {key: sum(row.values()) for key, row in table.items()}


def gold_counts(pairs: Sequence[Pair], schema: GrammarSchema) -> Dict[str, int]:
    """Gold-active node occurrences per kind label, excluding the root"""
    counts = {label: 0 for label in KIND_LABELS.values()}
    for _, gold in pairs:
        for node_id in gold.active:
            if node_id != schema.root and node_id in schema:
                counts[KIND_LABELS[schema.kind_of(node_id)]] += 1
    return counts
