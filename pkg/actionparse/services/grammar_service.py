"""
Action-tree grammar service
Loads the node schema, validates trees, and reads/writes canonical tree documents
"""

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np
import structlog

from utils.errors import SchemaError, SchemaParseError, TreeFormatError

logger = structlog.get_logger(__name__)

Span = Tuple[int, int]

# Reference-grammar conventions used by corpus statistics
BUILD_LABEL = "Build"
NOOP_LABEL = "Noop"
COPY_MARKER_NODE = "action_ref_object"
BUILD_NEW = "Build-New"
BUILD_COPY = "Build-Copy"


class NodeKind(Enum):
    """Kind of a grammar node"""
    INTERNAL = "internal"
    CATEGORICAL = "categorical"
    SPAN = "span"


@dataclass(frozen=True)
class NodeSpec:
    """One node of the grammar"""
    id: str
    kind: NodeKind
    display_name: str
    parent: Optional[str] = None
    labels: Tuple[str, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "id": self.id,
            "kind": self.kind.value,
            "parent": self.parent,
            "display_name": self.display_name,
        }
        if self.kind == NodeKind.CATEGORICAL:
            data["labels"] = list(self.labels)
        return data


class GrammarSchema:
    """
    The node universe of the action-tree grammar

    Immutable after construction. Construct with ``GrammarSchema.from_dict`` or ``load_schema``.
    """

    def __init__(self, nodes: Iterable[NodeSpec], root: str, head: Optional[str],
                 child_order: Mapping[str, Iterable[str]]):
        self._nodes: Dict[str, NodeSpec] = {n.id: n for n in nodes}
        self._root = root
        self._head = head
        self._children: Dict[str, Tuple[str, ...]] = {
            nid: tuple(child_order.get(nid, ())) for nid, n in self._nodes.items()
            if n.kind == NodeKind.INTERNAL
        }
        self._dfs: Tuple[str, ...] = tuple(self._walk(root))
        self._dfs_index = {nid: i for i, nid in enumerate(self._dfs)}
        self._display_index: Dict[Tuple[str, str], str] = {}
        for parent, children in self._children.items():
            for child in children:
                self._display_index[(parent, self._nodes[child].display_name)] = child

    def _walk(self, node_id: str) -> List[str]:
        order = [node_id]
        for child in self._children.get(node_id, ()):
            order.extend(self._walk(child))
        return order

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "GrammarSchema":
        """
        Build and check a schema from its parsed document

        Args:
            data: Parsed schema document with ``nodes`` and optional ``root``/``head``

        Returns:
            GrammarSchema satisfying every structural invariant

        Raises:
            SchemaError: On duplicate ids, dangling parents, cycles or bad vocabularies
        """
        if not isinstance(data, Mapping) or not isinstance(data.get("nodes"), list):
            raise SchemaError("Schema document must be an object with a 'nodes' list")

        specs: Dict[str, NodeSpec] = {}
        declared_children: Dict[str, List[str]] = {}
        for raw in data["nodes"]:
            if not isinstance(raw, Mapping) or "id" not in raw:
                raise SchemaError(f"Node entry without id: {raw!r}")
            node_id = str(raw["id"])
            if node_id in specs:
                raise SchemaError("Duplicate node id", node_id=node_id)
            try:
                kind = NodeKind(raw.get("kind"))
            except ValueError:
                raise SchemaError(f"Unknown node kind {raw.get('kind')!r}", node_id=node_id)

            labels = tuple(raw.get("labels") or ())
            if kind == NodeKind.CATEGORICAL:
                if not labels:
                    raise SchemaError("Categorical node needs at least one label", node_id=node_id)
                if len(set(labels)) != len(labels):
                    raise SchemaError("Duplicate label in vocabulary", node_id=node_id)
            elif labels:
                raise SchemaError("Only categorical nodes carry labels", node_id=node_id)

            display = raw.get("display_name") or node_id.rsplit(":", 1)[-1]
            specs[node_id] = NodeSpec(node_id, kind, str(display), raw.get("parent"), labels)
            if "children" in raw:
                declared_children[node_id] = list(raw["children"])

        roots = [n.id for n in specs.values() if n.parent is None]
        if len(roots) != 1:
            raise SchemaError(f"Schema needs exactly one root, found {roots}")
        root = roots[0]
        if data.get("root") is not None and data["root"] != root:
            raise SchemaError("Declared root does not match the parentless node", node_id=data["root"])
        if specs[root].kind != NodeKind.INTERNAL:
            raise SchemaError("Root must be an internal node", node_id=root)

        file_order: Dict[str, List[str]] = {}
        for spec in specs.values():
            if spec.parent is None:
                continue
            parent = specs.get(spec.parent)
            if parent is None:
                raise SchemaError(f"Parent '{spec.parent}' does not exist", node_id=spec.id)
            if parent.kind != NodeKind.INTERNAL:
                raise SchemaError(f"Parent '{spec.parent}' is not internal", node_id=spec.id)
            if ":" in spec.id and spec.id.rsplit(":", 1)[0] != spec.parent:
                raise SchemaError("Leaf id prefix does not match its parent", node_id=spec.id)
            file_order.setdefault(spec.parent, []).append(spec.id)

        child_order: Dict[str, List[str]] = {}
        for node_id, spec in specs.items():
            if spec.kind != NodeKind.INTERNAL:
                if node_id in declared_children:
                    raise SchemaError("Only internal nodes declare children", node_id=node_id)
                continue
            actual = file_order.get(node_id, [])
            declared = declared_children.get(node_id)
            if declared is not None:
                if sorted(declared) != sorted(actual) or len(set(declared)) != len(declared):
                    missing = sorted(set(declared) ^ set(actual))
                    raise SchemaError(f"Declared children do not match parent links: {missing}",
                                      node_id=node_id)
                child_order[node_id] = declared
            else:
                child_order[node_id] = actual

            names = [specs[c].display_name for c in child_order[node_id]]
            if len(set(names)) != len(names):
                raise SchemaError("Sibling display names must be unique", node_id=node_id)

        # Every node reachable from the root, otherwise a parent cycle exists
        reachable = set()
        stack = [root]
        while stack:
            nid = stack.pop()
            reachable.add(nid)
            stack.extend(child_order.get(nid, []))
        unreachable = sorted(set(specs) - reachable)
        if unreachable:
            raise SchemaError("Parent links form a cycle", node_id=unreachable[0])

        head = data.get("head")
        if head is not None:
            if head not in specs:
                raise SchemaError("Head node does not exist", node_id=head)
            if specs[head].parent != root or specs[head].kind != NodeKind.CATEGORICAL:
                raise SchemaError("Head must be a categorical child of the root", node_id=head)

        return cls(specs.values(), root, head, child_order)

    def to_dict(self) -> Dict[str, Any]:
        nodes = []
        for node_id in self._dfs:
            entry = self._nodes[node_id].to_dict()
            if self.kind_of(node_id) == NodeKind.INTERNAL:
                entry["children"] = list(self._children[node_id])
            nodes.append(entry)
        return {"root": self._root, "head": self._head, "nodes": nodes}

    def digest(self) -> str:
        """Stable short hash identifying this schema"""
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    @property
    def root(self) -> str:
        return self._root

    @property
    def head(self) -> Optional[str]:
        return self._head

    @property
    def nodes(self) -> Mapping[str, NodeSpec]:
        return dict(self._nodes)

    @property
    def child_order(self) -> Mapping[str, Tuple[str, ...]]:
        return dict(self._children)

    @property
    def categorical_vocab(self) -> Dict[str, Tuple[str, ...]]:
        return {nid: n.labels for nid, n in self._nodes.items() if n.kind == NodeKind.CATEGORICAL}

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._nodes

    def __len__(self) -> int:
        return len(self._nodes)

    def node(self, node_id: str) -> NodeSpec:
        return self._nodes[node_id]

    def kind_of(self, node_id: str) -> NodeKind:
        return self._nodes[node_id].kind

    def parent_of(self, node_id: str) -> Optional[str]:
        return self._nodes[node_id].parent

    def children_of(self, node_id: str) -> Tuple[str, ...]:
        return self._children.get(node_id, ())

    def labels_of(self, node_id: str) -> Tuple[str, ...]:
        return self._nodes[node_id].labels

    def ancestors(self, node_id: str) -> List[str]:
        """Ancestors from the parent up to the root"""
        chain = []
        parent = self._nodes[node_id].parent
        while parent is not None:
            chain.append(parent)
            parent = self._nodes[parent].parent
        return chain

    def descendants(self, node_id: str) -> List[str]:
        """Descendants in DFS order, excluding the node itself"""
        return self._walk(node_id)[1:]

    def dfs_order(self) -> List[str]:
        return list(self._dfs)

    def dfs_position(self, node_id: str) -> int:
        return self._dfs_index[node_id]

    def child_by_display_name(self, parent: str, name: str) -> Optional[str]:
        return self._display_index.get((parent, name))

    def nodes_of_kind(self, kind: NodeKind) -> List[str]:
        return [nid for nid in self._dfs if self._nodes[nid].kind == kind]

    def decision_nodes(self) -> List[str]:
        """Nodes whose activation is a prediction (all but root and head), in DFS order"""
        return [nid for nid in self._dfs if nid not in (self._root, self._head)]


@dataclass(frozen=True)
class ActionTree:
    """One parse of a tokenized sentence"""
    sentence_length: int
    active: FrozenSet[str]
    categories: Mapping[str, str] = field(default_factory=dict)
    spans: Mapping[str, Span] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "active", frozenset(self.active))
        object.__setattr__(self, "categories", dict(self.categories))
        object.__setattr__(self, "spans", {k: (int(v[0]), int(v[1])) for k, v in self.spans.items()})

    def __hash__(self) -> int:
        return hash(self.key())

    def key(self) -> Tuple:
        """Hashable content key, ignoring sentence length"""
        return (
            tuple(sorted(self.active)),
            tuple(sorted(self.categories.items())),
            tuple(sorted(self.spans.items())),
        )

    def is_active(self, node_id: str) -> bool:
        return node_id in self.active

    def with_sentence_length(self, sentence_length: int) -> "ActionTree":
        return ActionTree(sentence_length, self.active, self.categories, self.spans)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "sentence_length": self.sentence_length,
            "active": sorted(self.active),
            "categories": dict(self.categories),
            "spans": {k: list(v) for k, v in self.spans.items()},
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ActionTree":
        return cls(
            sentence_length=data["sentence_length"],
            active=frozenset(data["active"]),
            categories=data.get("categories", {}),
            spans={k: tuple(v) for k, v in data.get("spans", {}).items()},
        )


def make_tree(schema: GrammarSchema, sentence_length: int,
              categories: Optional[Mapping[str, str]] = None,
              spans: Optional[Mapping[str, Span]] = None,
              active: Iterable[str] = ()) -> ActionTree:
    """
    Build a tree whose active set is closed under the parent relation

    Every node carrying a label or span, every node in ``active``, and all their ancestors become
    active. Unknown ids are kept so that validation can report them.
    """
    categories = dict(categories or {})
    spans = dict(spans or {})
    on = {schema.root}
    for node_id in list(categories) + list(spans) + list(active):
        on.add(node_id)
        if node_id in schema:
            on.update(schema.ancestors(node_id))
    return ActionTree(sentence_length, frozenset(on), categories, spans)


@dataclass(frozen=True)
class Violation:
    node_id: str
    rule: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: Tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def rules(self) -> List[str]:
        return [v.rule for v in self.violations]


def validate_tree(tree: ActionTree, schema: GrammarSchema) -> ValidationReport:
    """
    Check a tree against every ActionTree invariant

    Args:
        tree: Tree to check
        schema: Grammar the tree claims to follow

    Returns:
        ValidationReport listing all violations (empty when valid)
    """
    found: List[Violation] = []

    def add(node_id: str, rule: str, message: str) -> None:
        found.append(Violation(node_id, rule, message))

    mentioned = set(tree.active) | set(tree.categories) | set(tree.spans)
    for node_id in sorted(mentioned):
        if node_id not in schema:
            add(node_id, "unknown_node", f"'{node_id}' is not a schema node")

    if schema.root not in tree.active:
        add(schema.root, "root_inactive", "the root must be active")
    if schema.head is not None and schema.head not in tree.active:
        add(schema.head, "head_inactive", "the head categorical must be active")

    for node_id in schema.dfs_order():
        spec = schema.node(node_id)
        is_on = node_id in tree.active
        if is_on and spec.parent is not None and spec.parent not in tree.active:
            add(node_id, "inactive_parent", f"active under inactive parent '{spec.parent}'")

        if spec.kind == NodeKind.CATEGORICAL:
            if node_id in tree.spans:
                add(node_id, "span_on_non_span", "categorical node carries a span")
            if node_id in tree.categories:
                label = tree.categories[node_id]
                if not is_on:
                    add(node_id, "stray_label", "inactive node carries a label")
                elif label not in spec.labels:
                    add(node_id, "unknown_label", f"label '{label}' not in vocabulary")
            elif is_on:
                add(node_id, "missing_label", "active categorical node has no label")

        elif spec.kind == NodeKind.SPAN:
            if node_id in tree.categories:
                add(node_id, "label_on_non_categorical", "span node carries a label")
            if node_id in tree.spans:
                start, end = tree.spans[node_id]
                if not is_on:
                    add(node_id, "stray_span", "inactive node carries a span")
                if start > end:
                    add(node_id, "span_order", f"start {start} after end {end}")
                if start < 0 or end >= tree.sentence_length:
                    add(node_id, "span_bounds",
                        f"span ({start},{end}) outside sentence of length {tree.sentence_length}")
            elif is_on:
                add(node_id, "missing_span", "active span node has no span")

        else:
            if node_id in tree.categories:
                add(node_id, "label_on_non_categorical", "internal node carries a label")
            if node_id in tree.spans:
                add(node_id, "span_on_non_span", "internal node carries a span")

    return ValidationReport(tuple(found))


def tree_equal(a: ActionTree, b: ActionTree) -> bool:
    """Exact match on active sets, labels and span ranges"""
    return (a.active == b.active
            and dict(a.categories) == dict(b.categories)
            and dict(a.spans) == dict(b.spans))


def dfs_order(schema: GrammarSchema) -> List[str]:
    """Pre-order traversal of the schema respecting child order"""
    return schema.dfs_order()


def parse_schema(text: str) -> GrammarSchema:
    """Parse a schema document held in memory"""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaParseError(f"Malformed schema document: {e.msg}", line=e.lineno)
    return GrammarSchema.from_dict(data)


def load_schema(schema_file: Union[str, Path]) -> GrammarSchema:
    """
    Load a grammar schema from its JSON file

    Args:
        schema_file: Path to the schema document

    Returns:
        GrammarSchema
    """
    try:
        text = Path(schema_file).read_text(encoding="utf-8")
        schema = parse_schema(text)
        logger.info("Schema loaded", path=str(schema_file), nodes=len(schema), digest=schema.digest())
        return schema
    except Exception as e:
        logger.error("Schema load failed", path=str(schema_file), error=str(e))
        raise


# Canonical tree documents


def tree_to_document(tree: ActionTree, schema: GrammarSchema) -> Dict[str, Any]:
    """Nested-object form keyed by display names in schema child order"""

    def body(node_id: str) -> Dict[str, Any]:
        out: Dict[str, Any] = {}
        for child in schema.children_of(node_id):
            if child == schema.head or child not in tree.active:
                continue
            kind = schema.kind_of(child)
            name = schema.node(child).display_name
            if kind == NodeKind.INTERNAL:
                out[name] = body(child)
            elif kind == NodeKind.CATEGORICAL:
                out[name] = tree.categories[child]
            else:
                out[name] = list(tree.spans[child])
        return out

    top = tree.categories[schema.head] if schema.head else schema.node(schema.root).display_name
    return {top: body(schema.root)}


def _write(value: Any) -> str:
    if isinstance(value, dict):
        return "{" + ", ".join(f"{json.dumps(k)}: {_write(v)}" for k, v in value.items()) + "}"
    if isinstance(value, list):
        return "[" + ",".join(_write(v) for v in value) + "]"
    return json.dumps(value)


def serialize_tree(tree: ActionTree, schema: GrammarSchema) -> str:
    """
    Write the canonical single-line document for a valid tree

    Example: ``{"Noop": {}}``
    """
    return _write(tree_to_document(tree, schema))


def _reject_duplicates(pairs: List[Tuple[str, Any]]) -> Dict[str, Any]:
    seen: Dict[str, Any] = {}
    for key, value in pairs:
        if key in seen:
            raise TreeFormatError("Duplicate key in tree document", key=key)
        seen[key] = value
    return seen


def document_to_tree(document: Any, schema: GrammarSchema,
                     sentence_length: Optional[int] = None) -> ActionTree:
    """
    Convert a parsed nested-object document to an ActionTree

    Args:
        document: Parsed document
        schema: Grammar the document follows
        sentence_length: Token count T; inferred as one past the last span end when omitted

    Raises:
        TreeFormatError: Naming the first key that does not fit the schema
    """
    if not isinstance(document, dict) or len(document) != 1:
        raise TreeFormatError("Tree document must be an object with a single top-level key")

    (top, content), = document.items()
    active = {schema.root}
    categories: Dict[str, str] = {}
    spans: Dict[str, Span] = {}

    if schema.head is not None:
        if top not in schema.labels_of(schema.head):
            raise TreeFormatError(f"Unknown top-level label '{top}'", key=top)
        active.add(schema.head)
        categories[schema.head] = top
    elif top != schema.node(schema.root).display_name:
        raise TreeFormatError(f"Unexpected top-level key '{top}'", key=top)

    def fill(node_id: str, body: Any, key: str) -> None:
        if not isinstance(body, dict):
            raise TreeFormatError("Internal node value must be an object", key=key)
        for name, value in body.items():
            child = schema.child_by_display_name(node_id, name)
            if child is None or child == schema.head:
                raise TreeFormatError(f"'{name}' is not a child of '{node_id}'", key=name)
            active.add(child)
            kind = schema.kind_of(child)
            if kind == NodeKind.INTERNAL:
                fill(child, value, name)
            elif kind == NodeKind.CATEGORICAL:
                if not isinstance(value, str) or value not in schema.labels_of(child):
                    raise TreeFormatError(f"Invalid label {value!r} for '{child}'", key=name)
                categories[child] = value
            else:
                if (not isinstance(value, list) or len(value) != 2
                        or not all(isinstance(v, int) and not isinstance(v, bool) for v in value)):
                    raise TreeFormatError(f"Span for '{child}' must be two integers", key=name)
                if value[0] > value[1] or value[0] < 0:
                    raise TreeFormatError(f"Invalid span {value} for '{child}'", key=name)
                spans[child] = (value[0], value[1])

    fill(schema.root, content, top)

    if sentence_length is None:
        sentence_length = max((e for _, e in spans.values()), default=-1) + 1
    for node_id, (_, end) in spans.items():
        if end >= sentence_length:
            raise TreeFormatError(
                f"Span end {end} beyond sentence of length {sentence_length}",
                key=schema.node(node_id).display_name)

    return ActionTree(sentence_length, frozenset(active), categories, spans)


def deserialize_tree(text: str, schema: GrammarSchema,
                     sentence_length: Optional[int] = None) -> ActionTree:
    """Parse a tree document string; see ``document_to_tree``"""
    try:
        document = json.loads(text, object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as e:
        raise TreeFormatError(f"Malformed tree document: {e.msg}")
    return document_to_tree(document, schema, sentence_length)


# Helpers over the reference grammar


def action_type(tree: ActionTree, schema: GrammarSchema) -> Optional[str]:
    if schema.head is None:
        return None
    return tree.categories.get(schema.head)


def is_copy(tree: ActionTree, schema: GrammarSchema) -> bool:
    """Copy is a Build that names a reference object"""
    return action_type(tree, schema) == BUILD_LABEL and COPY_MARKER_NODE in tree.active


def action_category(tree: ActionTree, schema: GrammarSchema) -> str:
    """Build-New, Build-Copy or the action-type label"""
    label = action_type(tree, schema) or ""
    if label == BUILD_LABEL:
        return BUILD_COPY if is_copy(tree, schema) else BUILD_NEW
    return label


def sample_random_tree(schema: GrammarSchema, sentence_length: int, rng: np.random.Generator,
                       p_active: float = 0.5) -> ActionTree:
    """Draw a uniformly shaped random valid tree, used by fuzz checks"""
    if sentence_length < 1:
        raise ValueError("sentence_length must be positive")
    active = {schema.root}
    categories: Dict[str, str] = {}
    spans: Dict[str, Span] = {}
    for node_id in schema.dfs_order()[1:]:
        spec = schema.node(node_id)
        if spec.parent not in active:
            continue
        if node_id != schema.head and rng.random() >= p_active:
            continue
        active.add(node_id)
        if spec.kind == NodeKind.CATEGORICAL:
            categories[node_id] = spec.labels[int(rng.integers(len(spec.labels)))]
        elif spec.kind == NodeKind.SPAN:
            a, b = sorted(int(x) for x in rng.integers(0, sentence_length, size=2))
            spans[node_id] = (a, b)
    return ActionTree(sentence_length, frozenset(active), categories, spans)
