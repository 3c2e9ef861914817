"""
Corpus service
Reads and writes example corpora, remaps rephrase spans, filters annotations by agreement,
counts action frequencies and mixes training pools
"""

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import structlog

from services.grammar_service import (
    BUILD_COPY, BUILD_LABEL, BUILD_NEW, ActionTree, GrammarSchema,
    action_category, deserialize_tree, document_to_tree, serialize_tree, tree_equal, validate_tree,
)
from utils.errors import CorpusFormatError, RephraseError, SamplerConfigError, TreeFormatError
from utils.tokenizer import detokenize, tokenize

logger = structlog.get_logger(__name__)

SpanWordMap = Mapping[str, Tuple[int, int]]


class ExampleSource(Enum):
    TEMPLATE = "template"
    REPHRASE = "rephrase"
    PROMPT = "prompt"
    INTERACTIVE = "interactive"


@dataclass(frozen=True)
class Example:
    """A tokenized sentence with its gold tree"""
    tokens: Tuple[str, ...]
    tree: ActionTree
    source: ExampleSource = ExampleSource.TEMPLATE

    @property
    def sentence(self) -> str:
        return detokenize(list(self.tokens))

    @classmethod
    def from_text(cls, sentence: str, tree: ActionTree,
                  source: ExampleSource = ExampleSource.TEMPLATE) -> "Example":
        return cls(tuple(tokenize(sentence)), tree, source)


@dataclass(frozen=True)
class AnnotationTriple:
    """One sentence annotated by three distinct workers"""
    tokens: Tuple[str, ...]
    trees: Tuple[ActionTree, ActionTree, ActionTree]


@dataclass(frozen=True)
class RephraseRecord:
    original: Example
    rephrase: str
    spans: Mapping[str, Tuple[int, int]]


# Corpus files


def _example_from_line(line: str, line_number: int, schema: GrammarSchema,
                       source: ExampleSource) -> Example:
    if "\t" not in line:
        raise CorpusFormatError("Expected 'sentence<TAB>tree'", line_number=line_number)
    sentence, tree_text = line.split("\t", 1)
    tokens = tuple(tokenize(sentence))
    if not tokens:
        raise CorpusFormatError("Empty sentence", line_number=line_number)
    try:
        tree = deserialize_tree(tree_text, schema, len(tokens))
    except TreeFormatError as e:
        raise CorpusFormatError(f"Bad tree document: {e}", line_number=line_number)
    report = validate_tree(tree, schema)
    if not report.ok:
        first = report.violations[0]
        raise CorpusFormatError(f"Invalid tree: {first.rule} at {first.node_id}", line_number=line_number)
    return Example(tokens, tree, source)


def _is_header(line: str) -> bool:
    return line.startswith("# ") and "\t" not in line


def read_examples(corpus_file: Union[str, Path], schema: GrammarSchema,
                  source: ExampleSource = ExampleSource.TEMPLATE) -> List[Example]:
    """
    Read a corpus file with one ``sentence<TAB>tree`` example per line

    Args:
        corpus_file: UTF-8 corpus file
        schema: Grammar of the tree documents
        source: Provenance assigned to every example

    Returns:
        Examples in file order

    Raises:
        CorpusFormatError: With the line number of the first malformed line
    """
    examples: List[Example] = []
    try:
        with open(corpus_file, "r", encoding="utf-8") as f:
            for line_number, raw in enumerate(f, start=1):
                line = raw.rstrip("\n")
                if not line.strip() or _is_header(line):
                    continue
                examples.append(_example_from_line(line, line_number, schema, source))
    except Exception as e:
        logger.error("Corpus read failed", path=str(corpus_file), error=str(e))
        raise

    logger.info("Corpus read", path=str(corpus_file), examples=len(examples))
    return examples


def read_corpus_header(corpus_file: Union[str, Path]) -> Optional[Dict[str, Any]]:
    """Provenance header of a generated corpus, if present"""
    with open(corpus_file, "r", encoding="utf-8") as f:
        first = f.readline().rstrip("\n")
    if _is_header(first):
        try:
            return json.loads(first[2:])
        except json.JSONDecodeError:
            return None
    return None


def write_examples(examples: Iterable[Example], corpus_file: Union[str, Path], schema: GrammarSchema,
                   header: Optional[Mapping[str, Any]] = None) -> int:
    """Write examples in corpus format; returns the example count"""
    count = 0
    with open(corpus_file, "w", encoding="utf-8", newline="\n") as f:
        if header is not None:
            f.write(f"# {json.dumps(dict(header), sort_keys=True)}\n")
        for example in examples:
            f.write(f"{example.sentence}\t{serialize_tree(example.tree, schema)}\n")
            count += 1
    logger.info("Corpus written", path=str(corpus_file), examples=count)
    return count


def _tree_from_field(value: Any, schema: GrammarSchema, sentence_length: int) -> ActionTree:
    if isinstance(value, str):
        return deserialize_tree(value, schema, sentence_length)
    return document_to_tree(value, schema, sentence_length)


def _read_json_lines(path: Union[str, Path]) -> Iterable[Tuple[int, Dict[str, Any]]]:
    with open(path, "r", encoding="utf-8") as f:
        for line_number, raw in enumerate(f, start=1):
            if not raw.strip():
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(f"Malformed JSON: {e.msg}", line_number=line_number)
            if not isinstance(record, dict):
                raise CorpusFormatError("Each line must be a JSON object", line_number=line_number)
            yield line_number, record


# Rephrases


def substitute_rephrase_spans(original: Example, rephrased_sentence: Union[str, Sequence[str]],
                              span_map: SpanWordMap) -> Example:
    """
    Carry a tree over to a rephrased sentence, remapping every span

    Args:
        original: Templated example
        rephrased_sentence: Rephrase text or its tokens
        span_map: For every active span node, the highlighted range in the rephrase

    Returns:
        Rephrase example with identical structure and labels

    Raises:
        RephraseError: Naming a span node that is missing from the map, unexpected, or out of bounds
    """
    tokens = (tuple(tokenize(rephrased_sentence)) if isinstance(rephrased_sentence, str)
              else tuple(rephrased_sentence))
    if not tokens:
        raise RephraseError("Rephrased sentence is empty")

    expected = set(original.tree.spans)
    missing = sorted(expected - set(span_map))
    if missing:
        raise RephraseError("Span node missing from the word map", node_id=missing[0])
    unexpected = sorted(set(span_map) - expected)
    if unexpected:
        raise RephraseError("Word map names a node without a span", node_id=unexpected[0])

    spans: Dict[str, Tuple[int, int]] = {}
    for node_id, (start, end) in span_map.items():
        if not 0 <= start <= end < len(tokens):
            raise RephraseError(f"Range ({start},{end}) outside rephrase of length {len(tokens)}",
                                node_id=node_id)
        spans[node_id] = (int(start), int(end))

    tree = ActionTree(len(tokens), original.tree.active, original.tree.categories, spans)
    return Example(tokens, tree, ExampleSource.REPHRASE)


def read_rephrase_annotations(path: Union[str, Path], schema: GrammarSchema) -> List[RephraseRecord]:
    """Read JSON lines with ``sentence``, ``tree``, ``rephrase`` and ``spans``"""
    records: List[RephraseRecord] = []
    for line_number, record in _read_json_lines(path):
        try:
            tokens = tuple(tokenize(record["sentence"]))
            tree = _tree_from_field(record["tree"], schema, len(tokens))
            spans = {k: (int(v[0]), int(v[1])) for k, v in record.get("spans", {}).items()}
            records.append(RephraseRecord(Example(tokens, tree), record["rephrase"], spans))
        except (KeyError, TypeError, TreeFormatError) as e:
            raise CorpusFormatError(f"Bad rephrase record: {e}", line_number=line_number)
    return records


def apply_rephrases(records: Sequence[RephraseRecord], schema: GrammarSchema) -> List[Example]:
    examples = [substitute_rephrase_spans(r.original, r.rephrase, r.spans) for r in records]
    for example in examples:
        report = validate_tree(example.tree, schema)
        if not report.ok:
            raise RephraseError(f"Rephrased tree is invalid: {report.rules()}")
    logger.info("Rephrases applied", records=len(records))
    return examples


# Agreement


def agreement_filter(triple: AnnotationTriple) -> Optional[ActionTree]:
    """The tree at least two of the three annotators produced, if any"""
    trees = triple.trees
    for i, candidate in enumerate(trees):
        votes = sum(1 for j, other in enumerate(trees) if tree_equal(candidate, other))
        if votes >= 2:
            return candidate
    return None


def read_annotation_triples(path: Union[str, Path], schema: GrammarSchema) -> List[AnnotationTriple]:
    """Read JSON lines with ``sentence`` and exactly three ``trees``"""
    triples: List[AnnotationTriple] = []
    for line_number, record in _read_json_lines(path):
        try:
            tokens = tuple(tokenize(record["sentence"]))
            raw_trees = record["trees"]
            if len(raw_trees) != 3:
                raise CorpusFormatError("An annotation triple needs three trees", line_number=line_number)
            trees = tuple(_tree_from_field(t, schema, len(tokens)) for t in raw_trees)
        except (KeyError, TypeError, TreeFormatError) as e:
            raise CorpusFormatError(f"Bad annotation record: {e}", line_number=line_number)
        for tree in trees:
            if not validate_tree(tree, schema).ok:
                raise CorpusFormatError("Annotated tree is invalid", line_number=line_number)
        triples.append(AnnotationTriple(tokens, trees))
    return triples


def filter_annotations(triples: Sequence[AnnotationTriple],
                       source: ExampleSource = ExampleSource.PROMPT) -> List[Example]:
    kept = []
    for triple in triples:
        tree = agreement_filter(triple)
        if tree is not None:
            kept.append(Example(triple.tokens, tree, source))
    logger.info("Agreement filter applied", triples=len(triples), kept=len(kept))
    return kept


# Statistics


def action_categories(schema: GrammarSchema) -> List[str]:
    """Histogram columns: Build split into new and copy, then every other action type"""
    labels = schema.labels_of(schema.head) if schema.head else ()
    columns = [BUILD_NEW, BUILD_COPY] if BUILD_LABEL in labels else []
    return columns + [label for label in labels if label != BUILD_LABEL]


@dataclass
class ActionHistogram:
    counts: Dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def fractions(self) -> Dict[str, float]:
        total = self.total
        return {k: (v / total if total else 0.0) for k, v in self.counts.items()}

    def to_series(self) -> pd.Series:
        return pd.Series(self.counts, name="count", dtype="int64")

    def to_dict(self) -> Dict[str, Any]:
        return {"counts": dict(self.counts), "total": self.total}


def action_frequency_stats(examples: Iterable[Example], schema: GrammarSchema) -> ActionHistogram:
    """Count examples per action category; Build is split by whether it names a reference object"""
    counts = {category: 0 for category in action_categories(schema)}
    for example in examples:
        category = action_category(example.tree, schema)
        counts[category] = counts.get(category, 0) + 1
    return ActionHistogram(counts)


def empirical_distribution(examples: Iterable[Example], schema: GrammarSchema) -> Dict[str, float]:
    """Observed category frequencies, used as the default sampling target"""
    histogram = action_frequency_stats(examples, schema)
    return {k: v for k, v in histogram.fractions().items() if v > 0}


def shared_distribution(pools: Mapping[str, Sequence[Example]], schema: GrammarSchema,
                        reference: str = "templates") -> Dict[str, float]:
    """
    Empirical distribution of the reference pool restricted to categories every pool can serve

    Raises:
        SamplerConfigError: When no category occurs in every pool
    """
    target = empirical_distribution(pools[reference], schema)
    per_pool = {name: empirical_distribution(pool, schema) for name, pool in pools.items()}
    shared = {c: p for c, p in target.items() if all(c in dist for dist in per_pool.values())}
    if not shared:
        logger.error("No shared action category", pools=sorted(pools))
        raise SamplerConfigError("No action category occurs in every training pool",
                                 {"pools": {name: sorted(dist) for name, dist in per_pool.items()}})
    mass = sum(shared.values())
    return {c: p / mass for c, p in shared.items()}


def load_distribution(path: Union[str, Path]) -> Dict[str, float]:
    """
    Read a target action distribution and normalise it

    Accepts ``{"distribution": {...}}`` or a flat category → weight mapping.
    """
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    weights = data.get("distribution", data) if isinstance(data, dict) else None
    if not isinstance(weights, dict) or not weights:
        raise SamplerConfigError(f"No distribution found in {path}")
    if any(not isinstance(v, (int, float)) or v < 0 for v in weights.values()):
        raise SamplerConfigError(f"Distribution weights must be non-negative numbers: {path}")
    total = float(sum(weights.values()))
    if total <= 0:
        raise SamplerConfigError(f"Distribution has no mass: {path}")
    if isinstance(data, dict) and data.get("approximate"):
        logger.warning("Using an approximate target distribution", path=str(path))
    return {k: v / total for k, v in weights.items()}


# Mixed sampling


@dataclass
class SamplerSpec:
    """Named pools, the target category distribution, and the schema used to categorise"""
    pools: Mapping[str, Sequence[Example]]
    target: Mapping[str, float]
    schema: GrammarSchema
    seed: int = 0
    index: Dict[Tuple[str, str], List[int]] = field(default_factory=dict, init=False)

    def __post_init__(self):
        if not self.pools:
            raise SamplerConfigError("Sampler needs at least one pool")
        total = sum(self.target.values())
        if any(p < 0 for p in self.target.values()) or abs(total - 1.0) > 1e-6:
            raise SamplerConfigError(f"Target distribution must be non-negative and sum to 1, got {total}")

        for name, pool in self.pools.items():
            for i, example in enumerate(pool):
                category = action_category(example.tree, self.schema)
                self.index.setdefault((name, category), []).append(i)
            for category, p in self.target.items():
                if p > 0 and (name, category) not in self.index:
                    raise SamplerConfigError(
                        f"Pool '{name}' has no examples of '{category}' but the target asks for it")

    @property
    def pool_names(self) -> List[str]:
        return list(self.pools)

    @property
    def categories(self) -> List[str]:
        return [c for c, p in self.target.items() if p > 0]

    @property
    def probabilities(self) -> np.ndarray:
        probs = np.array([self.target[c] for c in self.categories], dtype=float)
        return probs / probs.sum()


@dataclass
class SamplerState:
    rng: np.random.Generator
    turn: int = 0
    queues: Dict[Tuple[str, str], Tuple[np.ndarray, int]] = field(default_factory=dict)
    epochs: Dict[Tuple[str, str], int] = field(default_factory=dict)

    @classmethod
    def initial(cls, spec: SamplerSpec) -> "SamplerState":
        return cls(np.random.default_rng(spec.seed))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rng": self.rng.bit_generator.state,
            "turn": self.turn,
            "queues": [[pool, category, order.tolist(), position]
                       for (pool, category), (order, position) in self.queues.items()],
            "epochs": [[pool, category, n] for (pool, category), n in self.epochs.items()],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SamplerState":
        rng = np.random.default_rng()
        rng.bit_generator.state = data["rng"]
        return cls(
            rng=rng,
            turn=int(data["turn"]),
            queues={(p, c): (np.array(order, dtype=np.int64), int(pos)) for p, c, order, pos in data["queues"]},
            epochs={(p, c): int(n) for p, c, n in data["epochs"]},
        )


def mixed_sampler_next(spec: SamplerSpec, state: SamplerState) -> Tuple[Example, SamplerState]:
    """
    Draw the next training example

    Pools strictly alternate. Within the pool, a category is drawn from the target and the next
    unseen example of that (pool, category) subset is returned; an exhausted subset is reshuffled.
    """
    pool = spec.pool_names[state.turn % len(spec.pool_names)]
    category = spec.categories[int(state.rng.choice(len(spec.categories), p=spec.probabilities))]
    key = (pool, category)

    order, position = state.queues.get(key, (None, 0))
    if order is None or position >= len(order):
        order = state.rng.permutation(spec.index[key])
        position = 0
        state.epochs[key] = state.epochs.get(key, 0) + 1

    example = spec.pools[pool][int(order[position])]
    state.queues[key] = (order, position + 1)
    state.turn += 1
    return example, state


class MixedSampler:
    """Stateful sampler over one or more example pools"""

    def __init__(self, pools: Mapping[str, Sequence[Example]], target: Mapping[str, float],
                 schema: GrammarSchema, seed: int = 0):
        self.spec = SamplerSpec(pools, target, schema, seed)
        self.state = SamplerState.initial(self.spec)
        logger.info("Mixed sampler ready", pools={k: len(v) for k, v in pools.items()},
                    categories=len(self.spec.categories), seed=seed)

    def next(self) -> Example:
        example, self.state = mixed_sampler_next(self.spec, self.state)
        return example

    def batch(self, size: int) -> List[Example]:
        return [self.next() for _ in range(size)]

    def __iter__(self):
        while True:
            yield self.next()
