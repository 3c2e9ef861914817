"""
Template generation service
Samples paired (sentence, action tree) examples from a library of templates and template objects
"""

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np
import structlog

from services.corpus_service import Example, write_examples
from services.grammar_service import (
    NOOP_LABEL, ActionTree, GrammarSchema, NodeKind, action_category, make_tree, validate_tree,
)
from utils.errors import CorpusFormatError, TemplateLibraryError
from utils.tokenizer import detokenize, tokenize

logger = structlog.get_logger(__name__)

BINDING = "@"
SPLIT_NAMES = ("train", "valid", "test")


@dataclass(frozen=True)
class Realization:
    """One surface fragment with its tree fragment; node refs may use the @ placeholder"""
    text: str
    tokens: Tuple[str, ...]
    labels: Mapping[str, str] = field(default_factory=dict)
    span: Optional[str] = None
    spans: Mapping[str, Tuple[int, int]] = field(default_factory=dict)
    activate: Tuple[str, ...] = ()

    @property
    def touches_tree(self) -> bool:
        return bool(self.labels or self.span or self.spans or self.activate)

    def refs(self) -> List[str]:
        refs = list(self.labels) + list(self.spans) + list(self.activate)
        if self.span:
            refs.append(self.span)
        return refs


@dataclass(frozen=True)
class TemplateObject:
    id: str
    realizations: Tuple[Realization, ...]

    @property
    def linguistic_only(self) -> bool:
        return not any(r.touches_tree for r in self.realizations)

    @property
    def uses_binding(self) -> bool:
        return any(ref.startswith(BINDING) for r in self.realizations for ref in r.refs())


@dataclass(frozen=True)
class Slot:
    name: str
    target: Optional[str] = None

    @classmethod
    def parse(cls, text: str) -> "Slot":
        name, sep, target = text.partition(BINDING)
        return cls(name, target if sep else None)

    def __str__(self) -> str:
        return f"{self.name}{BINDING}{self.target}" if self.target else self.name


@dataclass(frozen=True)
class Template:
    id: str
    slots: Tuple[Slot, ...]
    weight: float = 1.0
    fragment: bool = False


@dataclass(frozen=True)
class GeneratedExample:
    """A sampled sentence with its tree and provenance"""
    tokens: Tuple[str, ...]
    tree: ActionTree
    template_id: str

    @property
    def sentence(self) -> str:
        return detokenize(list(self.tokens))


def bind(ref: str, target: Optional[str]) -> str:
    """Resolve ``@`` and ``@:leaf`` against a slot target"""
    if not ref.startswith(BINDING):
        return ref
    if target is None:
        raise ValueError(f"Reference '{ref}' needs a slot binding")
    return target + ref[len(BINDING):]


def _parse_realization(raw: Any, defaults: Mapping[str, Any], object_id: str) -> Realization:
    if isinstance(raw, str):
        raw = {"text": raw}
    if not isinstance(raw, Mapping) or "text" not in raw:
        raise TemplateLibraryError("Realization needs a text", object_id=object_id)

    tokens = tuple(tokenize(raw["text"]))
    if not tokens:
        raise TemplateLibraryError("Realization text is empty", object_id=object_id)

    labels = {**defaults.get("labels", {}), **raw.get("labels", {})}
    raw_spans = {**defaults.get("spans", {}), **raw.get("spans", {})}
    spans: Dict[str, Tuple[int, int]] = {}
    for ref, (lo, hi) in raw_spans.items():
        if not 0 <= lo <= hi < len(tokens):
            raise TemplateLibraryError(
                f"Relative span [{lo},{hi}] outside realization '{raw['text']}'", object_id=object_id)
        spans[ref] = (int(lo), int(hi))
    activate = tuple(dict.fromkeys(list(defaults.get("activate", [])) + list(raw.get("activate", []))))
    span = raw.get("span", defaults.get("span"))

    return Realization(" ".join(tokens), tokens, labels, span, spans, activate)


class TemplateLibrary:
    """
    Template objects and templates that jointly sample a surface string and its tree
    """

    def __init__(self, schema: GrammarSchema, objects: Mapping[str, TemplateObject],
                 templates: Sequence[Template], seed: int = 0):
        self.schema = schema
        self.objects: Dict[str, TemplateObject] = dict(objects)
        self.all_templates: Dict[str, Template] = {t.id: t for t in templates}
        self.templates: List[Template] = [t for t in templates if not t.fragment]
        self.seed = seed
        self._categories: Dict[str, str] = {}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], schema: GrammarSchema,
                  verify_samples: int = 20, seed: int = 0) -> "TemplateLibrary":
        """
        Build a library from its parsed document and verify every template

        Args:
            data: Document with ``objects`` and ``templates``
            schema: Grammar the trees must follow
            verify_samples: Random compositions checked per template on top of the cycling pass
            seed: Seed of the verification stream

        Returns:
            TemplateLibrary

        Raises:
            TemplateLibraryError: On unresolved references or templates composing invalid trees
        """
        objects: Dict[str, TemplateObject] = {}
        for object_id, raw in (data.get("objects") or {}).items():
            if isinstance(raw, list):
                raw = {"realizations": raw}
            realizations = raw.get("realizations") or []
            if not realizations:
                raise TemplateLibraryError("Template object has no realizations", object_id=object_id)
            parsed = tuple(_parse_realization(r, raw, object_id) for r in realizations)
            touching = {r.touches_tree for r in parsed}
            if len(touching) > 1:
                raise TemplateLibraryError(
                    "Realizations must all touch the tree or all be linguistic", object_id=object_id)
            objects[object_id] = TemplateObject(object_id, parsed)

        templates: List[Template] = []
        seen: Set[str] = set()
        for index, raw in enumerate(data.get("templates") or []):
            template_id = str(raw.get("id", f"t{index:04d}"))
            if template_id in seen:
                raise TemplateLibraryError("Duplicate template id", template_id=template_id)
            if template_id in objects:
                raise TemplateLibraryError("Template id collides with an object id",
                                           template_id=template_id)
            seen.add(template_id)
            slots = tuple(Slot.parse(s) for s in raw.get("slots") or [])
            if not slots:
                raise TemplateLibraryError("Template has no slots", template_id=template_id)
            weight = float(raw.get("weight", 1.0))
            if weight <= 0:
                raise TemplateLibraryError("Template weight must be positive", template_id=template_id)
            templates.append(Template(template_id, slots, weight, bool(raw.get("fragment", False))))

        library = cls(schema, objects, templates, seed)
        library.verify(verify_samples)
        return library

    # Structure checks

    def _resolve(self, template: Template, trail: Tuple[str, ...] = ()) -> List[Tuple[TemplateObject, Optional[str]]]:
        """Flatten a template into (object, binding) pairs, expanding fragment sub-templates"""
        if template.id in trail:
            raise TemplateLibraryError(f"Sub-template cycle {' -> '.join(trail + (template.id,))}",
                                       template_id=template.id)
        flat: List[Tuple[TemplateObject, Optional[str]]] = []
        for slot in template.slots:
            if slot.name in self.objects:
                obj = self.objects[slot.name]
                if obj.uses_binding and slot.target is None:
                    raise TemplateLibraryError(f"Object '{slot.name}' needs a binding",
                                               template_id=template.id, object_id=slot.name)
                if slot.target is not None and slot.target not in self.schema:
                    raise TemplateLibraryError(f"Binding target '{slot.target}' is not a schema node",
                                               template_id=template.id, object_id=slot.name)
                flat.append((obj, slot.target))
            elif slot.name in self.all_templates:
                sub = self.all_templates[slot.name]
                if not sub.fragment:
                    raise TemplateLibraryError(f"'{slot.name}' is not marked as a fragment",
                                               template_id=template.id)
                flat.extend(self._resolve(sub, trail + (template.id,)))
            else:
                raise TemplateLibraryError(f"Unresolved slot '{slot.name}'",
                                           template_id=template.id, object_id=slot.name)
        return flat

    def _check_static(self, template: Template, flat: List[Tuple[TemplateObject, Optional[str]]]) -> None:
        owner: Dict[str, int] = {}
        for position, (obj, target) in enumerate(flat):
            for realization in obj.realizations:
                for ref in realization.refs():
                    node_id = bind(ref, target)
                    if node_id not in self.schema:
                        raise TemplateLibraryError(f"Unknown node '{node_id}'",
                                                   template_id=template.id, object_id=obj.id)
                for ref in list(realization.labels):
                    node_id = bind(ref, target)
                    if self.schema.kind_of(node_id) != NodeKind.CATEGORICAL:
                        raise TemplateLibraryError(f"Label on non-categorical '{node_id}'",
                                                   template_id=template.id, object_id=obj.id)
                span_refs = list(realization.spans) + ([realization.span] if realization.span else [])
                for ref in span_refs:
                    node_id = bind(ref, target)
                    if self.schema.kind_of(node_id) != NodeKind.SPAN:
                        raise TemplateLibraryError(f"Span on non-span node '{node_id}'",
                                                   template_id=template.id, object_id=obj.id)
                for ref in list(realization.labels) + span_refs:
                    node_id = bind(ref, target)
                    if owner.setdefault(node_id, position) != position:
                        raise TemplateLibraryError(f"Two slots assign '{node_id}'",
                                                   template_id=template.id, object_id=obj.id)

    def verify(self, samples: int = 20) -> None:
        """Compose every realization of every slot at least once, plus seeded random draws"""
        rng = np.random.default_rng(self.seed)
        for template in self.all_templates.values():
            flat = self._resolve(template)
            self._check_static(template, flat)
            if template.fragment:
                continue
            widest = max(len(obj.realizations) for obj, _ in flat)
            choices = [[k % len(obj.realizations) for obj, _ in flat] for k in range(widest)]
            choices += [[int(rng.integers(len(obj.realizations))) for obj, _ in flat]
                        for _ in range(samples)]
            for picks in choices:
                example = self._compose(template, flat, picks)
                report = validate_tree(example.tree, self.schema)
                if not report.ok:
                    first = report.violations[0]
                    raise TemplateLibraryError(
                        f"Composed tree is invalid: {first.rule} at {first.node_id}",
                        template_id=template.id)
            self._categories[template.id] = action_category(example.tree, self.schema)

        categories = Counter(self._categories.values())
        logger.info("Template library verified", templates=len(self.templates),
                    objects=len(self.objects), categories=len(categories))

    # Sampling

    def _compose(self, template: Template, flat: List[Tuple[TemplateObject, Optional[str]]],
                 picks: Sequence[int]) -> GeneratedExample:
        tokens: List[str] = []
        labels: Dict[str, str] = {}
        spans: Dict[str, Tuple[int, int]] = {}
        activate: List[str] = []
        for (obj, target), pick in zip(flat, picks):
            realization = obj.realizations[pick]
            offset = len(tokens)
            tokens.extend(realization.tokens)
            for ref, label in realization.labels.items():
                node_id = bind(ref, target)
                if labels.get(node_id, label) != label:
                    raise TemplateLibraryError(f"Conflicting labels for '{node_id}'",
                                               template_id=template.id, object_id=obj.id)
                labels[node_id] = label
            if realization.span:
                spans[bind(realization.span, target)] = (offset, offset + len(realization.tokens) - 1)
            for ref, (lo, hi) in realization.spans.items():
                spans[bind(ref, target)] = (offset + lo, offset + hi)
            activate.extend(bind(ref, target) for ref in realization.activate)
        tree = make_tree(self.schema, len(tokens), labels, spans, activate)
        return GeneratedExample(tuple(tokens), tree, template.id)

    def sample_pair(self, template: Union[Template, str], rng: np.random.Generator) -> GeneratedExample:
        """
        Sample one realization per slot and compose the sentence and its tree

        Args:
            template: Template or template id
            rng: Random generator owned by the caller

        Returns:
            GeneratedExample whose spans address the tokens emitted by their slots
        """
        if isinstance(template, str):
            template = self.all_templates[template]
        flat = self._resolve(template)
        picks = [int(rng.integers(len(obj.realizations))) for obj, _ in flat]
        return self._compose(template, flat, picks)

    def choose_template(self, rng: np.random.Generator) -> Template:
        weights = np.array([t.weight for t in self.templates], dtype=float)
        return self.templates[int(rng.choice(len(self.templates), p=weights / weights.sum()))]

    def coverage(self) -> Dict[str, int]:
        """Top-level template count per action category"""
        return dict(Counter(self._categories[t.id] for t in self.templates))

    def __len__(self) -> int:
        return len(self.templates)


def load_template_library(library_file: Union[str, Path], schema: GrammarSchema,
                          verify_samples: int = 20, seed: int = 0) -> TemplateLibrary:
    """
    Load and verify a template library file

    Args:
        library_file: JSON library document
        schema: Grammar the templates target

    Returns:
        Verified TemplateLibrary
    """
    try:
        with open(library_file, "r", encoding="utf-8") as f:
            data = json.load(f)
        library = TemplateLibrary.from_dict(data, schema, verify_samples, seed)
        logger.info("Template library loaded", path=str(library_file), templates=len(library))
        return library
    except json.JSONDecodeError as e:
        logger.error("Template library is not valid JSON", path=str(library_file), error=str(e))
        raise TemplateLibraryError(f"Malformed library document at line {e.lineno}: {e.msg}")
    except Exception as e:
        logger.error("Template library load failed", path=str(library_file), error=str(e))
        raise


def load_noop_corpus(corpus_file: Union[str, Path]) -> List[str]:
    """Read a one-utterance-per-line dialogue corpus, dropping blank lines"""
    with open(corpus_file, "r", encoding="utf-8") as f:
        lines = [line.strip() for line in f]
    lines = [line for line in lines if tokenize(line)]
    if not lines:
        raise CorpusFormatError(f"NOOP corpus is empty: {corpus_file}")
    return lines


def sample_noop(corpus: Sequence[str], schema: GrammarSchema, rng: np.random.Generator) -> GeneratedExample:
    """
    Pick a dialogue line uniformly and pair it with a bare Noop tree

    Raises:
        CorpusFormatError: If the corpus is empty
    """
    if not corpus:
        raise CorpusFormatError("NOOP corpus is empty")
    tokens = tuple(tokenize(corpus[int(rng.integers(len(corpus)))]))
    if not tokens:
        raise CorpusFormatError("NOOP corpus line has no tokens")
    tree = make_tree(schema, len(tokens), {schema.head: NOOP_LABEL})
    return GeneratedExample(tokens, tree, "noop-corpus")


def example_stream(library: TemplateLibrary, noop_corpus: Optional[Sequence[str]], count: int,
                   noop_fraction: float, seed: int, split_index: int) -> Iterator[GeneratedExample]:
    """Examples of one split; example i draws from its own stream seeded by (seed, split, i)"""
    if noop_fraction > 0 and not noop_corpus:
        raise CorpusFormatError("noop_fraction is positive but no NOOP corpus was given")
    for i in range(count):
        rng = np.random.default_rng([seed, split_index, i])
        if noop_fraction > 0 and rng.random() < noop_fraction:
            yield sample_noop(noop_corpus, library.schema, rng)
        else:
            yield library.sample_pair(library.choose_template(rng), rng)


def generate_splits(library: TemplateLibrary, noop_corpus: Optional[Sequence[str]],
                    counts: Tuple[int, int, int], noop_fraction: float, seed: int,
                    output_dir: Union[str, Path], config_digest: str = "") -> Dict[str, List[GeneratedExample]]:
    """
    Generate train/valid/test corpora and write them as ``<split>.tsv``

    Args:
        library: Verified template library
        noop_corpus: Dialogue lines for Noop examples
        counts: (train, valid, test) sizes
        noop_fraction: Probability that an example is a corpus Noop
        seed: Root seed
        output_dir: Destination directory
        config_digest: Provenance digest recorded in each file header

    Returns:
        Examples per split
    """
    if any(c < 1 for c in counts):
        raise ValueError(f"Split sizes must be positive: {counts}")

    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    splits: Dict[str, List[GeneratedExample]] = {}

    try:
        for split_index, (name, count) in enumerate(zip(SPLIT_NAMES, counts)):
            examples = list(example_stream(library, noop_corpus, count, noop_fraction, seed, split_index))
            header = {"config_digest": config_digest, "seed": seed, "split": name}
            path = output_dir / f"{name}.tsv"
            write_examples((Example(e.tokens, e.tree) for e in examples), path, library.schema, header)
            splits[name] = examples
            logger.info("Split written", split=name, examples=count, path=str(path))
    except Exception as e:
        logger.error("Split generation failed", output_dir=str(output_dir), error=str(e))
        raise

    return splits
