"""
Tree parser service
Node representations, prediction heads, tree likelihood and DFS-order decoding
"""

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, FrozenSet, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from config import Hyperparameters
from services.grammar_service import ActionTree, GrammarSchema, NodeKind, Span, validate_tree
from services.neural_service import (
    Attention,
    EmbeddingTable,
    Encoder,
    ParameterStore,
    Tensor,
    bilinear,
    concat,
    embed_sentence,
    encode_sentence,
    gru_step,
    log_sigmoid,
    log_softmax,
    no_grad,
    stack,
)
from utils.errors import CheckpointError
from utils.tokenizer import tokenize

logger = structlog.get_logger(__name__)


class ModelVariant(str, Enum):
    """How node representations are computed"""
    INDEPENDENT = "independent"
    SEQ2TREE = "seq2tree"
    SENTENCEREC = "sentencerec"


@dataclass
class NodeParams:
    """Query vector, prediction head and recurrent input of one schema node"""
    v: Tensor
    p: Optional[Tensor] = None
    label: Optional[Tensor] = None
    start: Optional[Tensor] = None
    end: Optional[Tensor] = None
    v_rec: Optional[Tensor] = None


@dataclass(frozen=True)
class DecoderState:
    """Recurrent state while visiting the children of one parent

    ``g_parent`` is the parent's state and ``g_prev`` the state of the last active sibling
    (zero before the first).
    """
    g_parent: Tensor
    g_prev: Tensor


@dataclass
class NodeDistributions:
    """Log-space prediction distributions for one node"""
    node_id: str
    activation_logit: Optional[Tensor] = None
    label_logp: Optional[Tensor] = None
    start_logp: Optional[Tensor] = None
    end_logp: Optional[Tensor] = None

    @property
    def activation_probability(self) -> Optional[float]:
        if self.activation_logit is None:
            return None
        return float(np.exp(-np.logaddexp(0.0, -self.activation_logit.item())))

    def log_active(self) -> float:
        if self.activation_logit is None:
            return 0.0
        return float(-np.logaddexp(0.0, -self.activation_logit.item()))

    def log_inactive(self) -> float:
        return float(-np.logaddexp(0.0, self.activation_logit.item()))


class ParserModel:
    """
    Sentence encoder plus per-node heads over one grammar

    Build with ``ParserModel.build``; restore with ``ParserModel.load``.
    """

    def __init__(self, schema: GrammarSchema, variant: ModelVariant, hyper: Hyperparameters,
                 store: ParameterStore, table: EmbeddingTable, encoder: Encoder, attention: Attention,
                 nodes: Dict[str, NodeParams], decoder: Optional[Tuple[Tensor, Tensor, Tensor]],
                 seed: int, repr_feedback: float):
        self.schema = schema
        self.variant = variant
        self.hyper = hyper
        self.store = store
        self.table = table
        self.encoder = encoder
        self.attention = attention
        self.nodes = nodes
        self.decoder = decoder
        self.seed = seed
        self.repr_feedback = repr_feedback
        self.dim = hyper.dim

    @classmethod
    def build(cls, schema: GrammarSchema, vocabulary: Sequence[str],
              hyper: Optional[Hyperparameters] = None,
              variant: Union[ModelVariant, str] = ModelVariant.SENTENCEREC, seed: int = 0,
              embedding_path: Optional[Path] = None, pretrained: Optional[np.ndarray] = None,
              repr_feedback: float = 1.0) -> "ParserModel":
        """
        Create a freshly initialised model

        Parameters are created in a fixed order (embeddings, encoder, attention, decoder, then
        nodes in DFS order), so equal seeds give equal values across variants that share them.

        Args:
            schema: Grammar to predict
            vocabulary: Corpus tokens for the embedding table
            hyper: Dimensions and rates
            variant: independent, seq2tree or sentencerec
            seed: Initialisation seed
            embedding_path: Optional pretrained vector file
            pretrained: Optional explicit frozen block (rows: <unk> then ``vocabulary``)
            repr_feedback: Scale of the node representation fed back into the recurrence

        Returns:
            ParserModel
        """
        hyper = hyper or Hyperparameters()
        variant = ModelVariant(variant)
        dim = hyper.dim
        store = ParameterStore(dim, seed)

        if pretrained is not None:
            table = EmbeddingTable(vocabulary, store, pretrained, hyper.free_dims)
        elif embedding_path is not None:
            table = EmbeddingTable.from_file(embedding_path, store, hyper.free_dims)
        else:
            table = EmbeddingTable.from_vocabulary(vocabulary, store, hyper.pretrained_dims,
                                                   hyper.free_dims, seed)
        encoder = Encoder(store, table.width, dim, hyper.encoder_layers)
        attention = Attention(store, dim, hyper.heads)

        recurrent = variant != ModelVariant.INDEPENDENT
        decoder = None
        if recurrent:
            decoder = (
                store.create("decoder.W", (2 * dim, 3 * dim)),
                store.create("decoder.U", (dim, 3 * dim)),
                store.create("decoder.b", (3 * dim,), init="zeros"),
            )

        decisions = set(schema.decision_nodes())
        nodes: Dict[str, NodeParams] = {}
        for node_id in schema.dfs_order():
            if node_id == schema.root:
                continue
            kind = schema.kind_of(node_id)
            n_labels = len(schema.labels_of(node_id))
            base = f"node.{node_id}"
            params = NodeParams(v=store.create(f"{base}.v", (dim,)))
            if node_id in decisions:
                params.p = store.create(f"{base}.p", (dim,))
            if kind == NodeKind.CATEGORICAL:
                params.label = store.create(f"{base}.label", (n_labels, dim))
            elif kind == NodeKind.SPAN:
                params.start = store.create(f"{base}.start", (dim, dim))
                params.end = store.create(f"{base}.end", (dim, dim))
            if recurrent:
                shape = (n_labels, dim) if kind == NodeKind.CATEGORICAL else (dim,)
                params.v_rec = store.create(f"{base}.v_rec", shape)
            nodes[node_id] = params

        logger.info("Parser model built", variant=variant.value, dim=dim, heads=hyper.heads,
                    parameters=len(store), vocabulary=len(table))
        return cls(schema, variant, hyper, store, table, encoder, attention, nodes, decoder,
                   seed, repr_feedback)

    @property
    def is_recurrent(self) -> bool:
        return self.variant != ModelVariant.INDEPENDENT

    @property
    def feedback(self) -> float:
        """Weight of r in the recurrent input; zero for Seq2Tree"""
        return self.repr_feedback if self.variant == ModelVariant.SENTENCEREC else 0.0

    def node(self, node_id: str) -> NodeParams:
        return self.nodes[node_id]

    def zeros(self) -> Tensor:
        return Tensor(np.zeros(self.dim))

    def initial_state(self) -> Optional[DecoderState]:
        if not self.is_recurrent:
            return None
        return DecoderState(self.zeros(), self.zeros())

    def child_state(self, state: Optional[DecoderState]) -> Optional[DecoderState]:
        """State for the children of the node whose own state is ``state.g_prev``"""
        if state is None:
            return None
        return DecoderState(state.g_prev, self.zeros())

    def encode(self, tokens: Sequence[str], training: bool = False,
               rng: Optional[np.random.Generator] = None) -> Tensor:
        """Embed and encode a tokenized sentence into H (T, d)"""
        if not tokens:
            raise ValueError("Cannot parse an empty sentence")
        embedded = embed_sentence(tokens, self.table, self.hyper.word_dropout if training else 0.0,
                                  rng, training)
        return encode_sentence(embedded, self.encoder, self.hyper.dropout, rng, training)

    def represent(self, node_id: str, H: Tensor, state: Optional[DecoderState]) -> Tensor:
        if self.is_recurrent:
            return _recurrent_query(node_id, H, self, state)
        return node_repr_independent(node_id, H, self)

    def advance(self, node_id: str, r: Tensor, label: Optional[str],
                state: Optional[DecoderState]) -> Optional[DecoderState]:
        """Sibling state after ``node_id`` is decided active"""
        if state is None:
            return None
        return _advance_state(node_id, r, label, state, self, self.feedback)

    # Checkpoints

    def metadata(self) -> Dict[str, Any]:
        return {
            "kind": "parser",
            "schema_digest": self.schema.digest(),
            "variant": self.variant.value,
            "vocabulary": list(self.table.vocabulary[1:]),
            "pretrained_dims": self.table.pretrained_dims,
            "hyper": self.hyper.model_dump(),
            "seed": self.seed,
            "repr_feedback": self.repr_feedback,
        }

    def save(self, path: Union[str, Path], metadata: Optional[Dict[str, Any]] = None,
             extras: Optional[Dict[str, np.ndarray]] = None) -> Path:
        return self.store.save(path, {**self.metadata(), **(metadata or {})}, extras)

    @classmethod
    def load(cls, path: Union[str, Path], schema: GrammarSchema) -> "ParserModel":
        model, _, _ = load_checkpoint(path, schema)
        return model


def load_checkpoint(path: Union[str, Path],
                    schema: GrammarSchema) -> Tuple[ParserModel, Dict[str, Any], Dict[str, np.ndarray]]:
    """
    Restore a model together with its metadata and extra arrays

    Raises:
        CheckpointError: When the file was written for another schema or is incomplete
    """
    loaded, meta, extras = ParameterStore.load(path)
    if meta.get("kind") != "parser":
        raise CheckpointError("Not a parser checkpoint", {"path": str(path)})
    if meta.get("schema_digest") != schema.digest():
        logger.error("Checkpoint schema mismatch", path=str(path),
                     expected=schema.digest(), found=meta.get("schema_digest"))
        raise CheckpointError("Checkpoint was trained on a different schema",
                              {"path": str(path), "expected": schema.digest(),
                               "found": meta.get("schema_digest")})

    pretrained = loaded["embedding.pretrained"].data if "embedding.pretrained" in loaded else None
    hyper = Hyperparameters.model_validate({**meta["hyper"], "pretrained_dims": meta["pretrained_dims"]})
    model = ParserModel.build(schema, meta["vocabulary"], hyper, meta["variant"], meta.get("seed", 0),
                              pretrained=pretrained, repr_feedback=meta.get("repr_feedback", 1.0))
    if set(model.store.names()) != set(loaded.names()):
        missing = sorted(set(model.store.names()) ^ set(loaded.names()))
        raise CheckpointError(f"Checkpoint parameters do not match the model: {missing[:5]}",
                              {"path": str(path)})
    model.store.restore(loaded.snapshot())
    for name in loaded.names():
        model.store.accumulator(name)[...] = loaded.accumulator(name)
    return model, meta, extras


# Node representations


def node_repr_independent(node_id: str, H: Tensor, model: ParserModel) -> Tensor:
    """r_n = attn(v_n, H), with no state shared between nodes"""
    r, _ = model.attention(model.node(node_id).v, H)
    return r


def _recurrent_query(node_id: str, H: Tensor, model: ParserModel, state: DecoderState) -> Tensor:
    r, _ = model.attention(model.node(node_id).v + state.g_prev, H)
    return r


def _advance_state(node_id: str, r: Tensor, label: Optional[str], state: DecoderState,
                   model: ParserModel, feedback: float) -> DecoderState:
    params = model.node(node_id)
    if model.schema.kind_of(node_id) == NodeKind.CATEGORICAL:
        if label is None:
            raise ValueError(f"Categorical node '{node_id}' needs its label to update the decoder")
        x = params.v_rec[model.schema.labels_of(node_id).index(label)]
    else:
        x = params.v_rec
    if feedback != 0.0:
        x = x + (r if feedback == 1.0 else r * feedback)
    W, U, b = model.decoder
    g = gru_step(concat([x, state.g_parent]) @ W + b, state.g_prev, U)
    return DecoderState(state.g_parent, g)


def node_repr_seq2tree(node_id: str, H: Tensor, model: ParserModel, state: DecoderState,
                       active: bool, label: Optional[str] = None) -> Tuple[Tensor, DecoderState]:
    """
    Representation of the next child and the sibling state after it

    The recurrent input is the node's own vector (per label for categorical nodes) next to the
    parent state; an inactive child leaves the state unchanged.
    """
    if state is None:
        raise ValueError("Parent must be decided before its children")
    r = _recurrent_query(node_id, H, model, state)
    return r, (_advance_state(node_id, r, label, state, model, 0.0) if active else state)


def node_repr_sentencerec(node_id: str, H: Tensor, model: ParserModel, state: DecoderState,
                          active: bool, label: Optional[str] = None) -> Tuple[Tensor, DecoderState]:
    """As ``node_repr_seq2tree`` with the node representation added to the recurrent input"""
    if state is None:
        raise ValueError("Parent must be decided before its children")
    r = _recurrent_query(node_id, H, model, state)
    if not active:
        return r, state
    return r, _advance_state(node_id, r, label, state, model, model.repr_feedback)


def node_distributions(node_id: str, r: Tensor, H: Tensor, model: ParserModel) -> NodeDistributions:
    """Activation logit plus label or start/end log-distributions for one node"""
    params = model.node(node_id)
    dist = NodeDistributions(node_id)
    if params.p is not None:
        dist.activation_logit = r @ params.p
    kind = model.schema.kind_of(node_id)
    if kind == NodeKind.CATEGORICAL:
        dist.label_logp = log_softmax(params.label @ r)
    elif kind == NodeKind.SPAN:
        dist.start_logp = log_softmax(bilinear(r, params.start, H))
        dist.end_logp = log_softmax(bilinear(r, params.end, H))
    return dist


# Likelihood


def _smoothed(logp: Tensor, index: int, smoothing: float) -> Tensor:
    if smoothing == 0.0:
        return logp[index]
    return logp[index] * (1.0 - smoothing) + logp.sum() * (smoothing / logp.shape[0])


def _check_gold(schema: GrammarSchema, tokens: Sequence[str], gold: ActionTree) -> None:
    if gold.sentence_length != len(tokens):
        raise ValueError(f"Tree is for {gold.sentence_length} tokens, sentence has {len(tokens)}")
    report = validate_tree(gold, schema)
    if not report.ok:
        raise ValueError(f"Gold tree is invalid: {report.rules()}")


def _forced_walk(model: ParserModel, H: Tensor, gold: ActionTree,
                 visit: Any) -> None:
    schema = model.schema

    def walk(parent: str, state: Optional[DecoderState]) -> None:
        for child in schema.children_of(parent):
            r = model.represent(child, H, state)
            dist = node_distributions(child, r, H, model)
            active = gold.is_active(child)
            visit(child, dist, active)
            if not active:
                continue
            state = model.advance(child, r, gold.categories.get(child), state)
            if schema.kind_of(child) == NodeKind.INTERNAL:
                walk(child, model.child_state(state))

    walk(schema.root, model.initial_state())


def tree_log_likelihood(model: ParserModel, tokens: Sequence[str], gold: ActionTree,
                        label_smoothing: float = 0.0, training: bool = False,
                        rng: Optional[np.random.Generator] = None) -> Tensor:
    """
    Log-likelihood of a gold tree under the model

    Activation terms are Bernoulli log-probabilities for every child of an active node; label
    and span terms only for active nodes. Subtrees under inactive nodes contribute nothing.

    Args:
        model: Parser
        tokens: Tokenized sentence
        gold: Valid tree for ``tokens``
        label_smoothing: Mass spread uniformly on the softmax terms
        training: Apply dropout and word dropout
        rng: Generator for dropout

    Returns:
        Scalar tensor L

    Raises:
        ValueError: If the gold tree does not validate
    """
    schema = model.schema
    _check_gold(schema, tokens, gold)
    H = model.encode(tokens, training, rng)
    terms: List[Tensor] = []

    def visit(node_id: str, dist: NodeDistributions, active: bool) -> None:
        if dist.activation_logit is not None:
            terms.append(log_sigmoid(dist.activation_logit if active else -dist.activation_logit))
        if not active:
            return
        kind = schema.kind_of(node_id)
        if kind == NodeKind.CATEGORICAL:
            index = schema.labels_of(node_id).index(gold.categories[node_id])
            terms.append(_smoothed(dist.label_logp, index, label_smoothing))
        elif kind == NodeKind.SPAN:
            start, end = gold.spans[node_id]
            terms.append(_smoothed(dist.start_logp, start, label_smoothing))
            terms.append(_smoothed(dist.end_logp, end, label_smoothing))

    _forced_walk(model, H, gold, visit)
    if not terms:
        return Tensor(0.0)
    return stack(terms).sum()


def gold_distributions(model: ParserModel, tokens: Sequence[str],
                       gold: ActionTree) -> Dict[str, NodeDistributions]:
    """Distributions of every node visited while following the gold tree"""
    _check_gold(model.schema, tokens, gold)
    found: Dict[str, NodeDistributions] = {}
    with no_grad():
        H = model.encode(tokens)
        _forced_walk(model, H, gold, lambda node_id, dist, active: found.__setitem__(node_id, dist))
    return found


# Decoding


def best_span(start_logp: np.ndarray, end_logp: np.ndarray) -> Tuple[Span, float]:
    """
    Start and end pointers decoded independently, then ordered

    A start after the end is swapped with it. Ties take the first position.

    Returns:
        Tuple of ((start, end) with start <= end, log-probability of the two pointers)
    """
    start, end = int(np.argmax(start_logp)), int(np.argmax(end_logp))
    score = float(start_logp[start] + end_logp[end])
    return (min(start, end), max(start, end)), score


def span_log_prob(start_logp: np.ndarray, end_logp: np.ndarray, span: Span) -> float:
    """Log-probability of the better pointer order that decodes to ``span``"""
    lo, hi = span
    return float(max(start_logp[lo] + end_logp[hi], start_logp[hi] + end_logp[lo]))


def tree_decoding_log_prob(model: ParserModel, tokens: Sequence[str], tree: ActionTree) -> float:
    """
    Score the decoders assign to ``tree``

    Equal to ``tree_log_likelihood`` except that a span is scored by its better pointer order,
    matching what greedy and beam decoding maximise.
    """
    _check_gold(model.schema, tokens, tree)
    total = 0.0

    def visit(node_id: str, dist: NodeDistributions, active: bool) -> None:
        nonlocal total
        if dist.activation_logit is not None:
            total += dist.log_active() if active else dist.log_inactive()
        if not active:
            return
        if node_id in tree.categories:
            index = model.schema.labels_of(node_id).index(tree.categories[node_id])
            total += float(dist.label_logp.data[index])
        elif node_id in tree.spans:
            total += span_log_prob(dist.start_logp.data, dist.end_logp.data, tree.spans[node_id])

    with no_grad():
        _forced_walk(model, model.encode(tokens), tree, visit)
    return total


def greedy_decode_with_probabilities(model: ParserModel,
                                     tokens: Sequence[str]) -> Tuple[ActionTree, Dict[str, Dict[str, Any]]]:
    """
    Decide nodes one by one in DFS order, skipping the subtrees of inactive nodes

    Returns:
        Tuple of (tree, per-node probabilities of every visited node)
    """
    schema = model.schema
    active = {schema.root}
    categories: Dict[str, str] = {}
    spans: Dict[str, Span] = {}
    probabilities: Dict[str, Dict[str, Any]] = {}

    with no_grad():
        H = model.encode(tokens)

        def walk(parent: str, state: Optional[DecoderState]) -> None:
            for child in schema.children_of(parent):
                r = model.represent(child, H, state)
                dist = node_distributions(child, r, H, model)
                entry: Dict[str, Any] = {"active": dist.activation_probability}
                probabilities[child] = entry
                if dist.activation_logit is not None and dist.log_active() < dist.log_inactive():
                    continue
                active.add(child)
                label = None
                kind = schema.kind_of(child)
                if kind == NodeKind.CATEGORICAL:
                    lp = dist.label_logp.data
                    label = schema.labels_of(child)[int(np.argmax(lp))]
                    categories[child] = label
                    entry["labels"] = dict(zip(schema.labels_of(child), np.exp(lp).tolist()))
                elif kind == NodeKind.SPAN:
                    spans[child], _ = best_span(dist.start_logp.data, dist.end_logp.data)
                    entry["start"] = np.exp(dist.start_logp.data).tolist()
                    entry["end"] = np.exp(dist.end_logp.data).tolist()
                state = model.advance(child, r, label, state)
                if kind == NodeKind.INTERNAL:
                    walk(child, model.child_state(state))

        walk(schema.root, model.initial_state())

    return ActionTree(len(tokens), frozenset(active), categories, spans), probabilities


def greedy_decode(model: ParserModel, tokens: Sequence[str]) -> ActionTree:
    tree, _ = greedy_decode_with_probabilities(model, tokens)
    return tree


class _Frame(NamedTuple):
    parent: str
    index: int
    state: Optional[DecoderState]


@dataclass
class Hypothesis:
    """A partial tree with its score and where decoding resumes"""
    active: FrozenSet[str]
    categories: Dict[str, str]
    spans: Dict[str, Span]
    log_prob: float
    frames: Tuple[_Frame, ...]
    pending: Optional[Tuple[str, Tensor, NodeDistributions]] = field(default=None, repr=False)

    @property
    def finished(self) -> bool:
        return not self.frames and self.pending is None

    def frontier(self, schema: GrammarSchema) -> Optional[str]:
        """Next node to decide, or None when finished"""
        if self.pending is not None:
            return self.pending[0]
        if not self.frames:
            return None
        top = self.frames[-1]
        return schema.children_of(top.parent)[top.index]

    def tree(self, sentence_length: int) -> ActionTree:
        return ActionTree(sentence_length, self.active, self.categories, self.spans)


def _unwind(frames: Tuple[_Frame, ...], schema: GrammarSchema) -> Tuple[_Frame, ...]:
    while frames and frames[-1].index >= len(schema.children_of(frames[-1].parent)):
        frames = frames[:-1]
    return frames


def _after_active(model: ParserModel, frames: Tuple[_Frame, ...], node_id: str, r: Tensor,
                  label: Optional[str]) -> Tuple[_Frame, ...]:
    top = frames[-1]
    state = model.advance(node_id, r, label, top.state)
    frames = frames[:-1] + (top._replace(index=top.index + 1, state=state),)
    if model.schema.kind_of(node_id) == NodeKind.INTERNAL:
        frames = frames + (_Frame(node_id, 0, model.child_state(state)),)
    return _unwind(frames, model.schema)


def _expand(model: ParserModel, hyp: Hypothesis, H: Tensor) -> List[Hypothesis]:
    schema = model.schema

    if hyp.pending is not None:
        node_id, r, dist = hyp.pending
        out = []
        if schema.kind_of(node_id) == NodeKind.CATEGORICAL:
            lp = dist.label_logp.data
            for i, label in enumerate(schema.labels_of(node_id)):
                out.append(Hypothesis(hyp.active, {**hyp.categories, node_id: label}, hyp.spans,
                                      hyp.log_prob + float(lp[i]),
                                      _after_active(model, hyp.frames, node_id, r, label)))
        else:
            # both pointer orders decode to the same ordered span; keep the better one
            pair = dist.start_logp.data[:, None] + dist.end_logp.data[None, :]
            ordered = np.maximum(pair, pair.T)
            length = pair.shape[0]
            for start in range(length):
                for end in range(start, length):
                    out.append(Hypothesis(hyp.active, hyp.categories, {**hyp.spans, node_id: (start, end)},
                                          hyp.log_prob + float(ordered[start, end]),
                                          _after_active(model, hyp.frames, node_id, r, None)))
        return out

    top = hyp.frames[-1]
    child = schema.children_of(top.parent)[top.index]
    r = model.represent(child, H, top.state)
    dist = node_distributions(child, r, H, model)
    on = hyp.active | {child}
    out = []
    if schema.kind_of(child) == NodeKind.INTERNAL:
        out.append(Hypothesis(on, hyp.categories, hyp.spans, hyp.log_prob + dist.log_active(),
                              _after_active(model, hyp.frames, child, r, None)))
    else:
        out.append(Hypothesis(on, hyp.categories, hyp.spans, hyp.log_prob + dist.log_active(),
                              hyp.frames, pending=(child, r, dist)))
    if dist.activation_logit is not None:
        skipped = _unwind(hyp.frames[:-1] + (top._replace(index=top.index + 1),), schema)
        out.append(Hypothesis(hyp.active, hyp.categories, hyp.spans,
                              hyp.log_prob + dist.log_inactive(), skipped))
    return out


def _select(children: List[List[Hypothesis]], width: Optional[int]) -> List[Hypothesis]:
    """
    Choose the next beam so that the first k survivors are what width k would keep

    Slot k takes the best remaining candidate among the children of the first k hypotheses of
    the previous beam. Every narrower beam is therefore a prefix of a wider one, and the best
    finished score never decreases with width. Ties keep candidate order.
    """
    if width is None:
        return [hyp for group in children for hyp in group]
    ranked = sorted(((origin, hyp) for origin, group in enumerate(children) for hyp in group),
                    key=lambda item: -item[1].log_prob)
    taken = [False] * len(ranked)
    selected: List[Hypothesis] = []
    for slot in range(1, min(width, len(ranked)) + 1):
        parents = min(slot, len(children))
        for i, (origin, hyp) in enumerate(ranked):
            if not taken[i] and origin < parents:
                taken[i] = True
                selected.append(hyp)
                break
    return selected


def beam_decode(model: ParserModel, tokens: Sequence[str],
                width: Optional[int]) -> List[Tuple[ActionTree, float]]:
    """
    Beam search over node decisions in DFS order

    Each node costs two decisions (activation, then label or span) so width 1 makes the same
    choices as greedy decoding. A span is one decision over ordered pairs scored by the better
    pointer order. Finished hypotheses stay in the beam until every hypothesis is finished.

    Args:
        model: Parser
        tokens: Tokenized sentence
        width: Beam width; None keeps every hypothesis (exhaustive search)

    Returns:
        Finished (tree, log-prob) pairs sorted best first
    """
    if width is not None and width < 1:
        raise ValueError(f"Beam width must be at least 1: {width}")
    schema = model.schema
    with no_grad():
        H = model.encode(tokens)
        start = Hypothesis(frozenset({schema.root}), {}, {}, 0.0,
                           _unwind((_Frame(schema.root, 0, model.initial_state()),), schema))
        beam = [start]
        while not all(h.finished for h in beam):
            beam = _select([[hyp] if hyp.finished else _expand(model, hyp, H) for hyp in beam], width)
    beam = sorted(beam, key=lambda h: -h.log_prob)
    return [(h.tree(len(tokens)), h.log_prob) for h in beam]


def parse_sentence(model: ParserModel, text: str, beam_width: int = 1) -> ActionTree:
    """Tokenize and decode one sentence"""
    tokens = tokenize(text)
    if beam_width == 1:
        return greedy_decode(model, tokens)
    return beam_decode(model, tokens, beam_width)[0][0]


def decode_corpus(model: ParserModel, token_lists: Sequence[Sequence[str]],
                  beam_width: int = 1) -> List[ActionTree]:
    """Decode many sentences; greedy when the width is 1"""
    trees = []
    for tokens in token_lists:
        if beam_width == 1:
            trees.append(greedy_decode(model, tokens))
        else:
            trees.append(beam_decode(model, tokens, beam_width)[0][0])
    return trees
