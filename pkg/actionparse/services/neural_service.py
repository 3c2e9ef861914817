"""
Neural computation service
Reverse-mode tensors, parameter storage, Adagrad, embeddings, GRU encoder and attention
"""

import json
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from utils.errors import CheckpointError, CorpusFormatError, GradientError

logger = structlog.get_logger(__name__)

UNK = "<unk>"
INIT_SCALE = 0.1
ADAGRAD_EPSILON = 1e-10

# Scoped to the current thread or task
_grad_enabled: ContextVar[bool] = ContextVar("grad_enabled", default=True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording, used for decoding and finite differences"""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """
    A float64 array that records how it was computed

    Leaf tensors with ``requires_grad`` accumulate into ``grad`` on every ``backward`` call
    until cleared, so a batch of examples can share one optimiser step.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @classmethod
    def from_op(cls, data: Any, parents: Sequence["Tensor"],
                backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> "Tensor":
        """
        Wrap the result of an operation

        Args:
            data: Forward value
            parents: Input tensors in the order ``backward`` returns their gradients
            backward: Maps the output gradient to one gradient (or None) per parent

        Returns:
            Tensor attached to the graph when recording is on and any parent needs a gradient
        """
        out = cls(data)
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, name={self.name!r}, requires_grad={self.requires_grad})"

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Propagate gradients from this tensor to every leaf that requires them"""
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("backward() without a gradient needs a scalar tensor")
            grad = np.ones_like(self.data)

        order: List[Tensor] = []
        seen = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        pending: Dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # Arithmetic

    def __add__(self, other: Any) -> "Tensor":
        other = as_tensor(other)
        return Tensor.from_op(
            self.data + other.data, (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)))

    __radd__ = __add__

    def __sub__(self, other: Any) -> "Tensor":
        other = as_tensor(other)
        return Tensor.from_op(
            self.data - other.data, (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)))

    def __rsub__(self, other: Any) -> "Tensor":
        return as_tensor(other) - self

    def __neg__(self) -> "Tensor":
        return Tensor.from_op(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other: Any) -> "Tensor":
        other = as_tensor(other)
        return Tensor.from_op(
            self.data * other.data, (self, other),
            lambda g: (_unbroadcast(g * other.data, self.shape),
                       _unbroadcast(g * self.data, other.shape)))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        def backward(g):
            full = np.zeros_like(self.data)
            np.add.at(full, index, g)
            return (full,)

        return Tensor.from_op(self.data[index], (self,), backward)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, self.shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), self.shape).copy(),)

        return Tensor.from_op(self.data.sum(axis=axis), (self,), backward)

    def reshape(self, *shape: int) -> "Tensor":
        return Tensor.from_op(self.data.reshape(*shape), (self,), lambda g: (g.reshape(self.shape),))


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for vector and matrix operands"""

    def backward(g):
        if a.ndim == 1 and b.ndim == 1:
            return g * b.data, g * a.data
        if a.ndim == 1:
            return b.data @ g, np.outer(a.data, g)
        if b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g @ b.data.T, a.data.T @ g

    return Tensor.from_op(a.data @ b.data, (a, b), backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor.from_op(y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -v))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return Tensor.from_op(y, (x,), lambda g: (g * y * (1.0 - y),))


def log_sigmoid(x: Tensor) -> Tensor:
    """log σ(x), stable for large |x|"""
    y = -np.logaddexp(0.0, -x.data)
    return Tensor.from_op(y, (x,), lambda g: (g * _sigmoid(-x.data),))


def log_softmax(x: Tensor) -> Tensor:
    """Log-probabilities over the last axis"""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(y)
    return Tensor.from_op(y, (x,), lambda g: (g - probs * g.sum(axis=-1, keepdims=True),))


def softmax(x: Tensor) -> Tensor:
    """Probabilities over the last axis"""
    shifted = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    y = shifted / shifted.sum(axis=-1, keepdims=True)
    return Tensor.from_op(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor.from_op(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when the rate is zero or no generator is given"""
    if rate <= 0.0 or rng is None:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Tensor(mask)


def bilinear(x: Tensor, M: Tensor, H: Tensor, scale: float = 1.0) -> Tensor:
    """
    Scores ``scale * xᵀ M_k h_t`` for every head k and position t

    Args:
        x: Query vector (d,)
        M: One (d, d) matrix or a stack of K matrices (K, d, d)
        H: Sentence matrix (T, d)
        scale: Multiplier applied to every score

    Returns:
        Tensor of shape (T,) for a single matrix or (K, T) for a stack
    """
    single = M.ndim == 2
    m = M.data[None] if single else M.data
    scores = scale * np.einsum("i,kij,tj->kt", x.data, m, H.data)

    def backward(g):
        g3 = g[None] if single else g
        dx = scale * np.einsum("kt,kij,tj->i", g3, m, H.data)
        dm = scale * np.einsum("kt,i,tj->kij", g3, x.data, H.data)
        dh = scale * np.einsum("kt,i,kij->tj", g3, x.data, m)
        return dx, (dm[0] if single else dm), dh

    return Tensor.from_op(scores[0] if single else scores, (x, M, H), backward)


def gru_step(projected: Tensor, h: Tensor, U: Tensor) -> Tensor:
    """
    One gated recurrent update

    ``projected`` is the input already mapped through ``x W + b`` with gate blocks laid out as
    [update | reset | candidate]; ``U`` is the (h, 3h) recurrent matrix with the same layout.
    """
    size = h.shape[0]
    a = projected.data
    u = U.data
    hv = h.data
    z = _sigmoid(a[:size] + hv @ u[:, :size])
    r = _sigmoid(a[size:2 * size] + hv @ u[:, size:2 * size])
    rh = r * hv
    n = np.tanh(a[2 * size:] + rh @ u[:, 2 * size:])
    out = (1.0 - z) * hv + z * n

    def backward(g):
        dz = g * (n - hv)
        dn_pre = g * z * (1.0 - n * n)
        drh = u[:, 2 * size:] @ dn_pre
        dr_pre = drh * hv * r * (1.0 - r)
        dz_pre = dz * z * (1.0 - z)
        da = np.concatenate([dz_pre, dr_pre, dn_pre])
        dh = g * (1.0 - z) + drh * r + u[:, :size] @ dz_pre + u[:, size:2 * size] @ dr_pre
        du = np.concatenate([np.outer(hv, dz_pre), np.outer(hv, dr_pre), np.outer(rh, dn_pre)], axis=1)
        return da, dh, du

    return Tensor.from_op(out, (projected, h, U), backward)


# Parameters


class ParameterStore:
    """
    Named model parameters with their Adagrad accumulators

    Parameters are created in a fixed order from one seeded generator so two stores built with
    the same seed and creation sequence hold identical values.
    """

    def __init__(self, dim: int, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self._params: Dict[str, Tensor] = {}
        self._accumulators: Dict[str, np.ndarray] = {}
        self._frozen: set = set()

    def create(self, name: str, shape: Tuple[int, ...], init: str = "uniform",
               value: Optional[np.ndarray] = None, frozen: bool = False) -> Tensor:
        """
        Register a new parameter

        Args:
            name: Unique dotted name
            shape: Array shape
            init: ``uniform`` (±0.1) or ``zeros``; ignored when ``value`` is given
            value: Explicit initial value
            frozen: Excluded from gradients and updates

        Returns:
            The parameter tensor
        """
        if name in self._params:
            raise ValueError(f"Parameter '{name}' already exists")
        if value is not None:
            data = np.array(value, dtype=np.float64).reshape(shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "uniform":
            data = self._rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
        else:
            raise ValueError(f"Unknown initialiser '{init}'")
        tensor = Tensor(data, requires_grad=not frozen, name=name)
        self._params[name] = tensor
        self._accumulators[name] = np.zeros(shape)
        if frozen:
            self._frozen.add(name)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def trainable(self) -> List[str]:
        return [n for n in self._params if n not in self._frozen]

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def accumulator(self, name: str) -> np.ndarray:
        return self._accumulators[name]

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.grad = None

    def gradients(self) -> Dict[str, np.ndarray]:
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for n, t in self._params.items() if n not in self._frozen}

    def snapshot(self) -> Dict[str, np.ndarray]:
        """Copies of every parameter value"""
        return {n: t.data.copy() for n, t in self._params.items()}

    def restore(self, values: Dict[str, np.ndarray]) -> None:
        for name, value in values.items():
            self._params[name].data = value.copy()

    def rng_state(self) -> Dict[str, Any]:
        return self._rng.bit_generator.state

    def save(self, path: Union[str, Path], metadata: Optional[Dict[str, Any]] = None,
             extras: Optional[Dict[str, np.ndarray]] = None) -> Path:
        """
        Write parameters, accumulators and metadata to a ``.npz`` container

        Args:
            path: Target file
            metadata: JSON-serialisable header stored with the arrays
            extras: Additional named arrays (stored under ``extra.``)

        Returns:
            Path written
        """
        path = Path(path)
        header = {
            "dim": self.dim,
            "seed": self.seed,
            "order": self.names(),
            "frozen": sorted(self._frozen),
            "shapes": {n: list(t.shape) for n, t in self._params.items()},
            "metadata": metadata or {},
        }
        arrays: Dict[str, np.ndarray] = {"__meta__": np.array(json.dumps(header, sort_keys=True))}
        for name, tensor in self._params.items():
            arrays[f"param.{name}"] = tensor.data
            arrays[f"accum.{name}"] = self._accumulators[name]
        for name, value in (extras or {}).items():
            arrays[f"extra.{name}"] = np.asarray(value)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "wb") as f:
                np.savez(f, **arrays)
            logger.info("Parameters saved", path=str(path), parameters=len(self._params))
            return path
        except Exception as e:
            logger.error("Parameter save failed", path=str(path), error=str(e))
            raise

    @classmethod
    def load(cls, path: Union[str, Path]) -> Tuple["ParameterStore", Dict[str, Any], Dict[str, np.ndarray]]:
        """
        Read a container written by ``save``

        Returns:
            Tuple of (store, metadata, extras)

        Raises:
            CheckpointError: When the file is missing pieces or shapes disagree with its header
        """
        path = Path(path)
        try:
            with np.load(path, allow_pickle=False) as archive:
                if "__meta__" not in archive.files:
                    raise CheckpointError("Checkpoint has no metadata entry", {"path": str(path)})
                header = json.loads(str(archive["__meta__"]))
                store = cls(header["dim"], header.get("seed", 0))
                frozen = set(header.get("frozen", []))
                for name in header["order"]:
                    key = f"param.{name}"
                    if key not in archive.files:
                        raise CheckpointError(f"Checkpoint is missing parameter '{name}'", {"path": str(path)})
                    value = archive[key]
                    if list(value.shape) != header["shapes"][name]:
                        raise CheckpointError(f"Shape mismatch for '{name}'", {"path": str(path)})
                    store.create(name, value.shape, value=value, frozen=name in frozen)
                    store._accumulators[name] = archive[f"accum.{name}"].copy()
                extras = {k[len("extra."):]: archive[k].copy() for k in archive.files if k.startswith("extra.")}
        except CheckpointError:
            raise
        except (OSError, KeyError, ValueError) as e:
            logger.error("Parameter load failed", path=str(path), error=str(e))
            raise CheckpointError(f"Unreadable checkpoint: {e}", {"path": str(path)})
        logger.info("Parameters loaded", path=str(path), parameters=len(store))
        return store, header.get("metadata", {}), extras


def adagrad_step(store: ParameterStore, learning_rate: float,
                 epsilon: float = ADAGRAD_EPSILON) -> ParameterStore:
    """
    Apply one Adagrad update and clear gradients

    Args:
        store: Parameters with populated gradients
        learning_rate: Base step size
        epsilon: Denominator floor

    Returns:
        The same store, updated in place

    Raises:
        GradientError: If any gradient holds NaN or infinity; no parameter is changed
    """
    grads = store.gradients()
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            logger.error("Non-finite gradient", parameter=name)
            raise GradientError("Non-finite gradient", parameter=name)

    for name, grad in grads.items():
        acc = store.accumulator(name)
        acc += grad * grad
        param = store[name]
        param.data = param.data - learning_rate * grad / (np.sqrt(acc) + epsilon)
    store.zero_grad()
    return store


@dataclass
class GradCheckReport:
    """Per-parameter maximum relative error between analytic and numeric gradients"""
    errors: Dict[str, float] = field(default_factory=dict)
    checked: Dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def flagged(self, tolerance: float = 1e-4) -> List[str]:
        return [name for name, err in self.errors.items() if err >= tolerance]

    def passed(self, tolerance: float = 1e-4) -> bool:
        return not self.flagged(tolerance)


def grad_check(loss_fn: Callable[[], Tensor], store: ParameterStore, epsilon: float = 1e-5,
               names: Optional[Iterable[str]] = None,
               max_entries: Optional[int] = None) -> GradCheckReport:
    """
    Compare backpropagated gradients against central differences

    Args:
        loss_fn: Deterministic closure returning a scalar loss tensor
        store: Parameters the loss depends on
        epsilon: Finite-difference step
        names: Parameters to check (default: all trainable)
        max_entries: Cap on entries checked per parameter, spread evenly over the array

    Returns:
        GradCheckReport
    """
    store.zero_grad()
    loss_fn().backward()
    analytic = {n: g.copy() for n, g in store.gradients().items()}
    store.zero_grad()

    report = GradCheckReport()
    for name in (list(names) if names is not None else store.trainable()):
        param = store[name]
        flat = param.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = np.unique(np.linspace(0, flat.size - 1, max_entries).astype(int))
        worst = 0.0
        for i in indices:
            original = flat[i]
            with no_grad():
                flat[i] = original + epsilon
                plus = loss_fn().item()
                flat[i] = original - epsilon
                minus = loss_fn().item()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * epsilon)
            exact = analytic[name].reshape(-1)[i]
            worst = max(worst, abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-4))
        report.errors[name] = worst
        report.checked[name] = len(indices)
    logger.debug("Gradient check finished", parameters=len(report.errors), max_error=report.max_error)
    return report


# Embeddings


class EmbeddingTable:
    """
    Token embeddings: a frozen pretrained block next to free learnable dimensions

    Row 0 is the unknown token. The free block starts at zero.
    """

    def __init__(self, vocabulary: Sequence[str], store: ParameterStore,
                 pretrained: Optional[np.ndarray], free_dims: int, prefix: str = "embedding"):
        words = [UNK] + [w for w in vocabulary if w != UNK]
        self.vocabulary: Tuple[str, ...] = tuple(words)
        self._index = {w: i for i, w in enumerate(self.vocabulary)}
        if len(self._index) != len(self.vocabulary):
            raise ValueError("Vocabulary contains duplicate tokens")
        self.pretrained_dims = 0 if pretrained is None else pretrained.shape[1]
        self.free_dims = free_dims
        if self.pretrained_dims + free_dims == 0:
            raise ValueError("Embedding width is zero")

        self.pretrained: Optional[Tensor] = None
        self.free: Optional[Tensor] = None
        if pretrained is not None and self.pretrained_dims > 0:
            if pretrained.shape[0] != len(self.vocabulary):
                raise ValueError("Pretrained matrix rows must match the vocabulary including <unk>")
            self.pretrained = store.create(f"{prefix}.pretrained", pretrained.shape,
                                           value=pretrained, frozen=True)
        if free_dims > 0:
            self.free = store.create(f"{prefix}.free", (len(self.vocabulary), free_dims), init="zeros")

    @property
    def width(self) -> int:
        return self.pretrained_dims + self.free_dims

    def __len__(self) -> int:
        return len(self.vocabulary)

    def index(self, token: str) -> int:
        return self._index.get(token, 0)

    def ids(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.index(t) for t in tokens], dtype=np.int64)

    @classmethod
    def from_vocabulary(cls, tokens: Iterable[str], store: ParameterStore, pretrained_dims: int,
                        free_dims: int, seed: int = 0) -> "EmbeddingTable":
        """Build a table over corpus tokens with a seeded random frozen block"""
        vocabulary = sorted({t for t in tokens if t != UNK})
        pretrained = None
        if pretrained_dims > 0:
            rng = np.random.default_rng(seed)
            pretrained = rng.normal(0.0, 1.0, size=(len(vocabulary) + 1, pretrained_dims))
            pretrained[0] = 0.0
        return cls(vocabulary, store, pretrained, free_dims)

    @classmethod
    def from_file(cls, path: Union[str, Path], store: ParameterStore, free_dims: int) -> "EmbeddingTable":
        """
        Load pretrained vectors from a text file

        Each line holds a token followed by its floats; every line must have the same width.

        Raises:
            CorpusFormatError: On malformed lines
        """
        vocabulary: List[str] = []
        rows: List[List[float]] = []
        width: Optional[int] = None
        with open(path, "r", encoding="utf-8") as f:
            for line_number, line in enumerate(f, start=1):
                parts = line.rstrip("\n").split()
                if not parts:
                    continue
                try:
                    values = [float(v) for v in parts[1:]]
                except ValueError:
                    raise CorpusFormatError("Embedding values must be numbers", line_number=line_number)
                if width is None:
                    width = len(values)
                if not values or len(values) != width:
                    raise CorpusFormatError(f"Expected {width} values", line_number=line_number)
                if parts[0] == UNK or parts[0] in vocabulary:
                    continue
                vocabulary.append(parts[0])
                rows.append(values)
        if width is None:
            raise CorpusFormatError(f"Embedding file {path} is empty")
        pretrained = np.vstack([np.zeros((1, width)), np.array(rows)])
        logger.info("Pretrained embeddings loaded", path=str(path), tokens=len(vocabulary), width=width)
        return cls(vocabulary, store, pretrained, free_dims)


def embed_sentence(tokens: Sequence[str], table: EmbeddingTable, word_dropout_rate: float = 0.0,
                   rng: Optional[np.random.Generator] = None, training: bool = False) -> Tensor:
    """
    Look up token rows, replacing tokens by <unk> at ``word_dropout_rate`` during training

    Returns:
        Tensor (T, width)
    """
    if not 0.0 <= word_dropout_rate < 1.0:
        raise ValueError(f"Word dropout rate must lie in [0, 1): {word_dropout_rate}")
    ids = table.ids(tokens)
    if training and word_dropout_rate > 0.0 and rng is not None:
        ids = np.where(rng.random(len(ids)) < word_dropout_rate, 0, ids)
    parts = []
    if table.pretrained is not None:
        parts.append(table.pretrained[ids])
    if table.free is not None:
        parts.append(table.free[ids])
    return parts[0] if len(parts) == 1 else concat(parts, axis=1)


# Encoder and attention


class Encoder:
    """Stacked bidirectional GRU with a linear projection back to width d"""

    def __init__(self, store: ParameterStore, input_dim: int, dim: int, layers: int = 2,
                 prefix: str = "encoder"):
        self.dim = dim
        self.layers = layers
        self.cells: List[Dict[str, Tuple[Tensor, Tensor, Tensor]]] = []
        in_dim = input_dim
        for layer in range(layers):
            cells = {}
            for direction in ("fwd", "bwd"):
                base = f"{prefix}.l{layer}.{direction}"
                cells[direction] = (
                    store.create(f"{base}.W", (in_dim, 3 * dim)),
                    store.create(f"{base}.U", (dim, 3 * dim)),
                    store.create(f"{base}.b", (3 * dim,), init="zeros"),
                )
            self.cells.append(cells)
            in_dim = 2 * dim
        self.proj_W = store.create(f"{prefix}.proj.W", (2 * dim, dim))
        self.proj_b = store.create(f"{prefix}.proj.b", (dim,), init="zeros")

    def _run(self, projected: Tensor, U: Tensor, reverse: bool) -> List[Tensor]:
        length = projected.shape[0]
        h = Tensor(np.zeros(self.dim))
        states: List[Optional[Tensor]] = [None] * length
        steps = range(length - 1, -1, -1) if reverse else range(length)
        for t in steps:
            h = gru_step(projected[t], h, U)
            states[t] = h
        return states

    def __call__(self, embedded: Tensor, dropout_rate: float = 0.0,
                 rng: Optional[np.random.Generator] = None, training: bool = False) -> Tensor:
        x = embedded
        for cells in self.cells:
            W_f, U_f, b_f = cells["fwd"]
            W_b, U_b, b_b = cells["bwd"]
            forward = self._run(x @ W_f + b_f, U_f, reverse=False)
            backward = self._run(x @ W_b + b_b, U_b, reverse=True)
            x = stack([concat([f, b]) for f, b in zip(forward, backward)])
        H = x @ self.proj_W + self.proj_b
        if training:
            H = dropout(H, dropout_rate, rng)
        return H


def encode_sentence(embedded: Tensor, encoder: Encoder, dropout_rate: float = 0.0,
                    rng: Optional[np.random.Generator] = None, training: bool = False) -> Tensor:
    """
    Encode a (T, width) embedded sentence into H (T, d)

    Raises:
        ValueError: For an empty sentence
    """
    if embedded.ndim != 2 or embedded.shape[0] == 0:
        raise ValueError("Cannot encode an empty sentence")
    return encoder(embedded, dropout_rate, rng, training)


@dataclass
class AttentionTrace:
    """Per-head attention weights (K, T) and the pooled vector added to the query"""
    weights: np.ndarray
    pooled: np.ndarray


class Attention:
    """K bilinear attention heads summed into a residual update"""

    def __init__(self, store: ParameterStore, dim: int, heads: int, name: str = "attention"):
        if heads < 1:
            raise ValueError("Attention needs at least one head")
        self.heads = heads
        self.M = store.create(name, (heads, dim, dim))

    def __call__(self, x: Tensor, H: Tensor) -> Tuple[Tensor, AttentionTrace]:
        return attend(x, H, self.M)


def attend(x: Tensor, H: Tensor, M: Tensor) -> Tuple[Tensor, AttentionTrace]:
    """
    Multi-head attention with a residual connection

    Args:
        x: Query (d,)
        H: Sentence representation (T, d)
        M: Head matrices (K, d, d)

    Returns:
        Tuple of (x + pooled, trace)
    """
    if x.shape[0] != H.shape[1] or M.shape[1:] != (H.shape[1], H.shape[1]):
        raise ValueError(f"Shape mismatch: x {x.shape}, H {H.shape}, M {M.shape}")
    scores = bilinear(x, M, H, scale=1.0 / np.sqrt(H.shape[1]))
    alpha = softmax(scores)
    pooled = alpha.sum(axis=0) @ H
    return x + pooled, AttentionTrace(weights=alpha.data.copy(), pooled=pooled.data.copy())
