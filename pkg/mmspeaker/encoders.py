"""
Speaker encoders for speech, face and text-prompt inputs.

Student encoders are small tanh MLPs (speech, face) and a token-embedding +
attention-pooling encoder with an MLP head (text). Every forward pass ends
on the unit sphere; every backward pass returns analytic gradients for the
parameters and, for the MLPs, for the input features.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, DegenerateInputError, DomainError, ShapeError, StateError
from .numerics import l2_normalize_rows, masked_softmax, normalize_backward

UNIT_NORM_TOL = 1e-6

DEFAULT_EMBEDDING_DIM = 16
DEFAULT_HIDDEN = (64, 64)
DEFAULT_TEXT_WIDTH = 32


class Modality(str, Enum):
    SPEECH = "speech"
    FACE = "face"
    TEXT = "text"

    @property
    def index(self) -> int:
        return {"speech": 1, "face": 2, "text": 3}[self.value]

    @classmethod
    def from_index(cls, index: int) -> "Modality":
        for member in cls:
            if member.index == index:
                return member
        raise DomainError(f"unknown modality index {index}")


@dataclass(frozen=True)
class Embedding:
    values: np.ndarray
    modality: Modality

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or not np.all(np.isfinite(values)):
            raise ContractError("embedding must be a finite vector")
        if abs(np.linalg.norm(values) - 1.0) > UNIT_NORM_TOL:
            raise ContractError(f"embedding norm {np.linalg.norm(values)} is not 1")
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


# ---------------------------------------------------------------------------
# MLP encoder
# ---------------------------------------------------------------------------


@dataclass
class MlpEncoder:
    """Fully connected encoder: tanh on hidden layers, linear output, L2 norm.

    weights[l] has shape (out, in); activations[l] is "tanh" or "linear".
    """

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    activations: Tuple[str, ...]
    modality: Optional[Modality] = None

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)) or not self.weights:
            raise ShapeError("weights, biases and activations must have the same non-zero length")
        for l, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {l}: weight {w.shape} and bias {b.shape} do not compose")
            if l > 0 and w.shape[1] != self.weights[l - 1].shape[0]:
                raise ShapeError(f"layer {l} expects {w.shape[1]} inputs, previous layer gives {self.weights[l - 1].shape[0]}")
            if act not in ("tanh", "linear"):
                raise ShapeError(f"unsupported activation '{act}'")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def signature(self) -> Tuple:
        return ("mlp",) + tuple(w.shape for w in self.weights) + self.activations

    def params(self) -> Dict[str, np.ndarray]:
        out = {}
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{l}"] = w
            out[f"b{l}"] = b
        return out

    def with_params(self, params: Dict[str, np.ndarray]) -> "MlpEncoder":
        n = len(self.weights)
        return MlpEncoder(
            weights=[np.array(params[f"w{l}"], dtype=np.float64) for l in range(n)],
            biases=[np.array(params[f"b{l}"], dtype=np.float64) for l in range(n)],
            activations=self.activations,
            modality=self.modality,
        )

    def copy(self) -> "MlpEncoder":
        return self.with_params(self.params())


@dataclass(frozen=True)
class TeacherEncoder:
    """Frozen encoder; its parameter arrays are read-only."""

    network: MlpEncoder
    modality: Modality

    @classmethod
    def freeze(cls, encoder: MlpEncoder, modality: Optional[Modality] = None) -> "TeacherEncoder":
        frozen = encoder.copy()
        for arr in frozen.weights + frozen.biases:
            arr.flags.writeable = False
        modality = modality or encoder.modality
        if modality is None:
            raise StateError("teacher encoders need a modality tag")
        frozen.modality = modality
        return cls(network=frozen, modality=modality)

    @property
    def signature(self) -> Tuple:
        return self.network.signature

    def params(self) -> Dict[str, np.ndarray]:
        return self.network.params()


def _uniform_layer(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in)), rng.uniform(-bound, bound, size=fan_out)


def init_mlp(input_dim: int, output_dim: int = DEFAULT_EMBEDDING_DIM,
             hidden: Sequence[int] = DEFAULT_HIDDEN, rng: Optional[np.random.Generator] = None,
             modality: Optional[Modality] = None) -> MlpEncoder:
    rng = rng if rng is not None else np.random.default_rng(0)
    sizes = [input_dim, *hidden, output_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w, b = _uniform_layer(rng, fan_in, fan_out)
        weights.append(w)
        biases.append(b)
    activations = tuple(["tanh"] * len(hidden) + ["linear"])
    return MlpEncoder(weights=weights, biases=biases, activations=activations, modality=modality)


def student_from_teacher(teacher: TeacherEncoder) -> MlpEncoder:
    """Trainable copy of a teacher followed by a d x d head initialised to identity."""
    d = teacher.network.output_dim
    base = teacher.network.copy()
    return MlpEncoder(
        weights=base.weights + [np.eye(d)],
        biases=base.biases + [np.zeros(d)],
        activations=base.activations + ("linear",),
        modality=teacher.modality,
    )


@dataclass
class MlpCache:
    signature: Tuple
    inputs: List[np.ndarray]
    outputs: List[np.ndarray]
    unit: np.ndarray
    norms: np.ndarray
    single: bool = False


def _as_network(encoder: Union[MlpEncoder, TeacherEncoder]) -> MlpEncoder:
    return encoder.network if isinstance(encoder, TeacherEncoder) else encoder


def encode_batch(encoder: Union[MlpEncoder, TeacherEncoder], features: np.ndarray) -> Tuple[np.ndarray, MlpCache]:
    """Forward a (n, input_dim) batch. Returns unit-norm rows and the cache."""
    net = _as_network(encoder)
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ShapeError(f"expected features of shape (n, {net.input_dim}), got {x.shape}")

    inputs, outputs = [], []
    h = x
    for w, b, act in zip(net.weights, net.biases, net.activations):
        inputs.append(h)
        z = h @ w.T + b
        h = np.tanh(z) if act == "tanh" else z
        outputs.append(h)
    unit, norms = l2_normalize_rows(h)
    return unit, MlpCache(signature=net.signature, inputs=inputs, outputs=outputs, unit=unit, norms=norms)


def encode(encoder: Union[MlpEncoder, TeacherEncoder], features) -> Tuple[Embedding, MlpCache]:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"encode expects a single feature vector, got shape {x.shape}")
    unit, cache = encode_batch(encoder, x[None, :])
    cache.single = True
    if encoder.modality is None:
        raise StateError("encoder has no modality tag")
    return Embedding(unit[0], encoder.modality), cache


def _mlp_backward(net: MlpEncoder, cache: MlpCache, upstream: np.ndarray) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    if cache.signature != net.signature:
        raise StateError("forward cache was produced by a different encoder")
    g = np.asarray(upstream, dtype=np.float64)
    if cache.single and g.ndim == 1:
        g = g[None, :]
    if g.shape != cache.unit.shape:
        raise ShapeError(f"upstream gradient {g.shape} does not match embeddings {cache.unit.shape}")

    grads: Dict[str, np.ndarray] = {}
    g = normalize_backward(cache.unit, cache.norms, g)
    for l in reversed(range(len(net.weights))):
        if net.activations[l] == "tanh":
            g = g * (1.0 - cache.outputs[l] ** 2)
        grads[f"w{l}"] = g.T @ cache.inputs[l]
        grads[f"b{l}"] = g.sum(axis=0)
        g = g @ net.weights[l]
    return grads, (g[0] if cache.single else g)


# ---------------------------------------------------------------------------
# Text encoder
# ---------------------------------------------------------------------------


@dataclass
class TextEncoder:
    """Token embeddings -> attention pooling -> MLP head -> unit sphere."""

    table: np.ndarray
    query: np.ndarray
    key: np.ndarray
    value: np.ndarray
    head: MlpEncoder
    modality: Modality = Modality.TEXT

    def __post_init__(self):
        width = self.table.shape[1]
        if self.query.shape != (width,) or self.key.shape != (width, width) or self.value.shape != (width, width):
            raise ShapeError("attention pooling parameters do not match the embedding width")
        if self.head.input_dim != width:
            raise ShapeError(f"head expects {self.head.input_dim} inputs, pooling yields {width}")

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    @property
    def width(self) -> int:
        return self.table.shape[1]

    @property
    def output_dim(self) -> int:
        return self.head.output_dim

    @property
    def signature(self) -> Tuple:
        return ("text", self.table.shape) + self.head.signature

    def params(self) -> Dict[str, np.ndarray]:
        out = {"table": self.table, "query": self.query, "key": self.key, "value": self.value}
        out.update({f"head.{k}": v for k, v in self.head.params().items()})
        return out

    def with_params(self, params: Dict[str, np.ndarray]) -> "TextEncoder":
        head = self.head.with_params({k[len("head."):]: v for k, v in params.items() if k.startswith("head.")})
        return TextEncoder(
            table=np.array(params["table"], dtype=np.float64),
            query=np.array(params["query"], dtype=np.float64),
            key=np.array(params["key"], dtype=np.float64),
            value=np.array(params["value"], dtype=np.float64),
            head=head,
        )


def init_text_encoder(vocab_size: int, width: int = DEFAULT_TEXT_WIDTH, output_dim: int = DEFAULT_EMBEDDING_DIM,
                      hidden: Sequence[int] = DEFAULT_HIDDEN,
                      rng: Optional[np.random.Generator] = None) -> TextEncoder:
    rng = rng if rng is not None else np.random.default_rng(0)
    bound = 1.0 / np.sqrt(width)
    table = rng.uniform(-1.0, 1.0, size=(vocab_size, width))
    query = rng.uniform(-bound, bound, size=width)
    key = rng.uniform(-bound, bound, size=(width, width))
    value = rng.uniform(-bound, bound, size=(width, width))
    head = init_mlp(width, output_dim, hidden, rng, modality=Modality.TEXT)
    return TextEncoder(table=table, query=query, key=key, value=value, head=head)


@dataclass
class TextCache:
    signature: Tuple
    tokens: np.ndarray
    mask: np.ndarray
    embedded: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    weights: np.ndarray
    pooled: np.ndarray
    head_cache: MlpCache
    single: bool = False


def _pad_tokens(encoder: TextEncoder, sequences: Sequence[Sequence[int]]) -> Tuple[np.ndarray, np.ndarray]:
    if len(sequences) == 0:
        raise DegenerateInputError("no token sequences given")
    longest = max(len(s) for s in sequences)
    if min(len(s) for s in sequences) == 0:
        raise DegenerateInputError("token sequences must be non-empty")
    tokens = np.zeros((len(sequences), longest), dtype=np.int64)
    mask = np.zeros((len(sequences), longest), dtype=bool)
    for i, seq in enumerate(sequences):
        ids = np.asarray(seq, dtype=np.int64)
        if np.any(ids < 0) or np.any(ids >= encoder.vocab_size):
            raise DomainError(f"token ids outside vocabulary of size {encoder.vocab_size}: {ids.tolist()}")
        tokens[i, : len(ids)] = ids
        mask[i, : len(ids)] = True
    return tokens, mask


def encode_text_batch(encoder: TextEncoder, sequences: Sequence[Sequence[int]]) -> Tuple[np.ndarray, TextCache]:
    tokens, mask = _pad_tokens(encoder, sequences)
    embedded = encoder.table[tokens]
    keys = embedded @ encoder.key.T
    values = embedded @ encoder.value.T
    scores = keys @ encoder.query / np.sqrt(encoder.width)
    weights = masked_softmax(scores, mask, axis=1)
    pooled = np.einsum("nl,nlw->nw", weights, values)
    unit, head_cache = encode_batch(encoder.head, pooled)
    cache = TextCache(signature=encoder.signature, tokens=tokens, mask=mask, embedded=embedded,
                      keys=keys, values=values, weights=weights, pooled=pooled, head_cache=head_cache)
    return unit, cache


def encode_text(encoder: TextEncoder, tokens: Sequence[int]) -> Tuple[Embedding, TextCache]:
    unit, cache = encode_text_batch(encoder, [list(tokens)])
    cache.single = True
    return Embedding(unit[0], Modality.TEXT), cache


def _text_backward(encoder: TextEncoder, cache: TextCache, upstream: np.ndarray) -> Dict[str, np.ndarray]:
    if cache.signature != encoder.signature:
        raise StateError("forward cache was produced by a different encoder")
    g = np.asarray(upstream, dtype=np.float64)
    if cache.single and g.ndim == 1:
        g = g[None, :]

    head_grads, g_pooled = _mlp_backward(encoder.head, cache.head_cache, g)
    scale = 1.0 / np.sqrt(encoder.width)

    g_weights = np.einsum("nw,nlw->nl", g_pooled, cache.values)
    g_values = cache.weights[:, :, None] * g_pooled[:, None, :]
    g_scores = cache.weights * (g_weights - np.sum(cache.weights * g_weights, axis=1, keepdims=True))
    g_query = np.einsum("nl,nlw->w", g_scores, cache.keys) * scale
    g_keys = g_scores[:, :, None] * encoder.query[None, None, :] * scale

    grads = {
        "query": g_query,
        "key": np.einsum("nlo,nli->oi", g_keys, cache.embedded),
        "value": np.einsum("nlo,nli->oi", g_values, cache.embedded),
    }
    g_embedded = g_keys @ encoder.key + g_values @ encoder.value
    g_table = np.zeros_like(encoder.table)
    np.add.at(g_table, cache.tokens[cache.mask], g_embedded[cache.mask])
    grads["table"] = g_table
    grads.update({f"head.{k}": v for k, v in head_grads.items()})
    return grads


AnyEncoder = Union[MlpEncoder, TeacherEncoder, TextEncoder]


def backprop(encoder: AnyEncoder, cache: Union[MlpCache, TextCache],
             upstream: np.ndarray) -> Tuple[Dict[str, np.ndarray], Optional[np.ndarray]]:
    """Gradients of sum(upstream * embedding) w.r.t. parameters and input.

    Text encoders have discrete inputs; their input gradient is None.
    """
    if isinstance(encoder, TextEncoder):
        if not isinstance(cache, TextCache):
            raise StateError("text encoder given a non-text forward cache")
        return _text_backward(encoder, cache, upstream), None
    if not isinstance(cache, MlpCache):
        raise StateError("MLP encoder given a non-MLP forward cache")
    if isinstance(encoder, TeacherEncoder):
        logging.debug(f"Computing gradients through frozen {encoder.modality.value} teacher")
    return _mlp_backward(_as_network(encoder), cache, upstream)
