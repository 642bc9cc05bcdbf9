"""
Binary encoder checkpoints.

One file per encoder (or classifier matrix):

    bytes 0-3   magic b"MMSE"
    byte  4     format version (currently 1)
    byte  5     kind: 1 mlp, 2 frozen teacher, 3 text, 4 classifier weights
    byte  6     modality: 0 none, 1 speech, 2 face, 3 text
    header      ASCII lines terminated by an empty line:
                    blocks <count>
                    activations <act> <act> ...      (mlp, teacher, text head)
                    <name> <ndim> <dim> <dim> ...    one per block, payload order
    payload     every block as little-endian float64, row-major, in header order
    trailer     SHA-256 over everything before it (32 bytes)
"""

import hashlib
import logging
import os
from typing import Dict, List, Tuple, Union

import numpy as np

from .encoders import MlpEncoder, Modality, TeacherEncoder, TextEncoder
from .errors import FormatError
from .losses import ClassifierWeights

MAGIC = b"MMSE"
FORMAT_VERSION = 1
DIGEST_SIZE = 32

KIND_MLP = 1
KIND_TEACHER = 2
KIND_TEXT = 3
KIND_CLASSIFIER = 4

Checkpointable = Union[MlpEncoder, TeacherEncoder, TextEncoder, ClassifierWeights]


def _describe(obj: Checkpointable) -> Tuple[int, int, List[str], Dict[str, np.ndarray]]:
    if isinstance(obj, ClassifierWeights):
        return KIND_CLASSIFIER, 0, [], {"W": obj.W}
    if isinstance(obj, TeacherEncoder):
        net = obj.network
        return KIND_TEACHER, obj.modality.index, list(net.activations), net.params()
    if isinstance(obj, TextEncoder):
        return KIND_TEXT, Modality.TEXT.index, list(obj.head.activations), obj.params()
    if isinstance(obj, MlpEncoder):
        modality = obj.modality.index if obj.modality is not None else 0
        return KIND_MLP, modality, list(obj.activations), obj.params()
    raise TypeError(f"cannot checkpoint object of type {type(obj).__name__}")


def to_bytes(obj: Checkpointable) -> bytes:
    kind, modality, activations, blocks = _describe(obj)
    lines = [f"blocks {len(blocks)}"]
    if activations:
        lines.append("activations " + " ".join(activations))
    payload = bytearray()
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype=np.float64)
        lines.append(" ".join([name, str(arr.ndim)] + [str(d) for d in arr.shape]))
        payload += arr.astype("<f8").tobytes(order="C")
    body = MAGIC + bytes([FORMAT_VERSION, kind, modality]) + ("\n".join(lines) + "\n\n").encode("ascii") + bytes(payload)
    return body + hashlib.sha256(body).digest()


def _parse_header(text: str) -> Tuple[List[str], List[Tuple[str, Tuple[int, ...]]]]:
    lines = text.split("\n")
    if not lines or not lines[0].startswith("blocks "):
        raise FormatError("checkpoint header does not start with a block count")
    count = int(lines[0].split()[1])
    rest = lines[1:]
    activations: List[str] = []
    if rest and rest[0].startswith("activations "):
        activations = rest[0].split()[1:]
        rest = rest[1:]
    if len(rest) != count:
        raise FormatError(f"checkpoint header lists {len(rest)} blocks, expected {count}")
    blocks = []
    for line in rest:
        parts = line.split()
        name, ndim = parts[0], int(parts[1])
        shape = tuple(int(p) for p in parts[2:])
        if len(shape) != ndim or any(d < 0 for d in shape):
            raise FormatError(f"bad shape for block '{name}'")
        blocks.append((name, shape))
    return activations, blocks


def from_bytes(data: bytes) -> Checkpointable:
    if len(data) < len(MAGIC) + 3 + DIGEST_SIZE:
        raise FormatError("checkpoint truncated")
    body, digest = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
    if body[:4] != MAGIC:
        raise FormatError("not an encoder checkpoint (bad magic)")
    version, kind, modality_index = body[4], body[5], body[6]
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}; expected {FORMAT_VERSION}")
    if hashlib.sha256(body).digest() != digest:
        raise FormatError("checkpoint checksum mismatch (corrupted or truncated)")

    end = body.find(b"\n\n", 7)
    if end < 0:
        raise FormatError("checkpoint header not terminated")
    try:
        activations, layout = _parse_header(body[7:end].decode("ascii"))
    except (UnicodeDecodeError, ValueError, IndexError) as e:
        raise FormatError(f"malformed checkpoint header: {e}") from e

    payload = body[end + 2:]
    blocks: Dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in layout:
        size = int(np.prod(shape, dtype=np.int64)) * 8
        if offset + size > len(payload):
            raise FormatError(f"checkpoint payload truncated in block '{name}'")
        blocks[name] = np.frombuffer(payload[offset:offset + size], dtype="<f8").astype(np.float64).reshape(shape)
        offset += size
    if offset != len(payload):
        raise FormatError("checkpoint payload has trailing bytes")

    try:
        return _build(kind, modality_index, activations, blocks)
    except (KeyError, ValueError) as e:
        raise FormatError(f"checkpoint blocks do not form a valid model: {e}") from e


def _mlp_from_blocks(blocks: Dict[str, np.ndarray], activations: List[str], prefix: str = "",
                     modality=None) -> MlpEncoder:
    n = len(activations)
    return MlpEncoder(
        weights=[blocks[f"{prefix}w{l}"] for l in range(n)],
        biases=[blocks[f"{prefix}b{l}"] for l in range(n)],
        activations=tuple(activations),
        modality=modality,
    )


def _build(kind: int, modality_index: int, activations: List[str], blocks: Dict[str, np.ndarray]) -> Checkpointable:
    modality = Modality.from_index(modality_index) if modality_index else None
    if kind == KIND_CLASSIFIER:
        return ClassifierWeights(blocks["W"])
    if kind == KIND_MLP:
        return _mlp_from_blocks(blocks, activations, modality=modality)
    if kind == KIND_TEACHER:
        return TeacherEncoder.freeze(_mlp_from_blocks(blocks, activations, modality=modality), modality)
    if kind == KIND_TEXT:
        head = _mlp_from_blocks(blocks, activations, prefix="head.", modality=Modality.TEXT)
        return TextEncoder(table=blocks["table"], query=blocks["query"], key=blocks["key"],
                           value=blocks["value"], head=head)
    raise FormatError(f"unknown checkpoint kind {kind}")


def save_checkpoint(obj: Checkpointable, path: str) -> None:
    data = to_bytes(obj)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
    logging.debug(f"Checkpoint written: {path} ({len(data)} bytes)")


def load_checkpoint(path: str) -> Checkpointable:
    with open(path, "rb") as f:
        data = f.read()
    try:
        return from_bytes(data)
    except FormatError as e:
        raise FormatError(f"{path}: {e}") from e
