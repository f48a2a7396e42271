"""
Model - a small character-level masked language model

The encoder is post-norm and BERT-shaped: token + learned position
embeddings, then per layer multi-head self-attention and a GELU feed-forward
block, each followed by a residual add and layer normalisation, and a linear
head over the vocabulary.

All parameters live in one flat float32 array (ParameterVector) described by
a ParameterManifest of named slices. Slices are grouped as `embeddings`,
`layer.<i>` and `head` so per-layer Fisher reports can address a layer as
one contiguous range.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, PrivateAttr, field_validator, model_validator

from . import numerics as nx
from .artifacts import (
    PathLike,
    array_to_blob,
    blob_to_array,
    read_bytes,
    read_model_json,
    sha256_bytes,
    verify_hash,
    write_bytes,
    write_model_json,
)
from .errors import DataError, IntegrityError, ShapeError

logger = logging.getLogger(__name__)

PAD = "[PAD]"
UNK = "[UNK]"
MASK = "[MASK]"
SPECIAL_SYMBOLS = (PAD, UNK, MASK)
DIGITS = "0123456789"
ARITHMETIC_SYMBOLS = DIGITS + ".+-= "

CHECKPOINT_FORMAT = "skill-lab-checkpoint/1"
_ATTENTION_MASK_VALUE = -1e9


class Vocabulary(BaseModel):
    """Ordered symbol list; a symbol's id is its position"""
    symbols: List[str]

    _index: Dict[str, int] = PrivateAttr(default_factory=dict)

    @field_validator("symbols")
    @classmethod
    def _check_symbols(cls, symbols: List[str]) -> List[str]:
        if len(set(symbols)) != len(symbols):
            raise ValueError("vocabulary symbols must be unique")
        missing = [s for s in (*SPECIAL_SYMBOLS, *ARITHMETIC_SYMBOLS) if s not in symbols]
        if missing:
            raise ValueError(f"vocabulary is missing required symbols: {missing}")
        return symbols

    def model_post_init(self, __context: Any) -> None:
        self._index = {symbol: i for i, symbol in enumerate(self.symbols)}

    def __len__(self) -> int:
        return len(self.symbols)

    def id_of(self, symbol: str) -> int:
        return self._index.get(symbol, self.unk_id)

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def unk_id(self) -> int:
        return self._index[UNK]

    @property
    def mask_id(self) -> int:
        return self._index[MASK]

    @property
    def digit_ids(self) -> np.ndarray:
        return np.array([self._index[d] for d in DIGITS], dtype=np.int64)

    def symbol(self, token_id: int) -> str:
        return self.symbols[token_id]

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.symbols[i] for i in ids)

    def save(self, path: PathLike) -> None:
        lines = "".join(json.dumps(s) + "\n" for s in self.symbols)
        write_bytes(path, lines.encode("utf-8"))

    @classmethod
    def load(cls, path: PathLike) -> "Vocabulary":
        text = read_bytes(path).decode("utf-8")
        return cls(symbols=[json.loads(line) for line in text.splitlines() if line])


def default_vocabulary() -> Vocabulary:
    """Special symbols followed by the 95 printable ASCII characters"""
    printable = [chr(c) for c in range(32, 127)]
    return Vocabulary(symbols=[*SPECIAL_SYMBOLS, *printable])


def arithmetic_vocabulary() -> Vocabulary:
    return Vocabulary(symbols=[*SPECIAL_SYMBOLS, *ARITHMETIC_SYMBOLS])


class ModelConfig(BaseModel):
    """Shape of the encoder"""
    vocab_size: int = Field(gt=0)
    d_model: int = Field(default=64, gt=0)
    n_layers: int = Field(default=2, gt=0)
    n_heads: int = Field(default=2, gt=0)
    d_ff: int = Field(default=128, gt=0)
    max_seq_len: int = Field(default=64, gt=0)
    seed: int = 0
    init_std: float = Field(default=0.02, gt=0)
    dtype: Literal["float32", "float64"] = "float32"

    @model_validator(mode="after")
    def _heads_divide_width(self) -> "ModelConfig":
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


class SliceSpec(BaseModel):
    name: str
    group: str
    offset: int = Field(ge=0)
    shape: Tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def stop(self) -> int:
        return self.offset + self.size


class ParameterManifest(BaseModel):
    """Named slices that partition the flat parameter array"""
    slices: List[SliceSpec]

    @model_validator(mode="after")
    def _check_partition(self) -> "ParameterManifest":
        cursor = 0
        seen = set()
        for spec in self.slices:
            if spec.name in seen:
                raise ValueError(f"duplicate slice name {spec.name}")
            if spec.offset != cursor:
                raise ValueError(f"slice {spec.name} starts at {spec.offset}, expected {cursor} (gap or overlap)")
            seen.add(spec.name)
            cursor = spec.stop
        groups: List[str] = []
        for spec in self.slices:
            if not groups or groups[-1] != spec.group:
                if spec.group in groups:
                    raise ValueError(f"group {spec.group} is not contiguous")
                groups.append(spec.group)
        return self

    @property
    def total(self) -> int:
        return self.slices[-1].stop if self.slices else 0

    def get(self, name: str) -> SliceSpec:
        for spec in self.slices:
            if spec.name == name:
                return spec
        raise KeyError(name)

    def groups(self) -> Dict[str, Tuple[int, int]]:
        """Group name -> [start, stop) range in the flat array, in manifest order"""
        ranges: Dict[str, Tuple[int, int]] = {}
        for spec in self.slices:
            start, _ = ranges.get(spec.group, (spec.offset, spec.stop))
            ranges[spec.group] = (start, spec.stop)
        return ranges


def build_manifest(config: ModelConfig) -> ParameterManifest:
    d, v, f = config.d_model, config.vocab_size, config.d_ff
    layout: List[Tuple[str, str, Tuple[int, ...]]] = [
        ("embeddings.token", "embeddings", (v, d)),
        ("embeddings.position", "embeddings", (config.max_seq_len, d)),
        ("embeddings.norm.gain", "embeddings", (d,)),
        ("embeddings.norm.bias", "embeddings", (d,)),
    ]
    for i in range(config.n_layers):
        group = f"layer.{i}"
        layout += [
            (f"{group}.attention.qkv.weight", group, (d, 3 * d)),
            (f"{group}.attention.qkv.bias", group, (3 * d,)),
            (f"{group}.attention.output.weight", group, (d, d)),
            (f"{group}.attention.output.bias", group, (d,)),
            (f"{group}.attention.norm.gain", group, (d,)),
            (f"{group}.attention.norm.bias", group, (d,)),
            (f"{group}.ffn.input.weight", group, (d, f)),
            (f"{group}.ffn.input.bias", group, (f,)),
            (f"{group}.ffn.output.weight", group, (f, d)),
            (f"{group}.ffn.output.bias", group, (d,)),
            (f"{group}.ffn.norm.gain", group, (d,)),
            (f"{group}.ffn.norm.bias", group, (d,)),
        ]
    layout += [
        ("head.weight", "head", (d, v)),
        ("head.bias", "head", (v,)),
    ]
    slices = []
    offset = 0
    for name, group, shape in layout:
        spec = SliceSpec(name=name, group=group, offset=offset, shape=shape)
        slices.append(spec)
        offset = spec.stop
    return ParameterManifest(slices=slices)


def parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count of the architecture"""
    d, v, f, n = config.d_model, config.vocab_size, config.d_ff, config.n_layers
    embeddings = v * d + config.max_seq_len * d + 2 * d
    per_layer = (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * f + f) + (f * d + d) + 2 * d
    return embeddings + n * per_layer + d * v + v


@dataclass
class BoundParameters:
    """Per-slice tensors for one forward pass, all watched by one record"""
    manifest: ParameterManifest
    tensors: Dict[str, nx.Tensor]

    def __getitem__(self, name: str) -> nx.Tensor:
        return self.tensors[name]

    def flat(self) -> nx.Tensor:
        """All parameters as one differentiable vector, in manifest order"""
        return nx.concat([nx.reshape(self.tensors[s.name], (s.size,)) for s in self.manifest.slices])

    def flat_grad(self) -> np.ndarray:
        parts = []
        for spec in self.manifest.slices:
            grad = self.tensors[spec.name].grad
            if grad is None:
                raise ShapeError(f"no gradient for {spec.name}; run backward first")
            parts.append(grad.reshape(-1))
        return np.concatenate(parts)


@dataclass
class ParameterVector:
    """Flat θ plus the manifest that names its slices"""
    values: np.ndarray
    manifest: ParameterManifest

    def __post_init__(self):
        if self.values.ndim != 1 or self.values.size != self.manifest.total:
            raise ShapeError(
                f"parameter array of size {self.values.size} does not match manifest total {self.manifest.total}"
            )

    def __len__(self) -> int:
        return int(self.values.size)

    def view(self, name: str) -> np.ndarray:
        spec = self.manifest.get(name)
        return self.values[spec.offset:spec.stop].reshape(spec.shape)

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), self.manifest)

    def content_hash(self) -> str:
        return sha256_bytes(array_to_blob(self.values, blob_dtype(self.values.dtype)))

    def bind(self, record: Optional[nx.ComputationRecord] = None) -> BoundParameters:
        """Slice tensors for a forward pass; watched on `record` when given, constants otherwise"""
        tensors = {}
        for spec in self.manifest.slices:
            array = self.view(spec.name)
            tensors[spec.name] = record.watch(array) if record is not None else nx.Tensor(array)
        return BoundParameters(self.manifest, tensors)


def init_parameters(config: ModelConfig) -> ParameterVector:
    """normal(0, init_std) weights and embeddings, unit norm gains, zero biases"""
    manifest = build_manifest(config)
    rng = np.random.default_rng(config.seed)
    values = np.empty(manifest.total, dtype=config.dtype)
    for spec in manifest.slices:
        if spec.name.endswith(".gain"):
            block = np.ones(spec.size)
        elif spec.name.endswith(".bias"):
            block = np.zeros(spec.size)
        else:
            block = rng.normal(0.0, config.init_std, size=spec.size)
        values[spec.offset:spec.stop] = block
    return ParameterVector(values, manifest)


def encode(text: str, vocab: Vocabulary, max_seq_len: Optional[int] = None) -> List[int]:
    """Character ids; characters outside the vocabulary become [UNK]"""
    if max_seq_len is not None and len(text) > max_seq_len:
        raise DataError(f"example {text!r} has {len(text)} characters, over max_seq_len={max_seq_len}")
    return [vocab.id_of(ch) for ch in text]


def pad_batch(sequences: Sequence[Sequence[int]], pad_id: int, length: Optional[int] = None) -> np.ndarray:
    """Right-pad id sequences with [PAD] to `length` (default: longest in batch)"""
    width = max((len(s) for s in sequences), default=0) if length is None else length
    width = max(width, 1)
    batch = np.full((len(sequences), width), pad_id, dtype=np.int64)
    for row, seq in enumerate(sequences):
        if len(seq) > width:
            raise DataError(f"sequence of length {len(seq)} does not fit padded width {width}")
        batch[row, : len(seq)] = seq
    return batch


class MaskedLanguageModel:
    """Forward pass of the encoder for a given ParameterVector"""

    def __init__(self, config: ModelConfig, vocab: Vocabulary):
        if config.vocab_size != len(vocab):
            raise ShapeError(f"config vocab_size={config.vocab_size} but vocabulary has {len(vocab)} symbols")
        self.config = config
        self.vocab = vocab

    def forward(self, ids: np.ndarray, theta: Union[ParameterVector, BoundParameters]) -> nx.Tensor:
        """Logits of shape (batch, seq, vocab)"""
        return self._run(ids, theta, capture=None)

    def attention_maps(self, ids: np.ndarray, theta: ParameterVector) -> List[np.ndarray]:
        """Per-layer attention probabilities, each (batch, heads, seq, seq)"""
        maps: List[np.ndarray] = []
        self._run(ids, theta, capture=maps)
        return maps

    def _run(self, ids: np.ndarray, theta, capture: Optional[List[np.ndarray]]) -> nx.Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ShapeError(f"forward expects a (batch, seq) id matrix, got shape {ids.shape}")
        batch, seq = ids.shape
        if seq > self.config.max_seq_len:
            raise ShapeError(f"sequence length {seq} exceeds max_seq_len={self.config.max_seq_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ShapeError(f"token ids must lie in [0, {self.config.vocab_size}), got [{ids.min()}, {ids.max()}]")

        p = theta.bind() if isinstance(theta, ParameterVector) else theta
        dtype = p["embeddings.token"].dtype
        key_mask = np.where(ids == self.vocab.pad_id, _ATTENTION_MASK_VALUE, 0.0).astype(dtype)
        key_mask = key_mask[:, None, None, :]

        x = nx.embedding(p["embeddings.token"], ids) + nx.embedding(p["embeddings.position"], np.arange(seq))
        x = nx.layer_norm(x, p["embeddings.norm.gain"], p["embeddings.norm.bias"])
        for i in range(self.config.n_layers):
            x = self._layer(x, p, f"layer.{i}", key_mask, capture)
        return nx.matmul(x, p["head.weight"]) + p["head.bias"]

    def _layer(self, x: nx.Tensor, p: BoundParameters, prefix: str, key_mask: np.ndarray, capture) -> nx.Tensor:
        cfg = self.config
        batch, seq, d = x.shape
        heads, head_dim = cfg.n_heads, cfg.head_dim

        qkv = nx.matmul(x, p[f"{prefix}.attention.qkv.weight"]) + p[f"{prefix}.attention.qkv.bias"]

        def split_heads(t: nx.Tensor) -> nx.Tensor:
            return nx.transpose(nx.reshape(t, (batch, seq, heads, head_dim)), (0, 2, 1, 3))

        q = split_heads(nx.slice_last(qkv, 0, d))
        k = split_heads(nx.slice_last(qkv, d, 2 * d))
        v = split_heads(nx.slice_last(qkv, 2 * d, 3 * d))

        scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(head_dim))
        weights = nx.softmax(scores + key_mask)
        if capture is not None:
            capture.append(weights.data.copy())
        context = nx.reshape(nx.transpose(nx.matmul(weights, v), (0, 2, 1, 3)), (batch, seq, d))
        attended = nx.matmul(context, p[f"{prefix}.attention.output.weight"]) + p[f"{prefix}.attention.output.bias"]
        x = nx.layer_norm(x + attended, p[f"{prefix}.attention.norm.gain"], p[f"{prefix}.attention.norm.bias"])

        hidden = nx.gelu(nx.matmul(x, p[f"{prefix}.ffn.input.weight"]) + p[f"{prefix}.ffn.input.bias"])
        out = nx.matmul(hidden, p[f"{prefix}.ffn.output.weight"]) + p[f"{prefix}.ffn.output.bias"]
        return nx.layer_norm(x + out, p[f"{prefix}.ffn.norm.gain"], p[f"{prefix}.ffn.norm.bias"])


def predict_masked(
    logits: Union[nx.Tensor, np.ndarray],
    batch_index: np.ndarray,
    position_index: np.ndarray,
    vocab: Vocabulary,
) -> List[str]:
    """Greedy symbol per masked position; ties go to the lowest id"""
    values = logits.data if isinstance(logits, nx.Tensor) else np.asarray(logits)
    batch_index = np.asarray(batch_index, dtype=np.int64)
    position_index = np.asarray(position_index, dtype=np.int64)
    if position_index.size and (position_index.max() >= values.shape[1] or position_index.min() < 0):
        raise ShapeError(f"masked positions out of bounds for sequence length {values.shape[1]}")
    best = np.argmax(values[batch_index, position_index], axis=-1)
    return [vocab.symbol(int(i)) for i in best]


class CheckpointManifest(BaseModel):
    format_version: str = CHECKPOINT_FORMAT
    config: ModelConfig
    vocabulary: List[str]
    slices: List[SliceSpec]
    parameter_count: int
    blob_bytes: int
    content_hash: str
    provenance: Dict[str, Any] = Field(default_factory=dict)


@dataclass
class Checkpoint:
    theta: ParameterVector
    config: ModelConfig
    vocab: Vocabulary
    provenance: Dict[str, Any] = field(default_factory=dict)

    @property
    def content_hash(self) -> str:
        return self.theta.content_hash()

    def model(self) -> MaskedLanguageModel:
        return MaskedLanguageModel(self.config, self.vocab)


def blob_dtype(dtype) -> str:
    """Little-endian storage code for a parameter dtype"""
    return "<f8" if np.dtype(dtype) == np.float64 else "<f4"


def checkpoint_blob_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".bin")


def save_checkpoint(
    path: PathLike,
    theta: ParameterVector,
    config: ModelConfig,
    vocab: Vocabulary,
    provenance: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write `<path>` (JSON manifest) and `<path>.bin` (little-endian parameters in the config dtype)"""
    blob = array_to_blob(theta.values, blob_dtype(config.dtype))
    manifest = CheckpointManifest(
        config=config,
        vocabulary=list(vocab.symbols),
        slices=list(theta.manifest.slices),
        parameter_count=len(theta),
        blob_bytes=len(blob),
        content_hash=sha256_bytes(blob),
        provenance=provenance or {},
    )
    write_bytes(checkpoint_blob_path(path), blob)
    write_model_json(path, manifest)
    logger.info("saved checkpoint %s (%d parameters, %s)", path, len(theta), manifest.content_hash[:12])
    return Path(path)


def load_checkpoint(path: PathLike) -> Checkpoint:
    manifest = read_model_json(path, CheckpointManifest)
    if manifest.format_version != CHECKPOINT_FORMAT:
        raise IntegrityError(f"{path}: unsupported checkpoint format {manifest.format_version!r}")
    expected = build_manifest(manifest.config)
    if list(expected.slices) != list(manifest.slices):
        raise IntegrityError(f"{path}: slice table does not match the configured architecture")
    blob_path = checkpoint_blob_path(path)
    blob = read_bytes(blob_path)
    values = blob_to_array(blob, blob_dtype(manifest.config.dtype), expected.total, blob_path)
    verify_hash(blob, manifest.content_hash, blob_path)
    vocab = Vocabulary(symbols=manifest.vocabulary)
    return Checkpoint(
        theta=ParameterVector(values.astype(manifest.config.dtype), expected),
        config=manifest.config,
        vocab=vocab,
        provenance=manifest.provenance,
    )
