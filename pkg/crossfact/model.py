"""Embedding + mean-pool encoder with a one-hidden-layer MLP head, and its manual backward pass.

Shapes use the row-vector convention (batch along the first axis):

    pooled      = mean(E[ids])                        (B, d)
    feature     = tanh(pooled @ W_enc + b_enc)        (B, d)
    penultimate = tanh(feature @ W_h + b_h)           (B, h)
    logits      = penultimate @ W_o + b_o             (B, K)
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from crossfact.core import K, CheckpointError, ShapeError, TokenIds, VocabularyError
from crossfact.data import Example, Vocabulary
from crossfact.probcore import softmax

logger = logging.getLogger(__name__)

PARAM_NAMES = ("embedding", "w_enc", "b_enc", "w_h", "b_h", "w_o", "b_o")
INIT_SCALE = 0.05
CHECKPOINT_FORMAT = "crossfact-checkpoint"
CHECKPOINT_VERSION = 1


class ModelDims(BaseModel):
    vocab_size: int = Field(..., ge=3)
    embed_dim: int = Field(default=64, ge=1)
    hidden_dim: int = Field(default=64, ge=1)
    n_classes: int = Field(default=K)

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        d, h = self.embed_dim, self.hidden_dim
        return {
            "embedding": (self.vocab_size, d),
            "w_enc": (d, d),
            "b_enc": (d,),
            "w_h": (d, h),
            "b_h": (h,),
            "w_o": (h, self.n_classes),
            "b_o": (self.n_classes,),
        }


@dataclass(eq=False)
class ModelParams:
    """All trainable weights plus the vocabulary they are indexed by."""
    embedding: np.ndarray
    w_enc: np.ndarray
    b_enc: np.ndarray
    w_h: np.ndarray
    b_h: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    vocab: Vocabulary
    seed: int = 0

    def __post_init__(self) -> None:
        dims = self.dims
        if dims.n_classes != K:
            raise ShapeError(f"output layer has {dims.n_classes} classes, expected {K}")
        for name, shape in dims.shapes().items():
            actual = getattr(self, name).shape
            if actual != shape:
                raise ShapeError(f"{name} has shape {actual}, expected {shape}", context={"param": name})
        if len(self.vocab) != dims.vocab_size:
            raise ShapeError(f"vocabulary has {len(self.vocab)} tokens but embedding has {dims.vocab_size} rows")

    @property
    def dims(self) -> ModelDims:
        return ModelDims(
            vocab_size=self.embedding.shape[0],
            embed_dim=self.embedding.shape[1],
            hidden_dim=self.w_h.shape[1],
            n_classes=self.w_o.shape[1],
        )

    @property
    def n_parameters(self) -> int:
        return sum(arr.size for arr in self.arrays().values())

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "ModelParams":
        return ModelParams(**{name: arr.copy() for name, arr in self.arrays().items()}, vocab=self.vocab, seed=self.seed)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (
            self.vocab == other.vocab
            and self.seed == other.seed
            and all(np.array_equal(a, b) for a, b in zip(self.arrays().values(), other.arrays().values()))
        )


@dataclass(eq=False)
class GradientSet:
    """Gradients for every parameter tensor, named like ModelParams."""
    embedding: np.ndarray
    w_enc: np.ndarray
    b_enc: np.ndarray
    w_h: np.ndarray
    b_h: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "GradientSet":
        return cls(**{name: np.zeros_like(arr) for name, arr in params.arrays().items()})

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def __iter__(self) -> Iterator[Tuple[str, np.ndarray]]:
        return iter(self.arrays().items())

    def __add__(self, other: "GradientSet") -> "GradientSet":
        return GradientSet(**{name: getattr(self, name) + getattr(other, name) for name in PARAM_NAMES})

    def scale(self, factor: float) -> "GradientSet":
        return GradientSet(**{name: arr * factor for name, arr in self})

    def flat(self) -> np.ndarray:
        return np.concatenate([arr.ravel() for _, arr in self])


@dataclass(eq=False)
class ForwardTrace:
    """Everything a forward pass caches for one batch (first axis = example)."""
    token_ids: List[TokenIds]
    pooled: np.ndarray
    feature: np.ndarray
    penultimate: np.ndarray
    logits: np.ndarray
    distribution: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.distribution = softmax(self.logits)

    def __len__(self) -> int:
        return self.logits.shape[0]

    def representation(self, level: str) -> np.ndarray:
        if level == "feature":
            return self.feature
        if level == "penultimate":
            return self.penultimate
        raise ValueError(f"unknown representation level: {level!r}")

    def predictions(self) -> np.ndarray:
        """Argmax class indices; ties go to the lowest index."""
        return np.argmax(self.distribution, axis=-1)


def init_params(
    seed: int, vocab: Vocabulary, embed_dim: int = 64, hidden_dim: int = 64
) -> ModelParams:
    """Uniform(-0.05, 0.05) initialization from a seeded generator."""
    dims = ModelDims(vocab_size=len(vocab), embed_dim=embed_dim, hidden_dim=hidden_dim)
    rng = np.random.default_rng(seed)
    arrays = {name: rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape) for name, shape in dims.shapes().items()}
    logger.debug(f"Initialized model: V={dims.vocab_size} d={embed_dim} h={hidden_dim} seed={seed}")
    return ModelParams(**arrays, vocab=vocab, seed=seed)


def _check_ids(ids: TokenIds, vocab_size: int) -> TokenIds:
    ids = np.asarray(ids, dtype=np.int64)
    bad = np.flatnonzero((ids < 0) | (ids >= vocab_size))
    if bad.size:
        position = int(bad[0])
        raise VocabularyError(
            f"token id {int(ids[position])} at position {position} is outside the vocabulary (V={vocab_size})",
            position=position,
            error_code="oov_id",
        )
    if ids.size == 0:
        raise ShapeError("empty token sequence")
    return ids


def _mean_pool_weights(token_ids: Sequence[TokenIds], vocab_size: int) -> np.ndarray:
    """(B, V) matrix of token counts divided by sequence length.

    Pooling as a product with this matrix makes the result independent of token
    order within a sequence.
    """
    counts = np.zeros((len(token_ids), vocab_size))
    for row, ids in enumerate(token_ids):
        np.add.at(counts[row], ids, 1.0)
        counts[row] /= ids.size
    return counts


def forward_batch(params: ModelParams, batch: Sequence[Union[Example, TokenIds]]) -> ForwardTrace:
    """Forward pass over a batch of examples or pre-encoded id sequences."""
    vocab_size = params.embedding.shape[0]
    token_ids = [
        _check_ids(params.vocab.encode(item) if isinstance(item, Example) else item, vocab_size) for item in batch
    ]
    if not token_ids:
        raise ShapeError("forward called on an empty batch")

    pooled = _mean_pool_weights(token_ids, vocab_size) @ params.embedding

    feature = np.tanh(pooled @ params.w_enc + params.b_enc)
    penultimate = np.tanh(feature @ params.w_h + params.b_h)
    logits = penultimate @ params.w_o + params.b_o
    return ForwardTrace(token_ids=token_ids, pooled=pooled, feature=feature, penultimate=penultimate, logits=logits)


def forward(params: ModelParams, example: Union[Example, TokenIds]) -> ForwardTrace:
    """Single-example forward pass; the trace is a batch of one."""
    return forward_batch(params, [example])


def _check_upstream(name: str, grad: np.ndarray, expected: Tuple[int, ...]) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != expected:
        raise ShapeError(f"upstream gradient at {name} has shape {grad.shape}, expected {expected}")
    return grad


def backward(
    params: ModelParams,
    trace: ForwardTrace,
    d_logits: np.ndarray,
    d_feature: Optional[np.ndarray] = None,
    d_penultimate: Optional[np.ndarray] = None,
) -> GradientSet:
    """Gradients of a loss whose upstream gradients enter at the logits and,
    optionally, directly at the feature and penultimate representations."""
    d_logits = _check_upstream("logits", d_logits, trace.logits.shape)
    if d_feature is not None:
        d_feature = _check_upstream("feature", d_feature, trace.feature.shape)
    if d_penultimate is not None:
        d_penultimate = _check_upstream("penultimate", d_penultimate, trace.penultimate.shape)

    grad_w_o = trace.penultimate.T @ d_logits
    grad_b_o = d_logits.sum(axis=0)

    d_pen = d_logits @ params.w_o.T
    if d_penultimate is not None:
        d_pen = d_pen + d_penultimate
    d_pre_h = d_pen * (1.0 - trace.penultimate ** 2)
    grad_w_h = trace.feature.T @ d_pre_h
    grad_b_h = d_pre_h.sum(axis=0)

    d_feat = d_pre_h @ params.w_h.T
    if d_feature is not None:
        d_feat = d_feat + d_feature
    d_pre_enc = d_feat * (1.0 - trace.feature ** 2)
    grad_w_enc = trace.pooled.T @ d_pre_enc
    grad_b_enc = d_pre_enc.sum(axis=0)

    d_pooled = d_pre_enc @ params.w_enc.T
    grad_embedding = _mean_pool_weights(trace.token_ids, params.embedding.shape[0]).T @ d_pooled

    return GradientSet(
        embedding=grad_embedding,
        w_enc=grad_w_enc,
        b_enc=grad_b_enc,
        w_h=grad_w_h,
        b_h=grad_b_h,
        w_o=grad_w_o,
        b_o=grad_b_o,
    )


def predict(params: ModelParams, examples: Sequence[Example], batch_size: int = 256) -> np.ndarray:
    """Predicted distributions, one row per example, in input order."""
    if not examples:
        return np.zeros((0, K))
    rows = [forward_batch(params, examples[i:i + batch_size]).distribution for i in range(0, len(examples), batch_size)]
    return np.concatenate(rows, axis=0)


# Checkpoints

class CheckpointDocument(BaseModel):
    format: str = Field(default=CHECKPOINT_FORMAT)
    version: int = Field(default=CHECKPOINT_VERSION)
    dims: ModelDims
    seed: int
    vocabulary: List[str]
    weights: Dict[str, List[float]]


def save_params(params: ModelParams, path: Union[str, Path]) -> Path:
    """Write a self-describing JSON checkpoint with row-major flat weight arrays."""
    for name, arr in params.arrays().items():
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"refusing to save non-finite weights in {name}", error_code="non_finite")
    doc = CheckpointDocument(
        dims=params.dims,
        seed=params.seed,
        vocabulary=list(params.vocab.tokens),
        weights={name: arr.ravel(order="C").tolist() for name, arr in params.arrays().items()},
    )
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc.model_dump(mode="json")), encoding="utf-8")
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}", error_code="unwritable") from e
    return path


def load_params(path: Union[str, Path]) -> ModelParams:
    path = Path(path)
    try:
        doc = CheckpointDocument.model_validate_json(path.read_bytes())
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}", error_code="unreadable") from e
    except ValidationError as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e.errors()[0].get('msg')}", error_code="corrupt") from e

    if doc.format != CHECKPOINT_FORMAT or doc.version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} file", error_code="format")
    if len(doc.vocabulary) != doc.dims.vocab_size:
        raise CheckpointError(
            f"{path}: vocabulary lists {len(doc.vocabulary)} tokens, dims say {doc.dims.vocab_size}",
            error_code="dimension_mismatch",
        )

    arrays: Dict[str, np.ndarray] = {}
    for name, shape in doc.dims.shapes().items():
        values = doc.weights.get(name)
        if values is None:
            raise CheckpointError(f"{path}: missing weights for {name}", error_code="missing_weights")
        expected = int(np.prod(shape))
        if len(values) != expected:
            raise CheckpointError(
                f"{path}: {name} holds {len(values)} values, dims require {expected}",
                error_code="dimension_mismatch",
                context={"param": name},
            )
        arr = np.asarray(values, dtype=np.float64).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"{path}: non-finite values in {name}", error_code="non_finite")
        arrays[name] = arr

    try:
        vocab = Vocabulary(doc.vocabulary)
    except Exception as e:
        raise CheckpointError(f"{path}: invalid vocabulary: {e}", error_code="vocabulary") from e
    return ModelParams(**arrays, vocab=vocab, seed=doc.seed)
