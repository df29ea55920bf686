"""Scenario objectives with prediction- and representation-level consistency regularizers.

Every loss returns per-example values (shape (B,)) together with the upstream
gradients of those per-example values with respect to the trace's logits and,
for representation regularizers, its feature or penultimate vectors. Batch
averaging happens in ``batch_average`` and in the trainer.
"""

import logging
from dataclasses import dataclass
from typing import Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from crossfact.core import K, DataError, Label, Regularizer, Scenario
from crossfact.model import ForwardTrace
from crossfact.probcore import cross_entropy, divergence, entropy, grad_divergence

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA = 1.0
DEFAULT_J_LAMBDA = 0.25

Labels = Union[Label, int, Sequence[Union[Label, int]], np.ndarray]


class LossSpec(BaseModel):
    """Scenario, regularizer choice and strength; fully determines the training objective."""

    model_config = ConfigDict(populate_by_name=True)

    scenario: Scenario = Field(default=Scenario.ZERO_SHOT)
    regularizer: Regularizer = Field(default=Regularizer.NONE)
    lam: Optional[float] = Field(default=None, alias="lambda", ge=0.0)
    secondary_regularizer: Regularizer = Field(default=Regularizer.NONE)
    secondary_lam: float = Field(default=DEFAULT_LAMBDA, alias="secondary_lambda", ge=0.0)
    confidence_penalty: float = Field(default=0.0, ge=0.0)
    kl_direction: Literal["original_to_translated", "translated_to_original"] = Field(default="original_to_translated")
    stop_gradient_on_p: bool = Field(default=False)

    @model_validator(mode="after")
    def _check(self) -> "LossSpec":
        regularized = self.regularizer is not Regularizer.NONE or self.secondary_regularizer is not Regularizer.NONE
        if regularized and self.scenario is not Scenario.PARALLEL:
            raise ValueError(f"regularizers require the parallel scenario, got {self.scenario.value}")
        if self.secondary_regularizer is not Regularizer.NONE:
            if self.regularizer is Regularizer.NONE:
                raise ValueError("secondary_regularizer needs a primary regularizer")
            if self.secondary_regularizer is self.regularizer:
                raise ValueError("secondary_regularizer must differ from regularizer")
        if self.lam is None:
            self.lam = DEFAULT_J_LAMBDA if self.regularizer is Regularizer.J else DEFAULT_LAMBDA
        return self

    @property
    def strength(self) -> float:
        return DEFAULT_LAMBDA if self.lam is None else self.lam

    def terms(self) -> Tuple[Tuple[Regularizer, float], ...]:
        """(regularizer, strength) pairs that contribute to the loss."""
        pairs = ((self.regularizer, self.strength), (self.secondary_regularizer, self.secondary_lam))
        return tuple((reg, lam) for reg, lam in pairs if reg is not Regularizer.NONE)

    def describe(self) -> str:
        parts = [self.scenario.value]
        for reg, lam in self.terms():
            parts.append(f"{reg.value}@{lam:g}")
        if self.confidence_penalty > 0:
            parts.append(f"cp@{self.confidence_penalty:g}")
        return "+".join(parts)


@dataclass
class UpstreamGradients:
    """Per-example gradients entering the network at the logits and, optionally, mid-network."""
    logits: np.ndarray
    feature: Optional[np.ndarray] = None
    penultimate: Optional[np.ndarray] = None

    def __add__(self, other: "UpstreamGradients") -> "UpstreamGradients":
        return UpstreamGradients(
            logits=self.logits + other.logits,
            feature=_add_optional(self.feature, other.feature),
            penultimate=_add_optional(self.penultimate, other.penultimate),
        )

    def scale(self, factor: float) -> "UpstreamGradients":
        return UpstreamGradients(
            logits=self.logits * factor,
            feature=None if self.feature is None else self.feature * factor,
            penultimate=None if self.penultimate is None else self.penultimate * factor,
        )


def _add_optional(a: Optional[np.ndarray], b: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def label_indices(labels: Labels, batch_size: int) -> np.ndarray:
    """Class indices for a batch; a single label is broadcast."""
    if isinstance(labels, (Label, int, np.integer)):
        labels = [labels] * batch_size
    indices = np.array([lab.index if isinstance(lab, Label) else int(lab) for lab in labels], dtype=np.int64)
    if indices.shape != (batch_size,):
        raise DataError(f"got {indices.size} labels for a batch of {batch_size}", error_code="label_count")
    if np.any((indices < 0) | (indices >= K)):
        raise DataError(f"label index outside [0, {K})", error_code="bad_label")
    return indices


def one_hot(indices: np.ndarray) -> np.ndarray:
    return np.eye(K)[indices]


def loss_zero_shot(trace: ForwardTrace, labels: Labels) -> Tuple[np.ndarray, UpstreamGradients]:
    """Cross-entropy against the one-hot label; gradient at the logits is p - q."""
    q = one_hot(label_indices(labels, len(trace)))
    p = trace.distribution
    return np.atleast_1d(cross_entropy(q, p)), UpstreamGradients(logits=p - q)


def loss_confidence_penalty(
    trace: ForwardTrace, labels: Labels, lam: float
) -> Tuple[np.ndarray, UpstreamGradients]:
    """Cross-entropy minus ``lam`` times the prediction entropy."""
    if lam < 0:
        raise ValueError(f"confidence penalty strength must be >= 0, got {lam}")
    values, grads = loss_zero_shot(trace, labels)
    if lam == 0:
        return values, grads
    p = trace.distribution
    h = np.atleast_1d(entropy(p))
    log_p = np.log(np.maximum(p, 1e-12))
    return values - lam * h, UpstreamGradients(logits=grads.logits + lam * p * (log_p + h[:, None]))


def _prediction_term(
    kind: Regularizer, trace_orig: ForwardTrace, trace_trans: ForwardTrace, spec: LossSpec
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    p, p_trans = trace_orig.distribution, trace_trans.distribution
    if kind is Regularizer.KL and spec.kl_direction == "translated_to_original":
        values = divergence(kind.value, p_trans, p)
        grad_trans, grad_orig = grad_divergence(kind.value, p_trans, p)
    else:
        values = divergence(kind.value, p, p_trans)
        grad_orig, grad_trans = grad_divergence(kind.value, p, p_trans)
    if kind is Regularizer.KL and spec.stop_gradient_on_p:
        grad_orig = np.zeros_like(grad_orig)
    return np.atleast_1d(values), grad_orig, grad_trans


def _cosine_term(h: np.ndarray, h_trans: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """1 - cos(h, h~) per row; rows with a zero vector get distance 1 and zero gradient."""
    norm = np.linalg.norm(h, axis=-1, keepdims=True)
    norm_trans = np.linalg.norm(h_trans, axis=-1, keepdims=True)
    degenerate = (norm == 0.0) | (norm_trans == 0.0)
    safe = np.where(degenerate, 1.0, norm)
    safe_trans = np.where(degenerate, 1.0, norm_trans)
    cos = np.where(degenerate, 0.0, (h * h_trans).sum(axis=-1, keepdims=True) / (safe * safe_trans))
    grad = -(h_trans / (safe * safe_trans) - cos * h / safe ** 2)
    grad_trans = -(h / (safe * safe_trans) - cos * h_trans / safe_trans ** 2)
    grad = np.where(degenerate, 0.0, grad)
    grad_trans = np.where(degenerate, 0.0, grad_trans)
    return 1.0 - cos[:, 0], grad, grad_trans


def _representation_term(
    kind: Regularizer, trace_orig: ForwardTrace, trace_trans: ForwardTrace
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    level = kind.representation_level
    if level is None:
        raise ValueError(f"{kind.value} is not a representation regularizer")
    h = trace_orig.representation(level)
    h_trans = trace_trans.representation(level)
    if kind in (Regularizer.MSE_FEATURE, Regularizer.MSE_PENULTIMATE):
        diff = h - h_trans
        return (diff ** 2).sum(axis=-1), 2.0 * diff, -2.0 * diff
    return _cosine_term(h, h_trans)


def regularizer_term(
    kind: Regularizer, trace_orig: ForwardTrace, trace_trans: ForwardTrace, spec: LossSpec
) -> Tuple[np.ndarray, UpstreamGradients, UpstreamGradients]:
    """Unscaled R per example with its gradients for both traces."""
    zeros_o = np.zeros_like(trace_orig.logits)
    zeros_t = np.zeros_like(trace_trans.logits)
    if kind is Regularizer.NONE:
        return np.zeros(len(trace_orig)), UpstreamGradients(zeros_o), UpstreamGradients(zeros_t)

    if kind.is_prediction_level:
        values, grad_o, grad_t = _prediction_term(kind, trace_orig, trace_trans, spec)
        return values, UpstreamGradients(logits=grad_o), UpstreamGradients(logits=grad_t)

    values, grad_o, grad_t = _representation_term(kind, trace_orig, trace_trans)
    if kind.representation_level == "feature":
        return values, UpstreamGradients(zeros_o, feature=grad_o), UpstreamGradients(zeros_t, feature=grad_t)
    return values, UpstreamGradients(zeros_o, penultimate=grad_o), UpstreamGradients(zeros_t, penultimate=grad_t)


def regularizer_value(
    kind: Regularizer, trace_orig: ForwardTrace, trace_trans: ForwardTrace, spec: Optional[LossSpec] = None
) -> np.ndarray:
    return regularizer_term(kind, trace_orig, trace_trans, spec or LossSpec(scenario=Scenario.PARALLEL))[0]


def _scenario_ce(trace: ForwardTrace, labels: Labels, spec: LossSpec) -> Tuple[np.ndarray, UpstreamGradients]:
    if spec.confidence_penalty > 0:
        return loss_confidence_penalty(trace, labels, spec.confidence_penalty)
    return loss_zero_shot(trace, labels)


def loss_single(trace: ForwardTrace, labels: Labels, spec: LossSpec) -> Tuple[np.ndarray, UpstreamGradients]:
    """Per-example objective of the zero-shot and non-parallel scenarios."""
    return _scenario_ce(trace, labels, spec)


def loss_parallel(
    trace_orig: ForwardTrace,
    trace_trans: ForwardTrace,
    labels: Labels,
    spec: LossSpec,
    translated_labels: Optional[Labels] = None,
) -> Tuple[np.ndarray, UpstreamGradients, UpstreamGradients]:
    """CE(q, p) + CE(q, p~) + lambda R, per pair, with gradients for both traces."""
    if len(trace_orig) != len(trace_trans):
        raise DataError(
            f"parallel batch sizes differ: {len(trace_orig)} vs {len(trace_trans)}", error_code="pair_batch_size"
        )
    idx = label_indices(labels, len(trace_orig))
    if translated_labels is not None:
        idx_trans = label_indices(translated_labels, len(trace_trans))
        mismatch = np.flatnonzero(idx != idx_trans)
        if mismatch.size:
            raise DataError(
                f"original and translated labels differ at batch position {int(mismatch[0])}",
                error_code="label_mismatch",
                context={"position": int(mismatch[0])},
            )

    values_o, grads_o = _scenario_ce(trace_orig, idx, spec)
    values_t, grads_t = _scenario_ce(trace_trans, idx, spec)
    values = values_o + values_t
    for kind, lam in spec.terms():
        reg, reg_o, reg_t = regularizer_term(kind, trace_orig, trace_trans, spec)
        values = values + lam * reg
        grads_o = grads_o + reg_o.scale(lam)
        grads_t = grads_t + reg_t.scale(lam)
    return values, grads_o, grads_t


def j_rearranged(trace_orig: ForwardTrace, trace_trans: ForwardTrace, labels: Labels, lam: float) -> np.ndarray:
    """The J-regularized pair loss written as cross-entropies minus prediction entropies:
    CE(q,p) + CE(q,p~) + lam [H(p,p~) + H(p~,p) - H(p) - H(p~)]."""
    q = one_hot(label_indices(labels, len(trace_orig)))
    p, p_trans = trace_orig.distribution, trace_trans.distribution
    ce = cross_entropy(q, p) + cross_entropy(q, p_trans)
    cross = cross_entropy(p, p_trans) + cross_entropy(p_trans, p)
    return np.atleast_1d(ce + lam * (cross - entropy(p) - entropy(p_trans)))


def batch_average(values: Union[Sequence[float], np.ndarray]) -> float:
    """Arithmetic mean of per-example losses."""
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise DataError("cannot average an empty batch", error_code="empty_batch")
    return float(arr.mean())
