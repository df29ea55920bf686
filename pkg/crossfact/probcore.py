"""Probability primitives and divergence measures with analytic gradients.

Every function works on the last axis, so a single K-vector and a (batch, K)
matrix of rows are both accepted. Logarithms are natural (nats). Probabilities
are clamped below at ``EPS`` before any logarithm is taken.
"""

from enum import Enum
from typing import Tuple, Union

import numpy as np
import numpy.typing as npt

from crossfact.core import EPS, ConfigurationError, Distribution, Logits, NumericalError

ArrayLike = Union[npt.ArrayLike, np.ndarray]


class Divergence(str, Enum):
    KL = "kl"
    J = "j"
    JS = "js"


def _log(p: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(p, EPS))


def check_distribution(p: ArrayLike, tol: float = 1e-12) -> Distribution:
    """Return ``p`` as float64 if every row lies on the simplex, else raise."""
    arr = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericalError("distribution has non-finite entries", error_code="non_finite")
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise NumericalError("distribution entries must lie in [0, 1]", error_code="out_of_range")
    sums = arr.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > tol):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise NumericalError(
            f"distribution does not sum to 1 (max deviation {worst:.3e})",
            error_code="not_normalized",
            context={"deviation": worst},
        )
    return arr


def softmax(z: ArrayLike) -> Distribution:
    """Max-shifted softmax over the last axis."""
    logits: Logits = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        bad = np.argwhere(~np.isfinite(logits))[0].tolist()
        raise NumericalError(
            f"softmax received non-finite logits at index {bad}", error_code="non_finite", context={"index": bad}
        )
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: ArrayLike) -> np.ndarray:
    logits = np.asarray(z, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def entropy(p: ArrayLike) -> Union[float, np.ndarray]:
    """H(p) = -sum p ln p, with 0 ln 0 = 0."""
    arr = np.asarray(p, dtype=np.float64)
    return _scalar(-(arr * _log(arr)).sum(axis=-1))


def cross_entropy(q: ArrayLike, p: ArrayLike) -> Union[float, np.ndarray]:
    """H(q, p) = -sum q ln p; the reference distribution ``q`` comes first."""
    q_arr = np.asarray(q, dtype=np.float64)
    p_arr = np.asarray(p, dtype=np.float64)
    return _scalar(-(q_arr * _log(p_arr)).sum(axis=-1))


def kl(p: ArrayLike, q: ArrayLike) -> Union[float, np.ndarray]:
    """KL(p || q) = H(p, q) - H(p)."""
    p_arr = np.asarray(p, dtype=np.float64)
    q_arr = np.asarray(q, dtype=np.float64)
    return _scalar((p_arr * (_log(p_arr) - _log(q_arr))).sum(axis=-1))


def j_div(p: ArrayLike, q: ArrayLike) -> Union[float, np.ndarray]:
    """Jeffreys divergence KL(p || q) + KL(q || p)."""
    return kl(p, q) + kl(q, p)


def js_div(p: ArrayLike, q: ArrayLike) -> Union[float, np.ndarray]:
    """Jensen-Shannon divergence through the midpoint m = (p + q) / 2; bounded by ln 2."""
    p_arr = np.asarray(p, dtype=np.float64)
    q_arr = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p_arr + q_arr)
    return 0.5 * kl(p_arr, m) + 0.5 * kl(q_arr, m)


def divergence(kind: Union[Divergence, str], p: ArrayLike, q: ArrayLike) -> Union[float, np.ndarray]:
    div = _as_divergence(kind)
    if div is Divergence.KL:
        return kl(p, q)
    if div is Divergence.J:
        return j_div(p, q)
    return js_div(p, q)


def grad_divergence(kind: Union[Divergence, str], p: ArrayLike, q: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of D(p, q) with respect to the logits that produced ``p`` and ``q``.

    ``p`` and ``q`` must be softmax outputs; the softmax Jacobian
    ``dz_j = p_j (g_j - <p, g>)`` is applied to the gradient ``g`` with respect
    to the probabilities.
    """
    div = _as_divergence(kind)
    p_arr = np.asarray(p, dtype=np.float64)
    q_arr = np.asarray(q, dtype=np.float64)
    lp = _log(p_arr)
    lq = _log(q_arr)

    if div is Divergence.KL:
        kl_pq = (p_arr * (lp - lq)).sum(axis=-1, keepdims=True)
        return p_arr * (lp - lq - kl_pq), q_arr - p_arr

    if div is Divergence.J:
        kl_pq = (p_arr * (lp - lq)).sum(axis=-1, keepdims=True)
        kl_qp = (q_arr * (lq - lp)).sum(axis=-1, keepdims=True)
        grad_p = p_arr * (lp - lq - kl_pq) + (p_arr - q_arr)
        grad_q = q_arr * (lq - lp - kl_qp) + (q_arr - p_arr)
        return grad_p, grad_q

    lm = _log(0.5 * (p_arr + q_arr))
    g_p = 0.5 * (lp - lm)
    g_q = 0.5 * (lq - lm)
    grad_p = p_arr * (g_p - (p_arr * g_p).sum(axis=-1, keepdims=True))
    grad_q = q_arr * (g_q - (q_arr * g_q).sum(axis=-1, keepdims=True))
    return grad_p, grad_q


def js_j_gap(p: ArrayLike, q: ArrayLike) -> Union[float, np.ndarray]:
    """J(p, q) - 4 JS(p, q); non-negative by convexity of KL in its second argument."""
    return j_div(p, q) - 4.0 * js_div(p, q)


def dirichlet_samples(n: int, k: int, seed: int) -> np.ndarray:
    """``n`` points drawn uniformly from the (k-1)-simplex."""
    rng = np.random.default_rng(seed)
    return rng.dirichlet(np.ones(k), size=n)


def _as_divergence(kind: Union[Divergence, str]) -> Divergence:
    try:
        return Divergence(kind)
    except ValueError:
        raise ConfigurationError(f"unknown divergence kind: {kind!r}", error_code="unknown_divergence") from None


def _scalar(value: np.ndarray) -> Union[float, np.ndarray]:
    if np.ndim(value) == 0:
        return float(value)
    return value
