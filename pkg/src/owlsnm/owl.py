"""Pairwise and binary ordered weighted losses over full score vectors.

Class ids are 0-based.  Negatives are ranked by descending score with ties
broken by ascending class index; the same ranking drives both the loss value
and the subgradient so that results are reproducible.
"""

from __future__ import annotations

import enum
import math

import numpy as np

from owlsnm.phi import PhiSpec, phi_eval, phi_grad


class LossKind(str, enum.Enum):
    POWL = "powl"
    BOWL = "bowl"

    @classmethod
    def coerce(cls, kind) -> "LossKind":
        if isinstance(kind, cls):
            return kind
        try:
            return cls(str(kind).lower())
        except ValueError:
            raise ValueError(f"unknown loss kind {kind!r}; expected powl or bowl") from None


def rank_order(scores: np.ndarray, ids: np.ndarray, m: int | None = None) -> np.ndarray:
    """Positions of the ``m`` best entries of ``scores``, best first.

    Ordering is descending score, then ascending ``ids``.  When ``m`` is
    smaller than the input only a partial selection is done.
    """
    n = len(scores)
    if m is None or m >= n:
        return np.lexsort((ids, -scores))
    if m <= 0:
        return np.empty(0, dtype=np.intp)
    # everything tied with the m-th largest value is a candidate
    kth = np.partition(scores, n - m)[n - m]
    cand = np.flatnonzero(scores >= kth)
    order = np.lexsort((ids[cand], -scores[cand]))
    return cand[order[:m]]


def _check(theta: np.ndarray, v: np.ndarray, y: int):
    K = len(v)
    if K < 2:
        raise ValueError("score vector needs at least two classes")
    if len(theta) != K - 1:
        raise ValueError(f"theta has length {len(theta)}, expected K-1 = {K - 1}")
    if not (0 <= y < K) or int(y) != y:
        raise ValueError(f"class id {y} out of range for K = {K}")
    if not np.all(np.isfinite(v)):
        raise ValueError("score vector must be finite")


def _active_prefix(theta: np.ndarray) -> int:
    nz = np.flatnonzero(theta)
    return int(nz[-1]) + 1 if len(nz) else 0


def ranked_negatives(v: np.ndarray, y: int, m: int | None = None) -> np.ndarray:
    """Class ids of the ``m`` highest-scoring negatives (all when ``m`` is None)."""
    neg = np.concatenate([np.arange(y), np.arange(y + 1, len(v))])
    return neg[rank_order(v[neg], neg, m)]


def weighted_loss(kind, phi: PhiSpec, weights: np.ndarray, pos_score: float, neg_sorted: np.ndarray) -> float:
    """OWL value given the positive score and the negatives already sorted best first.

    ``weights`` may be longer than ``neg_sorted``; surplus weights are unused
    only if they are zero.
    """
    kind = LossKind.coerce(kind)
    w = weights[: len(neg_sorted)]
    if kind is LossKind.POWL:
        return float(np.dot(w, phi_eval(phi, pos_score - neg_sorted)))
    return float(phi_eval(phi, pos_score) + np.dot(w, phi_eval(phi, -neg_sorted)))


def weighted_grad(kind, phi: PhiSpec, weights: np.ndarray, pos_score: float, neg_sorted: np.ndarray):
    """Derivatives w.r.t. the positive score and each sorted negative score."""
    kind = LossKind.coerce(kind)
    w = weights[: len(neg_sorted)]
    if kind is LossKind.POWL:
        g = w * phi_grad(phi, pos_score - neg_sorted)
        return float(g.sum()), -g
    g = w * phi_grad(phi, -neg_sorted)
    return float(phi_grad(phi, pos_score)), -g


def eval_owl(kind, phi: PhiSpec, theta, v, y: int) -> float:
    """POWL ``sum_j theta_j phi(v_y - v_[j])`` or BOWL ``phi(v_y) + sum_j theta_j phi(-v_[j])``.

    ``v_[j]`` is the j-th largest score once coordinate ``y`` is dropped.
    """
    theta = np.asarray(theta, dtype=float)
    v = np.asarray(v, dtype=float)
    _check(theta, v, y)
    m = _active_prefix(theta)
    neg = ranked_negatives(v, y, m)
    return weighted_loss(kind, phi, theta, v[y], v[neg])


def grad_owl(kind, phi: PhiSpec, theta, v, y: int) -> np.ndarray:
    """A subgradient of :func:`eval_owl` with respect to the score vector."""
    theta = np.asarray(theta, dtype=float)
    v = np.asarray(v, dtype=float)
    _check(theta, v, y)
    m = _active_prefix(theta)
    neg = ranked_negatives(v, y, m)
    g_pos, g_neg = weighted_grad(kind, phi, theta, v[y], v[neg])
    grad = np.zeros(len(v))
    grad[y] = g_pos
    grad[neg] = g_neg
    return grad


def theta_norms(theta) -> tuple[float, float]:
    theta = np.asarray(theta, dtype=float)
    return float(np.abs(theta).sum()), float(math.sqrt(np.dot(theta, theta)))


def is_surrogate_premise(theta, k: int, atol: float = 1e-12) -> bool:
    """True when the first ``k`` weights all equal ``1/k``."""
    theta = np.asarray(theta, dtype=float)
    if k < 1 or k > len(theta):
        raise ValueError(f"k = {k} must lie in [1, {len(theta)}]")
    return bool(np.all(np.abs(theta[:k] - 1.0 / k) <= atol))


def is_non_increasing(weights, atol: float = 0.0) -> bool:
    w = np.asarray(weights, dtype=float)
    return bool(np.all(np.diff(w) <= atol))
