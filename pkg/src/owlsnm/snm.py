"""Stochastic negative mining: a sampled, unbiased estimate of an ordered weighted loss.

A call draws ``B`` negatives uniformly without replacement from every class
except the positive, sorts their scores and applies the slot weights
``vartheta``.  In expectation this is an ordered weighted loss whose weights
:func:`induced_theta` computes exactly.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from owlsnm.owl import LossKind, rank_order, weighted_grad, weighted_loss
from owlsnm.phi import PhiSpec, phi_eval, phi_grad

MAX_ENUMERATION = 10**6


class CapacityError(ValueError):
    """The exact oracle would have to enumerate too many subsets."""


@dataclass(frozen=True)
class SnmConfig:
    B: int
    vartheta: np.ndarray = field(compare=False)
    kind: LossKind = LossKind.BOWL
    k: int = 1

    def __post_init__(self):
        w = np.asarray(self.vartheta, dtype=float)
        w.setflags(write=False)
        object.__setattr__(self, "vartheta", w)
        object.__setattr__(self, "kind", LossKind.coerce(self.kind))
        if self.B < 1 or len(w) != self.B:
            raise ValueError(f"vartheta has length {len(w)}, expected B = {self.B}")
        if self.k < 1 or self.k > self.B:
            raise ValueError(f"need 1 <= k <= B, got k = {self.k}, B = {self.B}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("vartheta must be finite and non-negative")
        if np.any(np.diff(w) > 0):
            raise ValueError("vartheta must be non-increasing")

    def check_K(self, K: int):
        if self.B > K - 1:
            raise ValueError(f"sample size B = {self.B} exceeds the {K - 1} available negatives")

    @property
    def active(self) -> int:
        """Number of leading slots with non-zero weight."""
        nz = np.flatnonzero(self.vartheta)
        return int(nz[-1]) + 1 if len(nz) else 0


def make_topk_vartheta(K: int, B: int, k: int) -> np.ndarray:
    if k > B:
        raise ValueError(f"top-k weights need k <= B (k = {k}, B = {B})")
    if k < 1:
        raise ValueError("k must be positive")
    w = np.zeros(B)
    w[:k] = (K - 1) / (k * B)
    return w


def make_negsample_vartheta(K: int, B: int, k: int) -> np.ndarray:
    return np.full(B, (K - 1) / (k * B))


def make_powerlaw_vartheta(K: int, B: int, alpha: float) -> np.ndarray:
    """Weights proportional to ``j**-alpha``, scaled to the top-k SNM mass ``(K-1)/B``."""
    if alpha < 0:
        raise ValueError("power-law exponent must be non-negative")
    w = np.arange(1, B + 1, dtype=float) ** (-alpha)
    return w * ((K - 1) / B) / w.sum()


def vartheta_from_strategy(strategy: str, K: int, B: int, k: int) -> np.ndarray:
    """Compile ``topk:<k'>``, ``negsample``, ``powerlaw:<alpha>`` or ``custom:<w1,w2,...>``."""
    name, _, arg = strategy.partition(":")
    if name == "topk":
        return make_topk_vartheta(K, B, int(arg) if arg else k)
    if name == "negsample":
        return make_negsample_vartheta(K, B, k)
    if name == "powerlaw":
        return make_powerlaw_vartheta(K, B, float(arg))
    if name == "custom":
        w = np.array([float(t) for t in arg.split(",") if t.strip()])
        if len(w) != B:
            raise ValueError(f"custom weights have length {len(w)}, expected B = {B}")
        return w
    raise ValueError(f"unknown strategy {strategy!r}")


def sample_without(n: int, size: int, skip: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform ``size``-subset of ``range(n)`` minus ``skip``, in draw order.

    Partial Fisher-Yates over the ``n - 1`` remaining ids; swaps are kept in
    a dict so memory is O(size) regardless of ``n``.
    """
    m = n - 1
    if size > m:
        raise ValueError(f"cannot draw {size} of {m} classes")
    picks = rng.integers(np.arange(size), m) if size else np.empty(0, dtype=np.int64)
    swapped: dict[int, int] = {}
    out = np.empty(size, dtype=np.int64)
    for i, r in enumerate(picks.tolist()):
        out[i] = swapped.get(r, r)
        swapped[r] = swapped.get(i, i)
    out[out >= skip] += 1
    return out


def snm_sample(cfg: SnmConfig, K: int, y: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random size-``B`` subset of the negatives of ``y``."""
    cfg.check_K(K)
    if not 0 <= y < K:
        raise ValueError(f"class id {y} out of range for K = {K}")
    return sample_without(K, cfg.B, y, rng)


def _ranked(cfg: SnmConfig, v, y: int, sample: np.ndarray):
    if isinstance(v, (list, tuple)):
        v = np.asarray(v, dtype=float)
    sample = np.asarray(sample, dtype=np.int64)
    scores = np.asarray(v[sample], dtype=float)
    pos = float(v[y])
    if not (math.isfinite(pos) and np.all(np.isfinite(scores))):
        raise ValueError("scores must be finite")
    order = rank_order(scores, sample, cfg.active)
    return pos, sample[order], scores[order]


def sampled_loss(cfg: SnmConfig, phi: PhiSpec, v, y: int, sample) -> float:
    """The estimator's value for a given negative sample."""
    pos, _, neg = _ranked(cfg, v, y, sample)
    return weighted_loss(cfg.kind, phi, cfg.vartheta, pos, neg)


def sampled_grad(cfg: SnmConfig, phi: PhiSpec, v, y: int, sample):
    """Gradient for a given sample as ``(class_ids, values)``; ``class_ids[0] == y``."""
    pos, ids, neg = _ranked(cfg, v, y, sample)
    g_pos, g_neg = weighted_grad(cfg.kind, phi, cfg.vartheta, pos, neg)
    return np.concatenate([[y], ids]), np.concatenate([[g_pos], g_neg])


def snm_loss(cfg: SnmConfig, phi: PhiSpec, v, y: int, rng: np.random.Generator):
    """Draw a sample and return ``(loss, sample)``.

    ``v`` only needs ``len`` and integer-array indexing, so a lazy score
    provider works; only ``y`` and the sampled ids are read.
    """
    if isinstance(v, (list, tuple)):
        v = np.asarray(v, dtype=float)
    sample = snm_sample(cfg, len(v), y, rng)
    return sampled_loss(cfg, phi, v, y, sample), sample


def snm_grad(cfg: SnmConfig, phi: PhiSpec, v, y: int, rng: np.random.Generator):
    """Draw a sample and return the sparse gradient ``(class_ids, values)``.

    Only the positive and the ``active`` highest-ranked sampled classes carry
    entries.
    """
    if isinstance(v, (list, tuple)):
        v = np.asarray(v, dtype=float)
    sample = snm_sample(cfg, len(v), y, rng)
    return sampled_grad(cfg, phi, v, y, sample)


def induced_theta(cfg: SnmConfig, K: int) -> np.ndarray:
    """Weights of the ordered weighted loss that the estimator is unbiased for.

    ``theta_j = B/(K-1) * sum_i vartheta_i * P(rank-j negative is i-th in the
    sample | it was sampled)``; the conditional probability is hypergeometric.
    Each ``i`` costs one vectorised pass over ``j`` using ratio updates in
    log space, so large ``K`` does not overflow.
    """
    cfg.check_K(K)
    B = cfg.B
    n_neg = K - 1
    theta = np.zeros(n_neg)
    # log P(slot i | j = i) = log C(n-i, B-i) / C(n-1, B-1) = sum_{t<i} log((B-t)/(n-t))
    t = np.arange(1, B, dtype=float)
    log_start = np.concatenate([[0.0], np.cumsum(np.log((B - t) / (n_neg - t)))])
    span = n_neg - B + 1  # number of ranks j at which slot i is reachable
    steps = np.arange(span - 1, dtype=float)
    for i in range(1, B + 1):
        w = cfg.vartheta[i - 1]
        if w == 0.0:
            continue
        j = i + steps  # 1-based ranks j -> j+1
        # log(j / (j-i+1)) + log((n-j-B+i) / (n-j)), written with log1p to avoid cancellation
        log_ratio = np.log1p((i - 1) / (j - i + 1)) + np.log1p((i - B) / (n_neg - j))
        logp = log_start[i - 1] + np.concatenate([[0.0], np.cumsum(log_ratio)])
        theta[i - 1 : i - 1 + span] += w * np.exp(logp)
    return theta * (B / n_neg)


def _all_samples(cfg: SnmConfig, K: int, y: int) -> np.ndarray:
    cfg.check_K(K)
    n = math.comb(K - 1, cfg.B)
    if n > MAX_ENUMERATION:
        raise CapacityError(f"C({K - 1}, {cfg.B}) = {n} subsets exceeds {MAX_ENUMERATION}")
    neg = [c for c in range(K) if c != y]
    flat = np.fromiter(itertools.chain.from_iterable(itertools.combinations(neg, cfg.B)), dtype=np.int64, count=n * cfg.B)
    return flat.reshape(n, cfg.B)


def exact_expected_loss(cfg: SnmConfig, phi: PhiSpec, v, y: int) -> float:
    """Mean of the estimator over every size-``B`` negative subset."""
    v = np.asarray(v, dtype=float)
    samples = _all_samples(cfg, len(v), y)
    return math.fsum(sampled_loss(cfg, phi, v, y, s) for s in samples) / len(samples)


def exact_expected_grad(cfg: SnmConfig, phi: PhiSpec, v, y: int) -> np.ndarray:
    """Mean of the sampled gradient over every size-``B`` negative subset, dense."""
    v = np.asarray(v, dtype=float)
    samples = _all_samples(cfg, len(v), y)
    total = np.zeros(len(v))
    for s in samples:
        ids, vals = sampled_grad(cfg, phi, v, y, s)
        np.add.at(total, ids, vals)
    return total / len(samples)


def theta_l2_bound(cfg: SnmConfig, K: int) -> float:
    """Upper bound ``sqrt(B * vartheta_1 * ||vartheta||_1 / (K-1))`` on ``||theta||_2``."""
    w = cfg.vartheta
    return math.sqrt(cfg.B * w[0] * w.sum() / (K - 1))


def sample_batch(cfg: SnmConfig, K: int, ys: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One independent negative sample per positive in ``ys``, shape ``(len(ys), B)``."""
    cfg.check_K(K)
    return np.stack([sample_without(K, cfg.B, int(y), rng) for y in ys]) if len(ys) else np.empty((0, cfg.B), np.int64)


def batch_loss_grad(cfg: SnmConfig, phi: PhiSpec, pos: np.ndarray, neg_ids: np.ndarray, neg_scores: np.ndarray):
    """Row-wise estimator values and score gradients.

    ``pos`` has shape ``(b,)``; ``neg_ids`` and ``neg_scores`` have shape
    ``(b, B)``.  Returns ``(loss (b,), d_pos (b,), d_neg (b, B))`` with
    ``d_neg`` aligned to the input column order.
    """
    b = len(pos)
    m = cfg.active
    order = np.lexsort((neg_ids, -neg_scores), axis=1)[:, :m]
    ranked = np.take_along_axis(neg_scores, order, axis=1)
    w = cfg.vartheta[:m]
    d_neg = np.zeros_like(neg_scores, dtype=float)
    if cfg.kind is LossKind.POWL:
        margins = pos[:, None] - ranked
        loss = phi_eval(phi, margins) @ w if m else np.zeros(b)
        g = phi_grad(phi, margins) * w
        d_pos = g.sum(axis=1)
        np.put_along_axis(d_neg, order, -g, axis=1)
    else:
        loss = phi_eval(phi, pos) + (phi_eval(phi, -ranked) @ w if m else 0.0)
        g = phi_grad(phi, -ranked) * w
        d_pos = np.asarray(phi_grad(phi, pos), dtype=float)
        np.put_along_axis(d_neg, order, -g, axis=1)
    return np.asarray(loss, dtype=float), d_pos, d_neg
