"""Small-K probes of calibration.

Minimise the conditional risk ``Psi(alpha, v) = sum_i alpha_i * loss(v, i)``
over a box of score vectors and compare the minimiser's top-k set with the
Bayes set ``Top_k(alpha)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from owlsnm.owl import LossKind, eval_owl, grad_owl
from owlsnm.phi import PhiSpec
from owlsnm.retrieval import top_k

UNIQUENESS_GAP = 1e-2


class PreconditionError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, msg: str, best: np.ndarray, grad_norm: float):
        super().__init__(msg)
        self.best = best
        self.grad_norm = grad_norm


def validate_alpha(alpha, k: int, gap: float = 0.0) -> np.ndarray:
    """Check ``alpha`` is a distribution whose k-th and (k+1)-th values differ by more than ``gap``."""
    a = np.asarray(alpha, dtype=float)
    if np.any(a < 0) or abs(a.sum() - 1.0) > 1e-12:
        raise PreconditionError("alpha must be a probability vector")
    if not 1 <= k < len(a):
        raise PreconditionError(f"k = {k} must lie in [1, {len(a) - 1}]")
    s = np.sort(a)[::-1]
    if not s[k - 1] - s[k] > gap:
        raise PreconditionError(f"alpha ties at rank {k}; the Bayes set is not unique")
    return a


def bayes_top_k(alpha, k: int) -> np.ndarray:
    validate_alpha(alpha, k)
    return top_k(alpha, k)


def bayes_risk(alpha, S) -> float:
    """Expected 0/1 retrieval loss of predicting the set ``S``."""
    a = np.asarray(alpha, dtype=float)
    return float(1.0 - a[np.asarray(list(S), dtype=np.int64)].sum())


def default_theta(K: int, k: int) -> np.ndarray:
    return np.full(K - 1, 1.0 / k)


def psi(kind, phi: PhiSpec, theta, alpha, v) -> float:
    a = np.asarray(alpha, dtype=float)
    if len(a) != len(v):
        raise ValueError("alpha and v differ in length")
    return math.fsum(a[i] * eval_owl(kind, phi, theta, v, i) for i in range(len(a)) if a[i] != 0)


def psi_grad(kind, phi: PhiSpec, theta, alpha, v) -> np.ndarray:
    a = np.asarray(alpha, dtype=float)
    g = np.zeros(len(v))
    for i in np.flatnonzero(a):
        g += a[i] * grad_owl(kind, phi, theta, v, i)
    return g


def check_condition3(alpha, theta, k: int) -> bool:
    """Tail condition under which the ordered weighted losses are calibrated.

    For every ``m`` with ``k < m <= K-1``:
    ``alpha_[k] > sum_{l=k+1}^m alpha_[l] / (k * sum_{j=k+1}^m theta_j)``.
    A zero weight sum facing a positive tail mass makes the condition fail.
    """
    a = np.sort(np.asarray(alpha, dtype=float))[::-1]
    th = np.asarray(theta, dtype=float)
    K = len(a)
    if len(th) != K - 1:
        raise ValueError(f"theta has length {len(th)}, expected {K - 1}")
    tail = np.cumsum(a[k:K - 1])  # sum_{l=k+1}^{m} alpha_[l], m = k+1 .. K-1
    wsum = np.cumsum(th[k:K - 1])  # sum_{j=k+1}^{m} theta_j
    for num, den in zip(tail, wsum):
        if den > 0:
            if not a[k - 1] > num / (k * den):
                return False
        elif num > 0:
            return False
    return True


def _projected_residual(v, g, R):
    return v - np.clip(v - g, -R, R)


def minimize_psi(
    kind,
    phi: PhiSpec,
    theta,
    alpha,
    grad_tol: float = 1e-8,
    max_iters: int = 200_000,
    R: float = 50.0,
) -> np.ndarray:
    """Projected gradient descent with backtracking from ``v = 0`` on ``[-R, R]^K``.

    Stops when the projected-gradient residual drops to ``grad_tol`` in the
    max-norm (on interior points that is the plain gradient).  The first
    trial step each iteration is a Barzilai-Borwein estimate.
    """
    kind = LossKind.coerce(kind)
    a = np.asarray(alpha, dtype=float)
    theta = np.asarray(theta, dtype=float)
    v = np.zeros(len(a))
    f = psi(kind, phi, theta, a, v)
    g = psi_grad(kind, phi, theta, a, v)
    t = 1.0
    best, best_res = v.copy(), np.inf
    prev_v = prev_g = None
    for _ in range(max_iters):
        res = np.abs(_projected_residual(v, g, R)).max()
        if res < best_res:
            best, best_res = v.copy(), res
        if res <= grad_tol:
            return v
        if prev_v is not None:
            s, yv = v - prev_v, g - prev_g
            sy = float(s @ yv)
            if sy > 0:
                t = float(s @ s) / sy
        while True:
            nv = np.clip(v - t * g, -R, R)
            d = nv - v
            nf = psi(kind, phi, theta, a, nv)
            if nf <= f + g @ d + (d @ d) / (2 * t) or t < 1e-20:
                break
            t *= 0.5
        if not np.any(d):
            break
        prev_v, prev_g = v, g
        v, f = nv, nf
        g = psi_grad(kind, phi, theta, a, v)
    raise ConvergenceError(f"no convergence to {grad_tol} (best residual {best_res:.3g})", best, best_res)


def random_alpha(K: int, k: int, rng: np.random.Generator, gap: float = UNIQUENESS_GAP) -> np.ndarray:
    """Dirichlet(1) draw, rejected until ``alpha_[k] - alpha_[k+1] >= gap``."""
    while True:
        a = rng.dirichlet(np.ones(K))
        a /= a.sum()
        s = np.sort(a)[::-1]
        if s[k - 1] - s[k] >= gap and abs(a.sum() - 1.0) <= 1e-12:
            return a


@dataclass
class SweepReport:
    trials: int = 0
    condition_holds: int = 0
    agreements: int = 0
    disagreements: int = 0
    excluded: int = 0
    resolved_at_tight_tol: int = 0
    order_violations: int = 0
    unconverged: int = 0
    failures: list = field(default_factory=list)

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        d["failures"] = [f.tolist() for f in self.failures]
        return d


def calibration_sweep(
    kind,
    phi: PhiSpec,
    theta,
    k: int,
    n_trials: int,
    rng: np.random.Generator,
    K: int = 5,
    grad_tol: float = 1e-8,
    tight_tol: float = 1e-10,
) -> SweepReport:
    """Fraction of random class-conditionals whose risk minimiser is Bayes compatible.

    Draws failing the tail condition are redrawn and counted in ``excluded``.
    Disagreements are retried at ``tight_tol``.  ``theta=None`` means the
    default all-``1/k`` weights.

    Non-constant ``theta`` makes Psi non-smooth where negatives tie, and the
    optimum can sit on such a tie, so no gradient test certifies it.  Those
    runs use the best iterate and are counted in ``unconverged``.
    """
    if K > 8:
        raise ValueError("the sweep is meant for K <= 8")
    theta = default_theta(K, k) if theta is None else np.asarray(theta, dtype=float)
    rep = SweepReport()
    while rep.trials < n_trials:
        a = random_alpha(K, k, rng)
        if not check_condition3(a, theta, k):
            rep.excluded += 1
            continue
        rep.trials += 1
        rep.condition_holds += 1
        bayes = set(bayes_top_k(a, k).tolist())
        v = _minimize_or_best(rep, kind, phi, theta, a, grad_tol)
        if order_violated(a, v):
            rep.order_violations += 1
        if set(top_k(v, k).tolist()) == bayes:
            rep.agreements += 1
            continue
        rep.disagreements += 1
        rep.failures.append(a)
        v2 = _minimize_or_best(rep, kind, phi, theta, a, tight_tol)
        if set(top_k(v2, k).tolist()) == bayes:
            rep.resolved_at_tight_tol += 1
    return rep


def _minimize_or_best(rep: SweepReport, kind, phi, theta, alpha, tol) -> np.ndarray:
    try:
        return minimize_psi(kind, phi, theta, alpha, grad_tol=tol)
    except ConvergenceError as exc:
        rep.unconverged += 1
        return exc.best


def order_violated(alpha, v, margin: float = 1e-3, slack: float = 1e-6) -> bool:
    """True if some ``alpha_i > alpha_j + margin`` has ``v_i < v_j - slack``."""
    a = np.asarray(alpha)
    v = np.asarray(v)
    more = a[:, None] > a[None, :] + margin
    lower = v[:, None] < v[None, :] - slack
    return bool(np.any(more & lower))
