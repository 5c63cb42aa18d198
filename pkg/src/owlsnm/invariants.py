"""Randomised property checks against exact or brute-force oracles.

Each check returns a :class:`CheckResult`; ``verify-invariants`` runs them
at small sizes and the acceptance tests at full size.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from owlsnm import calibration
from owlsnm.model import backward, init_model, forward_inputs, score_all
from owlsnm.owl import LossKind, eval_owl, grad_owl
from owlsnm.phi import CONVEX_VARIANTS, PhiSpec, phi_eval
from owlsnm.retrieval import margin, margin_risk, retrieval_loss, top_k
from owlsnm.snm import (
    SnmConfig,
    batch_loss_grad,
    exact_expected_grad,
    exact_expected_loss,
    induced_theta,
    theta_l2_bound,
    make_topk_vartheta,
    snm_sample,
)

KINDS = (LossKind.POWL, LossKind.BOWL)


@dataclass
class CheckResult:
    name: str
    checked: int
    violations: int
    worst: float = 0.0
    seconds: float = 0.0
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def as_dict(self) -> dict:
        return {
            "check": self.name,
            "passed": bool(self.passed),
            "checked": int(self.checked),
            "violations": int(self.violations),
            "worst": float(self.worst),
            "seconds": round(self.seconds, 3),
            "detail": self.detail,
        }


def _timed(fn: Callable[..., CheckResult]):
    def wrapper(*a, **kw):
        t0 = time.perf_counter()
        res = fn(*a, **kw)
        res.seconds = time.perf_counter() - t0
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def random_vartheta(rng, B: int, positive: bool = False) -> np.ndarray:
    w = np.sort(rng.random(B))[::-1]
    if not positive and rng.random() < 0.3:
        w[rng.integers(1, B + 1):] = 0.0
    return w


def distinct_scores(rng, K: int, min_gap: float = 0.0, scale: float = 1.0) -> np.ndarray:
    while True:
        v = rng.normal(size=K) * scale
        if min_gap <= 0 or np.min(np.diff(np.sort(v))) > min_gap:
            return v


@_timed
def snm_unbiasedness(rng, Ks=range(4, 11), per: int = 20, tol: float = 1e-12) -> CheckResult:
    """Enumerated expectation of the estimator equals the OWL with induced weights."""
    n = bad = 0
    worst = 0.0
    for K in Ks:
        for B in range(1, K):
            for _ in range(per):
                for kind in KINDS:
                    cfg = SnmConfig(B, random_vartheta(rng, B), kind, 1)
                    phi = PhiSpec(CONVEX_VARIANTS[rng.integers(len(CONVEX_VARIANTS))])
                    v = distinct_scores(rng, K)
                    y = int(rng.integers(K))
                    err = abs(exact_expected_loss(cfg, phi, v, y) - eval_owl(kind, phi, induced_theta(cfg, K), v, y))
                    worst = max(worst, err)
                    n += 1
                    bad += err > tol
    return CheckResult("snm_unbiasedness", n, bad, worst, detail=f"tol={tol}")


@_timed
def snm_monte_carlo(rng, K: int = 8, B: int = 3, k: int = 2, draws: int = 10**6, z_max: float = 4.0) -> CheckResult:
    """Empirical mean of sampled losses sits within ``z_max`` standard errors of the exact mean."""
    n = bad = 0
    worst = 0.0
    for kind in KINDS:
        cfg = SnmConfig(B, make_topk_vartheta(K, B, k), kind, k)
        phi = PhiSpec("logistic")
        v = distinct_scores(rng, K)
        y = int(rng.integers(K))
        samples = np.stack([snm_sample(cfg, K, y, rng) for _ in range(draws)])
        losses, _, _ = batch_loss_grad(cfg, phi, np.full(draws, v[y]), samples, v[samples])
        exact = exact_expected_loss(cfg, phi, v, y)
        se = losses.std(ddof=1) / math.sqrt(draws)
        z = abs(losses.mean() - exact) / se if se > 0 else 0.0
        worst = max(worst, z)
        n += 1
        bad += z > z_max
    return CheckResult("snm_monte_carlo", n, bad, worst, detail=f"draws={draws} z_max={z_max}")


@_timed
def theta_structure(rng, Ks=range(4, 11), per: int = 20, tol: float = 1e-12) -> CheckResult:
    """Monotone, positive, norm-preserving induced weights; top-k prefix equals 1/k."""
    n = bad = 0
    worst = 0.0
    for K in Ks:
        for B in range(1, K):
            cases = [SnmConfig(B, random_vartheta(rng, B, positive=True)) for _ in range(per)]
            cases += [SnmConfig(B, make_topk_vartheta(K, B, k), k=k) for k in range(1, B + 1)]
            for cfg in cases:
                th = induced_theta(cfg, K)
                w = cfg.vartheta
                errs = [
                    max(np.max(np.diff(th)), 0.0),
                    abs(th.sum() - w.sum()),
                    max(np.linalg.norm(th) - theta_l2_bound(cfg, K), 0.0),
                ]
                if np.all(w > 0):
                    errs.append(0.0 if np.all(th > 0) else 1.0)
                if np.count_nonzero(w) == cfg.k and np.allclose(w[: cfg.k], (K - 1) / (cfg.k * B), rtol=0, atol=1e-15):
                    errs.append(np.max(np.abs(th[: cfg.k] - 1.0 / cfg.k)))
                e = max(errs)
                worst = max(worst, e)
                n += 1
                bad += e > tol
    return CheckResult("theta_structure", n, bad, worst, detail=f"tol={tol}")


def _surrogate_theta(rng, K: int, k: int) -> np.ndarray:
    th = np.full(K - 1, 1.0 / k)
    th[k:] = rng.random(K - 1 - k) * rng.choice([0.0, 1.0 / k, 1.0])
    return th


@_timed
def surrogate_bounds(rng, n: int = 10**5, tol: float = 1e-12) -> CheckResult:
    """POWL >= 1{y not in Top_k}; BOWL with hinge or logistic >= 2 * 1{y not in Top_k}.

    ``tol`` absorbs rounding in sums such as ``3 * (1/3)``; nothing else.
    """
    bad = 0
    worst = 0.0
    all_phis = [PhiSpec(v) for v in CONVEX_VARIANTS] + [PhiSpec("ramp", 0.5)]
    for _ in range(n):
        K = int(rng.integers(3, 21))
        k = int(rng.integers(1, K))
        th = _surrogate_theta(rng, K, k)
        v = rng.normal(size=K) * rng.choice([0.1, 1.0, 5.0])
        y = int(rng.integers(K))
        miss = retrieval_loss(top_k(v, k), y)
        gaps = [
            eval_owl("powl", all_phis[rng.integers(len(all_phis))], th, v, y) - miss,
            eval_owl("bowl", PhiSpec("hinge"), th, v, y) - 2 * miss,
            eval_owl("bowl", PhiSpec("logistic"), th, v, y) - 2 * miss,
        ]
        g = min(gaps)
        worst = min(worst, g)
        bad += g < -tol
    return CheckResult("surrogate_bounds", n, bad, worst, detail=f"worst = most negative slack, tol={tol}")


@_timed
def convexity(rng, n: int = 10**4, tol: float = 1e-9, phis=CONVEX_VARIANTS) -> CheckResult:
    """Midpoint convexity in the score vector for non-increasing weights and convex phi."""
    checked = bad = 0
    worst = 0.0
    for kind in KINDS:
        for name in phis:
            phi = PhiSpec(name)
            for _ in range(n):
                K = int(rng.integers(3, 11))
                th = np.sort(rng.random(K - 1) * rng.choice([1.0, 3.0]))[::-1]
                if rng.random() < 0.3:
                    th[rng.integers(1, K):] = 0.0
                u, v = rng.normal(size=(2, K)) * 1.5
                y = int(rng.integers(K))
                mid = eval_owl(kind, phi, th, (u + v) / 2, y)
                avg = 0.5 * (eval_owl(kind, phi, th, u, y) + eval_owl(kind, phi, th, v, y))
                excess = mid - avg
                worst = max(worst, excess)
                checked += 1
                bad += excess > tol
    return CheckResult("convexity", checked, bad, worst, detail=f"tol={tol}")


def _rel_err(num: np.ndarray, ana: np.ndarray) -> float:
    scale = max(np.max(np.abs(ana)), np.max(np.abs(num)), 1e-8)
    return float(np.max(np.abs(num - ana)) / scale)


def _fd(f, x: np.ndarray, h: float) -> np.ndarray:
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@_timed
def grad_owl_fd(rng, n: int = 100, rtol: float = 1e-4, h: float = 1e-6) -> CheckResult:
    """Loss subgradient against central differences (logistic phi, well-separated scores)."""
    bad = 0
    worst = 0.0
    phi = PhiSpec("logistic")
    for i in range(n):
        kind = KINDS[i % 2]
        K = int(rng.integers(3, 11))
        v = distinct_scores(rng, K, min_gap=1e-3)
        th = np.sort(rng.random(K - 1))[::-1]
        y = int(rng.integers(K))
        err = _rel_err(_fd(lambda z: eval_owl(kind, phi, th, z, y), v, h), grad_owl(kind, phi, th, v, y))
        worst = max(worst, err)
        bad += err > rtol
    return CheckResult("grad_owl_fd", n, bad, worst, detail=f"rtol={rtol}")


@_timed
def snm_grad_fd(rng, n: int = 100, rtol: float = 1e-4, h: float = 1e-6) -> CheckResult:
    """Mean sampled gradient over all subsets against differences of the exact expected loss."""
    bad = 0
    worst = 0.0
    phi = PhiSpec("logistic")
    for i in range(n):
        kind = KINDS[i % 2]
        K = int(rng.integers(3, 8))
        B = int(rng.integers(1, K))
        cfg = SnmConfig(B, random_vartheta(rng, B), kind, 1)
        v = distinct_scores(rng, K, min_gap=1e-3)
        y = int(rng.integers(K))
        num = _fd(lambda z: exact_expected_loss(cfg, phi, z, y), v, h)
        err = _rel_err(num, exact_expected_grad(cfg, phi, v, y))
        worst = max(worst, err)
        bad += err > rtol
    return CheckResult("snm_grad_fd", n, bad, worst, detail=f"rtol={rtol}")


@_timed
def model_backward_fd(rng, n: int = 100, rtol: float = 1e-4, h: float = 1e-5, d: int = 7, e: int = 5, K: int = 9) -> CheckResult:
    """Backpropagated parameter gradients against central differences on every parameter."""
    bad = 0
    worst = 0.0
    phi = PhiSpec("logistic")
    done = 0
    while done < n:
        m = init_model(d, e, K, seed=int(rng.integers(2**31)))
        nnz = int(rng.integers(1, d + 1))
        x = (np.sort(rng.choice(d, nnz, replace=False)), rng.normal(size=nnz))
        cache = forward_inputs(m, x)
        v = score_all(m, x)
        if np.min(np.abs(cache.H)) < 1e-3 or np.min(np.diff(np.sort(v))) < 1e-4:
            continue  # too close to a ReLU kink or a rank swap
        done += 1
        kind = KINDS[done % 2]
        th = np.sort(rng.random(K - 1))[::-1]
        y = int(rng.integers(K))
        G = backward(m, x, np.arange(K), grad_owl(kind, phi, th, v, y))
        ana = np.concatenate([g.ravel() for g in G.dense(m)])
        num = []
        for M in m.params():
            flat = M.reshape(-1)
            for j in range(flat.size):
                o = flat[j]
                flat[j] = o + h
                a = eval_owl(kind, phi, th, score_all(m, x), y)
                flat[j] = o - h
                b = eval_owl(kind, phi, th, score_all(m, x), y)
                flat[j] = o
                num.append((a - b) / (2 * h))
        err = _rel_err(np.array(num), ana)
        worst = max(worst, err)
        bad += err > rtol
    return CheckResult("model_backward_fd", n, bad, worst, detail=f"rtol={rtol}")


@_timed
def ramp_sandwich(rng, n: int = 10**5) -> CheckResult:
    """``1{u <= 0} <= ramp_rho(u) <= 1{u <= rho}`` on random points and margins."""
    u = rng.normal(size=n) * rng.choice([0.1, 1.0, 10.0], size=n)
    rho = rng.exponential(1.0, size=n) + 1e-9
    vals = np.array([phi_eval(PhiSpec("ramp", float(r)), float(x)) for x, r in zip(u[:1000], rho[:1000])])
    # bulk of the points through the vectorised path, one rho per block
    bad = int(np.sum(vals < (u[:1000] <= 0)) + np.sum(vals > (u[:1000] <= rho[:1000])))
    for r in np.unique(np.round(rho[1000:], 2)):
        r = max(float(r), 1e-3)
        block = u[1000:][np.round(rho[1000:], 2) == np.round(r, 2)]
        vb = phi_eval(PhiSpec("ramp", r), block)
        bad += int(np.sum(vb < (block <= 0)) + np.sum(vb > (block <= r)))
    return CheckResult("ramp_sandwich", n, bad)


@_timed
def margin_accounting(rng, n: int = 2000) -> CheckResult:
    """Ties at rank k count as errors; margin risk at rho=0 equals the retrieval error without ties."""
    bad = 0
    # tie fixtures: the positive shares the k-th score
    for _ in range(200):
        K = int(rng.integers(3, 12))
        k = int(rng.integers(1, K))
        v = rng.normal(size=K)
        y = int(rng.integers(K))
        kth = top_k(np.delete(v, y), k)[-1]
        v[y] = np.delete(v, y)[kth]
        bad += not (margin(v, y, k) == 0 and margin_risk([v], [y], k, 0.0) == 1.0)
    scores, labels, losses = [], [], []
    for _ in range(n):
        K = int(rng.integers(2, 30))
        k = int(rng.integers(1, K))
        v = rng.normal(size=K)
        y = int(rng.integers(K))
        scores.append(v)
        labels.append(y)
        losses.append(retrieval_loss(top_k(v, k), y))
        bad += (margin(v, y, k) <= 0) != bool(losses[-1])
    return CheckResult("margin_accounting", n + 200, bad)


@_timed
def calibration_quick(rng, trials: int = 20) -> CheckResult:
    phi = PhiSpec("logistic")
    bad = 0
    for kind in KINDS:
        rep = calibration.calibration_sweep(kind, phi, None, 2, trials, rng, K=5)
        bad += rep.disagreements - rep.resolved_at_tight_tol
    return CheckResult("calibration_sweep", 2 * trials, bad)


SUITES = {
    "phi": [ramp_sandwich],
    "owl": [convexity, surrogate_bounds, grad_owl_fd],
    "snm": [snm_unbiasedness, theta_structure, snm_grad_fd, snm_monte_carlo],
    "retrieval": [margin_accounting],
    "model": [model_backward_fd],
    "calibration": [calibration_quick],
}

# sizes used by the CLI; the acceptance tests call the checks at full size
QUICK = {
    "snm_unbiasedness": dict(Ks=range(4, 9), per=3),
    "theta_structure": dict(per=5),
    "snm_grad_fd": dict(n=20),
    "snm_monte_carlo": dict(draws=20000),
    "convexity": dict(n=500),
    "surrogate_bounds": dict(n=5000),
    "grad_owl_fd": dict(n=50),
    "model_backward_fd": dict(n=10),
    "ramp_sandwich": dict(n=20000),
    "margin_accounting": dict(n=1000),
    "calibration_sweep": dict(trials=10),
}


def run_suite(name: str, seed: int) -> list[CheckResult]:
    names = list(SUITES) if name == "all" else [name]
    out = []
    for s in names:
        if s not in SUITES:
            raise ValueError(f"unknown suite {s!r}; choose from {['all', *SUITES]}")
        for check in SUITES[s]:
            rng = np.random.default_rng([seed, len(out)])
            res = check(rng, **QUICK.get(check.__name__, {}))
            out.append(res)
    return out
