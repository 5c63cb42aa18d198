import itertools
import math

import numpy as np
import pytest

from owlsnm.calibration import (
    ConvergenceError,
    PreconditionError,
    bayes_risk,
    bayes_top_k,
    calibration_sweep,
    check_condition3,
    default_theta,
    minimize_psi,
    order_violated,
    psi,
    random_alpha,
)
from owlsnm.owl import eval_owl
from owlsnm.phi import PhiSpec

LOGISTIC = PhiSpec("logistic")


def logistic(u):
    return np.logaddexp(0.0, -u) / math.log(2)


def grid_psi(kind, theta, alpha, V):
    """Psi on a batch of score rows ``V`` (n, K), written independently of the library."""
    n, K = V.shape
    total = np.zeros(n)
    for y in range(K):
        if alpha[y] == 0:
            continue
        neg = -np.sort(-np.delete(V, y, axis=1), axis=1)  # descending
        if kind == "powl":
            loss = logistic(V[:, y : y + 1] - neg) @ theta
        else:
            loss = logistic(V[:, y]) + logistic(-neg) @ theta
        total += alpha[y] * loss
    return total


def grid(K_free, lo=-5.0, hi=5.0, step=0.05):
    axis = np.arange(lo, hi + step / 2, step)
    return np.stack(np.meshgrid(*([axis] * K_free), indexing="ij"), axis=-1).reshape(-1, K_free)


# class ids are 0-based
def test_bayes_top_k():
    assert bayes_top_k([0.5, 0.3, 0.2], 1).tolist() == [0]
    assert sorted(bayes_top_k([0.5, 0.3, 0.2], 2).tolist()) == [0, 1]
    with pytest.raises(PreconditionError):
        bayes_top_k([0.4, 0.4, 0.2], 1)
    with pytest.raises(PreconditionError):
        bayes_top_k([0.5, 0.6, 0.2], 1)


def test_bayes_risk_is_minimal_over_all_sets(rng):
    for _ in range(50):
        K = int(rng.integers(3, 8))
        k = int(rng.integers(1, K))
        a = random_alpha(K, k, rng)
        brute = min(bayes_risk(a, S) for S in itertools.combinations(range(K), k))
        assert bayes_risk(a, bayes_top_k(a, k)) == pytest.approx(brute, abs=1e-15)


def test_psi_examples(rng):
    v = rng.normal(size=5)
    th = np.sort(rng.random(4))[::-1]
    assert psi("bowl", LOGISTIC, th, np.eye(5)[0], v) == pytest.approx(eval_owl("bowl", LOGISTIC, th, v, 0))
    assert psi("powl", LOGISTIC, np.zeros(4), rng.dirichlet(np.ones(5)), v) == 0.0
    for kind in ("powl", "bowl"):
        a = rng.dirichlet(np.ones(5))
        assert psi(kind, LOGISTIC, th, a, v) == pytest.approx(grid_psi(kind, th, a, v[None, :])[0], abs=1e-12)


def test_condition3_examples(rng):
    assert check_condition3([0.5, 0.3, 0.2], [1, 1], 1) is True
    assert check_condition3([0.4, 0.35, 0.25], [1, 0], 1) is False
    # a zero weight sum facing a zero tail is fine
    assert check_condition3([0.5, 0.5, 0, 0], [0.5, 0.5, 0], 2) is True
    for _ in range(2000):
        K = int(rng.integers(3, 9))
        k = int(rng.integers(1, K))
        assert check_condition3(random_alpha(K, k, rng), default_theta(K, k), k)


def test_minimizer_matches_grid_search_k3():
    a = np.array([0.6, 0.3, 0.1])
    th = np.array([1.0, 1.0])
    G = grid(3)
    for kind in ("powl", "bowl"):
        v = minimize_psi(kind, LOGISTIC, th, a)
        g = G[np.argmin(grid_psi(kind, th, a, G))]
        assert int(np.argmax(v)) == int(np.argmax(g)) == 0


def test_minimizer_uniform_top_classes_matches_grid():
    a = np.array([0.5, 0.5, 0.0, 0.0])
    th = np.array([0.5, 0.5, 0.0])
    v = minimize_psi("powl", LOGISTIC, th, a)
    # POWL only sees score differences, so pin v_0 = 0 and search the rest
    G = grid(3, step=0.1)
    G = np.hstack([np.zeros((len(G), 1)), G])
    g = G[np.argmin(grid_psi("powl", th, a, G))]
    expected = sorted(bayes_top_k(a, 2).tolist())
    assert sorted(np.argsort(-v)[:2].tolist()) == expected
    assert sorted(np.argsort(-g)[:2].tolist()) == expected


def test_point_mass():
    for kind in ("powl", "bowl"):
        v = minimize_psi(kind, LOGISTIC, [1, 1, 1], [1.0, 0, 0, 0])
        assert int(np.argmax(v)) == 0


def test_convergence_error_carries_best_iterate():
    with pytest.raises(ConvergenceError) as exc:
        minimize_psi("powl", LOGISTIC, [0.5, 0.5, 0.5, 0.5], [0.4, 0.3, 0.2, 0.05, 0.05], max_iters=2)
    assert exc.value.best.shape == (5,) and exc.value.grad_norm > 0


def test_psi_is_midpoint_convex(rng):
    for _ in range(300):
        K = int(rng.integers(3, 7))
        a = rng.dirichlet(np.ones(K))
        th = np.sort(rng.random(K - 1))[::-1]
        u, w = rng.normal(size=(2, K)) * 2
        for kind in ("powl", "bowl"):
            mid = psi(kind, LOGISTIC, th, a, (u + w) / 2)
            assert mid <= 0.5 * (psi(kind, LOGISTIC, th, a, u) + psi(kind, LOGISTIC, th, a, w)) + 1e-9


def test_sweep_bookkeeping_and_order():
    rng = np.random.default_rng(4)
    th = np.array([0.5, 0.5, 0.05, 0.0])
    rep = calibration_sweep("powl", LOGISTIC, th, 2, 15, rng, K=5)
    assert rep.trials == rep.condition_holds == 15
    assert rep.agreements + rep.disagreements == 15
    assert rep.excluded > 0  # this theta cannot cover heavy tails
    assert rep.order_violations == 0
    assert set(rep.as_dict()) >= {"trials", "condition_holds", "agreements", "disagreements"}


def test_order_violated():
    assert order_violated([0.6, 0.4], [0.0, 1.0])
    assert not order_violated([0.6, 0.4], [1.0, 0.0])
