import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from owlsnm.phi import PhiDomainError, PhiSpec, phi_eval, phi_grad

finite = st.floats(-30, 30, allow_nan=False)


@pytest.mark.parametrize(
    "spec, u, expected",
    [
        (PhiSpec("hinge"), 0.0, 1.0),
        (PhiSpec("logistic"), 0.0, 1.0),
        (PhiSpec("ramp", 0.5), 0.25, 0.5),
        (PhiSpec("squared_hinge"), 0.0, 1.0),
        (PhiSpec("exponential"), 0.0, 1.0),
        (PhiSpec("hinge"), 3.0, 0.0),
        (PhiSpec("ramp", 0.5), -1.0, 1.0),
        (PhiSpec("ramp", 0.5), 0.6, 0.0),
    ],
)
def test_values(spec, u, expected):
    assert phi_eval(spec, u) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize(
    "spec, u, expected",
    [
        (PhiSpec("logistic"), 0.0, -1 / (2 * math.log(2))),
        (PhiSpec("hinge"), 2.0, 0.0),
        (PhiSpec("exponential"), 0.0, -1.0),
        (PhiSpec("hinge"), 1.0, -1.0),  # left derivative at the kink
        (PhiSpec("squared_hinge"), 0.0, -2.0),
        (PhiSpec("ramp", 0.5), 0.25, -2.0),
        (PhiSpec("ramp", 0.5), 0.0, 0.0),
    ],
)
def test_grads(spec, u, expected):
    assert phi_grad(spec, u) == pytest.approx(expected, abs=1e-12)


def test_logistic_grad_value_matches_hand_derivative():
    # d/du log2(1 + e^-u) = -1 / ((1 + e^u) ln 2)
    assert phi_grad(PhiSpec("logistic"), 0.0) == pytest.approx(-0.7213475204444817, abs=1e-15)


def test_vectorised_shape():
    u = np.linspace(-2, 2, 7)
    assert phi_eval(PhiSpec("hinge"), u).shape == (7,)
    assert isinstance(phi_eval(PhiSpec("hinge"), 0.5), float)


def test_logistic_is_stable_for_large_arguments():
    spec = PhiSpec("logistic")
    assert phi_eval(spec, 1000.0) == pytest.approx(0.0, abs=1e-300)
    assert phi_eval(spec, -1000.0) == pytest.approx(1000 / math.log(2))
    assert phi_grad(spec, -1000.0) == pytest.approx(-1 / math.log(2))


def test_invalid_specs():
    with pytest.raises(ValueError):
        PhiSpec("cubic")
    with pytest.raises(ValueError):
        PhiSpec("ramp")
    with pytest.raises(ValueError):
        PhiSpec("ramp", 0.0)
    with pytest.raises(PhiDomainError):
        phi_eval(PhiSpec("hinge"), float("nan"))


def test_parse_round_trip():
    for text in ["hinge", "logistic", "squared_hinge", "exponential", "ramp rho=0.5"]:
        assert PhiSpec.parse(str(PhiSpec.parse(text))) == PhiSpec.parse(text)
    assert PhiSpec.parse("squared-hinge").variant == "squared_hinge"


@given(finite, finite)
def test_convex_variants_are_non_increasing_and_non_negative(a, b):
    lo, hi = min(a, b), max(a, b)
    for name in ["hinge", "logistic", "squared_hinge"]:
        spec = PhiSpec(name)
        assert phi_eval(spec, lo) >= phi_eval(spec, hi) >= 0


@given(st.floats(-5, 5), st.floats(-5, 5))
def test_convex_variants_midpoint(a, b):
    for name in ["hinge", "logistic", "squared_hinge", "exponential"]:
        spec = PhiSpec(name)
        mid = phi_eval(spec, (a + b) / 2)
        assert mid <= 0.5 * (phi_eval(spec, a) + phi_eval(spec, b)) + 1e-9


@given(st.floats(-5, 5), st.floats(0.01, 3))
def test_ramp_sandwich(u, rho):
    r = phi_eval(PhiSpec("ramp", rho), u)
    assert float(u <= 0) <= r <= float(u <= rho)


@given(st.floats(-4, 4))
def test_grad_matches_central_difference_away_from_kinks(u):
    for spec in [PhiSpec("logistic"), PhiSpec("exponential"), PhiSpec("hinge"), PhiSpec("squared_hinge")]:
        if abs(u - 1) < 1e-3:
            continue
        h = 1e-6
        fd = (phi_eval(spec, u + h) - phi_eval(spec, u - h)) / (2 * h)
        assert phi_grad(spec, u) == pytest.approx(fd, rel=1e-5, abs=1e-6)
