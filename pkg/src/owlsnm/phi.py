"""Scalar surrogates for the 0/1 indicator ``1{u <= 0}``.

Every surrogate here is non-increasing and satisfies ``phi(u) >= 1`` for
``u <= 0``.  Functions accept Python scalars or numpy arrays and return the
same shape.  At kinks the derivative returned is the left derivative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

VARIANTS = ("hinge", "logistic", "squared_hinge", "exponential", "ramp")
CONVEX_VARIANTS = ("hinge", "logistic", "squared_hinge", "exponential")

_LN2 = math.log(2.0)


class PhiDomainError(ValueError):
    """Raised when a surrogate is evaluated at a non-finite point."""


@dataclass(frozen=True)
class PhiSpec:
    variant: str = "hinge"
    ramp_rho: Optional[float] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown phi variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant == "ramp":
            if self.ramp_rho is None or not (self.ramp_rho > 0) or not math.isfinite(self.ramp_rho):
                raise ValueError("ramp phi needs a finite rho > 0")
        elif self.ramp_rho is not None:
            raise ValueError(f"rho only applies to the ramp variant, not {self.variant!r}")

    @property
    def is_convex(self) -> bool:
        return self.variant in CONVEX_VARIANTS

    @property
    def lipschitz(self) -> float:
        """Lipschitz constant on the reals (infinite for unbounded slopes)."""
        return {
            "hinge": 1.0,
            "logistic": 1.0 / _LN2,
            "ramp": 1.0 / self.ramp_rho if self.ramp_rho else math.inf,
        }.get(self.variant, math.inf)

    @classmethod
    def parse(cls, text: str) -> "PhiSpec":
        """Parse ``"hinge"``, ``"ramp rho=0.5"`` or ``"phi=ramp rho=0.5"``."""
        variant = None
        rho = None
        for tok in text.replace(",", " ").split():
            if "=" in tok:
                key, val = tok.split("=", 1)
                if key == "phi":
                    variant = val
                elif key == "rho":
                    rho = float(val)
                else:
                    raise ValueError(f"unexpected key {key!r} in phi spec {text!r}")
            elif variant is None:
                variant = tok
            else:
                raise ValueError(f"cannot parse phi spec {text!r}")
        if variant is None:
            raise ValueError("empty phi spec")
        return cls(variant.replace("-", "_"), rho)

    def __str__(self) -> str:
        if self.variant == "ramp":
            return f"ramp rho={self.ramp_rho!r}"
        return self.variant


def _as_finite(u):
    arr = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise PhiDomainError("phi evaluated at a non-finite point")
    return arr


def _unwrap(out, u):
    return float(out) if np.ndim(u) == 0 else out


def phi_eval(spec: PhiSpec, u):
    """Value of the surrogate at ``u``."""
    x = _as_finite(u)
    v = spec.variant
    if v == "hinge":
        out = np.maximum(1.0 - x, 0.0)
    elif v == "logistic":
        out = np.logaddexp(0.0, -x) / _LN2
    elif v == "squared_hinge":
        out = np.maximum(1.0 - x, 0.0) ** 2
    elif v == "exponential":
        out = np.exp(-x)
    else:
        rho = spec.ramp_rho
        out = np.where(x <= 0.0, 1.0, np.where(x <= rho, 1.0 - x / rho, 0.0))
    return _unwrap(out, u)


def phi_grad(spec: PhiSpec, u):
    """Left derivative of the surrogate at ``u``.

    For hinge at ``u = 1`` this is ``-1``; for ramp it is ``0`` at ``u = 0``
    and ``-1/rho`` at ``u = rho``.
    """
    x = _as_finite(u)
    v = spec.variant
    if v == "hinge":
        out = np.where(x <= 1.0, -1.0, 0.0)
    elif v == "logistic":
        # -1 / (ln2 * (1 + e^u)), written via expit(-u) to stay finite
        out = -0.5 * (1.0 + np.tanh(-0.5 * x)) / _LN2
    elif v == "squared_hinge":
        out = -2.0 * np.maximum(1.0 - x, 0.0)
    elif v == "exponential":
        out = -np.exp(-x)
    else:
        rho = spec.ramp_rho
        out = np.where((x > 0.0) & (x <= rho), -1.0 / rho, 0.0)
    return _unwrap(out, u)


def kinks(spec: PhiSpec) -> tuple:
    """Points where ``phi`` is not differentiable."""
    if spec.variant == "hinge":
        return (1.0,)
    if spec.variant == "ramp":
        return (0.0, spec.ramp_rho)
    return ()
