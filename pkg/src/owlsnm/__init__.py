"""Ordered weighted losses and stochastic negative mining for large output spaces."""

from owlsnm.phi import PhiSpec, phi_eval, phi_grad
from owlsnm.owl import LossKind, eval_owl, grad_owl, theta_norms, is_surrogate_premise
from owlsnm.snm import (
    SnmConfig,
    snm_sample,
    snm_loss,
    snm_grad,
    induced_theta,
    exact_expected_loss,
    make_topk_vartheta,
    make_negsample_vartheta,
    make_powerlaw_vartheta,
)
from owlsnm.retrieval import (
    MetricsReport,
    top_k,
    retrieval_loss,
    margin,
    margin_risk,
    evaluate_metrics,
)

__version__ = "0.1.0"

__all__ = [
    "PhiSpec",
    "phi_eval",
    "phi_grad",
    "LossKind",
    "eval_owl",
    "grad_owl",
    "theta_norms",
    "is_surrogate_premise",
    "SnmConfig",
    "snm_sample",
    "snm_loss",
    "snm_grad",
    "induced_theta",
    "exact_expected_loss",
    "make_topk_vartheta",
    "make_negsample_vartheta",
    "make_powerlaw_vartheta",
    "MetricsReport",
    "top_k",
    "retrieval_loss",
    "margin",
    "margin_risk",
    "evaluate_metrics",
]
