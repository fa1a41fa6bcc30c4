"""Hypernetwork that maps a client's class distribution to a personalized head.

A two-layer affine-rectifier-affine network whose output is reshaped into the
weight matrix and bias of the personalized linear head. Trained federatedly
like any other parameter group and usable zero-shot on unseen clients: head
generation needs only the class-distribution vector, never client data.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, DomainError
from .nnet import NetworkSpec, head_layout
from .params import Layout, ParamVector


def default_hidden_dim(spec: NetworkSpec) -> int:
    """16 for small head parameter counts, 32 for larger ones."""
    return 16 if spec.num_classes * spec.feature_dim <= 1000 else 32


def hyper_layout(spec: NetworkSpec, hidden_dim: int | None = None) -> Layout:
    h = hidden_dim or default_hidden_dim(spec)
    c, d = spec.num_classes, spec.feature_dim
    out = (d + 1) * c
    return (
        ("hyp0_W", (h, c)),
        ("hyp0_b", (h,)),
        ("hyp1_W", (out, h)),
        ("hyp1_b", (out,)),
    )


def init_hyper(spec: NetworkSpec, rng: np.random.Generator, std: float = 0.05,
               hidden_dim: int | None = None) -> ParamVector:
    """Hidden layer Gaussian, output layer zero so the initial head is zero."""
    nu = ParamVector.zeros(hyper_layout(spec, hidden_dim))
    nu.view("hyp0_W")[...] = std * rng.standard_normal(nu.view("hyp0_W").shape)
    return nu


def _check_distribution(a: np.ndarray, num_classes: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (num_classes,):
        raise DomainError(f"class distribution must have length {num_classes}")
    if np.any(a < 0) or not np.isclose(a.sum(), 1.0, atol=1e-9):
        raise DomainError("class distribution entries must be nonnegative and sum to 1")
    return a


def generate_head(spec: NetworkSpec, nu: ParamVector, a: np.ndarray) -> ParamVector:
    """Forward pass producing the personalized head parameters for ``a``."""
    a = _check_distribution(a, spec.num_classes)
    hidden = np.maximum(nu.view("hyp0_W") @ a + nu.view("hyp0_b"), 0.0)
    out = nu.view("hyp1_W") @ hidden + nu.view("hyp1_b")
    c, d = spec.num_classes, spec.feature_dim
    phi = ParamVector.zeros(head_layout(spec))
    phi.view("W")[...] = out[: c * d].reshape(c, d)
    phi.view("b")[...] = out[c * d:]
    return phi


def hyper_backward(spec: NetworkSpec, nu: ParamVector, a: np.ndarray,
                   dL_dphi: ParamVector) -> ParamVector:
    """Chain rule from a head-parameter gradient back to the hypernetwork.

    Linear in dL_dphi; recomputes the cheap forward activations.
    """
    a = _check_distribution(a, spec.num_classes)
    if dL_dphi.layout != head_layout(spec):
        raise ConfigurationError("head gradient layout mismatch")
    pre = nu.view("hyp0_W") @ a + nu.view("hyp0_b")
    hidden = np.maximum(pre, 0.0)
    g_out = np.concatenate([dL_dphi.view("W").ravel(), dL_dphi.view("b")])
    grad = ParamVector.zeros(nu.layout)
    grad.view("hyp1_W")[...] = np.outer(g_out, hidden)
    grad.view("hyp1_b")[...] = g_out
    g_hidden = nu.view("hyp1_W").T @ g_out
    g_pre = g_hidden * (pre > 0)
    grad.view("hyp0_W")[...] = np.outer(g_pre, a)
    grad.view("hyp0_b")[...] = g_pre
    return grad


def zero_shot_personalize(spec: NetworkSpec, theta: ParamVector, psi: ParamVector,
                          nu: ParamVector, a_new: np.ndarray
                          ) -> tuple[ParamVector, ParamVector, ParamVector]:
    """Build a personalized model for an unseen client from its distribution only."""
    return theta, psi, generate_head(spec, nu, a_new)
