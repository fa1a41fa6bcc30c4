"""Class-balanced instance losses realized as per-class logit adjustments.

One cross-entropy-with-adjustment kernel serves all five loss kinds:

    ce    plain cross entropy
    ir    cross entropy, inverse-frequency instance re-weighting at risk level
    ldam  label-dependent margin subtracted from the true-class logit
    cdt   per-class temperature scaling of the logits
    bsm   per-class additive log-count offsets

The adjustment only modifies the training loss; test-time prediction always
uses the raw logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError

KINDS = ("ce", "ir", "ldam", "cdt", "bsm")

# gamma defaults per kind; bsm's 1.0 is the standard operating point, the
# ldam/cdt values are our desk-scale choices (both reduce to ce at gamma=0).
DEFAULT_GAMMA = {"ce": 0.0, "ir": 0.0, "ldam": 1.0, "cdt": 0.2, "bsm": 1.0}

GAMMA_MAX = 4.0


@dataclass(frozen=True)
class LossSpec:
    kind: str = "ce"
    gamma: float | None = None
    ir_power: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown loss kind {self.kind!r}")
        if self.gamma is None:
            object.__setattr__(self, "gamma", DEFAULT_GAMMA[self.kind])
        if self.kind in ("cdt", "bsm") and self.gamma < 0:
            raise ConfigurationError(f"{self.kind} gamma must be nonnegative")
        if self.ir_power not in (1.0, 0.5):
            raise ConfigurationError("ir_power must be 1 or 0.5")


def check_counts(counts, num_classes: int | None = None) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise ConfigurationError("class counts must be a nonempty vector")
    if np.any(counts < 0):
        raise ConfigurationError("class counts must be nonnegative")
    if not np.any(counts > 0):
        raise ConfigurationError("class counts need at least one positive entry")
    if num_classes is not None and counts.size != num_classes:
        raise ConfigurationError(f"expected {num_classes} class counts, got {counts.size}")
    return counts


def _scale_and_bias(spec: LossSpec, counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-class multiplicative scale and additive bias for the adjustment."""
    c = counts.size
    scale = np.ones(c)
    bias = np.zeros(c)
    if spec.kind == "bsm":
        with np.errstate(divide="ignore"):
            bias = spec.gamma * np.log(counts)
        # shift by the max finite bias: softmax-invariant, and makes the
        # equal-counts case reduce to plain CE exactly
        finite = bias[np.isfinite(bias)]
        if finite.size:
            bias = bias - finite.max()
    elif spec.kind == "cdt":
        nmax = counts.max()
        scale = (counts / nmax) ** spec.gamma
    return scale, bias


def adjusted_logits(g: np.ndarray, y: int | None, spec: LossSpec, counts) -> np.ndarray:
    """Apply the training-time per-class adjustment to a logit vector."""
    g = np.asarray(g, dtype=np.float64)
    counts = check_counts(counts, g.shape[-1])
    if spec.kind in ("ce", "ir"):
        return g.copy()
    if spec.kind == "ldam":
        if y is None:
            raise ConfigurationError("ldam adjustment needs the true class")
        if counts[y] == 0:
            raise DomainError(f"ldam margin undefined for absent class {y}")
        out = g.copy()
        out[..., y] -= spec.gamma * counts[y] ** -0.25
        return out
    scale, bias = _scale_and_bias(spec, counts)
    return scale * g + bias


def _log_softmax(adj: np.ndarray) -> np.ndarray:
    # -inf entries (absent classes under bsm) are excluded from the partition
    m = np.max(adj, axis=-1, keepdims=True)
    shifted = adj - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def instance_loss_and_grad(g: np.ndarray, y: int, spec: LossSpec, counts
                           ) -> tuple[float, np.ndarray]:
    """Loss and gradient w.r.t. the raw logits for a single instance."""
    g = np.asarray(g, dtype=np.float64)
    losses, dG = batch_loss_and_grad(g[None, :], np.array([y]), spec, counts)
    return float(losses[0]), dG[0]


def batch_loss_and_grad(G: np.ndarray, ys: np.ndarray, spec: LossSpec, counts
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Per-instance losses and gradients w.r.t. raw logits for a batch.

    G is (B, C); ys is (B,). Gradients include the chain rule through the
    adjustment (CDT's per-class scaling; LDAM/BSM leave the Jacobian diagonal
    at one).
    """
    G = np.asarray(G, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.intp)
    counts = check_counts(counts, G.shape[1])
    if np.any(ys < 0) or np.any(ys >= G.shape[1]):
        raise DomainError("label outside [0, C)")
    if np.any(counts[ys] == 0):
        raise DomainError("instance loss undefined for a class with zero count")

    scale, bias = _scale_and_bias(spec, counts)
    adj = scale * G + bias
    if spec.kind == "ldam":
        margins = spec.gamma * counts[ys] ** -0.25
        adj = adj.copy()
        adj[np.arange(len(ys)), ys] -= margins

    logp = _log_softmax(adj)
    losses = -logp[np.arange(len(ys)), ys]
    p = np.exp(logp)
    p[~np.isfinite(adj)] = 0.0
    dadj = p
    dadj[np.arange(len(ys)), ys] -= 1.0
    dG = scale * dadj
    return losses, dG


def ir_weights(counts, power: float = 1.0) -> np.ndarray:
    """Inverse-frequency class weights, normalized to count-weighted mean one.

    Absent classes get weight zero and are excluded from the normalization.
    """
    counts = check_counts(counts)
    present = counts > 0
    raw = np.zeros_like(counts)
    raw[present] = counts[present] ** -power
    mass = float((counts * raw).sum())
    target = float(counts[present].sum())
    return raw * (target / mass)


def balanced_risk_and_grad(G: np.ndarray, ys: np.ndarray, spec: LossSpec, counts
                           ) -> tuple[float, np.ndarray]:
    """Mean (possibly re-weighted) batch risk and its gradient w.r.t. logits.

    The returned gradient already carries the 1/B batch weighting, so it can
    be fed straight into backprop.
    """
    ys = np.asarray(ys, dtype=np.intp)
    if ys.size == 0:
        raise DomainError("balanced risk of an empty batch")
    losses, dG = batch_loss_and_grad(G, ys, spec, counts)
    b = len(ys)
    if spec.kind == "ir":
        q = ir_weights(counts, spec.ir_power)[ys]
        risk = float(np.dot(q, losses) / b)
        grad = (q[:, None] * dG) / b
    else:
        risk = float(losses.sum() / b)
        grad = dG / b
    return risk, grad


def meta_tune_gamma(spec, theta, psi, batch_x, batch_y, counts,
                    meta_x, meta_y, gamma: float, eta_inner: float,
                    eta_meta: float, eps: float = 1e-2) -> float:
    """One finite-difference meta step on the balanced-softmax exponent.

    Evaluates the meta-set cross entropy after a single plain gradient step
    taken under gamma +/- eps, and moves gamma along the central-difference
    estimate. The result is clamped to [0, GAMMA_MAX].
    """
    from . import nnet
    from .params import ParamVector

    if eps <= 0:
        raise ConfigurationError("meta_tune_gamma: eps must be positive")
    if len(meta_y) == 0:
        raise DomainError("meta_tune_gamma: empty meta set")
    if eta_meta == 0.0:
        return float(np.clip(gamma, 0.0, GAMMA_MAX))

    net_spec, ce = spec, LossSpec("ce")
    meta_counts = np.bincount(np.asarray(meta_y), minlength=net_spec.num_classes)

    def meta_loss_after_inner(gamma_tilde: float) -> float:
        cache = nnet.forward(net_spec, theta, psi, batch_x)
        _, dG = balanced_risk_and_grad(cache.generic_logits, batch_y,
                                       LossSpec("bsm", gamma=gamma_tilde), counts)
        grads = nnet.backward(net_spec, theta, psi, cache, dG, {"theta", "psi"})
        theta2 = ParamVector(theta.values - eta_inner * grads["theta"].values, theta.layout)
        psi2 = ParamVector(psi.values - eta_inner * grads["psi"].values, psi.layout)
        c2 = nnet.forward(net_spec, theta2, psi2, meta_x)
        risk, _ = balanced_risk_and_grad(c2.generic_logits, meta_y, ce, meta_counts)
        return risk

    # keep the lower evaluation point valid when gamma sits near zero
    lo = max(gamma - eps, 0.0)
    hi = gamma + eps
    slope = (meta_loss_after_inner(hi) - meta_loss_after_inner(lo)) / (hi - lo)
    return float(np.clip(gamma - eta_meta * slope, 0.0, GAMMA_MAX))
