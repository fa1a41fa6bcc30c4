"""Minimal differentiable model core.

MLP feature extractor with rectifier activations, affine generic/personalized
heads added at the logit level, hand-derived backprop, SGD with momentum and
per-round learning-rate decay, and weighted parameter averaging.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AggregationError, ConfigurationError
from .params import Layout, ParamVector


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64,)
    feature_dim: int = 64
    num_classes: int = 10

    def __post_init__(self):
        if self.input_dim < 1 or self.feature_dim < 1 or self.num_classes < 2:
            raise ConfigurationError("NetworkSpec dimensions out of range")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))


@dataclass(frozen=True)
class SgdConfig:
    lr0: float = 0.01
    lr_round_decay: float = 0.99
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 40

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigurationError("lr0 must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be nonnegative")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")

    def lr(self, round_index: int) -> float:
        return self.lr0 * self.lr_round_decay ** round_index


def extractor_layout(spec: NetworkSpec) -> Layout:
    dims = [spec.input_dim, *spec.hidden_dims, spec.feature_dim]
    layout = []
    for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
        layout.append((f"layer{i}_W", (dout, din)))
        layout.append((f"layer{i}_b", (dout,)))
    return tuple(layout)


def head_layout(spec: NetworkSpec) -> Layout:
    return (("W", (spec.num_classes, spec.feature_dim)), ("b", (spec.num_classes,)))


def init_extractor(spec: NetworkSpec, rng: np.random.Generator, std: float = 0.05) -> ParamVector:
    pv = ParamVector.zeros(extractor_layout(spec))
    for name, block in pv.blocks():
        if name.endswith("_W"):
            block[...] = std * rng.standard_normal(block.shape)
    return pv

def init_head(spec: NetworkSpec, rng: np.random.Generator, std: float = 0.05) -> ParamVector:
    pv = ParamVector.zeros(head_layout(spec))
    pv.view("W")[...] = std * rng.standard_normal(pv.view("W").shape)
    return pv


@dataclass
class ForwardCache:
    """Per-batch activations kept for the backward pass."""
    inputs: np.ndarray                 # (B, d_in)
    activations: list[np.ndarray]      # post-rectifier output of each extractor layer
    features: np.ndarray               # (B, d) == activations[-1]
    generic_logits: np.ndarray         # (B, C)
    personal_logits: np.ndarray | None # (B, C) or None when no personalized head


def _as_batch(x: np.ndarray, dim: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ConfigurationError(f"{what}: expected trailing dimension {dim}, got shape {x.shape}")
    return x, single


def forward(spec: NetworkSpec, theta: ParamVector, psi: ParamVector,
            x: np.ndarray, phi: ParamVector | None = None) -> ForwardCache:
    """Compute features, generic logits and (if phi given) personalized logits.

    Personalized logits are the elementwise sum of the generic head and the
    personalized head outputs (logit-level addition).
    """
    X, _ = _as_batch(x, spec.input_dim, "forward input")
    if theta.layout != extractor_layout(spec):
        raise ConfigurationError("extractor parameters do not match spec layout")
    if psi.layout != head_layout(spec):
        raise ConfigurationError("generic head parameters do not match spec layout")
    a = X
    activations = []
    for i in range(len(spec.hidden_dims) + 1):
        w = theta.view(f"layer{i}_W")
        b = theta.view(f"layer{i}_b")
        a = np.maximum(a @ w.T + b, 0.0)
        activations.append(a)
    z = activations[-1]
    g_g = z @ psi.view("W").T + psi.view("b")
    g_p = None
    if phi is not None:
        if phi.layout != head_layout(spec):
            raise ConfigurationError("personalized head parameters do not match spec layout")
        g_p = g_g + z @ phi.view("W").T + phi.view("b")
    return ForwardCache(X, activations, z, g_g, g_p)


def backward(spec: NetworkSpec, theta: ParamVector, psi: ParamVector,
             cache: ForwardCache, dloss_dlogits: np.ndarray,
             groups: set[str] | frozenset[str],
             phi: ParamVector | None = None,
             branch: str = "generic") -> dict[str, ParamVector]:
    """Backpropagate a loss gradient w.r.t. logits into the requested groups.

    ``branch`` names which logits ``dloss_dlogits`` refers to: "generic"
    (g_G) or "personal" (g_P = g_G + personalized head). Gradients are only
    produced for the requested groups, so a personalized loss restricted to
    {"phi"} leaves the extractor and generic head untouched (stop-gradient).
    """
    groups = set(groups)
    if not groups <= {"theta", "psi", "phi"}:
        raise ConfigurationError(f"unknown gradient groups {groups - {'theta', 'psi', 'phi'}}")
    if "phi" in groups and (phi is None or cache.personal_logits is None):
        raise ConfigurationError("phi gradients requested but model has no personalized head")
    if branch not in ("generic", "personal"):
        raise ConfigurationError(f"unknown branch {branch!r}")
    if branch == "personal" and cache.personal_logits is None:
        raise ConfigurationError("personal branch requested but no personalized head in forward")

    d = np.atleast_2d(np.asarray(dloss_dlogits, dtype=np.float64))
    if d.shape != cache.generic_logits.shape:
        raise ConfigurationError(
            f"dloss_dlogits shape {d.shape} does not match logits {cache.generic_logits.shape}")

    z = cache.features
    grads: dict[str, ParamVector] = {}

    if "psi" in groups:
        gpsi = ParamVector.zeros(psi.layout)
        gpsi.view("W")[...] = d.T @ z
        gpsi.view("b")[...] = d.sum(axis=0)
        grads["psi"] = gpsi
    if "phi" in groups:
        gphi = ParamVector.zeros(phi.layout)
        gphi.view("W")[...] = d.T @ z
        gphi.view("b")[...] = d.sum(axis=0)
        grads["phi"] = gphi
    if "theta" in groups:
        w_eff = psi.view("W")
        if branch == "personal":
            w_eff = w_eff + phi.view("W")
        da = d @ w_eff
        gtheta = ParamVector.zeros(theta.layout)
        for i in range(len(spec.hidden_dims), -1, -1):
            da = da * (cache.activations[i] > 0)
            prev = cache.inputs if i == 0 else cache.activations[i - 1]
            gtheta.view(f"layer{i}_W")[...] = da.T @ prev
            gtheta.view(f"layer{i}_b")[...] = da.sum(axis=0)
            if i > 0:
                da = da @ theta.view(f"layer{i}_W")
        grads["theta"] = gtheta
    return grads


def sgd_step(params: ParamVector, grads: ParamVector, momentum_state: ParamVector,
             config: SgdConfig, round_index: int) -> tuple[ParamVector, ParamVector]:
    """One heavy-ball step: v' = mu v + (g + wd p); p' = p - lr(round) v'."""
    if not (params.same_layout(grads) and params.same_layout(momentum_state)):
        raise ConfigurationError("sgd_step: layouts disagree")
    grads.check_finite("sgd_step gradients")
    if config.weight_decay != 0.0:
        update = grads.values + config.weight_decay * params.values
    else:
        update = grads.values
    v = momentum_state.values * config.momentum + update if config.momentum != 0.0 else update
    new_values = params.values - config.lr(round_index) * v
    return (ParamVector(new_values, params.layout),
            ParamVector(np.array(v, dtype=np.float64, copy=True), params.layout))


def weighted_average(entries: list[tuple[ParamVector, float]]) -> ParamVector:
    if not entries:
        raise AggregationError("weighted_average: empty entry list")
    layout = entries[0][0].layout
    total = 0.0
    for pv, w in entries:
        if pv.layout != layout:
            raise AggregationError("weighted_average: layouts disagree")
        if w < 0:
            raise AggregationError("weighted_average: negative weight")
        total += w
    if total <= 0:
        raise AggregationError("weighted_average: weight sum must be positive")
    acc = np.zeros_like(entries[0][0].values)
    for pv, w in entries:
        acc += (w / total) * pv.values
    return ParamVector(acc, layout)


def finite_difference_grad(f, pv: ParamVector, eps: float = 1e-5) -> ParamVector:
    """Central finite differences of a scalar function over a flat vector."""
    g = np.zeros_like(pv.values)
    work = pv.copy()
    for i in range(work.values.size):
        orig = work.values[i]
        work.values[i] = orig + eps
        fp = f(work)
        work.values[i] = orig - eps
        fm = f(work)
        work.values[i] = orig
        g[i] = (fp - fm) / (2 * eps)
    return ParamVector(g, pv.layout)


def grad_error(analytic: ParamVector, numeric: ParamVector) -> float:
    """Max over parameters of |analytic - numeric| / max(1, |analytic|)."""
    denom = np.maximum(1.0, np.abs(analytic.values))
    return float(np.max(np.abs(analytic.values - numeric.values) / denom))


def grad_check(spec: NetworkSpec, loss_spec, counts, x, y, theta: ParamVector,
               psi: ParamVector, phi: ParamVector | None = None,
               eps: float = 1e-5) -> float:
    """Check analytic gradients of a single-sample loss against central differences.

    Returns the max relative error over every parameter of every supplied
    group. The loss is the instance loss of ``loss_spec`` on the generic
    logits when ``phi`` is None, otherwise cross entropy on the personalized
    logits (the dual-branch training setup).
    """
    from . import losses  # local import to avoid a module cycle

    if eps <= 0:
        raise ConfigurationError("grad_check: eps must be positive")
    y = int(y)

    if phi is None:
        cache = forward(spec, theta, psi, x)
        _, dg = losses.instance_loss_and_grad(cache.generic_logits[0], y, loss_spec, counts)
        grads = backward(spec, theta, psi, cache, dg[None, :], {"theta", "psi"})

        def loss_theta(p):
            c = forward(spec, p, psi, x)
            return losses.instance_loss_and_grad(c.generic_logits[0], y, loss_spec, counts)[0]

        def loss_psi(p):
            c = forward(spec, theta, p, x)
            return losses.instance_loss_and_grad(c.generic_logits[0], y, loss_spec, counts)[0]

        err = max(
            grad_error(grads["theta"], finite_difference_grad(loss_theta, theta, eps)),
            grad_error(grads["psi"], finite_difference_grad(loss_psi, psi, eps)),
        )
    else:
        ce = losses.LossSpec("ce")
        cache = forward(spec, theta, psi, x, phi)
        _, dg = losses.instance_loss_and_grad(cache.personal_logits[0], y, ce, counts)
        grads = backward(spec, theta, psi, cache, dg[None, :],
                         {"theta", "psi", "phi"}, phi=phi, branch="personal")

        def loss_of(group):
            def f(p):
                args = {"theta": theta, "psi": psi, "phi": phi}
                args[group] = p
                c = forward(spec, args["theta"], args["psi"], x, args["phi"])
                return losses.instance_loss_and_grad(c.personal_logits[0], y, ce, counts)[0]
            return f

        err = max(
            grad_error(grads[g], finite_difference_grad(loss_of(g), {"theta": theta, "psi": psi, "phi": phi}[g], eps))
            for g in ("theta", "psi", "phi")
        )
    return err
