"""Evaluation metrics and the per-round metrics log.

Generic accuracy on a shared balanced test set, distribution-weighted
personalized accuracy, per-class recall, local-update drift statistics and
the cross-client accuracy matrix. All metrics are pure functions of the
models and data; ties in argmax break toward the lowest class index.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import nnet
from .nnet import NetworkSpec
from .params import ParamVector

METRIC_COLUMNS = (
    "round", "gfl_global", "gfl_local_mean", "gfl_local_var",
    "pfl_global", "pfl_personal", "drift_mean", "drift_var",
    "pers_drift_sq_mean", "train_loss_mean",
)

Model = tuple[ParamVector, ParamVector, ParamVector | None]  # (theta, psi, phi?)


def predict(spec: NetworkSpec, model: Model, x: np.ndarray) -> np.ndarray:
    """Argmax class predictions; personalized logits when a head is present."""
    theta, psi, phi = model
    cache = nnet.forward(spec, theta, psi, x, phi)
    logits = cache.personal_logits if phi is not None else cache.generic_logits
    return np.argmax(logits, axis=1)


def _per_class_counts(spec: NetworkSpec, model: Model, x, y):
    y = np.asarray(y, dtype=np.intp)
    pred = predict(spec, model, x)
    correct = np.bincount(y[pred == y], minlength=spec.num_classes)
    totals = np.bincount(y, minlength=spec.num_classes)
    return correct, totals


def gfl_accuracy(spec: NetworkSpec, model: Model, x, y) -> float:
    """Fraction of argmax-correct predictions on the shared test set."""
    y = np.asarray(y, dtype=np.intp)
    if len(y) == 0:
        raise ValueError("empty test set")
    pred = predict(spec, model, x)
    return int((pred == y).sum()) / len(y)


def _weighted_term(weights: np.ndarray, correct: np.ndarray, totals: np.ndarray) -> float | None:
    # normalize by the max weight so a uniform distribution reduces to exact
    # integer-count accuracy (the uniform-P identity with gfl is then exact)
    wmax = weights.max()
    if wmax <= 0 or np.dot(weights, totals) == 0:
        return None
    w = weights / wmax
    return float(np.dot(w, correct) / np.dot(w, totals))


def pfl_accuracy_from_counts(stats: list[tuple[np.ndarray, np.ndarray]],
                             distributions: np.ndarray) -> float:
    """Personalized accuracy from precomputed per-class (correct, total) pairs."""
    terms = []
    for m, (correct, totals) in enumerate(stats):
        term = _weighted_term(np.asarray(distributions[m], dtype=np.float64), correct, totals)
        if term is None:
            warnings.warn(f"client {m} has zero weight over the test labels; excluded")
            continue
        terms.append(term)
    if not terms:
        raise ValueError("no client contributed to the personalized accuracy")
    if all(t == terms[0] for t in terms):
        # the mean of equal terms is the term itself; skipping the division
        # keeps the uniform-distribution identity with gfl_accuracy exact
        return terms[0]
    return float(sum(terms) / len(terms))


def pfl_accuracy(spec: NetworkSpec, models: list[Model],
                 distributions: np.ndarray, x, y) -> float:
    """Mean over clients of their distribution-weighted accuracy."""
    stats = [_per_class_counts(spec, model, x, y) for model in models]
    return pfl_accuracy_from_counts(stats, distributions)


def per_class_recall(spec: NetworkSpec, model: Model, x, y) -> np.ndarray:
    """Recall per class; NaN for classes absent from the test set."""
    correct, totals = _per_class_counts(spec, model, x, y)
    out = np.full(spec.num_classes, np.nan)
    present = totals > 0
    out[present] = correct[present] / totals[present]
    return out


def drift_stats(local_params: list[ParamVector], global_params: ParamVector
                ) -> tuple[float, float]:
    """Mean and population variance of ||w_m - w_bar|| over clients."""
    if not local_params:
        raise ValueError("drift_stats: empty parameter list")
    norms = np.array([
        np.linalg.norm(pv.values - global_params.values) for pv in local_params
    ])
    return float(norms.mean()), float(norms.var())


def cross_client_matrix(spec: NetworkSpec, models: list[Model],
                        distributions: np.ndarray, x, y) -> np.ndarray:
    """Entry (i, j): model i's accuracy weighted by client j's distribution."""
    m_count = len(models)
    out = np.zeros((m_count, m_count))
    for i, model in enumerate(models):
        correct, totals = _per_class_counts(spec, model, x, y)
        for j in range(m_count):
            term = _weighted_term(np.asarray(distributions[j], dtype=np.float64),
                                  correct, totals)
            out[i, j] = np.nan if term is None else term
    return out


@dataclass
class MetricsLog:
    rows: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def append(self, **row) -> None:
        missing = set(METRIC_COLUMNS) - set(row)
        if missing:
            raise ValueError(f"metrics row missing columns {sorted(missing)}")
        for key in ("gfl_global", "gfl_local_mean", "pfl_global", "pfl_personal"):
            v = row[key]
            if np.isfinite(v) and not 0.0 <= v <= 1.0:
                raise ValueError(f"{key}={v} outside [0, 1]")
        self.rows.append({k: row[k] for k in METRIC_COLUMNS})

    def last(self) -> dict:
        return self.rows[-1]

    def to_csv(self) -> str:
        lines = [",".join(METRIC_COLUMNS)]
        for row in self.rows:
            lines.append(",".join(_fmt(row[c]) for c in METRIC_COLUMNS))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        payload = {str(row["round"]): {c: row[c] for c in METRIC_COLUMNS if c != "round"}
                   for row in self.rows}
        return json.dumps(payload, indent=2, allow_nan=True) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def matrix_to_csv(matrix: np.ndarray) -> str:
    return "\n".join(",".join(repr(float(v)) for v in row) for row in matrix) + "\n"
