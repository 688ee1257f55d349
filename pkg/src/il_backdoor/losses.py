"""Loss terms and their gradients for the classifier substrate.

A :class:`LossSpec` is a weighted list of terms.  Logit-space terms
(cross-entropy, distillation, binary cross-entropy) may each target a
row range of the batch, so replay-style learners can weight current and
replayed samples differently inside one forward/backward pass.
Parameter-space quadratic penalties (EWC / SI anchors) contribute
directly to the flat gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nets import ClassifierMLP


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy; returns (loss, dloss/dlogits)."""
    n = len(labels)
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return float(loss), grad.astype(logits.dtype)


def distillation(logits: np.ndarray, teacher_logits: np.ndarray, T: float):
    """Soft-target cross-entropy at temperature T, scaled by T^2.

    Targets are softmax(teacher/T); the T^2 factor keeps gradient
    magnitudes comparable across temperatures.
    """
    n = len(logits)
    q = softmax(np.asarray(teacher_logits, dtype=np.float64) / T)
    logp = log_softmax(np.asarray(logits, dtype=np.float64) / T)
    loss = -(T * T) * float((q * logp).sum()) / n
    grad = (T / n) * (softmax(np.asarray(logits, dtype=np.float64) / T) - q)
    return loss, grad.astype(logits.dtype)


def binary_cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean over batch of per-sample summed BCE with logits."""
    n = len(logits)
    l64 = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    loss = float((np.logaddexp(0.0, l64) - l64 * t).sum()) / n
    grad = (sigmoid(l64) - t) / n
    return loss, grad.astype(logits.dtype)


@dataclass
class CrossEntropyTerm:
    labels: np.ndarray
    weight: float = 1.0
    rows: slice | None = None
    cols: slice | None = None


@dataclass
class DistillationTerm:
    teacher_logits: np.ndarray
    T: float = 2.0
    weight: float = 1.0
    rows: slice | None = None
    cols: slice | None = None


@dataclass
class BinaryCrossEntropyTerm:
    targets: np.ndarray
    weight: float = 1.0
    rows: slice | None = None
    cols: slice | None = None


@dataclass
class QuadraticPenaltyTerm:
    """weight * coef * sum(importance * (theta - anchor)^2) over the flat params."""

    coef: float
    importance: np.ndarray
    anchor: np.ndarray
    weight: float = 1.0


@dataclass
class LossSpec:
    terms: list = field(default_factory=list)

    def __post_init__(self):
        for t in self.terms:
            if not np.isfinite(getattr(t, "weight", 1.0)):
                raise ValueError("term weights must be finite")
            if isinstance(t, DistillationTerm) and t.T <= 0:
                raise ValueError("distillation temperature must be > 0")


def spec_cross_entropy(labels: np.ndarray) -> LossSpec:
    return LossSpec([CrossEntropyTerm(labels)])


def loss_and_grad(
    model: ClassifierMLP,
    x: np.ndarray,
    spec: LossSpec,
    head: int | None = None,
    mask=None,
    grad_out: np.ndarray | None = None,
):
    """Total weighted loss and its flat parameter gradient.

    One forward pass serves all logit-space terms; parameter penalties
    are added directly to the returned gradient.
    """
    logits, cache = model.forward(x, head=head, mask=mask)
    dlogits = np.zeros_like(logits)
    total = 0.0
    penalties = []
    for term in spec.terms:
        if isinstance(term, QuadraticPenaltyTerm):
            penalties.append(term)
            continue
        rows = term.rows if term.rows is not None else slice(None)
        cols = term.cols if term.cols is not None else slice(None)
        sub = logits[rows, cols]
        if isinstance(term, CrossEntropyTerm):
            val, d = cross_entropy(sub, term.labels)
        elif isinstance(term, DistillationTerm):
            val, d = distillation(sub, term.teacher_logits, term.T)
        elif isinstance(term, BinaryCrossEntropyTerm):
            val, d = binary_cross_entropy(sub, term.targets)
        else:
            raise TypeError(f"unknown loss term {type(term).__name__}")
        total += term.weight * val
        dlogits[rows, cols] += term.weight * d
    grad = model.backward(cache, dlogits, out=grad_out)
    for term in penalties:
        diff = model.params - term.anchor
        total += term.weight * term.coef * float((term.importance * diff * diff).sum())
        grad += (2.0 * term.weight * term.coef) * (term.importance * diff)
    return float(total), grad


def loss_value(
    model: ClassifierMLP,
    x: np.ndarray,
    spec: LossSpec,
    head: int | None = None,
    mask=None,
) -> float:
    """Loss only (no backward); the probe used by finite differencing."""
    logits, _ = model.forward(x, head=head, mask=mask)
    total = 0.0
    for term in spec.terms:
        if isinstance(term, QuadraticPenaltyTerm):
            diff = model.params - term.anchor
            total += term.weight * term.coef * float((term.importance * diff * diff).sum())
            continue
        rows = term.rows if term.rows is not None else slice(None)
        cols = term.cols if term.cols is not None else slice(None)
        sub = logits[rows, cols]
        if isinstance(term, CrossEntropyTerm):
            val, _ = cross_entropy(sub, term.labels)
        elif isinstance(term, DistillationTerm):
            val, _ = distillation(sub, term.teacher_logits, term.T)
        elif isinstance(term, BinaryCrossEntropyTerm):
            val, _ = binary_cross_entropy(sub, term.targets)
        else:
            raise TypeError(f"unknown loss term {type(term).__name__}")
        total += term.weight * val
    return float(total)
