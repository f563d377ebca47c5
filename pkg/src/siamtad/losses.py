"""Identification, verification, contrastive, and joint losses.

All losses are tape ops producing scalar tensors. Probabilities are clamped
at 1e-12 inside the log only; the clamp flattens the gradient there rather
than rescaling the distribution.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import ops
from .tensor import GradientTape, ShapeError, Tensor

PROB_EPS = 1e-12


class VerificationSignal(IntEnum):
    """One-hot pair label over (different, same); index 1 means same class."""

    DIFFERENT = 0
    SAME = 1

    @property
    def one_hot(self) -> tuple[int, int]:
        return (1, 0) if self is VerificationSignal.DIFFERENT else (0, 1)

    @classmethod
    def from_labels(cls, label1: int, label2: int) -> "VerificationSignal":
        return cls.SAME if label1 == label2 else cls.DIFFERENT


@dataclass(frozen=True)
class LossWeights:
    """Tradeoff weight on the verification term of the joint loss."""

    lam: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")


def _nll_of_entry(p: Tensor, index: int,
                  tape: GradientTape | None) -> Tensor:
    """-log p[index] with the probability clamped at PROB_EPS."""
    prob = float(p.data[index])
    out = Tensor(np.asarray(-np.log(max(prob, PROB_EPS)), dtype=p.dtype), validate=False)

    if tape is not None:
        def backward(g: np.ndarray):
            gp = np.zeros_like(p.data)
            if prob > PROB_EPS:
                gp[index] = -g / prob
            return (gp,)

        tape.record(out, (p,), backward)
    return out


def identification_loss(p_hat: Tensor, label: int,
                        tape: GradientTape | None = None) -> Tensor:
    """Cross-entropy of a class distribution against a one-hot true label."""
    if p_hat.data.ndim != 1:
        raise ShapeError(f"identification_loss expects a 1-D distribution, got {p_hat.shape}")
    if not 0 <= label < p_hat.size:
        raise ValueError(f"label {label} out of range for {p_hat.size} classes")
    return _nll_of_entry(p_hat, int(label), tape)


def verification_loss(p_tilde: Tensor, signal: VerificationSignal,
                      tape: GradientTape | None = None) -> Tensor:
    """Cross-entropy of the 2-way same/different distribution against the
    verification signal."""
    if p_tilde.shape != (2,):
        raise ShapeError(f"verification_loss expects a 2-way distribution, got {p_tilde.shape}")
    return _nll_of_entry(p_tilde, int(signal), tape)


def contrastive_loss(f1: Tensor, f2: Tensor, same: bool, margin: float = 1.0,
                     tape: GradientTape | None = None) -> Tensor:
    """Hadsell-style contrastive loss on a feature pair.

    With d = ||f1 - f2||: d^2 for a same-class pair, max(0, margin - d)^2
    for a different-class pair.
    """
    if f1.shape != f2.shape:
        raise ShapeError(f"contrastive_loss shape mismatch: {f1.shape} vs {f2.shape}")
    if margin <= 0:
        raise ValueError("margin must be positive")
    diff = f1.data - f2.data
    d = float(np.sqrt(np.dot(diff, diff)))
    if same:
        value = d * d
    else:
        gap = margin - d
        value = gap * gap if gap > 0 else 0.0
    out = Tensor(np.asarray(value, dtype=f1.dtype), validate=False)

    if tape is not None:
        if same:
            base = 2.0 * diff
        elif 0.0 < d < margin:
            base = (-2.0 * (margin - d) / d) * diff
        else:
            # margin satisfied, or d == 0 (flat corner: subgradient 0)
            base = np.zeros_like(diff)

        def backward(g: np.ndarray):
            gb = g * base
            return gb, -gb

        tape.record(out, (f1, f2), backward)
    return out


def overall_loss(loss_id1: Tensor, loss_id2: Tensor, loss_ver: Tensor,
                 weights: LossWeights = LossWeights(),
                 tape: GradientTape | None = None) -> Tensor:
    """Joint objective: both identification losses plus the weighted pair loss."""
    return ops.add(ops.add(loss_id1, loss_id2, tape),
                   ops.scale(loss_ver, weights.lam, tape), tape)


def mean_of(losses: list[Tensor], tape: GradientTape | None = None) -> Tensor:
    """Arithmetic mean of scalar losses; the batch reduction used in training."""
    if not losses:
        raise ValueError("mean_of needs at least one loss")
    total = losses[0]
    for term in losses[1:]:
        total = ops.add(total, term, tape)
    return ops.scale(total, 1.0 / len(losses), tape)
