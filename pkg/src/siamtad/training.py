"""SGD-with-momentum training of the joint identification-verification
objective, plus the held-out accuracy probes used by the experiment runner.

The loop is a pure function of (model seed, dataset, train seed): pair
batches are drawn with replacement from a seeded generator, and parameters
mutate only between tapes inside sgd_step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import PairSample, SyntheticDataset, sample_pairs
from .losses import (LossWeights, VerificationSignal, contrastive_loss,
                     identification_loss, mean_of, overall_loss,
                     verification_loss)
from .network import (SiameseModel, class_distribution, forward_features,
                      verification_distribution)
from .tensor import GradientTape, NumericsError, ShapeError, Tensor

LOSS_KINDS = ("verification", "contrastive")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_pairs: int = 5
    iterations: int = 200
    lam: float = 1.0
    same_ratio: float = 0.5
    seed: int = 0
    loss: str = "verification"
    margin: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_pairs < 1:
            raise ValueError("batch_pairs must be at least 1")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if not 0.0 <= self.same_ratio <= 1.0:
            raise ValueError("same_ratio must lie in [0, 1]")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.margin <= 0:
            raise ValueError("margin must be positive")

    def to_dict(self) -> dict:
        return {"learning_rate": self.learning_rate, "momentum": self.momentum,
                "batch_pairs": self.batch_pairs, "iterations": self.iterations,
                "lambda": self.lam, "same_ratio": self.same_ratio,
                "seed": self.seed, "loss": self.loss, "margin": self.margin}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


@dataclass
class LogRow:
    iteration: int
    loss_id1: float
    loss_id2: float
    loss_ver: float
    loss: float
    pair_accuracy: float


@dataclass
class TrainLog:
    rows: list[LogRow] = field(default_factory=list)
    # iteration -> (pre-step parameter copies, the batch of that iteration);
    # filled only for iterations requested via train(snapshot_at=...)
    snapshots: dict[int, tuple[dict[str, np.ndarray], list[PairSample]]] = \
        field(default_factory=dict)

    def final_loss(self) -> float:
        return self.rows[-1].loss

    def initial_loss(self) -> float:
        return self.rows[0].loss


def sgd_step(parameters: dict[str, Tensor], gradients: dict[str, np.ndarray],
             velocity: dict[str, np.ndarray], learning_rate: float,
             momentum: float) -> None:
    """v <- momentum * v + g; w <- w - lr * v, in place."""
    for name, param in parameters.items():
        g = gradients[name]
        v = velocity[name]
        if g.shape != param.data.shape or v.shape != param.data.shape:
            raise ShapeError(f"{name}: parameter {param.data.shape}, gradient "
                             f"{g.shape}, velocity {v.shape}")
        v *= momentum
        v += g
        param.data -= learning_rate * v


def pair_losses(model: SiameseModel, pair: PairSample, config: TrainConfig,
                tape: GradientTape | None = None):
    """Per-pair loss terms and the pair prediction used for accuracy logging.

    Returns (l1, l2, lv, predicted_signal). Under the contrastive loss the
    verification head is out of the graph and the prediction comes from the
    feature distance against margin / 2.
    """
    f1 = forward_features(model, pair.clip1, tape)
    f2 = forward_features(model, pair.clip2, tape)
    p1 = class_distribution(model, f1, tape)
    p2 = class_distribution(model, f2, tape)
    l1 = identification_loss(p1, pair.clip1.label, tape)
    l2 = identification_loss(p2, pair.clip2.label, tape)
    if config.loss == "verification":
        p_pair = verification_distribution(model, f1, f2, tape)
        lv = verification_loss(p_pair, pair.signal, tape)
        predicted = VerificationSignal(int(np.argmax(p_pair.data)))
    else:
        lv = contrastive_loss(f1, f2, pair.signal is VerificationSignal.SAME,
                              config.margin, tape)
        distance = float(np.linalg.norm(f1.data - f2.data))
        predicted = (VerificationSignal.SAME if distance < config.margin / 2.0
                     else VerificationSignal.DIFFERENT)
    return l1, l2, lv, predicted


def train(model: SiameseModel, dataset: SyntheticDataset, config: TrainConfig,
          snapshot_at: tuple[int, ...] = ()) -> TrainLog:
    """Run the training loop, mutating the model's parameters.

    Logged loss columns are batch means. pair_accuracy is the running mean
    of per-pair verification hits over all iterations so far. snapshot_at
    stores pre-step parameters and the exact batch for the named iterations
    so a test can recompute the logged losses independently.
    """
    rng = np.random.default_rng(config.seed)
    weights = LossWeights(config.lam)
    velocity = {name: np.zeros_like(p.data) for name, p in model.params.items()}
    log = TrainLog()
    pair_hits = 0
    pair_total = 0
    for iteration in range(1, config.iterations + 1):
        batch = sample_pairs(dataset, config.batch_pairs, config.same_ratio, rng)
        if iteration in snapshot_at:
            log.snapshots[iteration] = (
                {name: p.data.copy() for name, p in model.params.items()},
                list(batch))
        tape = GradientTape()
        terms1, terms2, termsv, totals = [], [], [], []
        try:
            for pair in batch:
                l1, l2, lv, predicted = pair_losses(model, pair, config, tape)
                terms1.append(l1)
                terms2.append(l2)
                termsv.append(lv)
                totals.append(overall_loss(l1, l2, lv, weights, tape))
                pair_hits += int(predicted is pair.signal)
                pair_total += 1
            batch_loss = mean_of(totals, tape)
            tape.backward(batch_loss)
        except NumericsError as error:
            raise NumericsError(f"iteration {iteration}: {error}") from error
        gradients = {name: tape.grad(p) for name, p in model.params.items()}
        sgd_step(model.params, gradients, velocity,
                 config.learning_rate, config.momentum)
        log.rows.append(LogRow(
            iteration=iteration,
            loss_id1=float(np.mean([t.item() for t in terms1])),
            loss_id2=float(np.mean([t.item() for t in terms2])),
            loss_ver=float(np.mean([t.item() for t in termsv])),
            loss=batch_loss.item(),
            pair_accuracy=pair_hits / pair_total,
        ))
    return log


def save_train_log(log: TrainLog, path: str | Path) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["iteration", "L_I1", "L_I2", "L_V", "L", "pair_accuracy"])
        for row in log.rows:
            writer.writerow([row.iteration, repr(row.loss_id1), repr(row.loss_id2),
                             repr(row.loss_ver), repr(row.loss),
                             repr(row.pair_accuracy)])


def load_train_log(path: str | Path) -> TrainLog:
    with open(path, newline="") as handle:
        rows = list(csv.reader(handle))
    if not rows or rows[0][0] != "iteration":
        raise ValueError(f"{path}: not a training log")
    log = TrainLog()
    for row in rows[1:]:
        log.rows.append(LogRow(iteration=int(row[0]), loss_id1=float(row[1]),
                               loss_id2=float(row[2]), loss_ver=float(row[3]),
                               loss=float(row[4]), pair_accuracy=float(row[5])))
    return log


def identification_accuracy(model: SiameseModel, clips) -> float:
    """Fraction of clips whose class-head argmax equals their label."""
    clips = list(clips)
    if not clips:
        raise ValueError("no clips to score")
    hits = 0
    for clip in clips:
        p = class_distribution(model, forward_features(model, clip))
        hits += int(int(np.argmax(p.data)) == clip.label)
    return hits / len(clips)


def pair_prediction(model: SiameseModel, clip1, clip2, loss: str = "verification",
                    margin: float = 1.0) -> VerificationSignal:
    """Same/different call for one pair, matching the trained objective:
    verification-head argmax, or feature distance against margin / 2 when
    the model was trained contrastively."""
    f1 = forward_features(model, clip1)
    f2 = forward_features(model, clip2)
    if loss == "verification":
        p = verification_distribution(model, f1, f2)
        return VerificationSignal(int(np.argmax(p.data)))
    distance = float(np.linalg.norm(f1.data - f2.data))
    return (VerificationSignal.SAME if distance < margin / 2.0
            else VerificationSignal.DIFFERENT)


def pair_verification_accuracy(model: SiameseModel, dataset: SyntheticDataset,
                               n_pairs: int, seed: int,
                               same_ratio: float = 0.5,
                               loss: str = "verification",
                               margin: float = 1.0) -> float:
    """Pair-call accuracy on pairs drawn from a held-out set."""
    rng = np.random.default_rng(seed)
    pairs = sample_pairs(dataset, n_pairs, same_ratio, rng)
    hits = sum(int(pair_prediction(model, p.clip1, p.clip2, loss, margin) is p.signal)
               for p in pairs)
    return hits / len(pairs)
