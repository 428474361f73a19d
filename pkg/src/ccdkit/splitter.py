"""Known/novel batch splitting: similarity threshold, then a trained refiner.

The non-parametric pass thresholds each sample's best cosine similarity
against the known-class prototypes. The extremes of that score distribution
become reliable training data for a small sigmoid classifier, which then
re-decides the whole batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import FeedForwardNet
from .numerics import AdamState, adam_step
from .prototypes import PrototypeBank


class InsufficientReliableError(RuntimeError):
    """Too few reliable samples on one side to train the refiner."""


class TrainingDivergedError(RuntimeError):
    """The refiner loss became non-finite."""


@dataclass
class SplitConfig:
    epsilon: float = 0.0       # similarity threshold; >epsilon means known
    delta: float = 0.1         # reliable-band margin around epsilon
    mlp_hidden: int = 32
    mlp_epochs: int = 50
    mlp_lr: float = 1e-3
    batch_size: int = 128

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be positive")


@dataclass
class SplitResult:
    known_indices: np.ndarray
    novel_indices: np.ndarray
    known_labels: list                    # nearest-prototype pseudo-label per known sample
    max_sims: np.ndarray                  # best prototype similarity per batch sample
    reliable_mask: np.ndarray | None = None
    refined: bool = False
    extra: dict = field(default_factory=dict)


def nonparametric_split(reps: np.ndarray, bank: PrototypeBank,
                        epsilon: float) -> SplitResult:
    """Threshold split: known iff max prototype similarity exceeds epsilon.

    Ties (similarity exactly epsilon) go to the novel side, the conservative
    choice for discovery.
    """
    reps = np.atleast_2d(reps)
    if reps.shape[0] == 0:
        raise ValueError("empty batch")
    if len(bank) == 0:
        raise ValueError("empty prototype bank")
    sims, nearest = bank.nearest(reps)
    known_mask = sims > epsilon
    known_idx = np.flatnonzero(known_mask)
    novel_idx = np.flatnonzero(~known_mask)
    return SplitResult(
        known_indices=known_idx,
        novel_indices=novel_idx,
        known_labels=[nearest[i] for i in known_idx],
        max_sims=sims,
    )


def select_reliable(max_sims: np.ndarray, epsilon: float, delta: float):
    """Indices and binary labels of the reliable extremes.

    Kept iff max similarity <= epsilon - delta (labeled 0, novel) or
    >= epsilon + delta (labeled 1, known); the middle band is discarded.
    Needs at least two samples on each side.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    low = max_sims <= epsilon - delta
    high = max_sims >= epsilon + delta
    if low.sum() < 2 or high.sum() < 2:
        raise InsufficientReliableError(
            f"reliable sides too small: novel={int(low.sum())}, known={int(high.sum())}"
        )
    idx = np.flatnonzero(low | high)
    labels = high[idx].astype(np.float64)
    return idx, labels


def train_refiner(reps: np.ndarray, labels: np.ndarray, config: SplitConfig,
                  rng: np.random.Generator) -> FeedForwardNet:
    """Fit the binary known-vs-novel classifier on the reliable samples."""
    d = reps.shape[1]
    net = FeedForwardNet.build([d, config.mlp_hidden, 1], ["tanh", "sigmoid"], rng)
    state = AdamState.for_params(net.params(), lr=config.mlp_lr)
    n = len(reps)
    for _ in range(config.mlp_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            sel = order[start:start + config.batch_size]
            X, y = reps[sel], labels[sel]
            prob, trace = net.forward(X, want_trace=True)
            prob = np.clip(prob[:, 0], 1e-12, 1.0 - 1e-12)
            loss = -np.mean(y * np.log(prob) + (1.0 - y) * np.log(1.0 - prob))
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"refiner loss became {loss} after {state.step_count} steps"
                )
            dprob = ((prob - y) / (prob * (1.0 - prob))) / len(sel)
            grads, _ = net.backward(trace, dprob[:, None])
            net.set_params(adam_step(net.params(), grads, state))
    return net


def parametric_split(reps: np.ndarray, bank: PrototypeBank, config: SplitConfig,
                     rng: np.random.Generator) -> SplitResult:
    """Full split: threshold pass, reliable selection, refiner over everything.

    The refiner's 0.5 decision re-partitions the entire batch, including the
    reliable samples it was trained on.
    """
    prelim = nonparametric_split(reps, bank, config.epsilon)
    idx, labels = select_reliable(prelim.max_sims, config.epsilon, config.delta)
    net = train_refiner(reps[idx], labels, config, rng)
    prob = net.forward(reps)[:, 0]
    known_mask = prob > 0.5
    known_idx = np.flatnonzero(known_mask)
    novel_idx = np.flatnonzero(~known_mask)
    _, nearest = bank.nearest(reps)
    result = SplitResult(
        known_indices=known_idx,
        novel_indices=novel_idx,
        known_labels=[nearest[i] for i in known_idx],
        max_sims=prelim.max_sims,
        refined=True,
    )
    result.reliable_mask = np.zeros(len(reps), dtype=bool)
    result.reliable_mask[idx] = True
    result.extra["refiner_probs"] = prob
    return result


def calibrate_epsilon(reps: np.ndarray, labels: np.ndarray, bank: PrototypeBank,
                      own_quantile: float = 0.05,
                      other_quantile: float = 0.95,
                      own_weight: float = 0.5) -> float:
    """Data-driven threshold from labeled representations.

    Novel samples behave like outsiders to every prototype, so the best
    similarity of a labeled sample against the *other* classes' prototypes
    stands in for the novel-side score distribution. The threshold
    interpolates between a high quantile of that outsider score and a low
    quantile of own-prototype similarity; ``own_weight`` pulls it toward the
    known side, which guards against unseen classes scoring higher than the
    labeled impostors do.
    """
    if not (0.0 <= own_weight <= 1.0):
        raise ValueError("own_weight must lie in [0, 1]")
    sims = bank.similarities(reps)
    own_col = np.array([bank.index_of(lab) for lab in labels])
    rows = np.arange(len(labels))
    own = sims[rows, own_col]
    masked = sims.copy()
    masked[rows, own_col] = -np.inf
    other = masked.max(axis=1)
    lo = float(np.quantile(own, own_quantile))
    hi = float(np.quantile(other, other_quantile))
    return own_weight * lo + (1.0 - own_weight) * hi
