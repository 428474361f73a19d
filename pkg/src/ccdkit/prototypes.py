"""Prototype banks: learnable contrastive prototypes and the orthogonal bank.

:class:`PrototypeBank` holds one learnable vector per known class. It is
trained jointly with the backbone by the margin contrastive loss and later
drives the known/novel split. :class:`OrthogonalBank` holds ``dim`` unit
vectors driven to mutual orthogonality; classes are permanently assigned to
prototypes and classification is nearest assigned prototype by cosine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    AdamState,
    ZeroVectorError,
    adam_step,
    normalize_rows,
    pairwise_cosine,
)


class CapacityError(RuntimeError):
    """All prototypes are assigned; the bank cannot host another class."""


@dataclass
class ContrastiveHyper:
    alpha: float = 32.0  # similarity scaling
    sigma: float = 0.1   # similarity margin

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not (0.0 <= self.sigma < 1.0):
            raise ValueError("sigma must lie in [0, 1)")


class PrototypeBank:
    """One prototype per known class; rows of ``vectors`` follow ``labels``."""

    def __init__(self, labels: list, vectors: np.ndarray, learnable: bool = True):
        vectors = np.asarray(vectors, dtype=np.float64)
        if len(labels) != len(set(labels)):
            raise ValueError("duplicate class labels")
        if vectors.shape[0] != len(labels):
            raise ValueError("one vector per label required")
        self.labels = list(labels)
        self.vectors = vectors
        self.learnable = learnable
        self._index = {lab: i for i, lab in enumerate(self.labels)}

    @classmethod
    def random_init(cls, labels: list, dim: int, rng: np.random.Generator):
        """Seeded unit-Gaussian draws, normalized to unit length."""
        V = rng.normal(size=(len(labels), dim))
        return cls(labels, normalize_rows(V), learnable=True)

    @classmethod
    def from_class_means(cls, reps: np.ndarray, labels: np.ndarray):
        """Non-learnable bank of per-class means (diversity-ablation variant)."""
        classes = sorted(set(labels.tolist()))
        means = np.stack([reps[labels == c].mean(axis=0) for c in classes])
        return cls(classes, means, learnable=False)

    def __len__(self) -> int:
        return len(self.labels)

    def index_of(self, label) -> int:
        if label not in self._index:
            raise KeyError(f"unknown class label {label!r}")
        return self._index[label]

    def similarities(self, F: np.ndarray) -> np.ndarray:
        """(n, C) cosine similarities of representations against all prototypes."""
        return pairwise_cosine(np.atleast_2d(F), self.vectors)

    def nearest(self, F: np.ndarray):
        """(max similarity, nearest label) per representation row."""
        sims = self.similarities(F)
        idx = np.argmax(sims, axis=1)
        labels = [self.labels[i] for i in idx]
        return sims[np.arange(len(idx)), idx], labels


def _cosine_backward(dS_dXhat, Xhat, norms):
    # Chain rule through row normalization y = x / |x|.
    inner = np.sum(dS_dXhat * Xhat, axis=1, keepdims=True)
    return (dS_dXhat - inner * Xhat) / norms[:, None]


def contrastive_loss(F: np.ndarray, label_indices: np.ndarray, bank: PrototypeBank,
                     hyper: ContrastiveHyper):
    """Margin contrastive loss over a batch, with gradients for F and the bank.

    Per sample: -alpha * (s(f, p_own) - sigma) plus the mean over the other
    prototypes of alpha * (s(f, p) + sigma); the second term is zero when the
    bank holds a single class. Returns (total loss, dL/dF, dL/dP).
    """
    F = np.atleast_2d(np.asarray(F, dtype=np.float64))
    label_indices = np.asarray(label_indices)
    n, C = F.shape[0], len(bank)
    if np.any(label_indices < 0) or np.any(label_indices >= C):
        raise KeyError("label index outside the bank")
    f_norms = np.linalg.norm(F, axis=1)
    p_norms = np.linalg.norm(bank.vectors, axis=1)
    if np.any(f_norms == 0.0) or np.any(p_norms == 0.0):
        raise ZeroVectorError("zero-norm representation or prototype")
    Fhat = F / f_norms[:, None]
    Phat = bank.vectors / p_norms[:, None]
    S = Fhat @ Phat.T

    alpha, sigma = hyper.alpha, hyper.sigma
    onehot = np.zeros((n, C))
    onehot[np.arange(n), label_indices] = 1.0
    own = S[np.arange(n), label_indices]
    if C > 1:
        neg_weight = alpha / (C - 1)
        neg_sum = S.sum(axis=1) - own
        loss = np.sum(-alpha * (own - sigma) + neg_weight * (neg_sum + (C - 1) * sigma))
        dS = neg_weight * (1.0 - onehot) - alpha * onehot
    else:
        loss = np.sum(-alpha * (own - sigma))
        dS = -alpha * onehot

    dF = _cosine_backward(dS @ Phat, Fhat, f_norms)
    dP = _cosine_backward(dS.T @ Fhat, Phat, p_norms)
    return float(loss), dF, dP


class OrthogonalBank:
    """``dim`` unit prototypes with a permanent, injective class assignment.

    The number of prototypes equals the representation dimension: that is the
    largest mutually orthogonal set the space can hold, and it reserves a
    position for every class that may ever be assigned.
    """

    def __init__(self, vectors: np.ndarray, tau: float = 0.1,
                 include_self_term: bool = True):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != vectors.shape[1]:
            raise ValueError("bank must hold exactly dim prototypes of size dim")
        if tau <= 0:
            raise ValueError("temperature must be positive")
        self.vectors = normalize_rows(vectors)
        self.tau = tau
        self.include_self_term = include_self_term
        self.assignment: dict = {}  # label -> prototype index, insertion-ordered

    @classmethod
    def random_init(cls, dim: int, rng: np.random.Generator, tau: float = 0.1,
                    include_self_term: bool = True):
        V = rng.normal(size=(dim, dim))
        return cls(V, tau=tau, include_self_term=include_self_term)

    @property
    def dim(self) -> int:
        return self.vectors.shape[0]

    def orthogonality_loss(self):
        """Mean log-sum-exp of pairwise dot products over temperature.

        Returns (loss, dL/dG). The j = i self term is included by default,
        matching the printed objective; it adds a constant exp(1/tau) inside
        each row's log-sum.
        """
        G = self.vectors
        d = self.dim
        if d == 0:
            raise ValueError("empty bank")
        S = G @ G.T / self.tau
        if not self.include_self_term:
            np.fill_diagonal(S, -np.inf)
        # Row-wise softmax weights of the log-sum-exp.
        S_max = S.max(axis=1, keepdims=True)
        expS = np.exp(S - S_max)
        Z = expS.sum(axis=1, keepdims=True)
        loss = float(np.mean(S_max + np.log(Z)))
        W = expS / Z
        if not self.include_self_term:
            np.fill_diagonal(W, 0.0)
        # g_k appears in row k (as anchor) and in every row i as a partner.
        dG = (W @ G + W.T @ G) / (d * self.tau)
        return loss, dG

    def max_offdiag_cosine(self) -> float:
        C = pairwise_cosine(self.vectors, self.vectors)
        np.fill_diagonal(C, 0.0)
        return float(np.max(np.abs(C)))

    def orthogonalize(self, steps: int = 2000, lr: float = 0.01,
                      final_lr: float = 1e-6) -> float:
        """Drive every prototype pair to a right angle.

        Descends the even extension of the objective (log-sum-exp of
        |g_i.g_j|/tau over the other rows): penalizing both signs of
        alignment makes the orthonormal bases the minimizers, where the raw
        objective would settle for slightly negative cosines instead. The
        self term is constant on the sphere, so it is dropped and the
        gradient is projected onto each row's tangent space before the Adam
        step; rows are renormalized afterwards. Cosine-decayed learning
        rate. Returns the final max off-diagonal |cosine|.
        """
        state = AdamState.for_params([self.vectors], lr=lr)
        d = self.dim
        for t in range(steps):
            G = self.vectors
            C = G @ G.T
            S = np.abs(C) / self.tau
            np.fill_diagonal(S, -np.inf)
            S_max = S.max(axis=1, keepdims=True)
            expS = np.exp(S - S_max)
            W = expS / expS.sum(axis=1, keepdims=True)
            np.fill_diagonal(W, 0.0)
            Wsig = W * np.sign(C)
            dG = (Wsig @ G + Wsig.T @ G) / (d * self.tau)
            dG -= np.sum(dG * G, axis=1, keepdims=True) * G
            frac = t / max(steps - 1, 1)
            step_lr = final_lr + 0.5 * (lr - final_lr) * (1.0 + np.cos(np.pi * frac))
            (V,) = adam_step([self.vectors], [dG], state, lr=step_lr)
            self.vectors = normalize_rows(V)
        return self.max_offdiag_cosine()

    def unassigned_indices(self) -> list[int]:
        taken = set(self.assignment.values())
        return [i for i in range(self.dim) if i not in taken]

    def assign_class(self, class_mean: np.ndarray, label) -> int:
        """Permanently assign a class to the most similar unassigned prototype.

        Argmax of cosine similarity over the unassigned set; ties break to
        the lowest index. Assignments are never revisited.
        """
        if label in self.assignment:
            raise ValueError(f"label {label!r} already assigned")
        free = self.unassigned_indices()
        if not free:
            raise CapacityError(f"all {self.dim} prototypes are assigned")
        sims = pairwise_cosine(class_mean[None, :], self.vectors[free])[0]
        best = free[int(np.argmax(sims))]
        self.assignment[label] = best
        return best

    def assigned(self):
        """(labels list, (K, d) prototype matrix) in assignment order."""
        labels = list(self.assignment.keys())
        if not labels:
            raise ValueError("no classes assigned")
        M = self.vectors[[self.assignment[lab] for lab in labels]]
        return labels, M

    def is_assigned(self, label) -> bool:
        return label in self.assignment

    def assignment_index(self, label) -> int:
        """Row of this class's prototype within the assigned matrix.

        Stable across stages because assignments are append-only.
        """
        for i, lab in enumerate(self.assignment.keys()):
            if lab == label:
                return i
        raise KeyError(f"label {label!r} has no assigned prototype")

    def classify(self, Z: np.ndarray):
        """Label of the assigned prototype most cosine-similar to each row."""
        labels, M = self.assigned()
        sims = pairwise_cosine(np.atleast_2d(Z), M)
        return [labels[i] for i in np.argmax(sims, axis=1)]
