"""Deterministic numeric kernel: similarities, Adam, seeded RNG, gradient checking.

Everything operates on float64 numpy arrays. Vectors are 1-D arrays, batches
are (n, d) arrays. All randomness flows through an explicit
``numpy.random.Generator`` so that identical seeds give identical runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ZeroVectorError(ValueError):
    """Raised when an operation that needs a direction gets a zero-norm vector."""


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the single entry point for randomness."""
    return np.random.default_rng(np.uint64(seed))


def as_vector(values) -> np.ndarray:
    """Validate and convert to a finite float64 1-D array."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector contains NaN or Inf")
    return v


def cosine_similarity(a, b) -> float:
    """Cosine similarity a.b / (|a||b|), in [-1, 1].

    Raises ZeroVectorError for zero-norm input instead of silently returning 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dim mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("cosine similarity undefined for zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def normalize_rows(X: np.ndarray) -> np.ndarray:
    """Rows scaled to unit norm. Raises ZeroVectorError on a zero row."""
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ZeroVectorError("cannot normalize zero-norm row")
    return X / norms


def pairwise_cosine(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """(n, m) matrix of cosine similarities between rows of A and rows of B."""
    return np.clip(normalize_rows(A) @ normalize_rows(B).T, -1.0, 1.0)


def squared_distances(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """(n, m) matrix of squared Euclidean distances between rows.

    Self-distances come out exactly zero when both arguments are the same
    array, which callers rely on to mask diagonals.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    same = A is B
    sq = (
        np.sum(A * A, axis=1)[:, None]
        + np.sum(B * B, axis=1)[None, :]
        - 2.0 * (A @ B.T)
    )
    sq = np.maximum(sq, 0.0)
    if same:
        np.fill_diagonal(sq, 0.0)
    return sq


@dataclass
class AdamState:
    """Per-parameter-list Adam state with optional decoupled weight decay.

    The weight decay default of 0 makes this plain Adam; a positive value
    gives the decoupled (AdamW-style) update.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    def __post_init__(self):
        if not (self.lr > 0):
            raise ValueError("learning rate must be positive")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")
        if not (0.0 < self.eps < 1e-3):
            raise ValueError("epsilon must lie in (0, 1e-3)")

    @classmethod
    def for_params(cls, params, **kwargs) -> "AdamState":
        state = cls(**kwargs)
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
        return state


def adam_step(params, grads, state: AdamState, lr: float | None = None):
    """One bias-corrected Adam update over a list of parameter arrays.

    Returns fresh arrays (inputs are not mutated); increments
    ``state.step_count`` by exactly one. ``lr`` overrides the state's
    learning rate for this step, used by schedules.
    """
    if len(params) != len(state.first_moment):
        raise ValueError("state does not belong to this parameter list")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch: param {p.shape} vs grad {g.shape}")
    step_lr = state.lr if lr is None else lr
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state.first_moment[i]
        v = state.second_moment[i]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        new_p = p - step_lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay > 0.0:
            new_p = new_p - step_lr * state.weight_decay * p
        out.append(new_p)
    return out


def finite_diff_grad(loss_fn, params: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar loss over a flat parameter vector.

    The test-suite oracle: (L(x + h e_i) - L(x - h e_i)) / 2h per coordinate.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = np.asarray(params, dtype=np.float64)
    grad = np.zeros_like(params)
    for i in range(params.size):
        bump = np.zeros_like(params)
        bump.flat[i] = h
        grad.flat[i] = (loss_fn(params + bump) - loss_fn(params - bump)) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max relative disagreement, guarded for near-zero gradients."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    scale = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / scale))
