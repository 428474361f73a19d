"""Metrics for streaming discovery runs.

Known-class predictions carry persistent labels, so the known-class side of
each test snapshot is scored directly against the truth. Discovered ids are
arbitrary, so the novel-class side is matched agreement: the fraction of
samples explained under the best injective mapping from discovered ids to
true novel classes. Run-level numbers average the incremental stages, and
forgetting is the largest drop of known-class accuracy relative to the
initial stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment


def hungarian_assignment(matrix: np.ndarray, maximize: bool = False):
    """Optimal one-to-one assignment on a (possibly rectangular) matrix.

    Returns (row indices, column indices, total value along the matching).
    """
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    rows, cols = linear_sum_assignment(matrix, maximize=maximize)
    return rows, cols, float(matrix[rows, cols].sum())


def contingency_matrix(true_labels, pred_labels):
    """Count matrix between true classes (rows) and predicted ids (columns)."""
    true_labels = np.asarray(true_labels)
    pred_labels = np.asarray(pred_labels)
    if true_labels.shape != pred_labels.shape:
        raise ValueError("label arrays must align")
    true_ids = sorted(set(true_labels.tolist()))
    pred_ids = sorted(set(pred_labels.tolist()))
    M = np.zeros((len(true_ids), len(pred_ids)), dtype=np.int64)
    t_pos = {c: i for i, c in enumerate(true_ids)}
    p_pos = {c: i for i, c in enumerate(pred_ids)}
    for t, p in zip(true_labels, pred_labels):
        M[t_pos[t], p_pos[p]] += 1
    return M, true_ids, pred_ids


def match_clusters(true_labels, pred_labels):
    """Best predicted-id to true-class mapping by matched sample count."""
    M, true_ids, pred_ids = contingency_matrix(true_labels, pred_labels)
    rows, cols, _ = hungarian_assignment(M, maximize=True)
    return {pred_ids[c]: true_ids[r] for r, c in zip(rows, cols)}


def clustering_accuracy(true_labels, pred_labels) -> float:
    """Fraction of samples explained by the best cluster-to-class matching."""
    true_labels = np.asarray(true_labels)
    if true_labels.size == 0:
        raise ValueError("no samples")
    M, _, _ = contingency_matrix(true_labels, pred_labels)
    _, _, total = hungarian_assignment(M, maximize=True)
    return total / true_labels.size


@dataclass
class StageMetrics:
    stage: int
    n_samples: int
    n_known: int
    n_novel: int
    overall: float
    known_accuracy: float            # NaN when the stage holds no known samples
    novel_accuracy: float            # NaN when the stage holds no novel samples
    novel_mapping: dict = field(default_factory=dict)


def evaluate_stage(y_true, y_pred, known_classes, stage: int = 0) -> StageMetrics:
    """Score one test snapshot.

    Known-class test samples are scored against the truth as-is, because
    known predictions are label-bearing. Novel-class test samples are scored
    as matched agreement, with the matching ranging over discovered ids only:
    a novel sample predicted as a known class can never be matched.
    """
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ValueError("label arrays must align")
    if y_true.size == 0:
        raise ValueError("no samples")
    known_set = set(known_classes)
    is_known = np.array([t in known_set for t in y_true.tolist()])
    n = y_true.size
    n_known = int(is_known.sum())
    n_novel = n - n_known

    known_correct = 0
    known_acc = float("nan")
    if n_known:
        known_correct = int((y_true[is_known] == y_pred[is_known]).sum())
        known_acc = known_correct / n_known

    novel_correct = 0
    novel_acc = float("nan")
    mapping: dict = {}
    if n_novel:
        t_nov = y_true[~is_known]
        p_nov = y_pred[~is_known]
        discovered = np.array([p not in known_set for p in p_nov.tolist()])
        if discovered.any():
            M, true_ids, pred_ids = contingency_matrix(t_nov[discovered],
                                                       p_nov[discovered])
            rows, cols, total = hungarian_assignment(M, maximize=True)
            novel_correct = int(total)
            mapping = {pred_ids[c]: true_ids[r] for r, c in zip(rows, cols)}
        novel_acc = novel_correct / n_novel

    overall = (known_correct + novel_correct) / n
    return StageMetrics(stage, n, n_known, n_novel, overall, known_acc,
                        novel_acc, mapping)


def forgetting(known_by_stage) -> float:
    """Largest signed drop of known-class accuracy versus the initial stage.

    Negative values mean the accuracy only improved after stage 0.
    """
    series = [float(v) for v in known_by_stage]
    if len(series) < 2:
        return 0.0
    base = series[0]
    return max(base - v for v in series[1:])


@dataclass
class RunMetrics:
    per_stage: list
    m_o: float       # mean known-class accuracy across incremental stages
    m_d: float       # mean novel-class accuracy across incremental stages
    m_f: float       # forgetting, clamped at 0 for display
    m_f_raw: float   # signed forgetting (negative = accuracy improved)

    def as_dict(self) -> dict:
        return {
            "m_o": self.m_o,
            "m_d": self.m_d,
            "m_f": self.m_f,
            "m_f_raw": self.m_f_raw,
            "per_stage": [
                {
                    "stage": s.stage,
                    "overall": s.overall,
                    "known_accuracy": s.known_accuracy,
                    "novel_accuracy": s.novel_accuracy,
                    "n_samples": s.n_samples,
                    "n_known": s.n_known,
                    "n_novel": s.n_novel,
                }
                for s in self.per_stage
            ],
        }


def aggregate(stages) -> RunMetrics:
    """Run-level numbers: averages over stages after the initial one.

    Forgetting is measured on known-class accuracy against stage 0; the raw
    signed maximum is retained alongside the zero-clamped headline value.
    """
    stages = sorted(stages, key=lambda s: s.stage)
    if not stages:
        raise ValueError("no stages to aggregate")
    if stages[0].stage != 0 or not np.isfinite(stages[0].known_accuracy):
        raise ValueError("missing stage-0 known accuracy")
    incremental = [s for s in stages if s.stage > 0]
    if not incremental:
        raise ValueError("need at least one incremental stage")
    known_pool = [s.known_accuracy for s in incremental if s.n_known > 0]
    m_o = float(np.mean(known_pool)) if known_pool else float("nan")
    novel_pool = [s.novel_accuracy for s in incremental if s.n_novel > 0]
    m_d = float(np.mean(novel_pool)) if novel_pool else float("nan")
    m_f_raw = forgetting([s.known_accuracy for s in stages if s.n_known > 0])
    return RunMetrics(list(stages), m_o, m_d, max(0.0, m_f_raw), m_f_raw)
