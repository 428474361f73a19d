"""Synthetic stream generation, embedding files, and run reports.

A stream is a labeled initial batch followed by unlabeled batches in which
earlier classes keep appearing while new ones arrive. Class blocks release
their training samples across stages according to a percentage table; counts
are realized with largest-remainder rounding so every class spends exactly
its budget. Test data is held out per class at a one-to-one ratio with train
and is evaluated cumulatively over the classes seen so far.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .numerics import make_rng

# Rows are class blocks (initial block first, then one block per incremental
# stage); columns are the percentage of each class's training samples that
# arrive at stages 0..3.
DEFAULT_SPLIT_TABLE = (
    (0.87, 0.07, 0.03, 0.03),
    (0.00, 0.70, 0.20, 0.10),
    (0.00, 0.00, 0.90, 0.10),
    (0.00, 0.00, 0.00, 1.00),
)

EMBED_MAGIC = b"CCDE"
EMBED_VERSION = 1
SCHEMA_VERSION = 1


def largest_remainder(total: int, fractions) -> list:
    """Integer allocation of ``total`` proportional to ``fractions``.

    Floors the raw shares, then hands remaining units to the largest
    fractional parts; ties go to the earlier position.
    """
    raw = [total * float(f) for f in fractions]
    base = [int(np.floor(r)) for r in raw]
    leftover = total - sum(base)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:leftover]:
        base[i] += 1
    return base


@dataclass
class StreamSpec:
    n_known: int = 14
    novel_per_stage: tuple = (2, 2, 2)
    samples_per_class: int = 60      # split 1:1 into train and test
    dim: int = 16
    center_scale: float = 1.0
    cluster_std: float = 0.15
    split_table: tuple = DEFAULT_SPLIT_TABLE

    def __post_init__(self):
        if self.n_known < 1:
            raise ValueError("need at least one initial class")
        if self.samples_per_class % 2 != 0:
            raise ValueError("samples_per_class must split evenly into train and test")
        n_blocks = 1 + len(self.novel_per_stage)
        if len(self.split_table) != n_blocks:
            raise ValueError("split table needs one row per class block")
        for row in self.split_table:
            if len(row) != self.n_stages:
                raise ValueError("split table rows must cover every stage")
            if abs(sum(row) - 1.0) > 1e-9:
                raise ValueError("split table rows must sum to 1")

    @property
    def n_stages(self) -> int:
        return 1 + len(self.novel_per_stage)

    @property
    def n_classes(self) -> int:
        return self.n_known + sum(self.novel_per_stage)


@dataclass
class Stream:
    spec: StreamSpec
    train_batches: list                 # per stage: (X, y) with y the true ids
    test_X: np.ndarray
    test_y: np.ndarray
    appeared_by_stage: list             # class ids present in train through stage t
    known_classes: list
    centers: np.ndarray

    def test_split_at(self, stage: int):
        """Cumulative test set over every class that has appeared by ``stage``."""
        allowed = set(self.appeared_by_stage[stage])
        mask = np.array([y in allowed for y in self.test_y.tolist()])
        return self.test_X[mask], self.test_y[mask]


def generate_stream(spec: StreamSpec, seed: int) -> Stream:
    """Draw Gaussian class blobs and schedule them across stages."""
    rng = make_rng(seed)
    n_train = spec.samples_per_class // 2
    for row in spec.split_table:
        counts = largest_remainder(n_train, row)
        if any(f > 0 and c == 0 for f, c in zip(row, counts)):
            raise ValueError("samples_per_class too small for the split percentages")
    centers = rng.standard_normal((spec.n_classes, spec.dim)) * spec.center_scale

    block_of_class = []
    for block, size in enumerate((spec.n_known,) + tuple(spec.novel_per_stage)):
        block_of_class.extend([block] * size)

    per_stage_X = [[] for _ in range(spec.n_stages)]
    per_stage_y = [[] for _ in range(spec.n_stages)]
    test_X, test_y = [], []
    for cid in range(spec.n_classes):
        pts = centers[cid] + rng.standard_normal((spec.samples_per_class, spec.dim)) * spec.cluster_std
        train, test = pts[:n_train], pts[n_train:]
        test_X.append(test)
        test_y.append(np.full(len(test), cid, dtype=np.int64))
        counts = largest_remainder(n_train, spec.split_table[block_of_class[cid]])
        start = 0
        for stage, c in enumerate(counts):
            if c:
                per_stage_X[stage].append(train[start:start + c])
                per_stage_y[stage].append(np.full(c, cid, dtype=np.int64))
            start += c

    batches = []
    appeared: list = []
    seen: set = set()
    for stage in range(spec.n_stages):
        X = np.concatenate(per_stage_X[stage])
        y = np.concatenate(per_stage_y[stage])
        order = rng.permutation(len(X))
        batches.append((X[order], y[order]))
        seen |= set(y.tolist())
        appeared.append(sorted(seen))

    return Stream(
        spec=spec,
        train_batches=batches,
        test_X=np.concatenate(test_X),
        test_y=np.concatenate(test_y),
        appeared_by_stage=appeared,
        known_classes=list(range(spec.n_known)),
        centers=centers,
    )


def _check_finite(X):
    bad = np.flatnonzero(~np.all(np.isfinite(X), axis=1))
    if bad.size:
        raise ValueError(f"non-finite embedding at row {int(bad[0])}")


def save_embeddings_text(path, X, labels=None):
    """Plain-text embeddings: a header line, then one sample per line."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    _check_finite(X)
    labeled = labels is not None
    lines = [f"dim={X.shape[1]},labeled={int(labeled)}"]
    for i, row in enumerate(X):
        cells = [repr(float(v)) for v in row]
        if labeled:
            cells.append(str(int(labels[i])))
        lines.append(" ".join(cells))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_embeddings_text(path):
    with open(path) as fh:
        header = fh.readline().strip()
        try:
            dim_part, lab_part = header.split(",")
            dim = int(dim_part.split("=")[1])
            labeled = bool(int(lab_part.split("=")[1]))
        except (ValueError, IndexError):
            raise ValueError(f"bad embedding header: {header!r}")
        rows, labels = [], []
        for i, line in enumerate(fh):
            cells = line.split()
            if not cells:
                continue
            if len(cells) != dim + int(labeled):
                raise ValueError(f"row {i} has {len(cells)} fields, expected {dim + int(labeled)}")
            rows.append([float(c) for c in cells[:dim]])
            if labeled:
                labels.append(int(cells[dim]))
    X = np.asarray(rows, dtype=np.float64).reshape(len(rows), dim)
    _check_finite(X)
    return X, (np.asarray(labels, dtype=np.int64) if labeled else None)


def save_embeddings(path, X, labels=None):
    """Binary embeddings: magic, version, count, dim, flag, f32 rows, i32 labels."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    _check_finite(X)
    labeled = labels is not None
    with open(path, "wb") as fh:
        fh.write(EMBED_MAGIC)
        fh.write(np.uint8(EMBED_VERSION).tobytes())
        fh.write(np.uint32(X.shape[0]).astype("<u4").tobytes())
        fh.write(np.uint32(X.shape[1]).astype("<u4").tobytes())
        fh.write(np.uint8(int(labeled)).tobytes())
        fh.write(X.astype("<f4").tobytes())
        if labeled:
            fh.write(np.asarray(labels, dtype="<i4").tobytes())


def load_embeddings(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != EMBED_MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        version = int(np.frombuffer(fh.read(1), dtype=np.uint8)[0])
        if version != EMBED_VERSION:
            raise ValueError(f"unsupported embedding format version {version}")
        count = int(np.frombuffer(fh.read(4), dtype="<u4")[0])
        dim = int(np.frombuffer(fh.read(4), dtype="<u4")[0])
        labeled = bool(np.frombuffer(fh.read(1), dtype=np.uint8)[0])
        X = np.frombuffer(fh.read(count * dim * 4), dtype="<f4")
        if X.size != count * dim:
            raise ValueError("truncated embedding payload")
        X = X.astype(np.float64).reshape(count, dim)
        labels = None
        if labeled:
            labels = np.frombuffer(fh.read(count * 4), dtype="<i4").astype(np.int64)
            if labels.size != count:
                raise ValueError("truncated label payload")
    _check_finite(X)
    return X, labels


TIMING_KEYS = ("wall_time_s",)


def make_stage_report(stage: int, *, n_train: int, n_known_pred: int,
                      n_novel_pred: int, n_discarded: int,
                      estimated_novel_classes: int,
                      estimated_total_classes: int, discovered_ids,
                      metrics: dict, static_pool_bytes: int,
                      dynamic_pool_bytes: int, wall_time_s: float,
                      notes=(), predictions=None) -> dict:
    report = {
        "schema_version": SCHEMA_VERSION,
        "stage": int(stage),
        "counts": {
            "train": int(n_train),
            "predicted_known": int(n_known_pred),
            "predicted_novel": int(n_novel_pred),
            "discarded": int(n_discarded),
        },
        "estimated_novel_classes": int(estimated_novel_classes),
        "estimated_total_classes": int(estimated_total_classes),
        "discovered_ids": [int(i) for i in discovered_ids],
        "metrics": {k: float(v) for k, v in metrics.items()},
        "storage": {
            "static_pool_bytes": int(static_pool_bytes),
            "dynamic_pool_bytes": int(dynamic_pool_bytes),
        },
        "notes": list(notes),
        "wall_time_s": float(wall_time_s),
    }
    if predictions is not None:
        true_y, pred_y = predictions
        report["predictions"] = {
            "true": [int(v) for v in true_y],
            "predicted": [int(v) for v in pred_y],
        }
    return report


def _strip_keys(obj, keys):
    if isinstance(obj, dict):
        return {k: _strip_keys(v, keys) for k, v in obj.items() if k not in keys}
    if isinstance(obj, list):
        return [_strip_keys(v, keys) for v in obj]
    return obj


def report_json(report, include_timing: bool = True) -> str:
    """Canonical JSON: sorted keys, fixed separators, shortest-repr floats.

    With ``include_timing=False`` the wall-time fields are removed, which is
    the form used to compare runs byte for byte.
    """
    body = report if include_timing else _strip_keys(report, TIMING_KEYS)
    return json.dumps(body, sort_keys=True, separators=(",", ":"), allow_nan=False)


def save_report(path, report):
    with open(path, "w") as fh:
        fh.write(report_json(report, include_timing=True) + "\n")


def load_report(path):
    with open(path) as fh:
        report = json.load(fh)
    version = report.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported report schema version {version!r}")
    return report
