"""Replay memory: static known-class pool and the accumulating dynamic pool.

Both pools hold backbone-space representations. The static pool stores, per
known class, the ``m`` representations nearest the class mean and never
changes afterwards. The dynamic pool accumulates every representation the
splitter flags as novel, across all stages, and is re-clustered jointly each
stage.
"""

from __future__ import annotations

import io
import struct

import numpy as np

BYTES_PER_REAL = 8  # float64 storage

POOL_MAGIC = b"CCDP"


class StaticPool:
    """Per-class representative representations, frozen once built."""

    def __init__(self, entries: dict, capacity: int):
        self.entries = entries  # label -> (k, d) array
        self.capacity = capacity

    @classmethod
    def build(cls, reps: np.ndarray, labels: np.ndarray, m: int) -> "StaticPool":
        """Keep, per class, the m representations closest to the class mean.

        Classes with fewer than m members keep everything. Euclidean
        distance; ties resolved by stable sort order.
        """
        if m < 1:
            raise ValueError("capacity m must be at least 1")
        reps = np.asarray(reps, dtype=np.float64)
        labels = np.asarray(labels)
        classes = sorted(set(labels.tolist()))
        if not classes:
            raise ValueError("empty class set")
        entries = {}
        for c in classes:
            members = reps[labels == c]
            mean = members.mean(axis=0)
            dist = np.linalg.norm(members - mean, axis=1)
            keep = np.argsort(dist, kind="stable")[:m]
            entries[c] = members[keep].copy()
        return cls(entries, m)

    def __len__(self) -> int:
        return int(sum(len(v) for v in self.entries.values()))

    @property
    def classes(self) -> list:
        return list(self.entries.keys())

    def nbytes(self) -> int:
        return int(sum(v.shape[0] * v.shape[1] * BYTES_PER_REAL for v in self.entries.values()))

    def replay_epoch(self, rng: np.random.Generator):
        """All stored (representation, label) pairs once, in seeded shuffle order."""
        if len(self) == 0:
            raise ValueError("empty static pool")
        reps = []
        labs = []
        for c, block in self.entries.items():
            reps.append(block)
            labs.extend([c] * len(block))
        X = np.concatenate(reps, axis=0)
        order = rng.permutation(len(labs))
        return X[order], [labs[i] for i in order]

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(POOL_MAGIC)
        buf.write(struct.pack("<BI", 1, len(self.entries)))
        buf.write(struct.pack("<I", self.capacity))
        for c, block in self.entries.items():
            key = repr(c).encode()
            buf.write(struct.pack("<H", len(key)))
            buf.write(key)
            buf.write(struct.pack("<II", *block.shape))
            buf.write(np.ascontiguousarray(block, dtype="<f8").tobytes())
        return buf.getvalue()


class DynamicPool:
    """Union of all novel-flagged representations, tagged by arrival stage."""

    def __init__(self, dim: int):
        self.dim = dim
        self._blocks: list[np.ndarray] = []
        self._stage_tags: list[int] = []

    def update(self, novel_reps: np.ndarray, stage: int) -> None:
        """Append this stage's novel representations (multiset union)."""
        novel_reps = np.atleast_2d(np.asarray(novel_reps, dtype=np.float64))
        if novel_reps.shape[0] == 0:
            return
        if novel_reps.shape[1] != self.dim:
            raise ValueError(f"dim mismatch: {novel_reps.shape[1]} != {self.dim}")
        self._blocks.append(novel_reps.copy())
        self._stage_tags.extend([stage] * novel_reps.shape[0])

    def __len__(self) -> int:
        return len(self._stage_tags)

    @property
    def stage_tags(self) -> np.ndarray:
        return np.asarray(self._stage_tags, dtype=np.int64)

    def all_entries(self) -> np.ndarray:
        if not self._blocks:
            return np.zeros((0, self.dim))
        return np.concatenate(self._blocks, axis=0)

    def nbytes(self) -> int:
        return len(self) * self.dim * BYTES_PER_REAL
