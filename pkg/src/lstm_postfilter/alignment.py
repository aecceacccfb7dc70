"""Frame correspondence between a synthetic utterance and its natural counterpart."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features_io import DataError, ParallelPair, Utterance


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class AlignmentPath:
    steps: tuple[tuple[int, int], ...]
    cost: float = 0.0

    def __post_init__(self):
        steps = tuple((int(i), int(j)) for i, j in self.steps)
        object.__setattr__(self, "steps", steps)
        if not steps or steps[0] != (0, 0):
            raise AlignmentError("path must start at (0, 0)")
        for (i0, j0), (i1, j1) in zip(steps, steps[1:]):
            di, dj = i1 - i0, j1 - j0
            if di not in (0, 1) or dj not in (0, 1) or di == dj == 0:
                raise AlignmentError(f"non-monotone step ({i0},{j0}) -> ({i1},{j1})")

    @property
    def source_len(self) -> int:
        return self.steps[-1][0] + 1

    @property
    def target_len(self) -> int:
        return self.steps[-1][1] + 1

    def __len__(self):
        return len(self.steps)

    def to_text(self) -> str:
        return "".join(f"{i}\t{j}\n" for i, j in self.steps)

    @classmethod
    def from_text(cls, text: str) -> "AlignmentPath":
        steps = [tuple(int(v) for v in line.split("\t")) for line in text.splitlines() if line]
        return cls(tuple(steps))


def frame_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance between every row of ``a`` and every row of ``b``."""
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2))


def dtw_path(cost: np.ndarray) -> AlignmentPath:
    """Minimum-cost monotone path through a local cost matrix.

    Steps are (1,1), (1,0), (0,1). On ties the diagonal wins, then the step that
    advances the source index.
    """
    n, m = cost.shape
    acc = np.full((n, m), np.inf)
    # 0 diagonal, 1 source advance (from i-1), 2 target advance (from j-1)
    back = np.zeros((n, m), dtype=np.int8)
    acc[0, 0] = cost[0, 0]
    for j in range(1, m):
        acc[0, j] = acc[0, j - 1] + cost[0, j]
        back[0, j] = 2
    for i in range(1, n):
        acc[i, 0] = acc[i - 1, 0] + cost[i, 0]
        back[i, 0] = 1
        row, prev, crow = acc[i], acc[i - 1], cost[i]
        brow = back[i]
        for j in range(1, m):
            best, move = prev[j - 1], 0
            if prev[j] < best:
                best, move = prev[j], 1
            if row[j - 1] < best:
                best, move = row[j - 1], 2
            row[j] = best + crow[j]
            brow[j] = move

    i, j = n - 1, m - 1
    steps = [(i, j)]
    while (i, j) != (0, 0):
        move = back[i, j]
        if move == 0:
            i, j = i - 1, j - 1
        elif move == 1:
            i -= 1
        else:
            j -= 1
        steps.append((i, j))
    return AlignmentPath(tuple(reversed(steps)), float(acc[n - 1, m - 1]))


def dtw_align(source: Utterance, target: Utterance, distance: str = "euclidean-mfcc") -> AlignmentPath:
    if distance != "euclidean-mfcc":
        raise AlignmentError(f"unknown distance {distance!r}")
    if source.dim != target.dim:
        raise DataError(f"dimension mismatch: {source.dim} vs {target.dim}")
    return dtw_path(frame_distances(source.mfcc, target.mfcc))


def path_cost(cost: np.ndarray, steps) -> float:
    total = 0.0
    for i, j in steps:
        total += cost[i, j]
    return float(total)


def source_to_target_index(pair: ParallelPair) -> np.ndarray:
    """For every source frame, the first target frame matched to it."""
    n, m = len(pair.source), len(pair.target)
    if pair.already_aligned:
        return np.arange(n)
    path = pair.alignment
    if path is None:
        if n != m:
            raise AlignmentError(f"pair {pair.id!r} has no alignment and unequal lengths")
        return np.arange(n)
    if path.source_len != n or path.target_len != m:
        raise AlignmentError(f"pair {pair.id!r}: alignment does not span {n}x{m} frames")
    index = np.full(n, -1, dtype=np.intp)
    for i, j in path.steps:
        if index[i] < 0:
            index[i] = j
    return index


def collapse_to_pairs(pair: ParallelPair) -> tuple[np.ndarray, np.ndarray]:
    """Training arrays (inputs, targets), one row per source frame."""
    idx = source_to_target_index(pair)
    return pair.source.mfcc, pair.target.mfcc[idx]


def aligned_reference(pair: ParallelPair) -> Utterance:
    """The target utterance resampled onto the source frame grid."""
    return pair.target.select(source_to_target_index(pair))


def align_pair(pair: ParallelPair) -> ParallelPair:
    """Attach a DTW alignment unless the pair is already frame-synchronous."""
    if pair.already_aligned or pair.alignment is not None:
        return pair
    return ParallelPair(pair.id, pair.source, pair.target, dtw_align(pair.source, pair.target))
