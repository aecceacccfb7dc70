"""Figure data: coefficient trajectories and cepstral log-envelopes.

Without a vocoder there is no spectrogram to draw, so the envelope export is a
purely parametric stand-in: the cosine series of the frame's cepstrum on a
linear grid of the (already mel-warped) frequency axis. No further frequency
warping is applied.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .features_io import Utterance


@dataclass(frozen=True)
class TrajectoryTable:
    coefficient_index: int
    time_ms: np.ndarray
    natural: np.ndarray
    hts: np.ndarray
    postfiltered: np.ndarray

    def __len__(self):
        return len(self.time_ms)

    def rows(self):
        return zip(self.time_ms, self.natural, self.hts, self.postfiltered)


def export_trajectory(natural: Utterance, hts: Utterance, post: Utterance, coeff: int) -> TrajectoryTable:
    n = len(natural)
    if len(hts) != n or len(post) != n:
        raise ValueError(f"frame counts differ: {n}, {len(hts)}, {len(post)}")
    if not 0 <= coeff < natural.dim or hts.dim != natural.dim or post.dim != natural.dim:
        raise IndexError(f"coefficient {coeff} out of range for D={natural.dim}")
    return TrajectoryTable(
        coeff,
        np.arange(n) * natural.frame_shift_ms,
        natural.mfcc[:, coeff].copy(),
        hts.mfcc[:, coeff].copy(),
        post.mfcc[:, coeff].copy(),
    )


def mfcc_to_envelope(u: Utterance, n_bins: int = 256, includes_c0: bool = True) -> np.ndarray:
    """Log-envelope per frame, shape (frames, n_bins).

    ``env(w_k) = c0 + 2 * sum_d c_d cos(d w_k)`` with ``w_k = pi k / (n_bins - 1)``.
    With ``includes_c0`` False the stored vector is read as c_1..c_D and c0 is 0.
    """
    if n_bins < u.dim or n_bins < 2:
        raise ValueError(f"n_bins={n_bins} must be at least D={u.dim} and 2")
    w = np.pi * np.arange(n_bins) / (n_bins - 1)
    if includes_c0:
        c0, ceps, orders = u.mfcc[:, 0], u.mfcc[:, 1:], np.arange(1, u.dim)
    else:
        c0, ceps, orders = np.zeros(len(u)), u.mfcc, np.arange(1, u.dim + 1)
    basis = 2.0 * np.cos(np.outer(orders, w))
    return c0[:, None] + ceps @ basis


def write_trajectory_csv(table: TrajectoryTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_ms", "natural", "hts", "postfiltered"])
        for row in table.rows():
            w.writerow([f"{v:.12g}" for v in row])


def write_matrix_csv(matrix: np.ndarray, path, prefix: str = "bin") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"{prefix}_{k}" for k in range(matrix.shape[1])])
        for row in matrix:
            w.writerow([f"{v:.12g}" for v in row])


def read_matrix_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
