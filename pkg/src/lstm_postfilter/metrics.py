"""Mel cepstral distortion with silence exclusion and corpus-level reporting."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .features_io import Utterance

ALPHA = 10.0 * math.sqrt(2.0) / math.log(10.0)
DEFAULT_D_START = 1


class MetricError(ValueError):
    pass


def frame_distances(target: Utterance, reference: Utterance, d_start: int = DEFAULT_D_START) -> np.ndarray:
    """Per-frame Euclidean cepstral distance over coefficients d_start..D-1."""
    if len(target) != len(reference) or target.dim != reference.dim:
        raise MetricError(
            f"shape mismatch: {len(target)}x{target.dim} vs {len(reference)}x{reference.dim}"
        )
    if not 0 <= d_start < target.dim:
        raise MetricError(f"d_start={d_start} outside [0, {target.dim})")
    diff = target.mfcc[:, d_start:] - reference.mfcc[:, d_start:]
    return np.sqrt(np.sum(diff * diff, axis=1))


def mcd(target: Utterance, reference: Utterance, mask=None,
        d_start: int = DEFAULT_D_START) -> tuple[float, int]:
    """Return (MCD in dB, number of frames used). ``mask`` is True for excluded frames."""
    dist = frame_distances(target, reference, d_start)
    keep = np.ones(len(dist), dtype=bool) if mask is None else ~np.asarray(mask, dtype=bool)
    if keep.shape != dist.shape:
        raise MetricError(f"mask has {keep.size} entries for {dist.size} frames")
    used = int(keep.sum())
    if used == 0:
        raise MetricError("every frame is masked")
    return ALPHA * float(np.sum(dist[keep])) / used, used


@dataclass(frozen=True)
class UtteranceMcd:
    id: str
    mcd: float
    frames_used: int
    frames_excluded: int


@dataclass(frozen=True)
class McdReport:
    per_utterance: tuple[UtteranceMcd, ...]
    corpus_mcd: float
    alpha: float = ALPHA

    @property
    def utterance_mean(self) -> float:
        return float(np.mean([u.mcd for u in self.per_utterance]))

    @property
    def frames_used(self) -> int:
        return sum(u.frames_used for u in self.per_utterance)

    @property
    def frames_excluded(self) -> int:
        return sum(u.frames_excluded for u in self.per_utterance)

    def ids(self) -> set[str]:
        return {u.id for u in self.per_utterance}


def corpus_mcd(pairs: Iterable[tuple[Utterance, Utterance, Sequence[bool] | None]],
               d_start: int = DEFAULT_D_START) -> McdReport:
    """Frame-weighted MCD over (target, reference, mask) triples.

    Entries are named after the reference utterance.
    """
    entries = []
    for target, reference, mask in pairs:
        value, used = mcd(target, reference, mask, d_start)
        entries.append(UtteranceMcd(reference.id, value, used, len(reference) - used))
    if not entries:
        raise MetricError("corpus_mcd needs at least one pair")
    total = sum(e.frames_used for e in entries)
    weighted = sum(e.mcd * e.frames_used for e in entries) / total
    return McdReport(tuple(entries), weighted)


def improvement(baseline: McdReport | float, treated: McdReport | float) -> float:
    """Relative MCD reduction in percent."""
    if isinstance(baseline, McdReport) and isinstance(treated, McdReport):
        if baseline.ids() != treated.ids():
            raise MetricError("reports cover different utterances")
    b = baseline.corpus_mcd if isinstance(baseline, McdReport) else float(baseline)
    t = treated.corpus_mcd if isinstance(treated, McdReport) else float(treated)
    if b == 0:
        raise MetricError("baseline MCD is zero; improvement undefined")
    return 100.0 * (b - t) / b


def write_report_csv(report: McdReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "mcd", "frames_used", "frames_excluded"])
        for e in report.per_utterance:
            w.writerow([e.id, f"{e.mcd:.12g}", e.frames_used, e.frames_excluded])
        w.writerow(["TOTAL", f"{report.corpus_mcd:.12g}", report.frames_used, report.frames_excluded])
