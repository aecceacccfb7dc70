"""Synthetic parallel corpora with a known degradation.

The "natural" side is a set of smooth random cepstral trajectories with a
voiced/unvoiced f0 track. The "synthetic" side is the same utterance after
tempo resampling, temporal smoothing, a tanh amplitude warp and additive noise.
All values are rounded to float32 so corpora survive a trip through feature
files unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features_io import DEFAULT_FRAME_SHIFT_MS, Corpus, ParallelPair, Utterance

DEFAULT_FRAMES = (80, 300)


@dataclass(frozen=True)
class DistortionSpec:
    smoothing_width: int = 5
    warp_gain: float | None = 1.0  # None disables the warp
    noise_sd: float = 0.1
    tempo_factor: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.smoothing_width < 1 or self.smoothing_width % 2 == 0:
            raise ValueError(f"smoothing_width must be odd and positive, got {self.smoothing_width}")
        if self.warp_gain is not None and not self.warp_gain > 0:
            raise ValueError(f"warp_gain must be positive, got {self.warp_gain}")
        if self.noise_sd < 0:
            raise ValueError(f"noise_sd must be nonnegative, got {self.noise_sd}")
        if not 0.5 <= self.tempo_factor <= 2.0:
            raise ValueError(f"tempo_factor must lie in [0.5, 2], got {self.tempo_factor}")

    @classmethod
    def identity(cls, seed: int = 0) -> "DistortionSpec":
        return cls(smoothing_width=1, warp_gain=None, noise_sd=0.0, tempo_factor=1.0, seed=seed)

    @property
    def is_identity(self) -> bool:
        return (self.smoothing_width == 1 and self.warp_gain is None
                and self.noise_sd == 0 and self.tempo_factor == 1.0)


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def moving_average(x: np.ndarray, width: int) -> np.ndarray:
    """Centered moving average along axis 0, edges padded by repetition."""
    if width == 1:
        return x.copy()
    half = width // 2
    padded = np.concatenate([np.repeat(x[:1], half, axis=0), x, np.repeat(x[-1:], half, axis=0)])
    csum = np.cumsum(np.concatenate([np.zeros((1,) + x.shape[1:]), padded]), axis=0)
    return (csum[width:] - csum[:-width]) / width


def resample(n_out: int, f0, energy, mfcc):
    """Stretch a frame sequence to n_out frames.

    mfcc and energy are linearly interpolated; f0 takes the nearest frame so
    unvoiced zeros stay exact.
    """
    n_in = len(f0)
    pos = np.linspace(0.0, n_in - 1, n_out) if n_out > 1 else np.zeros(1)
    grid = np.arange(n_in)
    mf = np.stack([np.interp(pos, grid, mfcc[:, d]) for d in range(mfcc.shape[1])], axis=1)
    return f0[np.rint(pos).astype(int)], np.interp(pos, grid, energy), mf


def natural_utterance(uid: str, n_frames: int, dim: int, rng: np.random.Generator,
                      frame_shift_ms: float = DEFAULT_FRAME_SHIFT_MS) -> Utterance:
    t = np.arange(n_frames)
    scale = 1.0 / (1.0 + 0.3 * np.arange(dim))
    mfcc = np.empty((n_frames, dim))
    for d in range(dim):
        offset = rng.normal(0.0, 0.5 * scale[d])
        freqs = rng.uniform(0.004, 0.03, size=3)
        phases = rng.uniform(0, 2 * np.pi, size=3)
        amps = rng.uniform(0.3, 1.0, size=3) * scale[d]
        mfcc[:, d] = offset + (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None])).sum(0)

    # alternating silence / voiced runs, silence at both ends
    voiced = np.zeros(n_frames, dtype=bool)
    pos = int(rng.integers(5, 15))
    while pos < n_frames - 5:
        run = int(rng.integers(15, 50))
        voiced[pos:min(pos + run, n_frames - 5)] = True
        pos += run + int(rng.integers(5, 20))
    f0 = np.where(voiced, 110.0 + 20.0 * np.sin(2 * np.pi * 0.01 * t + rng.uniform(0, 6)), 0.0)
    energy = np.where(voiced, rng.normal(-1.0, 0.3, n_frames), rng.normal(-6.0, 0.5, n_frames))
    return Utterance(uid, _f32(f0), _f32(energy), _f32(mfcc), frame_shift_ms)


def degrade(natural: Utterance, spec: DistortionSpec, rng: np.random.Generator) -> Utterance:
    f0, energy, mfcc = natural.f0, natural.energy, natural.mfcc
    if spec.tempo_factor != 1.0:
        n_out = max(1, int(round(len(natural) * spec.tempo_factor)))
        f0, energy, mfcc = resample(n_out, f0, energy, mfcc)
    mfcc = moving_average(mfcc, spec.smoothing_width)
    if spec.warp_gain is not None:
        mfcc = spec.warp_gain * np.tanh(mfcc / spec.warp_gain)
    if spec.noise_sd > 0:
        mfcc = mfcc + rng.normal(0.0, spec.noise_sd, mfcc.shape)
    return Utterance(natural.id, _f32(f0), _f32(energy), _f32(mfcc), natural.frame_shift_ms)


def synth_corpus(n_pairs: int, frames_range=DEFAULT_FRAMES, dim: int = 39,
                 spec: DistortionSpec = DistortionSpec(), name: str = "synthetic") -> Corpus:
    if n_pairs < 3:
        raise ValueError(f"need at least 3 pairs, got {n_pairs}")
    if dim < 1:
        raise ValueError(f"dim must be positive, got {dim}")
    lo, hi = frames_range
    if not 1 <= lo <= hi:
        raise ValueError(f"bad frames range {frames_range}")
    aligned = spec.tempo_factor == 1.0
    pairs = []
    # per pair: one stream for the natural side, one for the degradation
    for k, child in enumerate(np.random.SeedSequence(spec.seed).spawn(n_pairs)):
        nat_seed, deg_seed = child.spawn(2)
        nat_rng = np.random.default_rng(nat_seed)
        uid = f"utt{k:04d}"
        n_frames = int(nat_rng.integers(lo, hi + 1))
        target = natural_utterance(uid, n_frames, dim, nat_rng)
        source = degrade(target, spec, np.random.default_rng(deg_seed))
        pairs.append(ParallelPair(uid, source, target, already_aligned=aligned))
    return Corpus(name, dim, pairs)
