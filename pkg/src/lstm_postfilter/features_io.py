"""Frame-level feature data model and the binary feature file format.

A feature file stores one utterance, little-endian::

    b"CFT1"  u32 version=1  u32 D  u32 frame_count  f32 frame_shift_ms
    u32 id_length  id bytes (UTF-8)
    frame_count x (f32 f0, f32 energy, D x f32 mfcc)

A corpus manifest is plain text, one ``pair_id<TAB>source_path<TAB>target_path``
line per parallel pair. Relative paths resolve against the manifest directory.
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

MAGIC = b"CFT1"
VERSION = 1
DEFAULT_DIM = 39
DEFAULT_FRAME_SHIFT_MS = 5.0
DEFAULT_SILENCE_PERCENTILE = 10.0

_HEADER = struct.Struct("<4sIIIfI")


class FeatureError(Exception):
    """Base class for feature data and file errors."""


class FormatError(FeatureError):
    """Bad magic, version or header fields."""


class CorruptionError(FeatureError):
    """Header and payload disagree."""


class DataError(FeatureError):
    """Values violate the feature invariants (non-finite, negative f0, ...)."""

    def __init__(self, message: str, frame: int | None = None):
        super().__init__(message if frame is None else f"frame {frame}: {message}")
        self.frame = frame


class EmptyVoicedError(FeatureError):
    """Every frame is silent, so no distortion can be measured."""


@dataclass(frozen=True)
class FrameVector:
    f0: float
    energy: float
    mfcc: tuple[float, ...]

    def __post_init__(self):
        values = (self.f0, self.energy, *self.mfcc)
        if not all(math.isfinite(v) for v in values):
            raise DataError("non-finite value in frame")
        if self.f0 < 0:
            raise DataError(f"negative f0 {self.f0}")


def _frozen(a, ndim: int) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True)
    if arr.ndim != ndim:
        raise DataError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Utterance:
    """One sentence worth of frames, held as column arrays.

    ``f0`` and ``energy`` have shape (T,), ``mfcc`` has shape (T, D). The arrays
    are float64 and read-only.
    """

    id: str
    f0: np.ndarray
    energy: np.ndarray
    mfcc: np.ndarray
    frame_shift_ms: float = DEFAULT_FRAME_SHIFT_MS

    def __post_init__(self):
        object.__setattr__(self, "f0", _frozen(self.f0, 1))
        object.__setattr__(self, "energy", _frozen(self.energy, 1))
        object.__setattr__(self, "mfcc", _frozen(self.mfcc, 2))
        if not self.id:
            raise DataError("utterance id must be nonempty")
        if not (math.isfinite(self.frame_shift_ms) and self.frame_shift_ms > 0):
            raise DataError(f"frame shift must be positive, got {self.frame_shift_ms}")
        n = len(self.f0)
        if n == 0:
            raise DataError(f"utterance {self.id!r} has no frames")
        if len(self.energy) != n or self.mfcc.shape[0] != n:
            raise DataError("f0, energy and mfcc disagree on frame count")
        if self.mfcc.shape[1] == 0:
            raise DataError("mfcc dimension must be positive")
        finite = (
            np.isfinite(self.f0) & np.isfinite(self.energy) & np.isfinite(self.mfcc).all(axis=1)
        )
        if not finite.all():
            raise DataError("non-finite value", frame=int(np.argmin(finite)))
        if (self.f0 < 0).any():
            raise DataError("negative f0", frame=int(np.argmax(self.f0 < 0)))

    @classmethod
    def from_frames(cls, id: str, frames: Sequence[FrameVector],
                    frame_shift_ms: float = DEFAULT_FRAME_SHIFT_MS) -> "Utterance":
        if not frames:
            raise DataError(f"utterance {id!r} has no frames")
        dims = {len(fr.mfcc) for fr in frames}
        if len(dims) != 1:
            raise DataError("frames disagree on mfcc dimension")
        return cls(
            id=id,
            f0=[fr.f0 for fr in frames],
            energy=[fr.energy for fr in frames],
            mfcc=[fr.mfcc for fr in frames],
            frame_shift_ms=frame_shift_ms,
        )

    @property
    def dim(self) -> int:
        return self.mfcc.shape[1]

    def __len__(self) -> int:
        return len(self.f0)

    @property
    def frames(self) -> tuple[FrameVector, ...]:
        return tuple(
            FrameVector(float(f), float(e), tuple(float(v) for v in m))
            for f, e, m in zip(self.f0, self.energy, self.mfcc)
        )

    def with_mfcc(self, mfcc) -> "Utterance":
        """Copy with the mfcc block replaced; f0, energy and metadata are kept."""
        return Utterance(self.id, self.f0, self.energy, mfcc, self.frame_shift_ms)

    def select(self, indices, id: str | None = None) -> "Utterance":
        idx = np.asarray(indices, dtype=np.intp)
        return Utterance(id or self.id, self.f0[idx], self.energy[idx], self.mfcc[idx],
                         self.frame_shift_ms)

    def __eq__(self, other):
        if not isinstance(other, Utterance):
            return NotImplemented
        return (
            self.id == other.id
            and self.frame_shift_ms == other.frame_shift_ms
            and self.mfcc.shape == other.mfcc.shape
            and np.array_equal(self.f0, other.f0)
            and np.array_equal(self.energy, other.energy)
            and np.array_equal(self.mfcc, other.mfcc)
        )

    __hash__ = None


@dataclass(frozen=True)
class ParallelPair:
    """A synthetic (source) utterance and its natural (target) counterpart.

    ``alignment`` is an :class:`~lstm_postfilter.alignment.AlignmentPath` or
    None; ``already_aligned`` marks frame-synchronous pairs.
    """

    id: str
    source: Utterance
    target: Utterance
    alignment: object = None
    already_aligned: bool = False

    def __post_init__(self):
        if self.source.dim != self.target.dim:
            raise DataError(
                f"pair {self.id!r}: source D={self.source.dim} != target D={self.target.dim}"
            )
        if self.already_aligned and len(self.source) != len(self.target):
            raise DataError(f"pair {self.id!r} marked aligned but frame counts differ")

    @property
    def dim(self) -> int:
        return self.source.dim


@dataclass(frozen=True)
class Corpus:
    name: str
    dim: int
    pairs: tuple[ParallelPair, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        ids = [p.id for p in self.pairs]
        if len(set(ids)) != len(ids):
            raise DataError(f"corpus {self.name!r} has duplicate pair ids")
        for p in self.pairs:
            if p.dim != self.dim:
                raise DataError(f"pair {p.id!r} has D={p.dim}, corpus declares {self.dim}")

    def __iter__(self) -> Iterator[ParallelPair]:
        return iter(self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)


# ---------------------------------------------------------------- file format

def encode_utterance(u: Utterance) -> bytes:
    id_bytes = u.id.encode("utf-8")
    header = _HEADER.pack(MAGIC, VERSION, u.dim, len(u), u.frame_shift_ms, len(id_bytes))
    records = np.empty((len(u), 2 + u.dim), dtype="<f4")
    records[:, 0] = u.f0
    records[:, 1] = u.energy
    records[:, 2:] = u.mfcc
    return header + id_bytes + records.tobytes()


def decode_utterance(data: bytes) -> Utterance:
    if len(data) < _HEADER.size:
        raise FormatError(f"file too short for header ({len(data)} bytes)")
    magic, version, dim, n_frames, shift, id_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if dim == 0:
        raise FormatError("header declares D=0")
    if n_frames == 0:
        raise FormatError("header declares zero frames")
    if not (math.isfinite(shift) and shift > 0):
        raise FormatError(f"bad frame shift {shift}")
    start = _HEADER.size + id_len
    if id_len == 0 or start > len(data):
        raise FormatError(f"bad id length {id_len}")
    try:
        uid = data[_HEADER.size:start].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"id is not UTF-8: {exc}") from None
    expected = n_frames * (2 + dim) * 4
    if len(data) - start != expected:
        raise CorruptionError(
            f"header declares {n_frames} frames of D={dim} ({expected} bytes), "
            f"payload has {len(data) - start} bytes"
        )
    records = np.frombuffer(data, dtype="<f4", offset=start).reshape(n_frames, 2 + dim)
    return Utterance(uid, records[:, 0], records[:, 1], records[:, 2:], float(shift))


def write_utterance(u: Utterance, path) -> None:
    try:
        Path(path).write_bytes(encode_utterance(u))
    except OSError as exc:
        raise OSError(f"cannot write feature file {path}: {exc}") from exc


def read_utterance(path) -> Utterance:
    data = Path(path).read_bytes()
    try:
        return decode_utterance(data)
    except FeatureError as exc:
        exc.args = (f"{path}: {exc}",)
        raise


def read_manifest(path) -> list[tuple[str, Path, Path]]:
    path = Path(path)
    base = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
        pid, src, tgt = parts
        entries.append((pid, base / src, base / tgt))
    return entries


def write_manifest(path, entries: Sequence[tuple[str, str, str]]) -> None:
    lines = [f"{pid}\t{src}\t{tgt}\n" for pid, src, tgt in entries]
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_corpus(manifest, name: str | None = None) -> Corpus:
    """Read every pair in a manifest. Equal-length pairs are marked aligned."""
    pairs = []
    for pid, src, tgt in read_manifest(manifest):
        s, t = read_utterance(src), read_utterance(tgt)
        pairs.append(ParallelPair(pid, s, t, already_aligned=len(s) == len(t)))
    if not pairs:
        raise FormatError(f"manifest {manifest} lists no pairs")
    return Corpus(name or Path(manifest).stem, pairs[0].dim, pairs)


def save_corpus(corpus: Corpus, out_dir) -> Path:
    """Write ``source/<id>.cft``, ``target/<id>.cft`` and ``manifest.tsv``."""
    out = Path(out_dir)
    (out / "source").mkdir(parents=True, exist_ok=True)
    (out / "target").mkdir(parents=True, exist_ok=True)
    entries = []
    for p in corpus:
        src = os.path.join("source", f"{p.id}.cft")
        tgt = os.path.join("target", f"{p.id}.cft")
        write_utterance(p.source, out / src)
        write_utterance(p.target, out / tgt)
        entries.append((p.id, src, tgt))
    manifest = out / "manifest.tsv"
    write_manifest(manifest, entries)
    return manifest


# ------------------------------------------------------------------- silence

def nearest_rank(values, percentile: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value (min for p=0)."""
    if not 0.0 <= percentile <= 100.0:
        raise ValueError(f"percentile must lie in [0, 100], got {percentile}")
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    rank = max(1, math.ceil(percentile / 100.0 * len(ordered)))
    return float(ordered[rank - 1])


def silence_mask(u: Utterance, energy_percentile: float = DEFAULT_SILENCE_PERCENTILE) -> np.ndarray:
    """True for frames that are unvoiced and quieter than the energy percentile."""
    threshold = nearest_rank(u.energy, energy_percentile)
    mask = (u.f0 == 0.0) & (u.energy < threshold)
    if mask.all():
        raise EmptyVoicedError(f"utterance {u.id!r}: every frame is silent")
    return mask
