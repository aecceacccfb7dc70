"""Corpus splitting, the SGD training loop, and postfilter application."""
from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import network as nn
from .alignment import aligned_reference, align_pair, collapse_to_pairs
from .features_io import DEFAULT_SILENCE_PERCENTILE, Corpus, ParallelPair, Utterance, silence_mask
from .metrics import DEFAULT_D_START, McdReport, corpus_mcd

log = logging.getLogger(__name__)

DEFAULT_SPLIT = (0.70, 0.20, 0.10)


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss. Carries the best parameters so far."""

    def __init__(self, message, params=None, records=()):
        super().__init__(message)
        self.params = params
        self.records = list(records)


@dataclass
class TrainingConfig:
    epochs: int = 100
    learning_rate: float = 1e-4
    momentum: float = 0.9
    lr_decay: float = 1.0
    seed: int = 0
    grad_clip: float | None = 5.0
    split: tuple[float, float, float] = DEFAULT_SPLIT
    eval_every: int = 1
    patience: int | None = None
    d_start: int = DEFAULT_D_START
    silence_percentile: float = DEFAULT_SILENCE_PERCENTILE

    def __post_init__(self):
        self.split = tuple(float(r) for r in self.split)
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive or None")
        check_ratios(self.split)
        if self.eval_every < 1:
            raise ValueError("eval_every must be positive")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be positive or None")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d


def check_ratios(ratios: Sequence[float]) -> None:
    if len(ratios) != 3 or any(not 0 < r < 1 for r in ratios):
        raise ValueError(f"split ratios must be three values in (0, 1), got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {sum(ratios)}")


@dataclass(frozen=True)
class SplitCorpus:
    train: tuple[ParallelPair, ...]
    validation: tuple[ParallelPair, ...]
    test: tuple[ParallelPair, ...]

    def buckets(self):
        return {"train": self.train, "validation": self.validation, "test": self.test}


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    validation_mcd: float
    wall_time_s: float = field(default=0.0, compare=False)


def split_corpus(corpus: Corpus, ratios=DEFAULT_SPLIT, seed: int = 0) -> SplitCorpus:
    """Utterance-level split with frame-count shares close to ``ratios``.

    Pairs are visited in seeded shuffled order; a pair goes to the current
    bucket while the frames assigned so far fall short of that bucket's
    cumulative target. Each bucket receives at least one pair.
    """
    check_ratios(ratios)
    pairs = list(corpus.pairs)
    if len(pairs) < 3:
        raise ValueError(f"need at least 3 pairs to fill three buckets, got {len(pairs)}")
    order = np.random.default_rng(seed).permutation(len(pairs))
    total = sum(len(p.source) for p in pairs)
    bounds = np.cumsum(ratios) * total
    buckets: list[list[ParallelPair]] = [[], [], []]
    k, done = 0, 0
    for n, idx in enumerate(order):
        pair = pairs[idx]
        remaining = len(pairs) - n
        while k < 2 and buckets[k] and (done >= bounds[k] - 1e-9 * total or remaining <= 2 - k):
            k += 1
        buckets[k].append(pair)
        done += len(pair.source)
    if not all(buckets):
        raise ValueError("too few pairs to populate all buckets")
    return SplitCorpus(*(tuple(b) for b in buckets))


# ---------------------------------------------------------------- application

def postfilter_apply(params: nn.NetworkParams, u: Utterance) -> Utterance:
    """Replace the mfcc block with the network output; everything else is kept."""
    if u.dim != params.input_size or params.output_size != u.dim:
        raise ValueError(f"utterance D={u.dim} does not match network {params.dims}")
    x = u.mfcc if params.norm is None else params.norm.encode_input(u.mfcc)
    y, _ = nn.forward(params, x)
    if params.norm is not None:
        y = params.norm.decode_output(y)
    return u.with_mfcc(y)


def evaluate_pairs(pairs: Sequence[ParallelPair], params: nn.NetworkParams | None = None,
                   d_start: int = DEFAULT_D_START,
                   silence_percentile: float = DEFAULT_SILENCE_PERCENTILE,
                   threads: int = 1) -> McdReport:
    """MCD of (postfiltered) sources against their aligned natural references.

    With ``params`` None the unprocessed sources are scored (the baseline).
    The silence mask comes from the reference.
    """
    def one(pair):
        ref = aligned_reference(pair)
        out = pair.source if params is None else postfilter_apply(params, pair.source)
        return out, ref, silence_mask(ref, silence_percentile)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            triples = list(pool.map(one, pairs))
    else:
        triples = [one(p) for p in pairs]
    return corpus_mcd(triples, d_start)


# ---------------------------------------------------------------- training

def sgd_update(params: nn.NetworkParams, grads: nn.NetworkParams, velocity: nn.NetworkParams,
               lr: float, momentum: float) -> None:
    for (_, p), (_, g), (_, v) in zip(params.tensors(), grads.tensors(), velocity.tensors()):
        v *= momentum
        v -= lr * g
        p += v


def clip_gradients(grads: nn.NetworkParams, max_norm: float | None) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for _, g in grads.tensors()))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for _, g in grads.tensors():
            g *= scale
    return norm


def training_arrays(pairs: Sequence[ParallelPair]) -> list[tuple[np.ndarray, np.ndarray]]:
    return [collapse_to_pairs(align_pair(p)) for p in pairs]


def utterance_gradient(params: nn.NetworkParams, x: np.ndarray, t: np.ndarray):
    """Loss and BPTT gradient of one (already normalized) sequence."""
    ys, cache = nn.forward(params, x)
    loss, dys = nn.sequence_loss(ys, t)
    return loss, nn.backward(params, cache, dys)


def initial_params(split: SplitCorpus, dims: Sequence[int], config: TrainingConfig,
                   kinds: str | Sequence[str] = nn.LSTM, eq7_literal: bool = False,
                   ) -> nn.NetworkParams:
    """Seeded initialization with the normalizer fitted on the train bucket."""
    init_seq = np.random.SeedSequence(config.seed).spawn(2)[0]
    params = nn.init_params(dims, int(init_seq.generate_state(1)[0]), kinds, eq7_literal)
    raw = training_arrays(split.train)
    params.norm = nn.Normalizer.fit(np.concatenate([x for x, _ in raw]),
                                    np.concatenate([t for _, t in raw]))
    return params


def run_epoch(params: nn.NetworkParams, velocity: nn.NetworkParams, data, order,
              config: TrainingConfig, lr: float | None = None) -> float:
    """One pass of per-utterance SGD in the given order; returns the summed loss."""
    lr = config.learning_rate if lr is None else lr
    total = 0.0
    for idx in order:
        x, t = data[idx]
        loss, grads = utterance_gradient(params, x, t)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss on sequence {idx}")
        clip_gradients(grads, config.grad_clip)
        sgd_update(params, grads, velocity, lr, config.momentum)
        total += loss
    return total


def train(split: SplitCorpus, dims: Sequence[int], config: TrainingConfig,
          kinds: str | Sequence[str] = nn.LSTM, eq7_literal: bool = False, threads: int = 1,
          clock: Callable[[], float] = time.perf_counter,
          on_record: Callable[[EpochRecord], None] | None = None,
          ) -> tuple[nn.NetworkParams, list[EpochRecord]]:
    """Train a postfilter and return the parameters with the best validation MCD.

    Epoch 0 records the untrained network, so the result is never worse than
    the initialization on the validation bucket.
    """
    dims = tuple(dims)
    if not split.train or not split.validation:
        raise ValueError("train and validation buckets must be nonempty")
    dim = split.train[0].dim
    if dims[0] != dim or dims[-1] != dim:
        raise ValueError(f"network dims {dims} do not match corpus D={dim}")

    params = initial_params(split, dims, config, kinds, eq7_literal)
    data = [(params.norm.encode_input(x), params.norm.encode_target(t))
            for x, t in training_arrays(split.train)]
    n_frames = sum(len(x) for x, _ in data)
    validation = [align_pair(p) for p in split.validation]
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[1])

    def validate(p):
        return evaluate_pairs(validation, p, config.d_start, config.silence_percentile,
                              threads).corpus_mcd

    start = clock()
    loss0 = sum(nn.sequence_loss(nn.forward(params, x)[0], t)[0] for x, t in data)
    best_mcd = validate(params)
    best = params.copy()
    records = [EpochRecord(0, loss0 / n_frames, best_mcd, clock() - start)]
    if on_record:
        on_record(records[-1])
    velocity = params.zeros_like()
    stale = 0

    for epoch in range(1, config.epochs + 1):
        try:
            lr = config.learning_rate * config.lr_decay ** (epoch - 1)
            total = run_epoch(params, velocity, data, rng.permutation(len(data)), config, lr)
        except DivergenceError as exc:
            raise DivergenceError(f"epoch {epoch}: {exc}", best, records) from None
        if epoch % config.eval_every and epoch != config.epochs:
            continue
        try:
            val = validate(params)
        except nn.NumericError as exc:
            raise DivergenceError(f"epoch {epoch}: {exc}", best, records) from None
        if not math.isfinite(val):
            raise DivergenceError(f"non-finite validation MCD at epoch {epoch}", best, records)
        records.append(EpochRecord(epoch, total / n_frames, val, clock() - start))
        if on_record:
            on_record(records[-1])
        log.info("epoch %d loss %.6g validation MCD %.4f", epoch, total / n_frames, val)
        if val < best_mcd:
            best_mcd, best, stale = val, params.copy(), 0
        else:
            stale += 1
            if config.patience is not None and stale >= config.patience:
                log.info("early stop after %d evaluations without improvement", stale)
                break
    return best, records


def write_epoch_csv(records: Sequence[EpochRecord], path, timing: bool = True) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "validation_mcd", "wall_time_s"])
        for r in records:
            wall = r.wall_time_s if timing else 0.0
            w.writerow([r.epoch, repr(float(r.train_loss)), repr(float(r.validation_mcd)), repr(float(wall))])


def read_epoch_csv(path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        return [EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["validation_mcd"]),
                            float(r["wall_time_s"])) for r in csv.DictReader(fh)]
