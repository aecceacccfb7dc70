"""Command-line entry point: ``lstm-postfilter <subcommand> [flags]``.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines whose keys
are flag names (``noise-sd`` or ``noise_sd``). Flags override the file, which
overrides built-in defaults.

Exit codes: 0 success, 1 usage, 2 data/format, 3 numeric divergence, 4 internal.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import network as nn
from .alignment import AlignmentError, align_pair, aligned_reference, dtw_align
from .export import export_trajectory, mfcc_to_envelope, write_matrix_csv, write_trajectory_csv
from .features_io import (
    Corpus, FeatureError, ParallelPair, load_corpus, read_manifest, read_utterance,
    save_corpus, write_utterance,
)
from .metrics import MetricError, improvement, write_report_csv
from .synthdata import DistortionSpec, synth_corpus
from .training import (
    DivergenceError, TrainingConfig, evaluate_pairs, postfilter_apply, split_corpus, train,
    write_epoch_csv,
)

log = logging.getLogger("lstm_postfilter")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED, EXIT_INTERNAL = 0, 1, 2, 3, 4
GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_MAX_SIZE = 8
GRADCHECK_MAX_T = 10


class UsageError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@contextlib.contextmanager
def stage(name: str):
    log.info("stage %s", name)
    try:
        yield
    except (UsageError, StageError):
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- arg types

def _optional_float(text: str) -> float | None:
    return None if text.lower() in ("none", "off", "") else float(text)


def _optional_int(text: str) -> int | None:
    return None if text.lower() in ("none", "off", "") else int(text)


def _ratios(text: str) -> tuple[float, float, float]:
    vals = tuple(float(v) for v in text.split(","))
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("split needs three comma-separated ratios")
    return vals


def _dims(text: str) -> tuple[int, ...]:
    try:
        return nn.parse_dims(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _range(text: str) -> tuple[int, int]:
    lo, _, hi = text.partition(":")
    return int(lo), int(hi or lo)


# ---------------------------------------------------------------- parser

def _add_distortion(p):
    p.add_argument("--n-pairs", type=int, default=30)
    p.add_argument("--frames", type=_range, default=(80, 300), help="min:max frames per utterance")
    p.add_argument("--dim", type=int, default=39)
    p.add_argument("--smoothing-width", type=int, default=5)
    p.add_argument("--warp-gain", type=_optional_float, default=1.0, help="'none' disables")
    p.add_argument("--noise-sd", type=float, default=0.1)
    p.add_argument("--tempo-factor", type=float, default=1.0)


def _add_metric(p):
    p.add_argument("--d-start", type=int, default=1, help="first cepstral index in MCD")
    p.add_argument("--silence-percentile", type=float, default=10.0)


def _add_training(p, dims_default="39:200:160:200:39"):
    p.add_argument("--dims", type=_dims, default=_dims(dims_default))
    p.add_argument("--cell", choices=nn.KINDS, default=nn.LSTM)
    p.add_argument("--eq7-literal", action="store_true",
                   help="h = i*tanh(c) instead of o*tanh(c)")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--lr-decay", type=float, default=1.0, help="per-epoch learning-rate factor")
    p.add_argument("--clip", type=_optional_float, default=5.0, help="global norm; 'none' disables")
    p.add_argument("--split", type=_ratios, default=(0.7, 0.2, 0.1))
    p.add_argument("--eval-every", type=int, default=1)
    p.add_argument("--patience", type=_optional_int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--deterministic", action="store_true",
                   help="single thread and zeroed wall-clock column, for byte-identical output")
    _add_metric(p)


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = _Parser(prog="lstm-postfilter", description=__doc__.split("\n")[0])
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    subs = {}

    def add(name, help):
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("--config", type=Path, help="key=value file; flags take precedence")
        subs[name] = p
        return p

    p = add("synth-corpus", "write a synthetic parallel corpus and its manifest")
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="synthetic")
    _add_distortion(p)

    p = add("align", "DTW-align two feature files; writes 'i<TAB>j' lines")
    p.add_argument("--source", type=Path, required=True)
    p.add_argument("--target", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = add("train", "train a postfilter on a corpus manifest")
    p.add_argument("--corpus", type=Path, required=True, help="manifest file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--log", type=Path, help="epoch CSV path")
    _add_training(p)

    p = add("postfilter", "apply a trained checkpoint to feature files")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, nargs="+", required=True)
    p.add_argument("--out-dir", type=Path, required=True)

    p = add("evaluate", "MCD of test utterances against natural references")
    p.add_argument("--manifest", type=Path, required=True,
                   help="lines: id<TAB>test_path<TAB>natural_path")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--threads", type=int, default=1)
    _add_metric(p)

    p = add("export", "figure data as CSV")
    ex = p.add_subparsers(dest="what", required=True, parser_class=_Parser)
    t = ex.add_parser("trajectory", help="one coefficient of natural, hts and postfiltered")
    t.add_argument("--natural", type=Path, required=True)
    t.add_argument("--hts", type=Path, required=True)
    t.add_argument("--post", type=Path, required=True)
    t.add_argument("--coeff", type=int, default=5)
    t.add_argument("--out", type=Path, required=True)
    e = ex.add_parser("envelope", help="cepstral log-envelope matrix, frames x bins")
    e.add_argument("--input", type=Path, required=True)
    e.add_argument("--n-bins", type=int, default=256)
    e.add_argument("--no-c0", action="store_true", help="stored vector starts at c1")
    e.add_argument("--out", type=Path, required=True)

    p = add("gradcheck", "compare BPTT gradients with central differences")
    p.add_argument("--dims", type=_dims, default=(2, 3, 2))
    p.add_argument("--cell", choices=nn.KINDS, default=nn.LSTM)
    p.add_argument("--eq7-literal", action="store_true")
    p.add_argument("--T", type=int, default=5)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--out", type=Path, help="CSV report path")

    p = add("pipeline", "synthesize or ingest, align, split, train, postfilter, evaluate")
    p.add_argument("--corpus", type=Path, help="manifest; synthesized when omitted")
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_distortion(p)
    _add_training(p, "39:200:160:200:39")
    return parser, subs


def read_config_file(path: Path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _apply_config(sub: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    unknown = sorted(set(values) - set(actions))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    defaults = {}
    for key, value in values.items():
        action = actions[key]
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = value.lower() in ("1", "true", "yes", "on")
        else:
            defaults[key] = value
        action.required = False
    sub.set_defaults(**defaults)


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    parser, subs = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    probe = _Parser(add_help=False)
    probe.add_argument("--config", type=Path)
    known, _ = probe.parse_known_args(argv)
    if known.config is not None:
        command = next((a for a in argv if a in subs), None)
        if command is None:
            raise UsageError("--config must follow a subcommand")
        try:
            values = read_config_file(known.config)
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        _apply_config(subs[command], values)
    return parser.parse_args(argv)


# ---------------------------------------------------------------- operations

def gradcheck(dims: Sequence[int], seed: int = 7, T: int = 5, epsilon: float = 1e-5,
              kinds: str = nn.LSTM, eq7_literal: bool = False) -> dict[str, float]:
    """Max relative error between analytic and finite-difference gradients, per tensor."""
    if any(d > GRADCHECK_MAX_SIZE for d in dims) or not 1 <= T <= GRADCHECK_MAX_T:
        raise UsageError(
            f"gradcheck is limited to sizes <= {GRADCHECK_MAX_SIZE} and T <= {GRADCHECK_MAX_T}"
        )
    params = nn.random_params(dims, seed, kinds, eq7_literal=eq7_literal)
    rng = np.random.default_rng([seed, 1])
    xs = rng.normal(size=(T, dims[0]))
    ts = rng.normal(size=(T, dims[-1]))
    return nn.gradient_check(params, xs, ts, epsilon)


def training_config(args) -> TrainingConfig:
    return TrainingConfig(
        epochs=args.epochs, learning_rate=args.lr, momentum=args.momentum,
        lr_decay=args.lr_decay, seed=args.seed,
        grad_clip=args.clip, split=args.split, eval_every=args.eval_every,
        patience=args.patience, d_start=args.d_start,
        silence_percentile=args.silence_percentile,
    )


def checkpoint_echo(args, config: TrainingConfig) -> str:
    return nn.config_echo({
        "training": config.to_dict(),
        "dims": list(args.dims),
        "cell": args.cell,
        "eq7_literal": bool(args.eq7_literal),
    })


def _threads(args) -> int:
    return 1 if args.deterministic else max(1, args.threads)


def _train_and_save(args, split, out_ckpt: Path, epoch_csv: Path | None):
    config = training_config(args)
    echo = checkpoint_echo(args, config)
    try:
        params, records = train(split, args.dims, config, args.cell, args.eq7_literal,
                                threads=_threads(args))
    except DivergenceError as exc:
        if exc.params is not None:
            nn.save_checkpoint(out_ckpt, nn.Checkpoint(exc.params, config.seed, echo))
        if epoch_csv is not None:
            write_epoch_csv(exc.records, epoch_csv, timing=not args.deterministic)
        raise
    nn.save_checkpoint(out_ckpt, nn.Checkpoint(params, config.seed, echo))
    if epoch_csv is not None:
        write_epoch_csv(records, epoch_csv, timing=not args.deterministic)
    return params, records


def _distortion(args) -> DistortionSpec:
    return DistortionSpec(args.smoothing_width, args.warp_gain, args.noise_sd,
                          args.tempo_factor, args.seed)


def cmd_synth_corpus(args) -> int:
    corpus = synth_corpus(args.n_pairs, args.frames, args.dim, _distortion(args), args.name)
    manifest = save_corpus(corpus, args.out_dir)
    log.info("wrote %d pairs, manifest %s", len(corpus), manifest)
    return EXIT_OK


def cmd_align(args) -> int:
    path = dtw_align(read_utterance(args.source), read_utterance(args.target))
    args.out.write_text(path.to_text())
    log.info("alignment of %d steps, cost %.6g", len(path), path.cost)
    return EXIT_OK


def cmd_train(args) -> int:
    corpus = load_corpus(args.corpus)
    corpus = Corpus(corpus.name, corpus.dim, [align_pair(p) for p in corpus])
    split = split_corpus(corpus, args.split, args.seed)
    _train_and_save(args, split, args.out, args.log)
    return EXIT_OK


def cmd_postfilter(args) -> int:
    params = nn.load_checkpoint(args.checkpoint).params
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for path in args.input:
        write_utterance(postfilter_apply(params, read_utterance(path)), args.out_dir / path.name)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pairs = []
    for pid, test_path, ref_path in read_manifest(args.manifest):
        test, ref = read_utterance(test_path), read_utterance(ref_path)
        pairs.append(align_pair(ParallelPair(pid, test, ref, already_aligned=len(test) == len(ref))))
    report = evaluate_pairs(pairs, None, args.d_start, args.silence_percentile, max(1, args.threads))
    write_report_csv(report, args.out)
    log.info("corpus MCD %.4f dB over %d frames", report.corpus_mcd, report.frames_used)
    return EXIT_OK


def cmd_export(args) -> int:
    if args.what == "trajectory":
        natural, hts, post = (read_utterance(p) for p in (args.natural, args.hts, args.post))
        if len(natural) != len(hts):
            log.info("aligning natural onto the hts frame grid")
            natural = aligned_reference(align_pair(ParallelPair("traj", hts, natural)))
        write_trajectory_csv(export_trajectory(natural, hts, post, args.coeff), args.out)
    else:
        env = mfcc_to_envelope(read_utterance(args.input), args.n_bins, not args.no_c0)
        write_matrix_csv(env, args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradcheck(args.dims, args.seed, args.T, args.epsilon, args.cell, args.eq7_literal)
    failed = [name for name, err in report.items() if not err < GRADCHECK_TOLERANCE]
    for name, err in report.items():
        log.info("%-16s max rel err %.3e", name, err)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["tensor", "max_relative_error"])
            w.writerows([name, f"{err:.6e}"] for name, err in report.items())
    if failed:
        log.error("gradient check failed for %s", ", ".join(failed))
        return EXIT_DIVERGED
    return EXIT_OK


@dataclass
class PipelineResult:
    status: int
    baseline_mcd: float
    postfiltered_mcd: float | None = None
    improvement_pct: float | None = None
    notes: list[str] = field(default_factory=list)


def run_pipeline(args) -> PipelineResult:
    """Ingest or synthesize, align, split, train, postfilter the test bucket, evaluate.

    Writes into ``args.out_dir``: checkpoint.ckpt, epochs.csv, report.csv
    (baseline vs postfiltered per bucket), test_baseline.csv and
    test_postfiltered.csv (per-utterance MCD), and postfiltered/*.cft.
    """
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    with stage("ingest"):
        if args.corpus is not None:
            corpus = load_corpus(args.corpus)
        else:
            corpus = synth_corpus(args.n_pairs, args.frames, args.dim, _distortion(args))
            save_corpus(corpus, out / "corpus")
    with stage("align"):
        corpus = Corpus(corpus.name, corpus.dim, [align_pair(p) for p in corpus])
    with stage("split"):
        split = split_corpus(corpus, args.split, args.seed)
    metric = dict(d_start=args.d_start, silence_percentile=args.silence_percentile,
                  threads=_threads(args))
    with stage("evaluate-baseline"):
        base_val = evaluate_pairs(split.validation, None, **metric)
        base_test = evaluate_pairs(split.test, None, **metric)
        write_report_csv(base_test, out / "test_baseline.csv")

    if base_test.corpus_mcd == 0 and base_val.corpus_mcd == 0:
        log.warning("nothing to learn: synthetic and natural features already coincide")
        _write_pipeline_report(out / "report.csv", [
            ("validation", base_val.corpus_mcd, "", "", "nothing-to-learn"),
            ("test", base_test.corpus_mcd, "", "", "nothing-to-learn"),
        ])
        return PipelineResult(EXIT_OK, 0.0, notes=["nothing to learn"])

    with stage("train"):
        if args.dims[0] != corpus.dim:
            raise UsageError(f"--dims {args.dims} do not match corpus D={corpus.dim}")
        params, _ = _train_and_save(args, split, out / "checkpoint.ckpt", out / "epochs.csv")
    with stage("postfilter"):
        (out / "postfiltered").mkdir(exist_ok=True)
        for pair in split.test:
            write_utterance(postfilter_apply(params, pair.source),
                            out / "postfiltered" / f"{pair.id}.cft")
    with stage("evaluate"):
        post_val = evaluate_pairs(split.validation, params, **metric)
        post_test = evaluate_pairs(split.test, params, **metric)
        write_report_csv(post_test, out / "test_postfiltered.csv")
        rows = []
        for bucket, base, post in (("validation", base_val, post_val), ("test", base_test, post_test)):
            rows.append((bucket, base.corpus_mcd, post.corpus_mcd, improvement(base, post), "ok"))
        _write_pipeline_report(out / "report.csv", rows)
    pct = improvement(base_test, post_test)
    log.info("test MCD %.4f -> %.4f dB (%.1f%%)", base_test.corpus_mcd, post_test.corpus_mcd, pct)
    return PipelineResult(EXIT_OK, base_test.corpus_mcd, post_test.corpus_mcd, pct)


def _write_pipeline_report(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bucket", "baseline_mcd", "postfiltered_mcd", "improvement_pct", "status"])
        for bucket, base, post, pct, status in rows:
            w.writerow([bucket, f"{base:.12g}", "" if post == "" else f"{post:.12g}",
                        "" if pct == "" else f"{pct:.6g}", status])


def cmd_pipeline(args) -> int:
    return run_pipeline(args).status


COMMANDS = {
    "synth-corpus": cmd_synth_corpus,
    "align": cmd_align,
    "train": cmd_train,
    "postfilter": cmd_postfilter,
    "evaluate": cmd_evaluate,
    "export": cmd_export,
    "gradcheck": cmd_gradcheck,
    "pipeline": cmd_pipeline,
}

_DATA_ERRORS = (FeatureError, nn.CheckpointError, AlignmentError, MetricError, OSError, ValueError)


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, (DivergenceError, nn.NumericError)):
        return EXIT_DIVERGED
    if isinstance(exc, _DATA_ERRORS):
        return EXIT_DATA
    return EXIT_INTERNAL


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"lstm-postfilter: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except StageError as exc:
        log.error("%s", exc)
        return _exit_code(exc.cause)
    except Exception as exc:
        code = _exit_code(exc)
        log.error("%s: %s", type(exc).__name__, exc, exc_info=code == EXIT_INTERNAL)
        return code


if __name__ == "__main__":
    sys.exit(main())
