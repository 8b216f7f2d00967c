"""Command-line entry point: train, decode, stream, align, gradcheck, oracle.

Results go to stdout; logs and the resolved configuration go to stderr.
Exit codes: 0 success, 1 suite failure, 2 invalid config, 3 non-finite loss,
4 checkpoint version mismatch.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .alignment import InfeasibleAlignmentError, alignment_to_text, dp_best_alignment
from .checkpoint import CheckpointVersionError, load_model
from .config import (
    ConfigError,
    RunConfig,
    build_beam_config,
    build_datasets,
    build_model_config,
    build_train_config,
    load_config,
)
from .inference import BeamConfig, beam_decode, streaming_decode
from .model import Transducer
from .tasks import eval_model, one_hot_frames, read_examples
from .training import NonFiniteLossError, train
from . import verification as V

log = logging.getLogger("blockseq")

EXIT_OK = 0
EXIT_SUITE_FAILED = 1
EXIT_BAD_CONFIG = 2
EXIT_NON_FINITE = 3
EXIT_VERSION_MISMATCH = 4


def _apply_overrides(run: RunConfig, args: argparse.Namespace) -> RunConfig:
    for flag, key in [
        ("seed", "seed"),
        ("attention", "attention"),
        ("block_size", "block_size"),
        ("max_per_block", "max_per_block"),
        ("workers", "workers"),
        ("beam_width", "beam_width"),
        ("out_dir", "out_dir"),
    ]:
        value = getattr(args, flag, None)
        if value is not None:
            setattr(run, key, value)
    return run


def _print_resolved(run: RunConfig) -> None:
    print("# resolved config", file=sys.stderr)
    for line in run.lines():
        print(line, file=sys.stderr)
    sys.stderr.flush()


def _load_run(args: argparse.Namespace) -> RunConfig:
    run = load_config(getattr(args, "config", None))
    run = _apply_overrides(run, args)
    _print_resolved(run)
    return run


def cmd_train(args) -> int:
    run = _load_run(args)
    model_cfg = build_model_config(run)
    train_cfg = build_train_config(run)
    model = Transducer(model_cfg, seed=run.seed)
    train_items, val_items, eval_items, fixed = build_datasets(run)
    log.info(
        "training on %d sequences (%d validation), writing to %s",
        len(train_items), len(val_items), run.out_dir,
    )
    state = train(
        model, train_items, val_items, train_cfg,
        out_dir=run.out_dir,
        fixed_alignments=fixed,
        resume=run.resume or None,
    )
    if eval_items:
        report = eval_model(model, eval_items, build_beam_config(run))
        print(
            f"eval sequences={report.count} "
            f"sequence_error_rate={report.sequence_error_rate:.6f} "
            f"token_error_rate={report.token_error_rate:.6f}"
        )
    if state.refresh_compared:
        rate = state.refresh_improved / state.refresh_compared
        log.info("alignment refresh improved or kept %.1f%% of cached scores", 100 * rate)
    return EXIT_OK


def cmd_decode(args) -> int:
    run = _load_run(args)
    model, _ = load_model(args.checkpoint)
    inventory = model.config.input_tokens
    if not inventory:
        raise ConfigError("checkpoint carries no input token inventory; cannot featurize")
    beam = BeamConfig(beam_width=run.beam_width, max_output_len=run.max_output_len)
    vocab = model.config.vocab
    for inputs, _ in read_examples(args.input):
        x = one_hot_frames(inputs, inventory)
        result = beam_decode(model, x, beam)
        print(" ".join(vocab.tokens[t] for t in result.tokens))
    return EXIT_OK


def cmd_stream(args) -> int:
    run = _load_run(args)
    model, _ = load_model(args.checkpoint)
    beam = BeamConfig(beam_width=run.beam_width, max_output_len=run.max_output_len)
    vocab = model.config.vocab

    def frames():
        for line in sys.stdin:
            line = line.strip()
            if not line:
                return  # blank line ends the stream
            yield np.array([float(v) for v in line.split()], dtype=model.dtype)

    for event in streaming_decode(model, frames(), beam):
        print(" ".join(vocab.tokens[t] for t in event.tokens), flush=True)
    return EXIT_OK


def cmd_align(args) -> int:
    run = _load_run(args)
    model, _ = load_model(args.checkpoint)
    inventory = model.config.input_tokens
    if not inventory:
        raise ConfigError("checkpoint carries no input token inventory; cannot featurize")
    vocab = model.config.vocab
    token_index = {tok: i for i, tok in enumerate(vocab.tokens)}
    for seq_id, (inputs, targets) in enumerate(read_examples(args.dataset)):
        x = one_hot_frames(inputs, inventory)
        try:
            alignment = dp_best_alignment(model, x, [token_index[t] for t in targets])
        except InfeasibleAlignmentError as exc:
            log.warning("sequence %d skipped: %s", seq_id, exc)
            continue
        print(alignment_to_text(seq_id, alignment, vocab.tokens))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    run = _load_run(args)
    errors = V.gradcheck_suite(per_kind=run.gradcheck_instances, seed=run.seed)
    ok = True
    for kind, errs in errors.items():
        worst = max(errs)
        passed = worst <= V.GRADCHECK_TOLERANCE
        ok = ok and passed
        print(
            f"gradcheck {kind}: instances={len(errs)} worst_rel_err={worst:.3e} "
            f"{'PASS' if passed else 'FAIL'}"
        )
    return EXIT_OK if ok else EXIT_SUITE_FAILED


def cmd_oracle(args) -> int:
    run = _load_run(args)
    n = run.oracle_models
    ok = True

    masses = V.mass_suite(n, seed=run.seed)
    mass_ok = all(m <= 1 + 1e-6 for m in masses)
    ok &= mass_ok
    print(
        f"oracle mass: models={n} max_mass={max(masses):.9f} "
        f"{'PASS' if mass_ok else 'FAIL'}"
    )

    closed = V.zero_weight_closed_form_error()
    closed_ok = closed <= 1e-9
    ok &= closed_ok
    print(f"oracle closed-form marginal: err={closed:.3e} {'PASS' if closed_ok else 'FAIL'}")

    violations, equal, total = V.dp_exact_suite(n, seed=run.seed)
    dp_ok = violations == 0
    ok &= dp_ok
    print(
        f"oracle dp-vs-exact: models={total} violations={violations} "
        f"agreement={equal}/{total} {'PASS' if dp_ok else 'FAIL'}"
    )

    mism, nonmono, total = V.decode_oracle_suite(n, seed=run.seed)
    dec_ok = mism == 0 and nonmono == 0
    ok &= dec_ok
    print(
        f"oracle beam-vs-exhaustive: models={total} mismatches={mism} "
        f"monotonicity_violations={nonmono} {'PASS' if dec_ok else 'FAIL'}"
    )

    smism, unstable, total = V.streaming_suite(n, seed=run.seed)
    s_ok = smism == 0 and unstable == 0
    ok &= s_ok
    print(
        f"oracle streaming: inputs={total} mismatches={smism} "
        f"stability_violations={unstable} {'PASS' if s_ok else 'FAIL'}"
    )
    return EXIT_OK if ok else EXIT_SUITE_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blockseq",
        description="Block-synchronous online sequence transduction",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--attention", choices=["none", "dot", "mlp", "lstm"])
        p.add_argument("--block-size", dest="block_size", type=int, help="frames per block")
        p.add_argument("--max-per-block", dest="max_per_block", type=int,
                       help="max emissions per block including the end marker")
        p.add_argument("--workers", type=int, help="threads for alignment refresh")
        p.add_argument("--beam-width", dest="beam_width", type=int)

    p = sub.add_parser("train", help="train a model and write checkpoints + metrics")
    common(p)
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("decode", help="batch beam decoding of a token dataset")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="dataset dump, targets ignored")
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("stream", help="line-fed streaming decoding (frames on stdin)")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_stream)

    p = sub.add_parser("align", help="dump best alignments for a dataset")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.set_defaults(fn=cmd_align)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(p)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("oracle", help="brute-force equivalence suites")
    common(p)
    p.set_defaults(fn=cmd_oracle)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s"
    )
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except NonFiniteLossError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_NON_FINITE
    except CheckpointVersionError as exc:
        print(f"checkpoint version mismatch: {exc}", file=sys.stderr)
        return EXIT_VERSION_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
