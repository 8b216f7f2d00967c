"""Randomized verification suites: gradient checks and brute-force oracles.

Shared by the ``gradcheck``/``oracle`` CLI commands and the acceptance tests.
Every suite draws its population from a seeded generator, so reported numbers
are reproducible run to run.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .alignment import Alignment, dp_best_alignment, exact_best_alignment, marginal_log_prob
from .inference import BeamConfig, beam_decode, exhaustive_decode, streaming_decode_result
from .model import (
    AttentionKind,
    BlockConfig,
    FeatureSequence,
    ModelConfig,
    Transducer,
    Vocab,
)

GRADCHECK_TOLERANCE = 1e-4


def random_tiny_model(
    rng: np.random.Generator,
    kind: AttentionKind,
    precision: str = "f64",
    init_scale: float = 0.5,
    block_recurrence: bool = True,
) -> Transducer:
    """A small random instance: hidden widths <= 8, window <= 3, vocab <= 4."""
    enc_w = int(rng.integers(2, 5))
    hist_w = enc_w if kind == AttentionKind.DOT else int(rng.integers(2, 5))
    if rng.integers(0, 2):
        transducer_widths = (hist_w, int(rng.integers(2, 5)))
    else:
        transducer_widths = (hist_w,)
    cfg = ModelConfig(
        d_in=int(rng.integers(2, 5)),
        vocab=Vocab.with_eob([str(i) for i in range(int(rng.integers(1, 4)))]),
        block=BlockConfig(int(rng.integers(1, 4)), int(rng.integers(2, 4))),
        encoder_widths=(enc_w,),
        transducer_widths=transducer_widths,
        embed_width=int(rng.integers(2, 5)),
        attention=kind,
        attention_width=int(rng.integers(2, 5)),
        precision=precision,
        block_recurrence=block_recurrence,
    )
    store = T.ParamStore(
        seed=int(rng.integers(0, 2**31)), dtype=cfg.dtype, init_scale=init_scale
    )
    return Transducer(cfg, store=store)


def random_instance(
    rng: np.random.Generator,
    model: Transducer,
    max_frames: int = 6,
    max_targets: int = 3,
) -> tuple[FeatureSequence, Alignment]:
    """Random input frames and a random valid alignment for them."""
    cfg = model.config
    length = int(rng.integers(1, max_frames + 1))
    x = FeatureSequence(rng.standard_normal((length, cfg.d_in)).astype(cfg.dtype))
    n_blocks = cfg.block.num_blocks(length)
    cap = cfg.block.max_per_block - 1
    s_size = int(rng.integers(0, min(max_targets, n_blocks * cap) + 1))
    regular = [t for t in range(cfg.vocab.size) if t != cfg.vocab.eob_index]
    # distribute the target count over blocks so every block stays feasible
    left = s_size
    segments = []
    for b in range(n_blocks):
        blocks_after = n_blocks - b - 1
        lo = max(0, left - blocks_after * cap)
        hi = min(cap, left)
        k = int(rng.integers(lo, hi + 1))
        segments.append([int(rng.choice(regular)) for _ in range(k)] + [cfg.vocab.eob_index])
        left -= k
    alignment = Alignment.from_segments(segments)
    return x, alignment


def gradcheck_instance(model: Transducer, x, alignment, epsilon: float = 1e-4) -> float:
    """Worst norm-relative error between analytic and numeric loss gradients."""
    model.store.zero_grads()
    tape = T.Tape()
    with T.recording(tape):
        out = T.neg(model.sequence_log_prob(x, alignment))
    T.backward(tape, out)
    analytic = {name: p.grad.copy() for name, p in model.store.items()}
    numeric = T.finite_diff_grad(
        lambda s: -float(model.sequence_log_prob(x, alignment).data), model.store, epsilon
    )
    worst = 0.0
    for name in analytic:
        a, n = analytic[name], numeric[name]
        denom = max(np.linalg.norm(a) + np.linalg.norm(n), 1e-8)
        worst = max(worst, float(np.linalg.norm(a - n) / denom))
    return worst


def gradcheck_suite(
    per_kind: int,
    seed: int = 0,
    kinds: tuple[AttentionKind, ...] = tuple(AttentionKind),
) -> dict[str, list[float]]:
    """Per attention kind, the worst relative error of each random instance."""
    out: dict[str, list[float]] = {}
    for kind in kinds:
        rng = np.random.default_rng([seed, hash(kind.value) % (2**31)])
        errs = []
        for _ in range(per_kind):
            model = random_tiny_model(rng, kind)
            x, alignment = random_instance(rng, model)
            errs.append(gradcheck_instance(model, x, alignment))
        out[kind.value] = errs
    return out


# ---------------------------------------------------------------------------
# Probability-mass oracle
# ---------------------------------------------------------------------------


def all_segments(vocab: Vocab, max_per_block: int) -> list[tuple[int, ...]]:
    regular = [t for t in range(vocab.size) if t != vocab.eob_index]
    segs = []
    for k in range(max_per_block):
        for combo in itertools.product(regular, repeat=k):
            segs.append(tuple(combo) + (vocab.eob_index,))
    return segs


def total_output_mass(model: Transducer, x: FeatureSequence) -> float:
    """Sum of exp(alignment log-prob) over every valid alignment of every
    output string within the length bound. At most 1 for a sound factorization."""
    cfg = model.config
    n_blocks = cfg.block.num_blocks(x.length)
    encoded = model.encode_np(x)
    segs = all_segments(cfg.vocab, cfg.block.max_per_block)
    mass = 0.0
    for combo in itertools.product(segs, repeat=n_blocks):
        alignment = Alignment.from_segments([list(s) for s in combo])
        mass += float(np.exp(model.score_alignment(encoded, alignment)))
    return mass


@dataclass
class OracleReport:
    masses: list[float] = field(default_factory=list)
    closed_form_error: float = float("nan")
    dp_violations: int = 0
    dp_equal: int = 0
    dp_total: int = 0
    decode_mismatches: int = 0
    decode_total: int = 0
    monotone_violations: int = 0

    @property
    def mass_ok(self) -> bool:
        return all(m <= 1.0 + 1e-6 for m in self.masses)


def mass_suite(count: int, seed: int = 0, max_blocks: int = 3) -> list[float]:
    rng = np.random.default_rng([seed, 101])
    masses = []
    for _ in range(count):
        kind = AttentionKind(rng.choice([k.value for k in AttentionKind]))
        model = random_tiny_model(rng, kind)
        # keep enumeration small: few blocks
        n_blocks = int(rng.integers(1, max_blocks + 1))
        length = int(
            rng.integers(
                model.config.block.width * (n_blocks - 1) + 1,
                model.config.block.width * n_blocks + 1,
            )
        )
        x = FeatureSequence(rng.standard_normal((length, model.config.d_in)))
        masses.append(total_output_mass(model, x))
    return masses


def zero_weight_closed_form_error() -> float:
    """Uniform-model marginal for 2 blocks, 2 targets, vocab 4: log 3 + 4 log(1/4)."""
    cfg = ModelConfig(
        d_in=2,
        vocab=Vocab.with_eob(["0", "1", "2"]),
        block=BlockConfig(2, 3),
        encoder_widths=(3,),
        transducer_widths=(3,),
        embed_width=2,
        precision="f64",
    )
    model = Transducer(cfg, seed=0)
    for _, p in model.store.items():
        p.data[...] = 0.0
    x = FeatureSequence(np.random.default_rng(0).standard_normal((4, 2)))
    marginal = marginal_log_prob(model, x, [0, 1])
    expected = float(np.log(3) + 4 * np.log(0.25))
    return abs(marginal - expected)


# ---------------------------------------------------------------------------
# DP-vs-exact and decode oracles
# ---------------------------------------------------------------------------


def dp_exact_suite(count: int, seed: int = 0) -> tuple[int, int, int]:
    """(violations of dp <= exact, exact-agreement count, total)."""
    rng = np.random.default_rng([seed, 202])
    violations = 0
    equal = 0
    for _ in range(count):
        kind = AttentionKind(rng.choice([k.value for k in AttentionKind]))
        model = random_tiny_model(rng, kind)
        cfg = model.config
        n_blocks = int(rng.integers(1, 4))
        length = int(
            rng.integers(cfg.block.width * (n_blocks - 1) + 1, cfg.block.width * n_blocks + 1)
        )
        x = FeatureSequence(rng.standard_normal((length, cfg.d_in)))
        cap = n_blocks * (cfg.block.max_per_block - 1)
        regular = [t for t in range(cfg.vocab.size) if t != cfg.vocab.eob_index]
        targets = [int(rng.choice(regular)) for _ in range(int(rng.integers(0, min(3, cap) + 1)))]
        dp = dp_best_alignment(model, x, targets)
        exact, exact_lp = exact_best_alignment(model, x, targets)
        encoded = model.encode_np(x)
        dp_lp = model.score_alignment(encoded, dp)
        if dp_lp > exact_lp + 1e-9:
            violations += 1
        if dp.tokens == exact.tokens:
            equal += 1
    return violations, equal, count


def decode_oracle_suite(
    count: int, seed: int = 0, widths: tuple[int, ...] = (1, 2, 4, 8)
) -> tuple[int, int, int]:
    """(beam-vs-exhaustive mismatches, monotonicity violations, total)."""
    rng = np.random.default_rng([seed, 303])
    mismatches = 0
    monotone_violations = 0
    for _ in range(count):
        kind = AttentionKind(rng.choice([k.value for k in AttentionKind]))
        model = random_tiny_model(rng, kind)
        cfg = model.config
        n_blocks = int(rng.integers(1, 3))
        length = int(
            rng.integers(cfg.block.width * (n_blocks - 1) + 1, cfg.block.width * n_blocks + 1)
        )
        x = FeatureSequence(rng.standard_normal((length, cfg.d_in)))
        exact = exhaustive_decode(model, x)
        saturating = beam_decode(model, x, BeamConfig(beam_width=1_000_000))
        if (
            saturating.tokens != exact.tokens
            or abs(saturating.log_prob - exact.log_prob) > 1e-9
        ):
            mismatches += 1
        scores = [
            beam_decode(model, x, BeamConfig(beam_width=w)).log_prob for w in widths
        ]
        scores.append(saturating.log_prob)
        if any(b < a - 1e-12 for a, b in zip(scores, scores[1:])):
            monotone_violations += 1
    return mismatches, monotone_violations, count


def streaming_suite(count: int, seed: int = 0) -> tuple[int, int, int]:
    """(offline/online token mismatches at W >= L, stability violations, total)."""
    rng = np.random.default_rng([seed, 404])
    mismatches = 0
    stability_violations = 0
    for i in range(count):
        kind = AttentionKind(rng.choice([k.value for k in AttentionKind]))
        model = random_tiny_model(rng, kind)
        cfg = model.config
        if i % 2 == 0:
            # single-block regime: window at least as long as the input
            length = int(rng.integers(1, cfg.block.width + 1))
        else:
            length = int(rng.integers(1, 3 * cfg.block.width + 1))
        x = FeatureSequence(rng.standard_normal((length, cfg.d_in)))
        beam = BeamConfig(beam_width=4)
        events, online = streaming_decode_result(model, list(x.frames), beam)
        emitted: tuple[int, ...] = ()
        for ev in events:
            emitted = emitted + ev.tokens
            if online.tokens[: len(emitted)] != emitted:
                stability_violations += 1
        if length <= cfg.block.width:
            offline = beam_decode(model, x, beam)
            if online.tokens != offline.tokens:
                mismatches += 1
    return mismatches, stability_violations, count
