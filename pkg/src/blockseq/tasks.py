"""Synthetic tasks: digit-pair addition and a cross-block recurrence probe.

Addition: the input presents the first operand's digits, a plus sign, the
second operand's digits in reverse, and a stop symbol; the target is the sum's
digits in reverse. With one-frame blocks the model can start emitting sum
digits as soon as the information is available.

Recurrence probe: each block carries one symbol and the target token for block
b is (x_b + x_{b-span}) mod base. Solving it requires carrying information
across blocks, which is what the transducer's cross-block state provides; the
ablation arm resets that state at every block boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .alignment import Alignment
from .inference import BeamConfig, beam_decode
from .model import FeatureSequence, Transducer, Vocab
from .tensor import InvariantError
from .training import SequenceExample

ADDITION_INPUT_TOKENS = tuple(str(d) for d in range(10)) + ("+", "<s>")
DIGITS = tuple(str(d) for d in range(10))


def addition_vocab() -> Vocab:
    return Vocab.with_eob(DIGITS)


@dataclass(frozen=True)
class AdditionExample:
    a: int
    b: int

    @property
    def input_tokens(self) -> tuple[str, ...]:
        return tuple(str(self.a)) + ("+",) + tuple(reversed(str(self.b))) + ("<s>",)

    @property
    def target_tokens(self) -> tuple[str, ...]:
        return tuple(reversed(str(self.a + self.b)))

    @staticmethod
    def decode_input(tokens: Sequence[str]) -> tuple[int, int]:
        """Recover (a, b) from the input token layout."""
        plus = list(tokens).index("+")
        a = int("".join(tokens[:plus]))
        b = int("".join(reversed(tokens[plus + 1 : -1])))
        return a, b


def one_hot_frames(tokens: Sequence[str], inventory: Sequence[str]) -> FeatureSequence:
    index = {tok: i for i, tok in enumerate(inventory)}
    frames = np.zeros((len(tokens), len(inventory)), dtype=np.float32)
    for t, tok in enumerate(tokens):
        frames[t, index[tok]] = 1.0
    return FeatureSequence(frames)


def _operand(rng: np.random.Generator, max_digits: int) -> int:
    length = int(rng.integers(1, max_digits + 1))
    if length == 1:
        return int(rng.integers(0, 10))
    return int(rng.integers(10 ** (length - 1), 10 ** length))


def gen_addition(seed: int, count: int, max_digits: int = 3) -> list[AdditionExample]:
    """Deterministic stream: each example is a pure function of (seed, index)."""
    if count < 1:
        raise InvariantError("count must be >= 1")
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        out.append(AdditionExample(_operand(rng, max_digits), _operand(rng, max_digits)))
    return out


def addition_sequences(examples: Iterable[AdditionExample], start_id: int = 0) -> list[SequenceExample]:
    vocab = addition_vocab()
    out = []
    for i, ex in enumerate(examples):
        features = one_hot_frames(ex.input_tokens, ADDITION_INPUT_TOKENS)
        targets = tuple(vocab.index(t) for t in ex.target_tokens)
        out.append(SequenceExample(start_id + i, features, targets))
    return out


@dataclass
class EvalReport:
    sequence_error_rate: float
    token_error_rate: float
    count: int


def edit_distance(a: Sequence[int], b: Sequence[int]) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[len(b)]


def eval_model(
    model: Transducer, items: Sequence[SequenceExample], beam: BeamConfig
) -> EvalReport:
    """Beam-decode every item; exact-match and edit-distance statistics."""
    if not items:
        raise InvariantError("evaluation needs at least one example")
    seq_errors = 0
    dist_total = 0
    ref_total = 0
    for item in items:
        result = beam_decode(model, item.features, beam)
        if result.tokens != item.targets:
            seq_errors += 1
        dist_total += edit_distance(result.tokens, item.targets)
        ref_total += len(item.targets)
    return EvalReport(
        sequence_error_rate=seq_errors / len(items),
        token_error_rate=dist_total / max(ref_total, 1),
        count=len(items),
    )


# ---------------------------------------------------------------------------
# Cross-block recurrence probe
# ---------------------------------------------------------------------------


def probe_vocab(base: int) -> Vocab:
    return Vocab.with_eob([str(d) for d in range(base)])


def probe_input_tokens(base: int) -> tuple[str, ...]:
    return tuple(str(d) for d in range(base))


@dataclass(frozen=True)
class ProbeExample:
    symbols: tuple[int, ...]   # one symbol per block
    span: int
    base: int

    @property
    def targets(self) -> tuple[int, ...]:
        out = []
        for b, x in enumerate(self.symbols):
            back = self.symbols[b - self.span] if self.span and b - self.span >= 0 else 0
            out.append((x + back) % self.base if self.span else x)
        return tuple(out)


def gen_recurrence_probe(
    seed: int,
    count: int,
    num_blocks: int = 8,
    span: int = 2,
    base: int = 10,
) -> list[ProbeExample]:
    """Deterministic probe stream; span 0 is the no-recurrence control."""
    if count < 1:
        raise InvariantError("count must be >= 1")
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        symbols = tuple(int(v) for v in rng.integers(0, base, size=num_blocks))
        out.append(ProbeExample(symbols, span, base))
    return out


def probe_sequences(
    examples: Iterable[ProbeExample], block_width: int, start_id: int = 0
) -> list[SequenceExample]:
    """Each block holds its symbol's one-hot repeated for the block's frames."""
    out = []
    for i, ex in enumerate(examples):
        inventory = probe_input_tokens(ex.base)
        tokens = [str(s) for s in ex.symbols for _ in range(block_width)]
        features = one_hot_frames(tokens, inventory)
        out.append(SequenceExample(start_id + i, features, ex.targets))
    return out


def probe_alignment(example: ProbeExample, vocab: Vocab) -> Alignment:
    """The construction alignment: one target token then the marker per block."""
    return Alignment.from_segments(
        [[t, vocab.eob_index] for t in example.targets]
    )


def probe_block_accuracy(
    model: Transducer, items: Sequence[SequenceExample], beam: BeamConfig
) -> float:
    """Fraction of blocks whose decoded segment is exactly its target token."""
    correct = 0
    total = 0
    for item in items:
        result = beam_decode(model, item.features, beam)
        segments = result.block_emissions
        eob = model.config.vocab.eob_index
        for b, target in enumerate(item.targets):
            total += 1
            if b < len(segments) and segments[b][:-1] == [target]:
                correct += 1
    return correct / max(total, 1)


# ---------------------------------------------------------------------------
# Dataset dump format: one example per line, "input tokens TAB target tokens"
# ---------------------------------------------------------------------------


def write_examples(path, items: Iterable[tuple[Sequence[str], Sequence[str]]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for inputs, targets in items:
            f.write(" ".join(inputs) + "\t" + " ".join(targets) + "\n")


def read_examples(path) -> list[tuple[list[str], list[str]]]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            inputs, _, targets = line.partition("\t")
            out.append((inputs.split(), targets.split() if targets else []))
    return out


def sequences_from_token_file(
    path, input_inventory: Sequence[str], vocab: Vocab, start_id: int = 0
) -> list[SequenceExample]:
    out = []
    for i, (inputs, targets) in enumerate(read_examples(path)):
        features = one_hot_frames(inputs, input_inventory)
        out.append(
            SequenceExample(start_id + i, features, tuple(vocab.index(t) for t in targets))
        )
    return out
