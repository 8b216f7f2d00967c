"""Alignment search: approximate DP plus exhaustive desk-scale oracles.

An alignment interleaves the target tokens with exactly one end-of-block
token per input block. The DP keeps, per (consumed-token count, block), the
single best-scoring hypothesis together with its recurrent state, so scoring
segment extensions never re-runs earlier blocks. The exhaustive routines
enumerate every legal alignment outright and exist to bound and verify the DP.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .model import FeatureSequence, Transducer, TransducerState, stack_states
from .tensor import InvariantError


class InfeasibleAlignmentError(ValueError):
    """The target cannot fit the block structure (too many tokens per block)."""


class EnumerationLimitError(RuntimeError):
    """An exhaustive oracle refused to enumerate a too-large space."""


@dataclass(frozen=True)
class Alignment:
    """Target tokens interleaved with end-of-block markers.

    ``block_ends`` holds the 1-based position of each block's terminal
    end-of-block token; the last entry always equals ``len(tokens)``.
    """

    tokens: tuple[int, ...]
    block_ends: tuple[int, ...]

    @staticmethod
    def from_tokens(tokens: Sequence[int], eob: int) -> "Alignment":
        toks = tuple(int(t) for t in tokens)
        ends = tuple(i + 1 for i, t in enumerate(toks) if t == eob)
        return Alignment(toks, ends)

    @staticmethod
    def from_segments(segments: Sequence[Sequence[int]]) -> "Alignment":
        tokens: list[int] = []
        ends: list[int] = []
        for seg in segments:
            tokens.extend(int(t) for t in seg)
            ends.append(len(tokens))
        return Alignment(tuple(tokens), tuple(ends))

    @property
    def num_blocks(self) -> int:
        return len(self.block_ends)

    def segments(self) -> list[list[int]]:
        out = []
        prev = 0
        for e in self.block_ends:
            out.append(list(self.tokens[prev:e]))
            prev = e
        return out

    def strip(self, eob: int) -> tuple[int, ...]:
        return tuple(t for t in self.tokens if t != eob)

    def last_segment_len(self) -> int:
        if len(self.block_ends) < 2:
            return self.block_ends[-1]
        return self.block_ends[-1] - self.block_ends[-2]

    def validate(self, eob: int, max_per_block: int) -> None:
        if not self.block_ends or self.block_ends[-1] != len(self.tokens):
            raise InvariantError("block_ends must cover all tokens")
        prev = 0
        for e in self.block_ends:
            if not prev < e <= len(self.tokens):
                raise InvariantError(f"non-increasing block end {e}")
            if self.tokens[e - 1] != eob:
                raise InvariantError(f"block does not end with the end-of-block token at {e}")
            if not 1 <= e - prev <= max_per_block:
                raise InvariantError(f"segment length {e - prev} outside [1, {max_per_block}]")
            prev = e
        n_eob = sum(1 for t in self.tokens if t == eob)
        if n_eob != len(self.block_ends):
            raise InvariantError(
                f"{n_eob} end-of-block tokens for {len(self.block_ends)} blocks"
            )


@dataclass
class Hypothesis:
    """Best-so-far partial alignment with its recurrent state."""

    consumed: int                 # target tokens consumed so far
    tokens: tuple[int, ...]       # partial alignment (with end-of-block markers)
    state: TransducerState        # single-row state after the last emission
    log_prob: float


def _better(a: Hypothesis, b: Hypothesis, eob: int) -> bool:
    """Deterministic preference among same-slot hypotheses."""
    if a.log_prob != b.log_prob:
        return a.log_prob > b.log_prob
    la = Alignment.from_tokens(a.tokens, eob).last_segment_len()
    lb = Alignment.from_tokens(b.tokens, eob).last_segment_len()
    if la != lb:
        return la < lb
    return a.tokens < b.tokens


def _check_targets(model: Transducer, targets: Sequence[int]) -> None:
    eob = model.config.vocab.eob_index
    size = model.config.vocab.size
    for t in targets:
        if not 0 <= t < size or t == eob:
            raise InvariantError(f"target token {t} invalid (end-of-block or out of range)")


def extend_hypotheses(
    model: Transducer,
    hyps: Sequence[Hypothesis],
    block_h: np.ndarray,
    targets: Sequence[int],
) -> list[Hypothesis]:
    """Extend hypotheses into the next block with every legal segment.

    Each hypothesis at consumed count j spawns one candidate per extension
    length in 0..min(max_per_block - 1, remaining targets). Extensions share
    prefix scoring: all alive hypotheses advance one token per level in a
    single batched step, and the end-of-block branch is read off the same
    distribution.
    """
    if not hyps:
        return []
    cfg = model.config
    eob = cfg.vocab.eob_index
    m_cap = cfg.block.max_per_block
    s_total = len(targets)
    k = block_h.shape[0]

    state = stack_states([h.state for h in hyps])
    state = model.advance_block(state)
    alive = list(range(len(hyps)))
    carry = np.array([h.log_prob for h in hyps], dtype=np.float64)
    out: list[Hypothesis] = []
    level = 0
    while True:
        window = Transducer.window_from_np(block_h, 0, k, len(alive))
        lps, pending = model.step_logprobs(state, window, k)
        for row, hi in enumerate(alive):
            parent = hyps[hi]
            seg = tuple(targets[parent.consumed : parent.consumed + level])
            out.append(
                Hypothesis(
                    consumed=parent.consumed + level,
                    tokens=parent.tokens + seg + (eob,),
                    state=pending.gather(row).with_token([eob]),
                    log_prob=float(carry[row] + lps[row, eob]),
                )
            )
        if level + 1 > m_cap - 1:
            break
        keep = [row for row, hi in enumerate(alive) if hyps[hi].consumed + level < s_total]
        if not keep:
            break
        next_tokens = np.array(
            [targets[hyps[alive[row]].consumed + level] for row in keep], dtype=np.int64
        )
        carry = carry[keep] + lps[keep, next_tokens]
        state = pending.gather(np.array(keep)).with_token(next_tokens)
        alive = [alive[row] for row in keep]
        level += 1
    return out


def dp_best_alignment(
    model: Transducer, x: FeatureSequence, targets: Sequence[int]
) -> Alignment:
    """Approximate best alignment: one kept hypothesis per consumed count.

    Raises :class:`InfeasibleAlignmentError` when the target has more tokens
    than the block structure can carry.
    """
    _check_targets(model, targets)
    cfg = model.config
    s_total = len(targets)
    n_blocks = cfg.block.num_blocks(x.length)
    m_cap = cfg.block.max_per_block
    if s_total > n_blocks * (m_cap - 1):
        raise InfeasibleAlignmentError(
            f"{s_total} targets cannot fit {n_blocks} blocks of at most {m_cap - 1} tokens"
        )
    encoded = model.encode_np(x)
    eob = cfg.vocab.eob_index
    hyps = [Hypothesis(0, (), model.initial_state(1), 0.0)]
    for bi, (start, end) in enumerate(cfg.block.slices(x.length), start=1):
        cands = extend_hypotheses(model, hyps, encoded[start:end], targets)
        best: dict[int, Hypothesis] = {}
        remaining = n_blocks - bi
        for cand in cands:
            if s_total - cand.consumed > remaining * (m_cap - 1):
                continue  # can no longer consume the rest
            cur = best.get(cand.consumed)
            if cur is None or _better(cand, cur, eob):
                best[cand.consumed] = cand
        hyps = [best[j] for j in sorted(best)]
        assert all(h.consumed <= min(bi * (m_cap - 1), s_total) for h in hyps)
    final = next(h for h in hyps if h.consumed == s_total)
    alignment = Alignment.from_tokens(final.tokens, eob)
    alignment.validate(eob, m_cap)
    return alignment


# ---------------------------------------------------------------------------
# Exhaustive oracles
# ---------------------------------------------------------------------------


def compositions(total: int, parts: int, max_part: int) -> Iterator[tuple[int, ...]]:
    """All ways to split ``total`` into ``parts`` ordered counts in [0, max_part]."""
    if parts == 0:
        if total == 0:
            yield ()
        return
    for first in range(min(total, max_part) + 1):
        for rest in compositions(total - first, parts - 1, max_part):
            yield (first,) + rest


def count_compositions(total: int, parts: int, max_part: int) -> int:
    counts = [1] + [0] * total
    for _ in range(parts):
        new = [0] * (total + 1)
        for have in range(total + 1):
            if counts[have]:
                for take in range(min(max_part, total - have) + 1):
                    new[have + take] += counts[have]
        counts = new
    return counts[total]


def enumerate_alignments(
    targets: Sequence[int], n_blocks: int, max_per_block: int, eob: int
) -> Iterator[Alignment]:
    s_total = len(targets)
    for comp in compositions(s_total, n_blocks, max_per_block - 1):
        segments = []
        pos = 0
        for c in comp:
            segments.append(list(targets[pos : pos + c]) + [eob])
            pos += c
        yield Alignment.from_segments(segments)


def _guard_enumeration(model: Transducer, x: FeatureSequence, targets, limit: int):
    cfg = model.config
    s_total = len(targets)
    n_blocks = cfg.block.num_blocks(x.length)
    m_cap = cfg.block.max_per_block
    if s_total > n_blocks * (m_cap - 1):
        raise InfeasibleAlignmentError(
            f"{s_total} targets cannot fit {n_blocks} blocks of at most {m_cap - 1} tokens"
        )
    n = count_compositions(s_total, n_blocks, m_cap - 1)
    if n > limit:
        raise EnumerationLimitError(f"{n} alignments exceed the enumeration limit {limit}")
    return n_blocks, m_cap


def exact_best_alignment(
    model: Transducer, x: FeatureSequence, targets: Sequence[int], limit: int = 100_000
) -> tuple[Alignment, float]:
    """True argmax over all alignments; ties pick the smallest block_ends."""
    _check_targets(model, targets)
    n_blocks, m_cap = _guard_enumeration(model, x, targets, limit)
    eob = model.config.vocab.eob_index
    encoded = model.encode_np(x)
    best: tuple[Alignment, float] | None = None
    for alignment in enumerate_alignments(targets, n_blocks, m_cap, eob):
        lp = model.score_alignment(encoded, alignment)
        if (
            best is None
            or lp > best[1]
            or (lp == best[1] and alignment.block_ends < best[0].block_ends)
        ):
            best = (alignment, lp)
    assert best is not None  # k=0 compositions always exist under the guard
    return best


def marginal_log_prob(
    model: Transducer, x: FeatureSequence, targets: Sequence[int], limit: int = 100_000
) -> float:
    """log sum over all alignments of the alignment probability."""
    _check_targets(model, targets)
    n_blocks, m_cap = _guard_enumeration(model, x, targets, limit)
    eob = model.config.vocab.eob_index
    encoded = model.encode_np(x)
    lps = [
        model.score_alignment(encoded, alignment)
        for alignment in enumerate_alignments(targets, n_blocks, m_cap, eob)
    ]
    arr = np.array(lps, dtype=np.float64)
    m = arr.max()
    return float(m + np.log(np.exp(arr - m).sum()))


# ---------------------------------------------------------------------------
# Cache and text round-trip
# ---------------------------------------------------------------------------


class AlignmentCache:
    """Per-sequence alignment cache keyed by id, tagged with a params version."""

    def __init__(self):
        self._entries: dict[int, tuple[Alignment, int]] = {}

    def get(self, seq_id: int) -> Alignment | None:
        entry = self._entries.get(seq_id)
        return entry[0] if entry is not None else None

    def version(self, seq_id: int) -> int | None:
        entry = self._entries.get(seq_id)
        return entry[1] if entry is not None else None

    def put(self, seq_id: int, alignment: Alignment, params_version: int) -> None:
        self._entries[seq_id] = (alignment, params_version)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, seq_id: int) -> bool:
        return seq_id in self._entries


def alignment_to_text(seq_id: int, alignment: Alignment, tokens: Sequence[str]) -> str:
    return f"{seq_id}\t" + " ".join(tokens[t] for t in alignment.tokens)


def alignments_from_text(text: str, vocab) -> dict[int, Alignment]:
    out: dict[int, Alignment] = {}
    index = {tok: i for i, tok in enumerate(vocab.tokens)}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        sid, _, rest = line.partition("\t")
        token_ids = [index[w] for w in rest.split()]
        out[int(sid)] = Alignment.from_tokens(token_ids, vocab.eob_index)
    return out
