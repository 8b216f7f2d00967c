"""Decoding: beam search, per-block streaming commitment, exhaustive oracle.

Offline beam search keeps the n best prefixes synchronized by emission step;
emitting the end-of-block token moves a prefix's window to the next block, and
a prefix completes when it emits the end-of-block token in the final block.

Streaming decoding runs the same beam engine confined to one block at a time:
as soon as a block's frames have arrived, the best end-of-block-terminated
segment is committed and never retracted, which makes the emitted stream a
stable prefix of the final output by construction.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .alignment import Alignment, EnumerationLimitError, compositions
from .model import FeatureSequence, Transducer, TransducerState, stack_states
from .tensor import InvariantError


@dataclass(frozen=True)
class BeamConfig:
    """Beam width and total emission cap (0 means the structural cap N*M)."""

    beam_width: int = 4
    max_output_len: int = 0

    def __post_init__(self):
        if self.beam_width < 1:
            raise InvariantError("beam width must be >= 1")
        if self.max_output_len < 0:
            raise InvariantError("max_output_len must be >= 0")


@dataclass
class DecodeResult:
    tokens: tuple[int, ...]              # output tokens, end-of-block markers stripped
    alignment: Alignment | None          # full alignment; None when incomplete
    log_prob: float
    block_emissions: list[list[int]]     # per block, terminal end-of-block included
    complete: bool = True


@dataclass
class _Prefix:
    state: TransducerState
    block: int          # index into the block list being searched
    in_block: int       # non-terminal emissions in the current block
    tokens: tuple[int, ...]
    log_prob: float


@dataclass
class _Done:
    tokens: tuple[int, ...]
    log_prob: float
    state: TransducerState  # state after the terminal end-of-block commit


def _segments_of(tokens: Sequence[int], eob: int) -> list[list[int]]:
    out: list[list[int]] = [[]]
    for t in tokens:
        out[-1].append(t)
        if t == eob:
            out.append([])
    if out and not out[-1]:
        out.pop()
    return out


def _beam(
    model: Transducer,
    encoded: np.ndarray,
    blocks: list[tuple[int, int]],
    start_state: TransducerState,
    beam_width: int,
    max_emissions: int,
) -> tuple[list[_Done], _Prefix | None]:
    """Step-synchronized beam over the given blocks.

    The prefix pool starts before the first listed block (the block transition
    is applied on entry); a prefix finishes by emitting the end-of-block token
    in the last listed block. Returns all finished candidates plus the best
    non-finished prefix seen at the emission cap, for best-effort reporting.
    """
    cfg = model.config
    eob = cfg.vocab.eob_index
    vocab_size = cfg.vocab.size
    m_cap = cfg.block.max_per_block
    done: list[_Done] = []
    best_incomplete: _Prefix | None = None

    start = _Prefix(model.advance_block(start_state), 0, 0, (), 0.0)
    active = [start]
    while active:
        # candidates: (score, tokens, block, in_block, pending, row, token)
        candidates: list[tuple] = []
        for block_idx in sorted({p.block for p in active}):
            rows = [i for i, p in enumerate(active) if p.block == block_idx]
            batch = stack_states([active[i].state for i in rows])
            s, e = blocks[block_idx]
            k = e - s
            window = Transducer.window_from_np(encoded, s, e, len(rows))
            lps, pending = model.step_logprobs(batch, window, k)
            for r, i in enumerate(rows):
                p = active[i]
                symbols = range(vocab_size) if p.in_block < m_cap - 1 else (eob,)
                for v in symbols:
                    candidates.append(
                        (p.log_prob + float(lps[r, v]), p.tokens + (v,),
                         p.block, p.in_block, pending, r, v)
                    )
        candidates.sort(key=lambda c: (-c[0], c[1]))
        survivors: list[_Prefix] = []
        for score, tokens, block_idx, in_block, pending, row, v in candidates:
            if v == eob and block_idx == len(blocks) - 1:
                state = pending.gather(row).with_token([eob])
                done.append(_Done(tokens, score, state))
                continue
            if len(survivors) >= beam_width:
                continue
            if len(tokens) >= max_emissions:
                if best_incomplete is None or (-score, tokens) < (
                    -best_incomplete.log_prob, best_incomplete.tokens
                ):
                    best_incomplete = _Prefix(None, block_idx, in_block, tokens, score)
                continue
            state = pending.gather(row).with_token([v])
            if v == eob:
                survivors.append(_Prefix(model.advance_block(state), block_idx + 1, 0, tokens, score))
            else:
                survivors.append(_Prefix(state, block_idx, in_block + 1, tokens, score))
        active = survivors
    return done, best_incomplete


def _pick_best(done: list[_Done]) -> _Done:
    return min(done, key=lambda d: (-d.log_prob, d.tokens))


def beam_decode(model: Transducer, x: FeatureSequence, beam: BeamConfig) -> DecodeResult:
    """Highest-probability output over all blocks, full beam diversity."""
    cfg = model.config
    blocks = cfg.block.slices(x.length)
    cap = beam.max_output_len or len(blocks) * cfg.block.max_per_block
    encoded = model.encode_np(x)
    done, incomplete = _beam(
        model, encoded, blocks, model.initial_state(1), beam.beam_width, cap
    )
    eob = cfg.vocab.eob_index
    if done:
        best = _pick_best(done)
        alignment = Alignment.from_tokens(best.tokens, eob)
        return DecodeResult(
            tokens=alignment.strip(eob),
            alignment=alignment,
            log_prob=best.log_prob,
            block_emissions=_segments_of(best.tokens, eob),
        )
    if incomplete is None:
        raise InvariantError("beam search produced no candidates")
    return DecodeResult(
        tokens=tuple(t for t in incomplete.tokens if t != eob),
        alignment=None,
        log_prob=incomplete.log_prob,
        block_emissions=_segments_of(incomplete.tokens, eob),
        complete=False,
    )


@dataclass
class StreamEvent:
    """One block's committed emissions."""

    block_index: int
    segment: tuple[int, ...]   # includes the terminal end-of-block token
    tokens: tuple[int, ...]    # the segment with the end-of-block token stripped
    log_prob: float            # cumulative over all commitments so far


def streaming_decode(
    model: Transducer, frames: Iterable[np.ndarray], beam: BeamConfig
) -> Iterator[StreamEvent]:
    """Per-block incremental decoding over an ordered frame feed.

    After each block's frames arrive, a beam search confined to that block
    picks the best end-of-block-terminated segment, which is committed before
    any further input is read. Committed tokens are never retracted. A feed
    that ends mid-block is processed as a final short block.
    """
    cfg = model.config
    eob = cfg.vocab.eob_index
    width = cfg.block.width
    enc_state = model.encoder_init(1)
    committed_state = model.initial_state(1)
    committed_count = 0
    total_lp = 0.0
    block_index = 0
    buffer: list[np.ndarray] = []

    def close_block():
        nonlocal committed_state, committed_count, total_lp, block_index, buffer
        encoded = np.concatenate([h.data for h in buffer], axis=0)
        cap = beam.max_output_len or cfg.block.max_per_block * max(block_index + 1, 1)
        budget = max(cap - committed_count, 1)
        done, _ = _beam(
            model, encoded, [(0, encoded.shape[0])], committed_state,
            beam.beam_width, min(budget, cfg.block.max_per_block),
        )
        best = _pick_best(done)
        committed_state = best.state
        committed_count += len(best.tokens)
        total_lp += best.log_prob
        event = StreamEvent(
            block_index=block_index,
            segment=best.tokens,
            tokens=tuple(t for t in best.tokens if t != eob),
            log_prob=total_lp,
        )
        block_index += 1
        buffer = []
        return event

    for frame in frames:
        enc_state, h = model.encoder_step(enc_state, np.asarray(frame))
        buffer.append(h)
        if len(buffer) == width:
            yield close_block()
    if buffer:
        yield close_block()


def streaming_decode_result(
    model: Transducer, frames: Iterable[np.ndarray], beam: BeamConfig
) -> tuple[list[StreamEvent], DecodeResult]:
    """Run streaming decoding to completion and assemble the final result."""
    events = list(streaming_decode(model, frames, beam))
    eob = model.config.vocab.eob_index
    all_tokens = tuple(t for ev in events for t in ev.segment)
    alignment = Alignment.from_tokens(all_tokens, eob)
    result = DecodeResult(
        tokens=alignment.strip(eob),
        alignment=alignment,
        log_prob=events[-1].log_prob if events else 0.0,
        block_emissions=[list(ev.segment) for ev in events],
    )
    return events, result


def exhaustive_decode(
    model: Transducer, x: FeatureSequence, max_output_len: int = 0, limit: int = 1_000_000
) -> DecodeResult:
    """True argmax over every candidate output and alignment within the cap."""
    cfg = model.config
    eob = cfg.vocab.eob_index
    n_blocks = cfg.block.num_blocks(x.length)
    m_cap = cfg.block.max_per_block
    cap = min(max_output_len or n_blocks * m_cap, n_blocks * m_cap)
    if cfg.vocab.size ** cap > limit:
        raise EnumerationLimitError(
            f"{cfg.vocab.size}^{cap} candidate sequences exceed the limit {limit}"
        )
    regular = [t for t in range(cfg.vocab.size) if t != eob]
    encoded = model.encode_np(x)
    best: tuple[float, tuple[int, ...]] | None = None
    max_targets = min(n_blocks * (m_cap - 1), cap - n_blocks)
    for s in range(max_targets + 1):
        for targets in itertools.product(regular, repeat=s):
            for comp in compositions(s, n_blocks, m_cap - 1):
                segments = []
                pos = 0
                for c in comp:
                    segments.append(list(targets[pos:pos + c]) + [eob])
                    pos += c
                alignment = Alignment.from_segments(segments)
                if len(alignment.tokens) > cap:
                    continue
                lp = model.score_alignment(encoded, alignment)
                key = (lp, alignment.tokens)
                if best is None or lp > best[0] or (lp == best[0] and alignment.tokens < best[1]):
                    best = (lp, alignment.tokens)
    assert best is not None  # the all-empty alignment always fits the cap
    alignment = Alignment.from_tokens(best[1], eob)
    return DecodeResult(
        tokens=alignment.strip(eob),
        alignment=alignment,
        log_prob=best[0],
        block_emissions=_segments_of(best[1], eob),
    )
