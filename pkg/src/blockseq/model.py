"""Encoder RNN, transducer RNN, and windowed attention.

The transducer consumes the input in fixed-width blocks of frames and emits a
(possibly empty) token segment per block, each segment terminated by the
end-of-block token. Its recurrent state is carried across blocks, so every
next-step distribution conditions on all frames seen so far and on the full
emission history.

Per output step m, with the previous context c and previous token y:

    history state   s  = lstm(s_prev,  [c_prev; embed(y_prev)])
    context         c  = attention(s, encoder window)
    readout state   r  = lstm(r_prev,  [c; s])
    distribution       = softmax(affine(r))

Attention variants over the current block's encoder vectors:
  * none - the block's last encoder vector is the context.
  * dot  - energies are dot products of the history state with each vector.
  * mlp  - energies come from a one-hidden-layer perceptron of [state; vector].
  * lstm - mlp-style energies are fed through a small LSTM whose output is
    mapped to per-frame logits; its state persists within a block and resets
    at block boundaries.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import InvariantError, Tensor


class AttentionKind(str, enum.Enum):
    NONE = "none"
    DOT = "dot"
    MLP = "mlp"
    LSTM = "lstm"


@dataclass(frozen=True)
class Vocab:
    """Output token inventory, including the end-of-block token."""

    tokens: tuple[str, ...]
    eob_index: int

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise InvariantError("vocab tokens must be unique")
        if not 0 <= self.eob_index < len(self.tokens):
            raise InvariantError(f"eob_index {self.eob_index} out of range")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def sos_row(self) -> int:
        """Embedding row used as the before-any-output token."""
        return len(self.tokens)

    def index(self, token: str) -> int:
        return self.tokens.index(token)

    @staticmethod
    def with_eob(regular_tokens: Sequence[str], eob_token: str = "<e>") -> "Vocab":
        return Vocab(tuple(regular_tokens) + (eob_token,), len(regular_tokens))


@dataclass(frozen=True)
class BlockConfig:
    """Input blocking: width in frames and max emissions per block."""

    width: int
    max_per_block: int

    def __post_init__(self):
        if self.width < 1 or self.max_per_block < 1:
            raise InvariantError("block width and max_per_block must be positive")

    def num_blocks(self, num_frames: int) -> int:
        return -(-num_frames // self.width)

    def slices(self, num_frames: int) -> list[tuple[int, int]]:
        return [
            (s, min(s + self.width, num_frames))
            for s in range(0, num_frames, self.width)
        ]


@dataclass(frozen=True)
class FeatureSequence:
    """Input features: one fixed-width real vector per frame."""

    frames: np.ndarray

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise InvariantError(f"frames must be [L, d] with L >= 1, got {self.frames.shape}")

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class ModelConfig:
    d_in: int
    vocab: Vocab
    block: BlockConfig
    encoder_widths: tuple[int, ...] = (100,)
    transducer_widths: tuple[int, ...] = (100,)
    embed_width: int = 32
    attention: AttentionKind = AttentionKind.NONE
    attention_width: int = 32
    block_recurrence: bool = True
    precision: str = "f32"
    # input token inventory for one-hot featurized tasks; empty for raw features
    input_tokens: tuple[str, ...] = ()

    def __post_init__(self):
        for w in self.encoder_widths + self.transducer_widths:
            if w < 1:
                raise InvariantError("layer widths must be positive")
        if self.embed_width < 1 or self.attention_width < 1:
            raise InvariantError("embed/attention widths must be positive")
        if self.precision not in ("f32", "f64"):
            raise InvariantError(f"precision must be f32 or f64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    @property
    def history_widths(self) -> tuple[int, ...]:
        """Transducer layers below attention (the attention query stack)."""
        if len(self.transducer_widths) == 1:
            return self.transducer_widths
        return self.transducer_widths[:-1]

    @property
    def readout_widths(self) -> tuple[int, ...]:
        """Transducer layers above attention (the softmax input stack)."""
        return self.transducer_widths[-1:]

    def to_text(self) -> str:
        lines = [
            f"d_in = {self.d_in}",
            f"vocab_tokens = {' '.join(self.vocab.tokens)}",
            f"eob_index = {self.vocab.eob_index}",
            f"block_width = {self.block.width}",
            f"max_per_block = {self.block.max_per_block}",
            f"encoder_widths = {','.join(map(str, self.encoder_widths))}",
            f"transducer_widths = {','.join(map(str, self.transducer_widths))}",
            f"embed_width = {self.embed_width}",
            f"attention = {self.attention.value}",
            f"attention_width = {self.attention_width}",
            f"block_recurrence = {str(self.block_recurrence).lower()}",
            f"precision = {self.precision}",
            f"input_tokens = {' '.join(self.input_tokens)}",
        ]
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> "ModelConfig":
        kv: dict[str, str] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or "=" not in line:
                continue
            key, _, val = line.partition("=")
            kv[key.strip()] = val.strip()
        return ModelConfig(
            d_in=int(kv["d_in"]),
            vocab=Vocab(tuple(kv["vocab_tokens"].split()), int(kv["eob_index"])),
            block=BlockConfig(int(kv["block_width"]), int(kv["max_per_block"])),
            encoder_widths=tuple(int(v) for v in kv["encoder_widths"].split(",")),
            transducer_widths=tuple(int(v) for v in kv["transducer_widths"].split(",")),
            embed_width=int(kv["embed_width"]),
            attention=AttentionKind(kv["attention"]),
            attention_width=int(kv["attention_width"]),
            block_recurrence=kv["block_recurrence"] == "true",
            precision=kv["precision"],
            input_tokens=tuple(kv.get("input_tokens", "").split()),
        )


class LstmLayer:
    """One LSTM layer bound to its weight/bias entries in a ParamStore."""

    def __init__(self, store: T.ParamStore, name: str, in_width: int, width: int):
        self.width = width
        self.in_width = in_width
        self.w = store.param(f"{name}.w", (4 * width, in_width + width))
        self.b = store.param(f"{name}.b", (4 * width,), init="zeros")

    def init_state(self, batch: int, dtype) -> tuple[Tensor, Tensor]:
        z = np.zeros((batch, self.width), dtype=dtype)
        return Tensor(z), Tensor(z.copy())

    def step(self, x: Tensor, state: tuple[Tensor, Tensor]) -> tuple[tuple[Tensor, Tensor], Tensor]:
        if x.data.shape[-1] != self.in_width:
            raise InvariantError(f"lstm input width {x.data.shape[-1]}, expected {self.in_width}")
        h, c = state
        h2, c2 = T.lstm_cell(x, h, c, self.w, self.b)
        return (h2, c2), h2


class StackedLstm:
    def __init__(self, store: T.ParamStore, name: str, in_width: int, widths: Sequence[int]):
        self.layers: list[LstmLayer] = []
        for i, w in enumerate(widths):
            self.layers.append(LstmLayer(store, f"{name}{i}", in_width, w))
            in_width = w
        self.out_width = in_width

    def init_state(self, batch: int, dtype):
        return tuple(layer.init_state(batch, dtype) for layer in self.layers)

    def step(self, x: Tensor, states) -> tuple[tuple, Tensor]:
        new_states = []
        for layer, st in zip(self.layers, states):
            st2, x = layer.step(x, st)
            new_states.append(st2)
        return tuple(new_states), x


@dataclass
class TransducerState:
    """All recurrent carries crossing one output step (batched rows)."""

    history: tuple       # per-layer (h, c) of the query stack
    readout: tuple       # per-layer (h, c) of the softmax-input stack
    attn: tuple | None   # (h, c) of the attention LSTM, when used
    prev_context: Tensor
    prev_token: np.ndarray  # int array [B]

    @property
    def batch(self) -> int:
        return self.prev_token.shape[0]

    def with_token(self, tokens) -> "TransducerState":
        return TransducerState(
            self.history, self.readout, self.attn, self.prev_context,
            np.asarray(tokens, dtype=np.int64),
        )

    def gather(self, rows) -> "TransducerState":
        """Row-select a batched state (decode-time only, never taped).

        A single int selects by slice view: state arrays are never mutated in
        place, so views are safe and avoid per-candidate copies.
        """
        if isinstance(rows, (int, np.integer)):
            rows = slice(rows, rows + 1)

        def sel(pair):
            h, c = pair
            return (Tensor(h.data[rows]), Tensor(c.data[rows]))

        return TransducerState(
            history=tuple(sel(p) for p in self.history),
            readout=tuple(sel(p) for p in self.readout),
            attn=sel(self.attn) if self.attn is not None else None,
            prev_context=Tensor(self.prev_context.data[rows]),
            prev_token=self.prev_token[rows],
        )


def stack_states(states: Sequence[TransducerState]) -> TransducerState:
    """Combine single-row states into one batched state (decode-time only)."""
    def cat(pairs):
        return (
            Tensor(np.concatenate([p[0].data for p in pairs], axis=0)),
            Tensor(np.concatenate([p[1].data for p in pairs], axis=0)),
        )

    first = states[0]
    return TransducerState(
        history=tuple(cat([s.history[i] for s in states]) for i in range(len(first.history))),
        readout=tuple(cat([s.readout[i] for s in states]) for i in range(len(first.readout))),
        attn=cat([s.attn for s in states]) if first.attn is not None else None,
        prev_context=Tensor(np.concatenate([s.prev_context.data for s in states], axis=0)),
        prev_token=np.concatenate([s.prev_token for s in states]),
    )


class Transducer:
    """The full model: encoder, attention, and the emitting transducer."""

    def __init__(self, config: ModelConfig, seed: int = 0, store: T.ParamStore | None = None):
        self.config = config
        self.dtype = config.dtype
        self.store = store if store is not None else T.ParamStore(seed=seed, dtype=self.dtype)
        s = self.store
        self.encoder = StackedLstm(s, "enc", config.d_in, config.encoder_widths)
        self.embed_table = s.param("embed.table", (config.vocab.size + 1, config.embed_width))
        enc_out = self.encoder.out_width
        self.history = StackedLstm(s, "hist", enc_out + config.embed_width, config.history_widths)
        self.readout = StackedLstm(s, "read", enc_out + self.history.out_width, config.readout_widths)
        self.out_w = s.param("out.w", (config.vocab.size, self.readout.out_width))
        self.out_b = s.param("out.b", (config.vocab.size,), init="zeros")
        kind = config.attention
        if kind == AttentionKind.DOT and self.history.out_width != enc_out:
            raise InvariantError(
                f"dot attention needs matching widths: query {self.history.out_width} "
                f"vs encoder {enc_out}"
            )
        if kind in (AttentionKind.MLP, AttentionKind.LSTM):
            a = config.attention_width
            self.attn_w = s.param("attn.w", (a, self.history.out_width + enc_out))
            self.attn_b = s.param("attn.b", (a,), init="zeros")
            self.attn_v = s.param("attn.v", (a,))
        if kind == AttentionKind.LSTM:
            self.attn_rnn = LstmLayer(s, "attnrnn", config.block.width, config.attention_width)
            self.attn_out_w = s.param("attnout.w", (config.block.width, config.attention_width))
            self.attn_out_b = s.param("attnout.b", (config.block.width,), init="zeros")

    # -- encoder ------------------------------------------------------------

    @property
    def encoder_width(self) -> int:
        return self.encoder.out_width

    def encoder_init(self, batch: int = 1):
        return self.encoder.init_state(batch, self.dtype)

    def encoder_step(self, states, frame: np.ndarray):
        """Advance the encoder by one frame ([d_in] or [B, d_in])."""
        x = np.asarray(frame, dtype=self.dtype)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[-1] != self.config.d_in:
            raise InvariantError(f"frame width {x.shape[-1]}, expected {self.config.d_in}")
        return self.encoder.step(Tensor(x), states)

    def encode(self, x: FeatureSequence) -> list[Tensor]:
        """Top-layer encoder vectors, one [1, H] tensor per frame."""
        states = self.encoder_init(1)
        outs = []
        for t in range(x.length):
            states, h = self.encoder_step(states, x.frames[t])
            outs.append(h)
        return outs

    def encode_np(self, x: FeatureSequence) -> np.ndarray:
        """Encoder vectors as a plain [L, H] array (decode/alignment path)."""
        return np.concatenate([h.data for h in self.encode(x)], axis=0)

    # -- transducer steps ----------------------------------------------------

    def initial_state(self, batch: int = 1) -> TransducerState:
        cfg = self.config
        return TransducerState(
            history=self.history.init_state(batch, self.dtype),
            readout=self.readout.init_state(batch, self.dtype),
            attn=self.attn_rnn.init_state(batch, self.dtype)
            if cfg.attention == AttentionKind.LSTM
            else None,
            prev_context=Tensor(np.zeros((batch, self.encoder.out_width), dtype=self.dtype)),
            prev_token=np.full(batch, cfg.vocab.sos_row, dtype=np.int64),
        )

    def advance_block(self, state: TransducerState) -> TransducerState:
        """State carried into the next block.

        With block recurrence on, everything persists except the attention
        LSTM, which restarts per block. With it off, the whole transducer
        restarts (the ablation arm).
        """
        if not self.config.block_recurrence:
            return self.initial_state(state.batch)
        if state.attn is None:
            return state
        return replace(state, attn=self.attn_rnn.init_state(state.batch, self.dtype))

    def context(
        self, s_top: Tensor, window: Tensor, attn_state, k: int
    ) -> tuple[Tensor, Tensor, tuple | None]:
        """Context vector and attention weights over a block window.

        ``window`` is [B, k, H] with k the actual frame count of the block
        (k < block width only in the final short block).
        """
        if k < 1:
            raise InvariantError("attention window must be nonempty")
        kind = self.config.attention
        if kind == AttentionKind.NONE:
            c = T.slice_step(window, k - 1)
            alpha = np.zeros((s_top.data.shape[0], k), dtype=self.dtype)
            alpha[:, k - 1] = 1.0
            return c, Tensor(alpha), attn_state
        if kind == AttentionKind.DOT:
            energies = T.bmm_energy(window, s_top)
        else:
            cols = []
            for j in range(k):
                pair = T.concat_cols(s_top, T.slice_step(window, j))
                hidden = T.tanh(T.affine(pair, self.attn_w, self.attn_b))
                cols.append(T.dotv(hidden, self.attn_v))
            energies = T.stack_cols(cols)
        if kind == AttentionKind.LSTM:
            padded = T.pad_cols(energies, self.config.block.width)
            attn_state, a_h = self.attn_rnn.step(padded, attn_state)
            logits = T.affine(a_h, self.attn_out_w, self.attn_out_b)
            energies = T.slice_cols(logits, k)
        alpha = T.softmax(energies)
        c = T.weighted_sum(window, alpha)
        return c, alpha, attn_state

    def _step(self, state: TransducerState, window: Tensor, k: int):
        """Shared next-step core: returns (logits, pending state, alpha).

        The pending state has advanced recurrences and context but an unset
        previous token; callers commit the emitted token via ``with_token``.
        """
        emb = T.embed(self.embed_table, state.prev_token)
        hist_in = T.concat_cols(state.prev_context, emb)
        hist_states, s_top = self.history.step(hist_in, state.history)
        c, alpha, attn2 = self.context(s_top, window, state.attn, k)
        read_in = T.concat_cols(c, s_top)
        read_states, r_top = self.readout.step(read_in, state.readout)
        logits = T.affine(r_top, self.out_w, self.out_b)
        pending = TransducerState(
            history=hist_states,
            readout=read_states,
            attn=attn2,
            prev_context=c,
            prev_token=state.prev_token,
        )
        return logits, pending, alpha

    def next_step(self, state: TransducerState, window: Tensor, k: int):
        """Next-token distribution: (probs [B, V], pending state, alpha)."""
        logits, pending, alpha = self._step(state, window, k)
        return T.softmax(logits), pending, alpha

    def step_pick(self, state: TransducerState, window: Tensor, k: int, tokens: np.ndarray):
        """Log-probability of given tokens: (logprob [B], committed state)."""
        tokens = np.asarray(tokens, dtype=np.int64)
        logits, pending, _ = self._step(state, window, k)
        lp = T.log_softmax_pick(logits, tokens)
        return lp, pending.with_token(tokens)

    def step_logprobs(self, state: TransducerState, window: Tensor, k: int):
        """Full log-distribution as a plain array (decode path, never taped).

        Returns (logprobs [B, V] ndarray, pending state).
        """
        logits, pending, _ = self._step(state, window, k)
        z = logits.data
        m = z.max(axis=-1, keepdims=True)
        lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
        return z - lse, pending

    # -- segment / sequence scoring -------------------------------------------

    def window_tensor(self, encoded: list[Tensor], start: int, end: int) -> Tensor:
        """Taped [1, k, H] window from per-frame encoder outputs."""
        return T.stack_steps(encoded[start:end])

    @staticmethod
    def window_from_np(h: np.ndarray, start: int, end: int, batch: int) -> Tensor:
        """Read-only [B, k, H] window view over precomputed encoder vectors."""
        win = h[start:end]
        return Tensor(np.broadcast_to(win[None], (batch,) + win.shape))

    def validate_segment(self, segment: Sequence[int]) -> None:
        eob = self.config.vocab.eob_index
        m = self.config.block.max_per_block
        if not 1 <= len(segment) <= m:
            raise InvariantError(f"segment length {len(segment)} outside [1, {m}]")
        if segment[-1] != eob:
            raise InvariantError("segment must end with the end-of-block token")
        if any(t == eob for t in segment[:-1]):
            raise InvariantError("end-of-block token inside a segment")

    def block_log_prob(self, state: TransducerState, window: Tensor, k: int, segment: Sequence[int]):
        """Sum of next-step log-probs over one block's segment.

        Returns (logprob [B] tensor, state after the terminal end-of-block).
        """
        self.validate_segment(segment)
        batch = state.batch
        total = None
        for tok in segment:
            lp, state = self.step_pick(state, window, k, np.full(batch, tok, dtype=np.int64))
            total = lp if total is None else T.add(total, lp)
        return total, state

    def _alignment_log_prob(self, windows: list[tuple[Tensor, int]], segments) -> Tensor:
        state = self.initial_state(1)
        total = None
        for b, (window, k) in enumerate(windows):
            if b > 0:
                state = self.advance_block(state)
            lp, state = self.block_log_prob(state, window, k, segments[b])
            total = lp if total is None else T.add(total, lp)
        return T.sum_all(total)

    def _check_block_count(self, num_frames: int, segments) -> None:
        n_blocks = self.config.block.num_blocks(num_frames)
        if len(segments) != n_blocks:
            raise InvariantError(
                f"alignment has {len(segments)} blocks, input needs {n_blocks}"
            )

    def sequence_log_prob(self, x: FeatureSequence, alignment) -> Tensor:
        """Scalar log-probability of a full alignment (taped when recording)."""
        segments = alignment.segments()
        self._check_block_count(x.length, segments)
        encoded = self.encode(x)
        windows = [
            (self.window_tensor(encoded, s, e), e - s)
            for s, e in self.config.block.slices(x.length)
        ]
        return self._alignment_log_prob(windows, segments)

    def score_alignment(self, encoded_np: np.ndarray, alignment) -> float:
        """Alignment log-probability against precomputed encoder vectors.

        Same computation as :meth:`sequence_log_prob` modulo the shared
        encoding; used by the enumeration oracles to avoid re-encoding.
        """
        segments = alignment.segments()
        num_frames = encoded_np.shape[0]
        self._check_block_count(num_frames, segments)
        windows = [
            (self.window_from_np(encoded_np, s, e, 1), e - s)
            for s, e in self.config.block.slices(num_frames)
        ]
        return float(self._alignment_log_prob(windows, segments).data)
