"""Shared fixtures: tiny model builders, scalar oracles, gradient checking."""

import math

import numpy as np

from blockseq import tensor as T
from blockseq.alignment import Alignment
from blockseq.model import (
    AttentionKind,
    BlockConfig,
    FeatureSequence,
    ModelConfig,
    Transducer,
    Vocab,
)


def make_vocab(n_regular=3):
    return Vocab.with_eob([str(i) for i in range(n_regular)])


def make_model(
    attention=AttentionKind.NONE,
    seed=0,
    d_in=3,
    encoder_widths=(3,),
    transducer_widths=(3,),
    embed_width=3,
    attention_width=3,
    block_width=2,
    max_per_block=3,
    n_regular=3,
    precision="f64",
    block_recurrence=True,
    init_scale=0.08,
):
    cfg = ModelConfig(
        d_in=d_in,
        vocab=make_vocab(n_regular),
        block=BlockConfig(block_width, max_per_block),
        encoder_widths=tuple(encoder_widths),
        transducer_widths=tuple(transducer_widths),
        embed_width=embed_width,
        attention=attention,
        attention_width=attention_width,
        precision=precision,
        block_recurrence=block_recurrence,
    )
    store = T.ParamStore(seed=seed, dtype=cfg.dtype, init_scale=init_scale)
    return Transducer(cfg, store=store)


def zero_params(model):
    for _, p in model.store.items():
        p.data[...] = 0.0


def random_frames(rng, length, d_in, dtype=np.float64):
    return FeatureSequence(rng.standard_normal((length, d_in)).astype(dtype))


def random_alignment(rng, model, num_frames):
    """A uniformly random valid alignment plus its stripped targets."""
    cfg = model.config
    n_blocks = cfg.block.num_blocks(num_frames)
    m_cap = cfg.block.max_per_block
    eob = cfg.vocab.eob_index
    regular = [i for i in range(cfg.vocab.size) if i != eob]
    segments = []
    for _ in range(n_blocks):
        k = int(rng.integers(0, m_cap))
        segments.append([int(rng.choice(regular)) for _ in range(k)] + [eob])
    alignment = Alignment.from_segments(segments)
    return alignment, list(alignment.strip(eob))


def loss_value(model, x, alignment):
    return -float(model.sequence_log_prob(x, alignment).data)


def analytic_loss_grads(model, x, alignment):
    model.store.zero_grads()
    tape = T.Tape()
    with T.recording(tape):
        loss = T.neg(model.sequence_log_prob(x, alignment))
    T.backward(tape, loss)
    return {name: p.grad.copy() for name, p in model.store.items()}


def gradcheck_model(model, x, alignment, epsilon=1e-4):
    """Worst norm-relative error between analytic and numeric gradients.

    The denominator is floored so parameters whose true gradient is zero to
    within finite-difference noise cannot dominate the comparison.
    """
    analytic = analytic_loss_grads(model, x, alignment)
    numeric = T.finite_diff_grad(lambda s: loss_value(model, x, alignment), model.store, epsilon)
    worst = 0.0
    for name in analytic:
        a, n = analytic[name], numeric[name]
        denom = max(np.linalg.norm(a) + np.linalg.norm(n), 1e-8)
        worst = max(worst, float(np.linalg.norm(a - n) / denom))
    return worst


# -- independent scalar re-implementations (plain python, no numpy algebra) --


def _sigm(v):
    return 1.0 / (1.0 + math.exp(-v))


def scalar_lstm_step(x, h, c, weight, bias):
    """Plain-python LSTM step with [input; forget; output; candidate] layout."""
    hid = len(h)
    xin = list(x) + list(h)
    z = [sum(weight[r][j] * xin[j] for j in range(len(xin))) + bias[r] for r in range(4 * hid)]
    gi = [_sigm(z[r]) for r in range(hid)]
    gf = [_sigm(z[hid + r]) for r in range(hid)]
    go = [_sigm(z[2 * hid + r]) for r in range(hid)]
    gg = [math.tanh(z[3 * hid + r]) for r in range(hid)]
    c2 = [gf[r] * c[r] + gi[r] * gg[r] for r in range(hid)]
    h2 = [go[r] * math.tanh(c2[r]) for r in range(hid)]
    return h2, c2


def scalar_encode(model, frames):
    """Scalar re-run of the encoder stack; returns per-frame top vectors."""
    layers = []
    for layer in model.encoder.layers:
        layers.append(
            (
                layer.w.data.tolist(),
                layer.b.data.tolist(),
                [0.0] * layer.width,
                [0.0] * layer.width,
            )
        )
    outs = []
    for t in range(frames.shape[0]):
        x = list(frames[t])
        new_layers = []
        for weight, bias, h, c in layers:
            h, c = scalar_lstm_step(x, h, c, weight, bias)
            new_layers.append((weight, bias, h, c))
            x = h
        layers = new_layers
        outs.append(x)
    return outs


def scalar_softmax(logits):
    m = max(logits)
    exps = [math.exp(v - m) for v in logits]
    tot = sum(exps)
    return [e / tot for e in exps]


def scalar_next_step(model, prev_context, prev_token, hist_state, read_state, window):
    """Scalar re-run of one transducer step with MLP attention.

    States are ([h], [c]) pairs for the single-layer stacks used in tests.
    Returns (probs, new states, context).
    """
    cfg = model.config
    emb = model.embed_table.data[prev_token].tolist()
    x = list(prev_context) + emb
    hw = model.history.layers[0]
    s_h, s_c = scalar_lstm_step(x, hist_state[0], hist_state[1], hw.w.data.tolist(), hw.b.data.tolist())
    # mlp attention energies
    aw, ab, av = model.attn_w.data.tolist(), model.attn_b.data.tolist(), model.attn_v.data.tolist()
    energies = []
    for frame in window:
        pair = s_h + list(frame)
        hidden = [
            math.tanh(sum(aw[r][j] * pair[j] for j in range(len(pair))) + ab[r])
            for r in range(len(ab))
        ]
        energies.append(sum(av[r] * hidden[r] for r in range(len(av))))
    alpha = scalar_softmax(energies)
    ctx = [
        sum(alpha[w] * window[w][d] for w in range(len(window)))
        for d in range(len(window[0]))
    ]
    rw = model.readout.layers[0]
    y = ctx + s_h
    r_h, r_c = scalar_lstm_step(y, read_state[0], read_state[1], rw.w.data.tolist(), rw.b.data.tolist())
    logits = [
        sum(model.out_w.data[v][j] * r_h[j] for j in range(len(r_h))) + model.out_b.data[v]
        for v in range(cfg.vocab.size)
    ]
    return scalar_softmax(logits), (s_h, s_c), (r_h, r_c), ctx
