"""Dense-tensor substrate with reverse-mode gradient accumulation.

Everything is a thin wrapper over numpy arrays. A :class:`Tape` records each
primitive operation as it runs; :func:`backward` replays the tape in exact
reverse order, accumulating gradients into the leaf parameters of a
:class:`ParamStore`. Ops skip recording entirely when no tape is active, which
is the fast path used by alignment search and decoding.

Conventions:
  * batched quantities are row-major 2-D ``[B, d]`` (or ``[B, W, d]`` for
    per-window stacks); per-row scalars are 1-D ``[B]``; a loss is shape ``()``.
  * float32 is the training/inference precision; float64 is used by the
    gradient-check suite (pass ``dtype=np.float64`` to the store).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "InvariantError",
    "Tensor",
    "Tape",
    "ParamStore",
    "recording",
    "active_tape",
    "backward",
    "finite_diff_grad",
    "sgd_momentum_step",
    "clip_global_norm",
    "affine",
    "softmax",
    "log_softmax_pick",
    "lstm_cell",
    "tanh",
    "sigmoid",
    "add",
    "mul",
    "neg",
    "sum_all",
    "concat_cols",
    "embed",
    "stack_steps",
    "slice_step",
    "slice_cols",
    "pad_cols",
    "stack_cols",
    "bmm_energy",
    "weighted_sum",
    "dotv",
]


class InvariantError(ValueError):
    """A structural precondition (shape, emptiness, scalar-ness) was violated."""


class Tensor:
    """A numpy array plus a gradient slot."""

    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray):
        self.data = data
        self.grad: np.ndarray | None = None

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Param(Tensor):
    """A named trainable leaf with persistent gradient and velocity slots."""

    __slots__ = ("name", "velocity")

    def __init__(self, name: str, data: np.ndarray):
        super().__init__(data)
        self.name = name
        self.grad = np.zeros_like(data)
        self.velocity = np.zeros_like(data)


class Tape:
    """Ordered record of primitive ops; replayed strictly in reverse."""

    __slots__ = ("_records",)

    def __init__(self):
        # each record: (backward_fn, output tensors)
        self._records: list[tuple[Callable[[], None], tuple[Tensor, ...]]] = []

    def __len__(self) -> int:
        return len(self._records)

    def record(self, backward_fn: Callable[[], None], outputs: tuple[Tensor, ...]) -> None:
        self._records.append((backward_fn, outputs))


_active: Tape | None = None


def active_tape() -> Tape | None:
    return _active


@contextlib.contextmanager
def recording(tape: Tape) -> Iterator[Tape]:
    """Make ``tape`` the recording target for ops run inside the block."""
    global _active
    prev = _active
    _active = tape
    try:
        yield tape
    finally:
        _active = prev


def _acc(t: Tensor, delta: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(delta, copy=True)
    else:
        t.grad += delta


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate parameter gradients for a scalar loss recorded on ``tape``.

    Intermediate tensors have their gradient storage released as soon as the
    record that produced them has been processed.
    """
    if loss.data.shape != ():
        raise InvariantError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for backward_fn, outputs in reversed(tape._records):
        if any(o.grad is not None for o in outputs):
            backward_fn()
        for o in outputs:
            o.grad = None


# ---------------------------------------------------------------------------
# Parameter store
# ---------------------------------------------------------------------------


class ParamStore:
    """Named collection of trainable tensors with grad and velocity slots.

    Iteration order is always sorted by name, so update order (and therefore
    bit-level reproducibility) does not depend on construction order.
    """

    def __init__(self, seed: int = 0, dtype=np.float32, init_scale: float = 0.08):
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.init_scale = init_scale
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self._entries: dict[str, Param] = {}

    def param(self, name: str, shape: Sequence[int], init: str = "uniform") -> Param:
        if name in self._entries:
            raise InvariantError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "uniform":
            data = self.rng.uniform(-self.init_scale, self.init_scale, shape).astype(self.dtype)
        elif init == "zeros":
            data = np.zeros(shape, dtype=self.dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        p = Param(name, data)
        self._entries[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return sorted(self._entries)

    def items(self) -> Iterator[tuple[str, Param]]:
        for name in sorted(self._entries):
            yield name, self._entries[name]

    def zero_grads(self) -> None:
        for _, p in self.items():
            p.grad[...] = 0

    def num_scalars(self) -> int:
        return sum(p.data.size for _, p in self.items())

    def grad_vector(self) -> np.ndarray:
        return np.concatenate([p.grad.ravel() for _, p in self.items()])

    def set_values(self, values: dict[str, np.ndarray], velocities: dict[str, np.ndarray] | None = None) -> None:
        for name, p in self.items():
            v = values[name]
            if v.shape != p.data.shape:
                raise InvariantError(f"shape mismatch loading {name!r}: {v.shape} vs {p.data.shape}")
            p.data[...] = v.astype(self.dtype)
            if velocities is not None:
                p.velocity[...] = velocities[name].astype(self.dtype)


def clip_global_norm(store: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the pre-clip norm (NaN if any gradient is non-finite).
    """
    total = 0.0
    for _, p in store.items():
        g = p.grad.astype(np.float64, copy=False)
        total += float(np.dot(g.ravel(), g.ravel()))
    norm = float(np.sqrt(total))
    if np.isfinite(norm) and norm > max_norm > 0:
        scale = np.array(max_norm / norm, dtype=store.dtype)
        for _, p in store.items():
            p.grad *= scale
    return norm


def sgd_momentum_step(store: ParamStore, lr: float, momentum: float) -> None:
    """Classical momentum update; zeroes gradients afterwards.

    velocity <- momentum * velocity - lr * grad
    value    <- value + velocity
    """
    if lr <= 0:
        raise InvariantError(f"learning rate must be positive, got {lr}")
    if not 0 <= momentum < 1:
        raise InvariantError(f"momentum must be in [0, 1), got {momentum}")
    lr_c = np.array(lr, dtype=store.dtype)
    mom_c = np.array(momentum, dtype=store.dtype)
    for _, p in store.items():
        p.velocity *= mom_c
        p.velocity -= lr_c * p.grad
        p.data += p.velocity
        p.grad[...] = 0


def finite_diff_grad(
    f: Callable[[ParamStore], float], store: ParamStore, epsilon: float = 1e-4
) -> dict[str, np.ndarray]:
    """Central-difference numeric gradient of ``f`` per parameter scalar.

    ``f`` is evaluated with the store's values perturbed in place; values are
    restored exactly afterwards. Intended for float64 stores; at float32 the
    differences drown in rounding noise.
    """
    if epsilon <= 0:
        raise InvariantError(f"epsilon must be positive, got {epsilon}")
    grads: dict[str, np.ndarray] = {}
    for name, p in store.items():
        flat = p.data.reshape(-1)
        out = np.zeros_like(flat, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = f(store)
            flat[i] = orig - epsilon
            lo = f(store)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise InvariantError(f"non-finite evaluation while differencing {name!r}")
            out[i] = (hi - lo) / (2.0 * epsilon)
        grads[name] = out.reshape(p.data.shape)
    return grads


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``out = x @ weight.T + bias`` for x of shape [n] or [B, n]."""
    n = x.data.shape[-1]
    if weight.data.ndim != 2 or weight.data.shape[1] != n:
        raise InvariantError(f"affine weight {weight.data.shape} does not accept input width {n}")
    if bias.data.shape != (weight.data.shape[0],):
        raise InvariantError(f"affine bias {bias.data.shape} does not match weight {weight.data.shape}")
    out = Tensor(x.data @ weight.data.T + bias.data)
    tape = _active
    if tape is not None:
        def bwd():
            g = out.grad
            if x.data.ndim == 1:
                _acc(weight, np.outer(g, x.data))
                _acc(bias, g)
                _acc(x, g @ weight.data)
            else:
                _acc(weight, g.T @ x.data)
                _acc(bias, g.sum(axis=0))
                _acc(x, g @ weight.data)
        tape.record(bwd, (out,))
    return out


def softmax(logits: Tensor) -> Tensor:
    """Max-shifted softmax over the last axis; rows sum to one."""
    if logits.data.size == 0:
        raise InvariantError("softmax of empty input")
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)
    tape = _active
    if tape is not None:
        def bwd():
            g = out.grad
            dot = (g * y).sum(axis=-1, keepdims=True)
            _acc(logits, y * (g - dot))
        tape.record(bwd, (out,))
    return out


def log_softmax_pick(logits: Tensor, idx: np.ndarray) -> Tensor:
    """Per-row ``log softmax(logits)[idx]`` for logits [B, k], idx [B]."""
    z = logits.data
    if z.ndim != 2:
        raise InvariantError(f"log_softmax_pick expects [B, k] logits, got {z.shape}")
    rows = np.arange(z.shape[0])
    m = z.max(axis=-1)
    lse = m + np.log(np.exp(z - m[:, None]).sum(axis=-1))
    out = Tensor(z[rows, idx] - lse)
    tape = _active
    if tape is not None:
        def bwd():
            g = out.grad
            sm = np.exp(z - lse[:, None])
            gz = -sm * g[:, None]
            gz[rows, idx] += g
            _acc(logits, gz)
        tape.record(bwd, (out,))
    return out


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, weight: Tensor, bias: Tensor) -> tuple[Tensor, Tensor]:
    """One fused LSTM step on a batch of rows.

    Gate pre-activations are one affine of ``[x; h]`` with row layout
    ``[input; forget; output; candidate]``, so the three sigmoid gates share
    one vectorized evaluation. Returns (new hidden, new cell).
    """
    hid = h.data.shape[-1]
    xin = np.concatenate([x.data, h.data], axis=-1)
    if weight.data.shape != (4 * hid, xin.shape[-1]):
        raise InvariantError(
            f"lstm weight {weight.data.shape} does not match input width {xin.shape[-1]} / hidden {hid}"
        )
    z = xin @ weight.data.T + bias.data
    sig = 1.0 / (1.0 + np.exp(-z[..., : 3 * hid]))
    gi, gf, go = sig[..., :hid], sig[..., hid:2 * hid], sig[..., 2 * hid:]
    gg = np.tanh(z[..., 3 * hid:])
    c2_data = gf * c.data + gi * gg
    tc2 = np.tanh(c2_data)
    h2 = Tensor(go * tc2)
    c2 = Tensor(c2_data)
    tape = _active
    if tape is not None:
        c_prev = c.data
        def bwd():
            gh = h2.grad
            gc = c2.grad
            if gh is None:
                gh = np.zeros_like(tc2)
            if gc is None:
                gc_total = np.zeros_like(tc2)
            else:
                gc_total = gc.copy()
            gc_total += gh * go * (1.0 - tc2 * tc2)
            gz = np.empty_like(z)
            gz[..., :hid] = gc_total * gg * gi * (1.0 - gi)
            gz[..., hid:2 * hid] = gc_total * c_prev * gf * (1.0 - gf)
            gz[..., 2 * hid:3 * hid] = gh * tc2 * go * (1.0 - go)
            gz[..., 3 * hid:] = gc_total * gi * (1.0 - gg * gg)
            if gz.ndim == 1:
                _acc(weight, np.outer(gz, xin))
                _acc(bias, gz)
            else:
                _acc(weight, gz.T @ xin)
                _acc(bias, gz.sum(axis=0))
            gxin = gz @ weight.data
            nx = x.data.shape[-1]
            _acc(x, gxin[..., :nx].copy())
            _acc(h, gxin[..., nx:].copy())
            _acc(c, gc_total * gf)
        tape.record(bwd, (h2, c2))
    return h2, c2


def _unary(fn, dfn):
    def op(x: Tensor) -> Tensor:
        y = fn(x.data)
        out = Tensor(y)
        tape = _active
        if tape is not None:
            def bwd():
                _acc(x, out.grad * dfn(y))
            tape.record(bwd, (out,))
        return out
    return op


tanh = _unary(np.tanh, lambda y: 1.0 - y * y)
sigmoid = _unary(lambda v: 1.0 / (1.0 + np.exp(-v)), lambda y: y * (1.0 - y))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise InvariantError(f"add shape mismatch {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data)
    tape = _active
    if tape is not None:
        def bwd():
            _acc(a, out.grad)
            _acc(b, out.grad)
        tape.record(bwd, (out,))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise InvariantError(f"mul shape mismatch {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data * b.data)
    tape = _active
    if tape is not None:
        def bwd():
            _acc(a, out.grad * b.data)
            _acc(b, out.grad * a.data)
        tape.record(bwd, (out,))
    return out


def neg(x: Tensor) -> Tensor:
    out = Tensor(-x.data)
    tape = _active
    if tape is not None:
        def bwd():
            _acc(x, -out.grad)
        tape.record(bwd, (out,))
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())
    tape = _active
    if tape is not None:
        def bwd():
            _acc(x, np.broadcast_to(out.grad, x.data.shape).copy())
        tape.record(bwd, (out,))
    return out


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last axis."""
    out = Tensor(np.concatenate([a.data, b.data], axis=-1))
    tape = _active
    if tape is not None:
        na = a.data.shape[-1]
        def bwd():
            g = out.grad
            _acc(a, g[..., :na].copy())
            _acc(b, g[..., na:].copy())
        tape.record(bwd, (out,))
    return out


def embed(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup ``table[idx]`` for an int index array [B]."""
    out = Tensor(table.data[idx])
    tape = _active
    if tape is not None:
        def bwd():
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, idx, out.grad)
        tape.record(bwd, (out,))
    return out


def stack_steps(steps: Sequence[Tensor]) -> Tensor:
    """Stack W tensors of shape [B, d] into [B, W, d]."""
    if not steps:
        raise InvariantError("stack_steps of empty sequence")
    out = Tensor(np.stack([s.data for s in steps], axis=1))
    tape = _active
    if tape is not None:
        def bwd():
            g = out.grad
            for w, s in enumerate(steps):
                _acc(s, g[:, w, :].copy())
        tape.record(bwd, (out,))
    return out


def slice_step(stack: Tensor, w: int) -> Tensor:
    """Select window position ``w``: [B, W, d] -> [B, d]."""
    out = Tensor(stack.data[:, w, :].copy())
    tape = _active
    if tape is not None:
        def bwd():
            g = np.zeros_like(stack.data)
            g[:, w, :] = out.grad
            _acc(stack, g)
        tape.record(bwd, (out,))
    return out


def slice_cols(x: Tensor, k: int) -> Tensor:
    """Keep the first ``k`` columns of [B, n]."""
    out = Tensor(x.data[..., :k].copy())
    tape = _active
    if tape is not None:
        def bwd():
            g = np.zeros_like(x.data)
            g[..., :k] = out.grad
            _acc(x, g)
        tape.record(bwd, (out,))
    return out


def pad_cols(x: Tensor, width: int) -> Tensor:
    """Right-pad [B, n] with zeros to [B, width]."""
    n = x.data.shape[-1]
    if width < n:
        raise InvariantError(f"pad_cols target {width} smaller than input {n}")
    shape = x.data.shape[:-1] + (width,)
    y = np.zeros(shape, dtype=x.data.dtype)
    y[..., :n] = x.data
    out = Tensor(y)
    tape = _active
    if tape is not None:
        def bwd():
            _acc(x, out.grad[..., :n].copy())
        tape.record(bwd, (out,))
    return out


def stack_cols(cols: Sequence[Tensor]) -> Tensor:
    """Stack W tensors of shape [B] into [B, W]."""
    out = Tensor(np.stack([c.data for c in cols], axis=-1))
    tape = _active
    if tape is not None:
        def bwd():
            g = out.grad
            for w, c in enumerate(cols):
                _acc(c, g[..., w].copy())
        tape.record(bwd, (out,))
    return out


def bmm_energy(stack: Tensor, s: Tensor) -> Tensor:
    """Per-row dot products: [B, W, d] x [B, d] -> [B, W]."""
    if stack.data.shape[-1] != s.data.shape[-1]:
        raise InvariantError(
            f"energy width mismatch: window {stack.data.shape} vs state {s.data.shape}"
        )
    out = Tensor(np.einsum("bwd,bd->bw", stack.data, s.data))
    tape = _active
    if tape is not None:
        def bwd():
            g = out.grad
            _acc(stack, g[:, :, None] * s.data[:, None, :])
            _acc(s, np.einsum("bw,bwd->bd", g, stack.data))
        tape.record(bwd, (out,))
    return out


def weighted_sum(stack: Tensor, weights: Tensor) -> Tensor:
    """Convex combination of window rows: [B, W, d] x [B, W] -> [B, d]."""
    out = Tensor(np.einsum("bwd,bw->bd", stack.data, weights.data))
    tape = _active
    if tape is not None:
        def bwd():
            g = out.grad
            _acc(weights, np.einsum("bd,bwd->bw", g, stack.data))
            _acc(stack, weights.data[:, :, None] * g[:, None, :])
        tape.record(bwd, (out,))
    return out


def dotv(x: Tensor, v: Tensor) -> Tensor:
    """Project rows onto a vector: [B, A] x [A] -> [B]."""
    out = Tensor(x.data @ v.data)
    tape = _active
    if tape is not None:
        def bwd():
            g = out.grad
            _acc(v, g @ x.data)
            _acc(x, g[:, None] * v.data[None, :])
        tape.record(bwd, (out,))
    return out
