"""Training loop: per-sequence loss on a chosen alignment, SGD with momentum,
validation-driven learning-rate decay, and periodic alignment refresh.

Alignments come either from the approximate DP search (recomputed every
``align_refresh_period`` sequences against a parameter snapshot and cached in
between) or from a fixed externally supplied table; the update path is
identical in both cases.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .alignment import Alignment, AlignmentCache, InfeasibleAlignmentError, dp_best_alignment
from .checkpoint import load_checkpoint, save_model
from .inference import BeamConfig, beam_decode
from .model import FeatureSequence, Transducer
from .tensor import InvariantError

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    """Loss or gradients went NaN/Inf; training aborted with diagnostics."""


@dataclass(frozen=True)
class SequenceExample:
    """One training sequence: features plus its target token indices."""

    seq_id: int
    features: FeatureSequence
    targets: tuple[int, ...]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    lr_decay: float = 0.5
    max_decays: int = 4
    epochs: int = 50
    align_refresh_period: int = 300
    batch_size: int = 1
    seed: int = 0
    clip_norm: float = 10.0
    workers: int = 1
    val_beam_width: int = 2

    def __post_init__(self):
        if self.lr <= 0 or self.align_refresh_period <= 0 or self.batch_size <= 0:
            raise InvariantError("lr, refresh period, and batch size must be positive")
        if not 0 < self.lr_decay < 1:
            raise InvariantError("lr_decay must be in (0, 1)")
        if self.epochs < 0 or self.max_decays < 0 or self.workers < 1:
            raise InvariantError("epochs/max_decays/workers out of range")


@dataclass
class EpochMetrics:
    epoch: int
    mean_train_loss: float
    val_log_prob: float
    val_seq_error: float
    lr: float
    decays: int

    CSV_HEADER = "epoch,mean_train_loss,val_log_prob,val_seq_error,lr,decays"

    def csv_row(self) -> str:
        return (
            f"{self.epoch},{self.mean_train_loss!r},{self.val_log_prob!r},"
            f"{self.val_seq_error!r},{self.lr!r},{self.decays}"
        )


@dataclass
class TrainState:
    params_version: int = 0
    decays_applied: int = 0
    best_validation_log_prob: float = -np.inf
    metrics: list[EpochMetrics] = field(default_factory=list)
    lr: float = 0.0
    epochs_done: int = 0
    prev_validation_log_prob: float | None = None
    refresh_improved: int = 0
    refresh_compared: int = 0
    skipped_infeasible: int = 0


def loss(model: Transducer, x: FeatureSequence, alignment: Alignment) -> T.Tensor:
    """Negative alignment log-probability (recorded when a tape is active)."""
    return T.neg(model.sequence_log_prob(x, alignment))


def _backward_one(model, x, alignment) -> float:
    tape = T.Tape()
    with T.recording(tape):
        out = loss(model, x, alignment)
    value = float(out.data)
    if not np.isfinite(value):
        raise NonFiniteLossError(f"non-finite loss {value}")
    T.backward(tape, out)
    return value


def _clip_and_step(model, config: TrainConfig, lr: float) -> None:
    norm = T.clip_global_norm(model.store, config.clip_norm)
    if not np.isfinite(norm):
        raise NonFiniteLossError(f"non-finite gradient norm {norm}")
    T.sgd_momentum_step(model.store, lr, config.momentum)


def train_step(
    model: Transducer,
    x: FeatureSequence,
    alignment: Alignment,
    config: TrainConfig,
    lr: float | None = None,
) -> float:
    """One forward/backward/clip/update on a single sequence.

    Returns the pre-update loss. Raises :class:`NonFiniteLossError` when the
    loss or gradient norm is not finite.
    """
    value = _backward_one(model, x, alignment)
    _clip_and_step(model, config, config.lr if lr is None else lr)
    return value


def _train_batch(model, items, alignments, config, lr) -> float:
    total = 0.0
    model.store.zero_grads()
    for item in items:
        total += _backward_one(model, item.features, alignments[item.seq_id])
    if len(items) > 1:
        scale = np.array(1.0 / len(items), dtype=model.store.dtype)
        for _, p in model.store.items():
            p.grad *= scale
    _clip_and_step(model, config, lr)
    return total / len(items)


def refresh_alignments(
    model: Transducer,
    items: list[SequenceExample],
    cache: AlignmentCache,
    params_version: int,
    workers: int = 1,
    state: TrainState | None = None,
) -> None:
    """Recompute the DP alignment for each sequence against current params.

    Infeasible sequences (more targets than the block structure can hold) are
    skipped with a warning. When a previous cached alignment exists, the new
    one is compared against it under the new parameters and the improvement
    rate is accumulated on ``state``.
    """

    def compute(item: SequenceExample):
        try:
            alignment = dp_best_alignment(model, item.features, list(item.targets))
        except InfeasibleAlignmentError as exc:
            return item.seq_id, None, exc
        return item.seq_id, alignment, None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(compute, items))
    else:
        results = [compute(item) for item in items]

    by_id = {item.seq_id: item for item in items}
    for seq_id, alignment, exc in results:
        if alignment is None:
            log.warning("sequence %d skipped: %s", seq_id, exc)
            if state is not None:
                state.skipped_infeasible += 1
            continue
        old = cache.get(seq_id)
        if state is not None and old is not None:
            encoded = model.encode_np(by_id[seq_id].features)
            new_lp = model.score_alignment(encoded, alignment)
            old_lp = model.score_alignment(encoded, old)
            state.refresh_compared += 1
            if new_lp >= old_lp - 1e-9:
                state.refresh_improved += 1
        cache.put(seq_id, alignment, params_version)


def validate(
    model: Transducer, items: list[SequenceExample], beam_width: int
) -> tuple[float, float]:
    """Mean per-sequence DP-alignment log-prob and beam-decode error rate."""
    lps = []
    errors = 0
    beam = BeamConfig(beam_width=beam_width)
    for item in items:
        alignment = dp_best_alignment(model, item.features, list(item.targets))
        encoded = model.encode_np(item.features)
        lps.append(model.score_alignment(encoded, alignment))
        decoded = beam_decode(model, item.features, beam)
        if decoded.tokens != item.targets:
            errors += 1
    return float(np.mean(lps)), errors / len(items)


def train(
    model: Transducer,
    train_items: list[SequenceExample],
    val_items: list[SequenceExample],
    config: TrainConfig,
    out_dir: str | Path | None = None,
    fixed_alignments: dict[int, Alignment] | None = None,
    resume: str | Path | None = None,
) -> TrainState:
    """Run the full training loop; the model ends at the best-validation params.

    Epochs shuffle the training order from a per-epoch seeded generator; the
    alignment cache is refreshed for the upcoming slice every
    ``align_refresh_period`` sequences (positions 0, P, 2P, ... within each
    epoch). Validation after each epoch drives the halving schedule: the rate
    halves whenever validation log-prob decreases, at most ``max_decays``
    times. Metrics and per-epoch checkpoints land in ``out_dir`` when given.
    """
    state = TrainState(lr=config.lr)
    cache = AlignmentCache()
    if fixed_alignments is not None:
        for seq_id, alignment in fixed_alignments.items():
            cache.put(seq_id, alignment, 0)
    start_epoch = 1
    if resume is not None:
        header, values, velocities = load_checkpoint(resume)
        model.store.set_values(values, velocities)
        kv = dict(
            line.split(" = ", 1) for line in header.strip().splitlines() if " = " in line
        )
        state.lr = float(kv.get("train_lr", config.lr))
        state.decays_applied = int(kv.get("train_decays", 0))
        state.best_validation_log_prob = float(kv.get("train_best_val", -np.inf))
        pv = kv.get("train_prev_val", "")
        state.prev_validation_log_prob = float(pv) if pv else None
        state.params_version = int(kv.get("train_params_version", 0))
        start_epoch = int(kv.get("train_epoch", 0)) + 1

    out_path = Path(out_dir) if out_dir is not None else None
    metrics_lines = [EpochMetrics.CSV_HEADER]
    best_values = {name: p.data.copy() for name, p in model.store.items()}
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        save_model(out_path / "best.ntck", model, _train_extras(state, 0))

    for epoch in range(start_epoch, config.epochs + 1):
        order_rng = np.random.default_rng([config.seed, epoch])
        order = order_rng.permutation(len(train_items))
        losses: list[float] = []
        pos = 0
        while pos < len(order):
            if fixed_alignments is None and pos % config.align_refresh_period == 0:
                upcoming = [
                    train_items[order[i]]
                    for i in range(pos, min(pos + config.align_refresh_period, len(order)))
                ]
                refresh_alignments(
                    model, upcoming, cache, state.params_version,
                    workers=config.workers, state=state,
                )
                state.params_version += 1
            batch = []
            while len(batch) < config.batch_size and pos < len(order):
                if fixed_alignments is None and batch and pos % config.align_refresh_period == 0:
                    break  # refresh boundary falls inside this batch
                item = train_items[order[pos]]
                pos += 1
                if item.seq_id in cache:
                    batch.append(item)
                else:
                    log.warning("sequence %d has no alignment; skipped", item.seq_id)
            if not batch:
                continue
            alignments = {item.seq_id: cache.get(item.seq_id) for item in batch}
            losses.append(_train_batch(model, batch, alignments, config, state.lr))

        val_lp, val_err = validate(model, val_items, config.val_beam_width)
        if (
            state.prev_validation_log_prob is not None
            and val_lp < state.prev_validation_log_prob
            and state.decays_applied < config.max_decays
        ):
            state.lr *= config.lr_decay
            state.decays_applied += 1
        state.prev_validation_log_prob = val_lp
        state.epochs_done = epoch
        state.metrics.append(
            EpochMetrics(
                epoch=epoch,
                mean_train_loss=float(np.mean(losses)) if losses else 0.0,
                val_log_prob=val_lp,
                val_seq_error=val_err,
                lr=state.lr,
                decays=state.decays_applied,
            )
        )
        metrics_lines.append(state.metrics[-1].csv_row())
        if val_lp > state.best_validation_log_prob:
            state.best_validation_log_prob = val_lp
            best_values = {name: p.data.copy() for name, p in model.store.items()}
            if out_path is not None:
                save_model(out_path / "best.ntck", model, _train_extras(state, epoch))
        if out_path is not None:
            save_model(out_path / f"epoch_{epoch:03d}.ntck", model, _train_extras(state, epoch))
            (out_path / "metrics.csv").write_text("\n".join(metrics_lines) + "\n")

    if out_path is not None:
        (out_path / "metrics.csv").write_text("\n".join(metrics_lines) + "\n")
    model.store.set_values(best_values)
    return state


def _train_extras(state: TrainState, epoch: int) -> dict[str, str]:
    return {
        "train_epoch": str(epoch),
        "train_lr": repr(state.lr),
        "train_decays": str(state.decays_applied),
        "train_best_val": repr(state.best_validation_log_prob),
        "train_prev_val": "" if state.prev_validation_log_prob is None
        else repr(state.prev_validation_log_prob),
        "train_params_version": str(state.params_version),
    }
