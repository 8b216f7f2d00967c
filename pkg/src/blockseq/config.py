"""Flat ``key = value`` run configuration shared by every CLI command.

One dialect everywhere: UTF-8 lines, ``#`` comments, unknown keys rejected.
Every field has a default, so an empty file (or no file) is a valid config.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .alignment import alignments_from_text
from .model import AttentionKind, BlockConfig, ModelConfig, Vocab
from .inference import BeamConfig
from .tasks import (
    ADDITION_INPUT_TOKENS,
    addition_sequences,
    addition_vocab,
    gen_addition,
    gen_recurrence_probe,
    probe_alignment,
    probe_input_tokens,
    probe_sequences,
    probe_vocab,
    sequences_from_token_file,
)
from .training import TrainConfig


class ConfigError(ValueError):
    """Unparseable, unknown, or inconsistent configuration."""


@dataclass
class RunConfig:
    # task selection and data sizes
    task: str = "addition"
    max_digits: int = 3
    probe_blocks: int = 8
    probe_span: int = 2
    probe_base: int = 10
    train_count: int = 50_000
    val_count: int = 200
    eval_count: int = 2_000
    train_file: str = ""
    val_file: str = ""
    alignments_file: str = ""
    # model
    attention: str = "none"
    attention_width: int = 32
    encoder_widths: tuple[int, ...] = (100,)
    transducer_widths: tuple[int, ...] = (100,)
    embed_width: int = 32
    block_size: int = 1
    max_per_block: int = 8
    precision: str = "f32"
    block_recurrence: bool = True
    # training
    lr: float = 0.05
    momentum: float = 0.9
    lr_decay: float = 0.5
    max_decays: int = 4
    epochs: int = 50
    align_refresh_period: int = 300
    batch_size: int = 1
    clip_norm: float = 10.0
    val_beam_width: int = 2
    # decoding
    beam_width: int = 4
    max_output_len: int = 0
    # verification suites
    gradcheck_instances: int = 3
    oracle_models: int = 10
    # run plumbing
    seed: int = 0
    workers: int = 1
    out_dir: str = "runs/default"
    resume: str = ""

    def lines(self) -> list[str]:
        out = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            out.append(f"{f.name} = {v}")
        return out


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw: str):
    field = _FIELDS[name]
    default = getattr(RunConfig(), name)
    try:
        if isinstance(default, bool):
            if raw not in ("true", "false"):
                raise ValueError("expected true/false")
            return raw == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name!r}: {raw!r} ({exc})") from exc


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, val = stripped.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _coerce(key, val.strip()))
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def task_vocab_and_inputs(run: RunConfig) -> tuple[Vocab, tuple[str, ...]]:
    if run.task == "addition":
        return addition_vocab(), ADDITION_INPUT_TOKENS
    if run.task == "probe":
        return probe_vocab(run.probe_base), probe_input_tokens(run.probe_base)
    raise ConfigError(f"unknown task {run.task!r} (expected addition or probe)")


def build_model_config(run: RunConfig) -> ModelConfig:
    vocab, input_tokens = task_vocab_and_inputs(run)
    if run.task == "probe" and run.max_per_block < 2:
        raise ConfigError("the probe task emits one token per block; max_per_block must be >= 2")
    try:
        attention = AttentionKind(run.attention)
    except ValueError as exc:
        raise ConfigError(f"unknown attention kind {run.attention!r}") from exc
    return ModelConfig(
        d_in=len(input_tokens),
        vocab=vocab,
        block=BlockConfig(run.block_size, run.max_per_block),
        encoder_widths=run.encoder_widths,
        transducer_widths=run.transducer_widths,
        embed_width=run.embed_width,
        attention=attention,
        attention_width=run.attention_width,
        block_recurrence=run.block_recurrence,
        precision=run.precision,
        input_tokens=input_tokens,
    )


def build_train_config(run: RunConfig) -> TrainConfig:
    return TrainConfig(
        lr=run.lr,
        momentum=run.momentum,
        lr_decay=run.lr_decay,
        max_decays=run.max_decays,
        epochs=run.epochs,
        align_refresh_period=run.align_refresh_period,
        batch_size=run.batch_size,
        seed=run.seed,
        clip_norm=run.clip_norm,
        workers=run.workers,
        val_beam_width=run.val_beam_width,
    )


def build_beam_config(run: RunConfig) -> BeamConfig:
    return BeamConfig(beam_width=run.beam_width, max_output_len=run.max_output_len)


def build_datasets(run: RunConfig):
    """(train items, val items, eval items, fixed alignments or None)."""
    vocab, inventory = task_vocab_and_inputs(run)
    fixed = None
    if run.train_file:
        train_items = sequences_from_token_file(run.train_file, inventory, vocab)
        val_items = (
            sequences_from_token_file(run.val_file, inventory, vocab)
            if run.val_file
            else train_items[: max(1, len(train_items) // 10)]
        )
        eval_items = val_items
    elif run.task == "addition":
        train_items = addition_sequences(
            gen_addition(run.seed * 10 + 1, run.train_count, run.max_digits)
        )
        val_items = addition_sequences(
            gen_addition(run.seed * 10 + 2, run.val_count, run.max_digits),
            start_id=run.train_count,
        )
        eval_items = addition_sequences(
            gen_addition(run.seed * 10 + 3, run.eval_count, run.max_digits),
            start_id=run.train_count + run.val_count,
        )
    else:
        train_ex = gen_recurrence_probe(
            run.seed * 10 + 1, run.train_count, run.probe_blocks, run.probe_span, run.probe_base
        )
        val_ex = gen_recurrence_probe(
            run.seed * 10 + 2, run.val_count, run.probe_blocks, run.probe_span, run.probe_base
        )
        eval_ex = gen_recurrence_probe(
            run.seed * 10 + 3, run.eval_count, run.probe_blocks, run.probe_span, run.probe_base
        )
        train_items = probe_sequences(train_ex, run.block_size)
        val_items = probe_sequences(val_ex, run.block_size, start_id=run.train_count)
        eval_items = probe_sequences(
            eval_ex, run.block_size, start_id=run.train_count + run.val_count
        )
        fixed = {
            item.seq_id: probe_alignment(ex, vocab)
            for ex, item in zip(train_ex, train_items)
        }
    if run.alignments_file:
        text = Path(run.alignments_file).read_text(encoding="utf-8")
        fixed = alignments_from_text(text, vocab)
    return train_items, val_items, eval_items, fixed
