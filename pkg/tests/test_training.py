"""Training loop tests: loss identity, schedule, refresh policy, determinism."""

import numpy as np
import pytest

from blockseq import tensor as T
from blockseq.alignment import Alignment, AlignmentCache, dp_best_alignment
from blockseq.checkpoint import load_checkpoint, save_model
from blockseq.model import AttentionKind
from blockseq.training import (
    NonFiniteLossError,
    SequenceExample,
    TrainConfig,
    loss,
    refresh_alignments,
    train,
    train_step,
)

from helpers import make_model, random_alignment, random_frames, zero_params


def tiny_dataset(model, rng, count, num_frames=4):
    items = []
    for i in range(count):
        x = random_frames(rng, num_frames, model.config.d_in, dtype=np.float64)
        _, targets = random_alignment(rng, model, num_frames)
        items.append(SequenceExample(i, x, tuple(targets)))
    return items


class TestLoss:
    def test_loss_is_negated_sequence_log_prob(self):
        model = make_model(seed=1, block_width=2)
        rng = np.random.default_rng(0)
        x = random_frames(rng, 4, 3)
        alignment, _ = random_alignment(rng, model, 4)
        lp = float(model.sequence_log_prob(x, alignment).data)
        assert float(loss(model, x, alignment).data) == -lp

    def test_zero_weight_loss_is_length_times_log_vocab(self):
        model = make_model(n_regular=3, block_width=2)
        zero_params(model)
        rng = np.random.default_rng(1)
        x = random_frames(rng, 4, 3)
        alignment, _ = random_alignment(rng, model, 4)
        got = float(loss(model, x, alignment).data)
        assert np.isclose(got, len(alignment.tokens) * np.log(4), rtol=1e-9)

    def test_rigged_model_reaches_zero_loss(self):
        # a huge end-of-block bias makes the all-marker alignment near-certain
        model = make_model(n_regular=3, block_width=2)
        zero_params(model)
        eob = model.config.vocab.eob_index
        model.out_b.data[eob] = 50.0
        x = random_frames(np.random.default_rng(2), 4, 3)
        alignment = Alignment.from_segments([[eob], [eob]])
        assert float(loss(model, x, alignment).data) < 1e-5


class TestTrainStep:
    def test_zero_lr_is_impossible_but_tiny_lr_keeps_loss_static(self):
        model = make_model(seed=2, block_width=2)
        rng = np.random.default_rng(3)
        x = random_frames(rng, 4, 3)
        alignment, _ = random_alignment(rng, model, 4)
        config = TrainConfig(lr=1e-300, momentum=0.0, epochs=1)
        first = train_step(model, x, alignment, config)
        second = train_step(model, x, alignment, config)
        assert first == second

    def test_loss_decreases_over_fifty_steps(self):
        model = make_model(seed=3, block_width=2, attention=AttentionKind.DOT)
        rng = np.random.default_rng(4)
        x = random_frames(rng, 4, 3)
        alignment, _ = random_alignment(rng, model, 4)
        config = TrainConfig(lr=0.01, momentum=0.9, epochs=1)
        losses = [train_step(model, x, alignment, config) for _ in range(50)]
        assert losses[-1] < losses[0]

    def test_non_finite_loss_aborts(self):
        model = make_model(seed=4, block_width=2)
        model.out_w.data[...] = np.inf
        rng = np.random.default_rng(5)
        x = random_frames(rng, 2, 3)
        alignment, _ = random_alignment(rng, model, 2)
        with np.errstate(invalid="ignore"), pytest.raises(NonFiniteLossError):
            train_step(model, x, alignment, TrainConfig(epochs=1))


class TestRefresh:
    def test_cache_filled_with_valid_alignments(self):
        model = make_model(seed=5, block_width=2)
        rng = np.random.default_rng(6)
        items = tiny_dataset(model, rng, 5)
        cache = AlignmentCache()
        refresh_alignments(model, items, cache, params_version=1)
        for item in items:
            a = cache.get(item.seq_id)
            a.validate(model.config.vocab.eob_index, model.config.block.max_per_block)
            assert list(a.strip(model.config.vocab.eob_index)) == list(item.targets)
            assert cache.version(item.seq_id) == 1

    def test_infeasible_sequences_skipped(self):
        model = make_model(seed=6, block_width=2, max_per_block=2)
        x = random_frames(np.random.default_rng(7), 2, 3)
        items = [SequenceExample(0, x, (0, 1, 2))]  # 1 block, max 1 token
        cache = AlignmentCache()
        refresh_alignments(model, items, cache, params_version=0)
        assert 0 not in cache

    def test_worker_threads_give_identical_results(self):
        model = make_model(seed=7, block_width=2)
        rng = np.random.default_rng(8)
        items = tiny_dataset(model, rng, 6)
        seq_cache = AlignmentCache()
        par_cache = AlignmentCache()
        refresh_alignments(model, items, seq_cache, 0, workers=1)
        refresh_alignments(model, items, par_cache, 0, workers=3)
        for item in items:
            assert seq_cache.get(item.seq_id) == par_cache.get(item.seq_id)


class TestTrainLoop:
    def test_zero_epochs_returns_initial_params(self, tmp_path):
        model = make_model(seed=8, block_width=2)
        before = {n: p.data.copy() for n, p in model.store.items()}
        rng = np.random.default_rng(9)
        items = tiny_dataset(model, rng, 3)
        state = train(model, items, items, TrainConfig(epochs=0, seed=1), out_dir=tmp_path)
        for name, p in model.store.items():
            assert np.array_equal(p.data, before[name])
        assert (tmp_path / "best.ntck").exists()
        assert state.metrics == []

    def test_decay_schedule_on_validation_decrease(self):
        # validation sequence [-5, -4, -4.5] must apply exactly one decay
        from blockseq import training as tr

        cfg = TrainConfig(lr=0.05, epochs=3, seed=0)
        vals = iter([-5.0, -4.0, -4.5])

        model = make_model(seed=9, block_width=2)
        rng = np.random.default_rng(10)
        items = tiny_dataset(model, rng, 2)

        real_validate = tr.validate
        try:
            tr.validate = lambda *a, **k: (next(vals), 0.0)
            state = train(model, items, items, cfg)
        finally:
            tr.validate = real_validate
        assert state.decays_applied == 1
        assert np.isclose(state.lr, 0.025)
        assert [m.decays for m in state.metrics] == [0, 0, 1]

    def test_lr_after_k_decays(self):
        from blockseq import training as tr

        cfg = TrainConfig(lr=0.05, epochs=6, max_decays=4, seed=0)
        vals = iter([-1.0, -2.0, -3.0, -4.0, -5.0, -6.0])  # always decreasing
        model = make_model(seed=10, block_width=2)
        rng = np.random.default_rng(11)
        items = tiny_dataset(model, rng, 2)
        real_validate = tr.validate
        try:
            tr.validate = lambda *a, **k: (next(vals), 0.0)
            state = train(model, items, items, cfg)
        finally:
            tr.validate = real_validate
        # decays capped at max_decays even though validation kept decreasing
        assert state.decays_applied == 4
        assert np.isclose(state.lr, 0.05 * 0.5 ** 4)

    def test_refresh_positions_within_epoch(self):
        from blockseq import training as tr

        calls = []
        real_refresh = tr.refresh_alignments

        def spy(model, items, cache, version, workers=1, state=None):
            calls.append(len(items))
            return real_refresh(model, items, cache, version, workers=workers, state=state)

        model = make_model(seed=11, block_width=2)
        rng = np.random.default_rng(12)
        items = tiny_dataset(model, rng, 7)
        cfg = TrainConfig(lr=0.01, epochs=1, align_refresh_period=3, seed=0, val_beam_width=1)
        try:
            tr.refresh_alignments = spy
            train(model, items, items[:2], cfg)
        finally:
            tr.refresh_alignments = real_refresh
        # slices of 3, 3, then the 1 remaining sequence
        assert calls == [3, 3, 1]

    def test_bit_reproducible_with_fixed_seed(self, tmp_path):
        def run(out):
            model = make_model(seed=12, block_width=2, precision="f32")
            rng = np.random.default_rng(13)
            items = tiny_dataset(model, rng, 4)
            cfg = TrainConfig(lr=0.02, epochs=2, seed=3, align_refresh_period=2,
                              val_beam_width=1)
            train(model, items, items[:2], cfg, out_dir=out)
            return (out / "metrics.csv").read_bytes(), (out / "best.ntck").read_bytes()

        a = run(tmp_path / "a")
        b = run(tmp_path / "b")
        assert a == b

    def test_fixed_alignment_path_trains_without_refresh(self):
        from blockseq import training as tr

        model = make_model(seed=13, block_width=2)
        rng = np.random.default_rng(14)
        items = tiny_dataset(model, rng, 4)
        fixed = {
            item.seq_id: dp_best_alignment(model, item.features, list(item.targets))
            for item in items
        }
        calls = []
        real_refresh = tr.refresh_alignments
        try:
            tr.refresh_alignments = lambda *a, **k: calls.append(1)
            state = train(model, items, items[:2],
                          TrainConfig(lr=0.01, epochs=1, seed=0, val_beam_width=1),
                          fixed_alignments=fixed)
        finally:
            tr.refresh_alignments = real_refresh
        assert calls == []
        assert state.epochs_done == 1

    def test_resume_continues_from_checkpoint(self, tmp_path):
        model = make_model(seed=14, block_width=2)
        rng = np.random.default_rng(15)
        items = tiny_dataset(model, rng, 3)
        cfg = TrainConfig(lr=0.02, epochs=2, seed=5, val_beam_width=1)
        train(model, items, items[:2], cfg, out_dir=tmp_path / "full")

        model2 = make_model(seed=14, block_width=2)
        cfg1 = TrainConfig(lr=0.02, epochs=1, seed=5, val_beam_width=1)
        train(model2, items, items[:2], cfg1, out_dir=tmp_path / "part")
        model3 = make_model(seed=14, block_width=2)
        state = train(model3, items, items[:2], cfg, out_dir=tmp_path / "resumed",
                      resume=tmp_path / "part" / "epoch_001.ntck")
        assert state.epochs_done == 2
