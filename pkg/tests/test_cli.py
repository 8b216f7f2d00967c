"""CLI tests: exit codes, line protocols, config resolution, determinism."""

import struct
import subprocess
import sys

import numpy as np
import pytest

from blockseq.checkpoint import FORMAT_VERSION, load_model, save_model
from blockseq.cli import main
from blockseq.config import ConfigError, RunConfig, parse_config
from blockseq.tasks import gen_addition, write_examples

from helpers import make_model


TINY_TRAIN = """
task = addition
max_digits = 1
train_count = 30
val_count = 6
eval_count = 10
encoder_widths = 8
transducer_widths = 8
embed_width = 4
epochs = 1
lr = 0.01
align_refresh_period = 10
val_beam_width = 1
beam_width = 2
seed = 3
"""


def run_cli(argv, **kwargs):
    return main(argv)


class TestConfig:
    def test_defaults_parse_from_empty(self):
        cfg = parse_config("")
        assert cfg == RunConfig()

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            parse_config("no_such_key = 5")

    def test_comments_and_blanks_ignored(self):
        cfg = parse_config("# a comment\n\nlr = 0.125  # trailing\n")
        assert cfg.lr == 0.125

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError):
            parse_config("epochs = banana")

    def test_width_lists(self):
        cfg = parse_config("encoder_widths = 10,20\ntransducer_widths = 5")
        assert cfg.encoder_widths == (10, 20)
        assert cfg.transducer_widths == (5,)


class TestExitCodes:
    def test_missing_config_file_exits_2(self, capsys):
        assert main(["train", "--config", "/nonexistent/cfg"]) == 2

    def test_unknown_key_exits_2(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("bogus = 1\n")
        assert main(["train", "--config", str(cfg)]) == 2

    def test_version_mismatch_exits_4(self, tmp_path):
        model = make_model()
        ckpt = tmp_path / "m.ntck"
        save_model(ckpt, model)
        blob = bytearray(ckpt.read_bytes())
        struct.pack_into("<I", blob, 4, FORMAT_VERSION + 7)
        ckpt.write_bytes(bytes(blob))
        data = tmp_path / "d.tsv"
        data.write_text("0 1 2\t\n")
        assert main(["decode", "--checkpoint", str(ckpt), "--input", str(data)]) == 4


class TestTrainCommand:
    def test_zero_epochs_writes_initial_checkpoint(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(TINY_TRAIN.replace("epochs = 1", "epochs = 0"))
        out = tmp_path / "run"
        code = main(["train", "--config", str(cfg), "--out-dir", str(out)])
        assert code == 0
        assert (out / "best.ntck").exists()
        assert (out / "metrics.csv").read_text().startswith("epoch,")

    def test_resolved_config_printed_to_stderr(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(TINY_TRAIN.replace("epochs = 1", "epochs = 0"))
        main(["train", "--config", str(cfg), "--out-dir", str(tmp_path / "r")])
        err = capsys.readouterr().err
        assert "# resolved config" in err
        assert "max_digits = 1" in err
        assert "momentum = 0.9" in err  # default expanded

    def test_metrics_deterministic_across_runs(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(TINY_TRAIN)
        main(["train", "--config", str(cfg), "--out-dir", str(tmp_path / "a")])
        main(["train", "--config", str(cfg), "--out-dir", str(tmp_path / "b")])
        a = (tmp_path / "a" / "metrics.csv").read_bytes()
        b = (tmp_path / "b" / "metrics.csv").read_bytes()
        assert a == b
        assert (tmp_path / "a" / "best.ntck").read_bytes() == (
            tmp_path / "b" / "best.ntck"
        ).read_bytes()

    def test_seed_flag_overrides_config(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(TINY_TRAIN)
        main(["train", "--config", str(cfg), "--seed", "9",
              "--out-dir", str(tmp_path / "a")])
        main(["train", "--config", str(cfg), "--out-dir", str(tmp_path / "b")])
        assert (tmp_path / "a" / "metrics.csv").read_bytes() != (
            tmp_path / "b" / "metrics.csv"
        ).read_bytes()


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli_run")
    cfg = base / "run.cfg"
    cfg.write_text(TINY_TRAIN)
    code = main(["train", "--config", str(cfg), "--out-dir", str(base / "out")])
    assert code == 0
    return base


class TestDecodeAlignStream:
    def test_decode_prints_one_line_per_example(self, trained_run, tmp_path, capsys):
        examples = gen_addition(seed=5, count=4, max_digits=1)
        data = tmp_path / "d.tsv"
        write_examples(data, [(e.input_tokens, e.target_tokens) for e in examples])
        capsys.readouterr()
        code = main(["decode", "--checkpoint", str(trained_run / "out" / "best.ntck"),
                     "--input", str(data)])
        out = capsys.readouterr().out
        assert code == 0
        assert len(out.splitlines()) == 4

    def test_align_empty_targets_gives_all_end_markers(self, trained_run, tmp_path, capsys):
        data = tmp_path / "d.tsv"
        data.write_text("1 + 2 <s>\t\n")
        capsys.readouterr()
        code = main(["align", "--checkpoint", str(trained_run / "out" / "best.ntck"),
                     "--dataset", str(data)])
        out = capsys.readouterr().out.strip()
        assert code == 0
        assert out == "0\t<e> <e> <e> <e>"

    def test_align_roundtrips_targets(self, trained_run, tmp_path, capsys):
        examples = gen_addition(seed=6, count=3, max_digits=1)
        data = tmp_path / "d.tsv"
        write_examples(data, [(e.input_tokens, e.target_tokens) for e in examples])
        capsys.readouterr()
        main(["align", "--checkpoint", str(trained_run / "out" / "best.ntck"),
              "--dataset", str(data)])
        lines = capsys.readouterr().out.strip().splitlines()
        for line, ex in zip(lines, examples):
            _, _, rest = line.partition("\t")
            recovered = [t for t in rest.split() if t != "<e>"]
            assert tuple(recovered) == ex.target_tokens

    def test_stream_protocol_via_subprocess(self, trained_run):
        # single-block input: the streamed line must match offline decoding
        ckpt = trained_run / "out" / "best.ntck"
        model, _ = load_model(ckpt)
        from blockseq.tasks import ADDITION_INPUT_TOKENS, one_hot_frames
        from blockseq.inference import BeamConfig, beam_decode

        tokens = ("3", "+", "4", "<s>")
        x = one_hot_frames(tokens, ADDITION_INPUT_TOKENS)
        feed = "\n".join(" ".join(str(v) for v in row) for row in x.frames) + "\n\n"
        proc = subprocess.run(
            [sys.executable, "-m", "blockseq.cli", "stream",
             "--checkpoint", str(ckpt), "--beam-width", "2"],
            input=feed, capture_output=True, text=True, timeout=120,
        )
        assert proc.returncode == 0
        lines = proc.stdout.splitlines()
        assert len(lines) == 4  # one commitment line per single-frame block
        offline = beam_decode(model, x, BeamConfig(beam_width=2))
        vocab = model.config.vocab
        streamed = [t for line in lines for t in line.split()]
        assert streamed == [vocab.tokens[t] for t in offline.tokens]


class TestSuitesViaCli:
    def test_gradcheck_exits_zero(self, tmp_path, capsys):
        cfg = tmp_path / "g.cfg"
        cfg.write_text("gradcheck_instances = 1\nseed = 2\n")
        code = main(["gradcheck", "--config", str(cfg)])
        out = capsys.readouterr().out
        assert code == 0
        assert out.count("PASS") == 4

    def test_oracle_exits_zero(self, tmp_path, capsys):
        cfg = tmp_path / "o.cfg"
        cfg.write_text("oracle_models = 3\nseed = 2\n")
        code = main(["oracle", "--config", str(cfg)])
        out = capsys.readouterr().out
        assert code == 0
        assert "FAIL" not in out
