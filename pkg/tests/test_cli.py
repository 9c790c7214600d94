import csv

import numpy as np
import pytest

from lafurca.audio import read_wav
from lafurca.cli import build_parser, main
from lafurca.config import ConfigError, RunConfig, load_config, parse_config_text

TINY = ["--n-filters", "8", "--hidden", "6", "--chunk-len", "10", "--window", "16", "--stride", "8"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    assert main(["datagen", "--out", str(root), "--train", "3", "--valid", "2", "--test", "2",
                 "--duration", "0.25", "--seed", "4"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--model", "LF(C,1,1)", "--data", str(corpus), "--out", str(out),
                 "--max-epochs", "2", *TINY]) == 0
    return out


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_datagen_counts(corpus):
    total = sum(len(_rows(corpus / f"manifest_{s}.csv")) - 1 for s in ("train", "valid", "test"))
    assert total == 7


def test_datagen_same_seed_identical(tmp_path):
    for name in ("a", "b"):
        main(["datagen", "--out", str(tmp_path / name), "--train", "2", "--valid", "1", "--test", "1",
              "--duration", "0.1", "--seed", "3"])
    a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert a
    for rel in a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_missing_out_is_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        main(["datagen", "--train", "3"])
    assert info.value.code == 2


def test_datagen_io_failure(tmp_path):
    blocker = tmp_path / "f"
    blocker.write_text("")
    assert main(["datagen", "--out", str(blocker / "x"), "--train", "1", "--valid", "1", "--test", "1",
                 "--duration", "0.1"]) == 1


@pytest.mark.parametrize("cmd", ["datagen", "train", "separate", "evaluate", "irm", "gradcheck"])
def test_help_lists_defaults(cmd, capsys):
    with pytest.raises(SystemExit) as info:
        main([cmd, "--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    assert "default" in text


def test_train_help_covers_every_training_default(capsys):
    with pytest.raises(SystemExit):
        main(["train", "--help"])
    text = capsys.readouterr().out
    for flag in ("--base-lr", "--decay", "--max-restarts", "--clip-norm", "--chunk-len", "--branches"):
        assert flag in text


def test_train_outputs(trained):
    for name in ("best.lfck", "last.lfck", "loss.csv", "config.txt"):
        assert (trained / name).exists()
    rows = _rows(trained / "loss.csv")
    assert rows[0] == ["epoch", "stage", "split", "loss_db", "lr"]
    assert len(rows) == 1 + 2 * 2 * 2
    echoed = (trained / "config.txt").read_text()
    assert echoed.startswith("model = LF(C,1,1);N=8")
    assert "max_epochs = 2" in echoed


def test_bad_model_reports_position(corpus, tmp_path, capsys):
    assert main(["train", "--model", "LF(Q,2)", "--data", str(corpus), "--out", str(tmp_path)]) == 2
    assert "position 3" in capsys.readouterr().err


def test_config_file_and_precedence(corpus, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# tiny run\nmax_epochs = 5\nbase_lr = 0.002  # faster\nn_filters = 8\nhidden = 6\n"
                   "chunk_len = 10\nwindow = 16\nstride = 8\n")
    out = tmp_path / "run"
    assert main(["train", "--model", "LF(1)", "--data", str(corpus), "--out", str(out),
                 "--config", str(cfg), "--max-epochs", "1"]) == 0
    echoed = (out / "config.txt").read_text()
    assert "max_epochs = 1" in echoed and "base_lr = 0.002" in echoed


def test_unknown_config_key_rejected(corpus, tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("max_epoch = 5\n")
    assert main(["train", "--model", "LF(1)", "--data", str(corpus), "--out", str(tmp_path),
                 "--config", str(cfg)]) == 2
    assert "max_epoch" in capsys.readouterr().err


def test_resume_matches_uninterrupted(corpus, tmp_path):
    full, part = tmp_path / "full", tmp_path / "part"
    common = ["--data", str(corpus), "--base-lr", "0.005", *TINY]
    assert main(["train", "--model", "LF(1)", "--out", str(full), "--max-epochs", "3", *common]) == 0
    assert main(["train", "--model", "LF(1)", "--out", str(part), "--max-epochs", "1", *common]) == 0
    assert main(["train", "--resume", "--out", str(part), "--max-epochs", "3", *common]) == 0
    a, b = _rows(full / "loss.csv"), _rows(part / "loss.csv")
    assert [r[:3] for r in a] == [r[:3] for r in b]
    np.testing.assert_allclose([float(r[3]) for r in a[1:]], [float(r[3]) for r in b[1:]], atol=1e-6)


def test_resume_without_checkpoint_fails(corpus, tmp_path):
    assert main(["train", "--resume", "--data", str(corpus), "--out", str(tmp_path / "none")]) == 1


def test_separate_writes_sources(corpus, trained, tmp_path):
    mix = corpus / "test" / "0000_mix.wav"
    assert main(["separate", "--ckpt", str(trained / "best.lfck"), "--in", str(mix),
                 "--out", str(tmp_path), "--emit-stages"]) == 0
    n = len(read_wav(mix))
    for j in (1, 2):
        assert len(read_wav(tmp_path / f"0000_mix_s{j}.wav")) == n
        assert (tmp_path / f"0000_mix_stage1_s{j}.wav").exists()
        assert (tmp_path / f"0000_mix_stage2_s{j}.wav").exists()


def test_separate_is_deterministic(corpus, trained, tmp_path):
    mix = corpus / "test" / "0001_mix.wav"
    for name in ("a", "b"):
        main(["separate", "--ckpt", str(trained / "best.lfck"), "--in", str(mix), "--out", str(tmp_path / name)])
    assert (tmp_path / "a" / "0001_mix_s1.wav").read_bytes() == (tmp_path / "b" / "0001_mix_s1.wav").read_bytes()


def test_separate_missing_input(trained, tmp_path):
    assert main(["separate", "--ckpt", str(trained / "best.lfck"), "--in", str(tmp_path / "nope.wav"),
                 "--out", str(tmp_path)]) == 1


def test_evaluate_identity_estimates_zero(corpus, tmp_path, capsys):
    est = tmp_path / "est"
    est.mkdir()
    for mix in (corpus / "test").glob("*_mix.wav"):
        for j in (1, 2):
            (est / f"{mix.stem}_s{j}.wav").write_bytes(mix.read_bytes())
    out = tmp_path / "report.csv"
    assert main(["evaluate", "--estimates", str(est), "--manifest", str(corpus / "manifest_test.csv"),
                 "--out", str(out)]) == 0
    assert "SI-SDRi=0.00 dB" in capsys.readouterr().out
    assert all(float(r[3]) == 0.0 for r in _rows(out)[1:])


def test_evaluate_missing_estimates_nonzero(corpus, tmp_path):
    est = tmp_path / "est"
    est.mkdir()
    out = tmp_path / "report.csv"
    assert main(["evaluate", "--estimates", str(est), "--manifest", str(corpus / "manifest_test.csv"),
                 "--out", str(out)]) == 1
    assert out.exists()


def test_evaluate_checkpoint(corpus, trained, tmp_path):
    out = tmp_path / "r.csv"
    assert main(["evaluate", "--ckpt", str(trained / "best.lfck"), "--manifest",
                 str(corpus / "manifest_test.csv"), "--out", str(out)]) == 0
    assert len(_rows(out)) == 3


def test_irm_command(corpus, tmp_path, capsys):
    out = tmp_path / "irm.csv"
    assert main(["irm", "--manifest", str(corpus / "manifest_test.csv"), "--out", str(out)]) == 0
    rows = _rows(out)[1:]
    assert len(rows) == 2 and all(float(r[3]) > 0 for r in rows)
    assert "SI-SDRi=" in capsys.readouterr().out


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--model", "LF(2)", "--seed", "7"]) == 0
    text = capsys.readouterr().out
    assert "max rel err" in text and "PASS" in text


def test_threads_env(monkeypatch, capsys):
    monkeypatch.setenv("LAFURCA_THREADS", "zero")
    assert main(["gradcheck", "--model", "LF(1)", "--samples", "5"]) == 2
    monkeypatch.setenv("LAFURCA_THREADS", "1")
    assert main(["gradcheck", "--model", "LF(1)", "--samples", "5"]) == 0


def test_parser_has_all_commands():
    sub = next(a for a in build_parser()._actions if a.dest == "command")
    assert set(sub.choices) == {"datagen", "train", "separate", "evaluate", "irm", "gradcheck"}


# -- config parsing -----------------------------------------------------------------------

def test_parse_config_text():
    values = parse_config_text("# c\n\nseed = 3\nbase_lr=0.01 # x\n")
    assert values == {"seed": 3, "base_lr": 0.01}


@pytest.mark.parametrize("text", ["nope = 1", "seed 3", "seed = x", "seed = 1\nseed = 2", "seed ="])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_load_config_merge(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("seed = 3\nhidden = 7\n")
    cfg = load_config(path, {"seed": 5})
    assert (cfg.seed, cfg.hidden, cfg.base_lr) == (5, 7, RunConfig().base_lr)
    assert "hidden = 7" in cfg.to_text()
    assert cfg.model_hyper()["hop"] is None
