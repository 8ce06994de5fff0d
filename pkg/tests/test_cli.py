import json

import pytest

from rsjoint.checkpoint import read_manifest
from rsjoint.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, SUBCOMMANDS, build_parser, flag_name, run, suggest_command
from rsjoint.config import EvalProtocol, TrainingConfig

TINY_TRAINING = [
    "--encoder-stage-widths", "8,16",
    "--encoder-blocks-per-stage", "1,1",
    "--encoder-stem-width", "8",
    "--encoder-input-size", "8",
    "--encoder-proj-hidden-dim", "16",
    "--encoder-proj-out-dim", "8",
    "--encoder-n-classes", "3",
    "--encoder-bn-groups", "2",
    "--augment-out-size", "8",
    "--queue-capacity", "16",
    "--batch-size", "4",
    "--epochs", "1",
    "--prefetch", "0",
]  # fmt: skip


@pytest.fixture(autouse=True)
def quiet_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("RSJOINT_LOG_FILE", str(tmp_path / "logs" / "rsjoint.log"))
    monkeypatch.setenv("RSJOINT_THREADS", "1")


@pytest.fixture
def corpus_dir(tmp_path, capsys):
    out = tmp_path / "corpus"
    code = run(
        ["gen-data", "--out", str(out), "--k-classes", "3", "--n-natural", "12", "--n-rs", "12",
         "--n-scenes", "6", "--image-size", "8", "--seed", "3"]
    )  # fmt: skip
    assert code == EXIT_OK
    assert json.loads(capsys.readouterr().out)["counts"] == {"natural": 12, "rs": 12, "scenes": 6}
    return out


@pytest.fixture
def checkpoint_path(tmp_path, corpus_dir, capsys):
    out = tmp_path / "ckpt.rsjoint"
    code = run(
        ["pretrain", "--natural", str(corpus_dir / "natural"), "--rs", str(corpus_dir / "rs"), "--out", str(out)]
        + TINY_TRAINING
    )
    assert code == EXIT_OK
    printed = json.loads(capsys.readouterr().out)
    assert printed["content_checksum"] == read_manifest(out).content_checksum
    return out


def test_unknown_command_suggests_closest(capsys):
    assert run(["pretrian"]) == EXIT_USAGE
    err = capsys.readouterr().err
    assert "did you mean 'pretrain'" in err
    assert "usage:" in err


def test_suggestion_cutoff():
    assert suggest_command("inspct") == "inspect"
    assert suggest_command("zzzzzzzz") is None


def test_missing_subcommand_is_usage_error(capsys):
    assert run([]) == EXIT_USAGE
    assert "subcommand" in capsys.readouterr().err


def test_help_exits_cleanly(capsys):
    assert run(["pretrain", "--help"]) == EXIT_OK
    assert "--encoder-bn-groups" in capsys.readouterr().out


def test_every_config_leaf_has_a_flag():
    parser = build_parser()
    help_text = parser._subparsers._group_actions[0].choices["pretrain"].format_help()
    for flag in ("--alpha", "--tau", "--ema-m", "--cosine-lr-min", "--augment-p-blur", "--optimizer-momentum"):
        assert flag in help_text
    assert flag_name(("encoder", "bn_groups")) == "--encoder-bn-groups"
    assert set(SUBCOMMANDS) == {"gen-data", "pretrain", "finetune", "probe", "stage-probe", "inspect"}


def test_pretrain_requires_data_flags(capsys):
    assert run(["pretrain", "--out", "x.rsjoint"]) == EXIT_USAGE
    assert "--natural" in capsys.readouterr().err


def test_invalid_values_are_usage_errors(tmp_path):
    dump = str(tmp_path / "c.json")
    assert run(["pretrain", "--alpha", "-1", "--dump-config", dump]) == EXIT_USAGE
    assert run(["pretrain", "--scheduler", "linear", "--dump-config", dump]) == EXIT_USAGE
    assert run(["pretrain", "--batch-size", "many", "--dump-config", dump]) == EXIT_USAGE
    assert run(["pretrain", "--encoder-input-size", "30", "--dump-config", dump]) == EXIT_USAGE
    assert run(["gen-data", "--out", str(tmp_path), "--k-classes", "1"]) == EXIT_USAGE


def test_dump_config_applies_flags_and_round_trips(tmp_path):
    first, second = tmp_path / "first.json", tmp_path / "second.json"
    assert run(["pretrain", "--alpha", "0.5", "--seed", "9", "--scheduler", "step", "--dump-config", str(first)]) == 0
    config = TrainingConfig.from_file(first)
    assert config.alpha == 0.5 and config.seed == 9 and config.scheduler == "step"
    assert run(["pretrain", "--config", str(first), "--dump-config", str(second)]) == EXIT_OK
    assert first.read_text() == second.read_text()


def test_flags_override_config_file(tmp_path):
    base = tmp_path / "base.json"
    TrainingConfig.desk(alpha=0.25, tau=0.2).write(base)
    out = tmp_path / "out.json"
    assert run(["pretrain", "--config", str(base), "--tau", "0.1", "--dump-config", str(out)]) == EXIT_OK
    config = TrainingConfig.from_file(out)
    assert config.alpha == 0.25 and config.tau == 0.1


def test_malformed_config_file_is_usage_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(["pretrain", "--config", str(bad), "--dump-config", str(tmp_path / "x.json")]) == EXIT_USAGE


def test_missing_dataset_is_runtime_error(tmp_path):
    code = run(["pretrain", "--natural", str(tmp_path / "none"), "--rs", str(tmp_path / "none"), "--out", "x"])
    assert code == EXIT_RUNTIME


def test_inspect_prints_verified_manifest(checkpoint_path, capsys):
    assert run(["inspect", str(checkpoint_path)]) == EXIT_OK
    printed = json.loads(capsys.readouterr().out)
    assert printed.pop("crc") == "ok"
    assert printed == read_manifest(checkpoint_path).manifest()


def test_inspect_rejects_corrupt_file(tmp_path):
    junk = tmp_path / "junk.rsjoint"
    junk.write_bytes(b"not a checkpoint at all")
    assert run(["inspect", str(junk)]) == EXIT_RUNTIME
    assert run(["inspect", str(tmp_path / "missing.rsjoint")]) == EXIT_RUNTIME


def test_probe_writes_report(tmp_path, corpus_dir, checkpoint_path, capsys):
    report = tmp_path / "report.json"
    code = run(
        ["probe", "--checkpoint", str(checkpoint_path), "--data", str(corpus_dir / "scenes"), "--report", str(report),
         "--trials", "2", "--epochs", "1", "--resize", "8", "--batch-size", "4", "--train-fraction", "0.5"]
    )  # fmt: skip
    assert code == EXIT_OK
    data = json.loads(report.read_text())
    assert data["mode"] == "probe"
    assert len(data["accuracies"]) == 2
    assert data["checkpoint"] == str(checkpoint_path)
    assert EvalProtocol.from_dict(data["protocol"]).trials == 2
    assert json.loads(capsys.readouterr().out) == data


def test_evaluation_requires_checkpoint_or_scratch(corpus_dir, capsys):
    assert run(["finetune", "--data", str(corpus_dir / "scenes")]) == EXIT_USAGE
    assert "--from-scratch" in capsys.readouterr().err


def test_from_scratch_stage_probe(corpus_dir):
    code = run(
        ["stage-probe", "--from-scratch", "--data", str(corpus_dir / "scenes"), "--trials", "1", "--epochs", "1",
         "--resize", "32", "--batch-size", "4", "--train-fraction", "0.5", "--pool-grid", "1"]
    )  # fmt: skip
    assert code == EXIT_OK
