import logging

import pytest

from config import configure_logging, settings
from main import main

TINY = ["--override", "model.width=4", "model.depth=2", "train.iterations=3", "train.labeled_batch=2",
        "train.unlabeled_batch=2", "train.eval_every=0", "train.log_every=1", "eval.batch_size=4"]


def _fields(line: str) -> dict:
    return dict(item.split("=", 1) for item in line.split())


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli-data")
    assert main(["gen-data", "--seed", "1", "--n", "8", "--labeled-frac", "0.25", "--size", "32x32", "--val", "1",
                 "--test", "2", "--out", str(out)]) == 0
    return out


def test_gen_data_reports_the_split(tmp_path, capsys):
    code = main(["gen-data", "--n", "500", "--labeled-frac", "0.08", "--size", "32x32", "--val", "1", "--test", "1",
                 "--out", str(tmp_path)])
    assert code == 0
    fields = _fields(capsys.readouterr().out.strip())
    assert fields["labeled"] == "40" and fields["unlabeled"] == "460"
    assert (tmp_path / "manifest.txt").exists()


@pytest.mark.parametrize("args", [
    ["--labeled-frac", "0"],
    ["--size", "60x64"],
    ["--size", "64by64"],
])
def test_gen_data_rejects_bad_arguments(tmp_path, args):
    assert main(["gen-data", "--n", "4", "--out", str(tmp_path)] + args) == 2


def test_unknown_override_is_a_usage_error(small_data, tmp_path):
    code = main(["train", "--data", str(small_data), "--out", str(tmp_path), "--override", "train.sead=1"])
    assert code == 2


def test_unknown_command_exits_with_usage():
    assert main(["fit"]) == 2


def test_missing_manifest_is_an_io_error(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "run")]) == 3


def test_eval_reproduces_the_training_report(small_data, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--data", str(small_data), "--out", str(run), "--no-progress"] + TINY) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert _fields(lines[0])["params"].isdigit()
    assert _fields(lines[1])["iterations"] == "3"
    assert _fields(lines[2])["split"] == "test"

    assert main(["eval", "--checkpoint", str(run / "last.ckpt"), "--data", str(small_data)]) == 0
    assert capsys.readouterr().out == (run / "metrics-test.csv").read_text()


def test_corrupt_checkpoint_is_a_format_error(small_data, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--data", str(small_data), "--out", str(run), "--no-progress", "--max-steps", "1"]
                + TINY) == 0
    path = run / "last.ckpt"
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(raw))
    assert main(["eval", "--checkpoint", str(path), "--data", str(small_data)]) == 3


def test_verify_single_suite(capsys):
    assert main(["verify", "--suite", "ema"]) == 0
    fields = _fields(capsys.readouterr().out.strip())
    assert fields["failed"] == "0" and int(fields["passed"]) >= 2


def test_configure_logging_falls_back_to_the_settings_level():
    root = logging.getLogger()
    saved_level, saved_handlers = root.level, list(root.handlers)
    try:
        configure_logging("DEBUG")
        assert root.level == logging.DEBUG
        configure_logging(None)
        assert root.level == logging.getLevelName(settings.HDC_LOG_LEVEL)
        assert len(root.handlers) == 1
    finally:
        root.handlers[:] = saved_handlers
        root.setLevel(saved_level)
