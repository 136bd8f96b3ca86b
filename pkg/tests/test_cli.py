import json
import subprocess
import sys

import pytest

from gradtrace import serialization as ser
from gradtrace.cli import main

SMALL = [
    "--embed-dim", "16", "--layers", "1", "--rank", "2", "--alpha", "4", "--per-family", "4",
    "--epochs", "1", "--batch-size", "4", "--warmup", "1", "--stride", "4", "--n-eval", "3",
    "--lr-peak", "1e-3", "--lr-final", "1e-5",
]


def _config_line(out: str) -> dict:
    return json.loads(out.splitlines()[0])


def test_usage_error_exits_1_with_help(capsys):
    assert main(["train", "--out", "x", "--bogus"]) == 1
    err = capsys.readouterr().err
    assert "unrecognized arguments: --bogus" in err
    assert err.startswith("usage: gradtrace")


def test_missing_subcommand_is_a_usage_error(capsys):
    assert main([]) == 1


def test_runtime_error_exits_2(tmp_path, capsys):
    assert main(["trace", "--run", str(tmp_path / "none"), "--probes", "p", "--evals", "e", "--out", "o"]) == 2
    assert "error" in capsys.readouterr().err


def test_gen_data_is_deterministic(tmp_path, capsys):
    for name in ("a.jsonl", "b.jsonl"):
        assert main(["gen-data", "--out", str(tmp_path / name), "--per-family", "3", "--seed", "5"]) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert len((tmp_path / "a.jsonl").read_text().splitlines()) == 24
    cfg = _config_line(capsys.readouterr().out)
    assert cfg["command"] == "gen-data" and cfg["seed"] == 5


def test_train_zero_epochs_writes_one_checkpoint(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path / "run"), *SMALL, "--epochs", "0"]) == 0
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert [c["step"] for c in manifest["checkpoints"]] == [0]
    cfg = _config_line(capsys.readouterr().out)
    assert cfg["train"]["epochs"] == 0 and cfg["run_id"] == manifest["run_id"]


def test_train_then_trace(tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--out", str(run), *SMALL]) == 0
    out = capsys.readouterr().out
    assert "step=0 loss=" in out
    assert main(["gen-data", "--out", str(tmp_path / "e.jsonl"), "--per-family", "1", "--seed", "9",
                 "--families", "copy,reverse"]) == 0
    assert main(["gen-data", "--out", str(tmp_path / "p.jsonl"), "--per-family", "1", "--seed", "10",
                 "--families", "copy,reverse"]) == 0
    assert main(["trace", "--run", str(run), "--probes", str(tmp_path / "p.jsonl"), "--evals",
                 str(tmp_path / "e.jsonl"), "--out", str(tmp_path / "t.csv"), "--label", "P", "--target", "E"]) == 0
    rows = ser.load_trace_csv(tmp_path / "t.csv")
    assert {m for _, m, _ in rows} == {"P→In-task E", "P→Cross-task E"}
    assert sorted({s for s, _, _ in rows}) == [0, 4, 8]


def test_study_twice_is_byte_identical_and_reports(tmp_path):
    for d in ("s1", "s2"):
        assert main(["study", "--kind", "cot", "--out", str(tmp_path / d), *SMALL]) == 0
    for name in ("trace-cot.csv", "matrix-cot.csv"):
        assert (tmp_path / "s1" / name).read_bytes() == (tmp_path / "s2" / name).read_bytes()
    assert main(["report", str(tmp_path / "s1" / "trace-cot.csv")]) == 0
    svg = (tmp_path / "s1" / "trace-cot.svg").read_text()
    assert svg.count('<polyline class="series"') == 4


def test_study_on_an_existing_run(tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--out", str(run), *SMALL]) == 0
    assert main(["study", "--kind", "clarify", "--out", str(tmp_path / "s"), "--run", str(run), "--no-matrix", *SMALL]) == 0
    rows = ser.load_trace_csv(tmp_path / "s" / "trace-clarify.csv")
    assert len({m for _, m, _ in rows}) == 8
    assert not (tmp_path / "s" / "matrix-clarify.csv").exists()


def test_oracle_report(tmp_path):
    out = tmp_path / "o.json"
    assert main(["oracle", "--out", str(out), *SMALL, "--triples", "4", "--trials", "1", "--kinds", "cot",
                 "--fine-tune-steps", "2"]) == 0
    report = json.loads(out.read_text())
    assert set(report["taylor"]) == {"0.0001", "1e-05"}
    assert report["retrain"]["cot"]["self_training_largest"] in (0, 1)


@pytest.mark.slow
def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "gradtrace", "gen-data", "--out", str(tmp_path / "d.jsonl"),
                           "--per-family", "1"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["command"] == "gen-data"
