import csv
import io
import json
import struct

import pytest
from hypothesis import given, settings, strategies as st

from gradtrace import serialization as ser
from gradtrace.errors import CorruptionError, VersionError
from gradtrace.model import Example, init_state

from conftest import TINY


def test_fnv1a64_reference_values():
    assert ser.fnv1a64(b"") == 0xCBF29CE484222325
    assert ser.fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert ser.fnv1a64(b"foobar") == 0x85944171F73967E8


def test_checkpoint_roundtrip_is_bit_exact(tiny_series, tmp_path):
    state = tiny_series.final
    path = tmp_path / "c.gtck"
    h = ser.save_checkpoint(path, state)
    back = ser.load_checkpoint(path)
    assert back.step == state.step and back.run_id == state.run_id and back.config == state.config
    assert back.content_hash() == state.content_hash()
    assert ser.stored_hash(path) == h
    assert ser.checkpoint_bytes(back) == path.read_bytes()


def test_checkpoint_header(tmp_path):
    data = ser.checkpoint_bytes(init_state(TINY, "r"))
    assert data[:4] == b"GTCK"
    assert struct.unpack("<I", data[4:8]) == (1,)


def test_truncated_checkpoint(tmp_path):
    data = ser.checkpoint_bytes(init_state(TINY, "r"))
    with pytest.raises(CorruptionError):
        ser.checkpoint_from_bytes(data[: len(data) // 2])
    with pytest.raises(CorruptionError):
        ser.checkpoint_from_bytes(data[:6])


def test_flipped_byte_is_detected():
    data = bytearray(ser.checkpoint_bytes(init_state(TINY, "r")))
    data[len(data) // 2] ^= 0x01
    with pytest.raises(CorruptionError, match="hash"):
        ser.checkpoint_from_bytes(bytes(data))


def test_bad_magic_and_version():
    data = ser.checkpoint_bytes(init_state(TINY, "r"))
    with pytest.raises(CorruptionError, match="magic"):
        ser.checkpoint_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(VersionError):
        ser.checkpoint_from_bytes(data[:4] + struct.pack("<I", 2) + data[8:])


def test_run_roundtrip(tiny_series, tmp_path):
    manifest = ser.save_run(tmp_path / "run", tiny_series, {"note": "x"})
    assert [c["step"] for c in manifest.checkpoints] == tiny_series.steps
    loaded, series = ser.load_run(tmp_path / "run")
    assert loaded.run_id == tiny_series.run_id
    assert series.steps == tiny_series.steps
    assert series.losses == tiny_series.losses
    assert series.schedule == tiny_series.schedule
    for a, b in zip(series.checkpoints, tiny_series.checkpoints):
        assert a.content_hash() == b.content_hash()


def test_run_with_tampered_checkpoint(tiny_series, tmp_path):
    ser.save_run(tmp_path, tiny_series, {})
    target = tmp_path / "step-000004.gtck"
    other = tmp_path / "step-000008.gtck"
    target.write_bytes(other.read_bytes())
    with pytest.raises(CorruptionError, match="manifest hash"):
        ser.load_run(tmp_path)


def test_missing_checkpoint_file(tiny_series, tmp_path):
    ser.save_run(tmp_path, tiny_series, {})
    (tmp_path / "step-000004.gtck").unlink()
    with pytest.raises(CorruptionError, match="missing"):
        ser.load_manifest(tmp_path)


def test_atomic_write_leaves_no_temp_files(tmp_path):
    ser.atomic_write_text(tmp_path / "a.txt", "hello")
    ser.atomic_write_text(tmp_path / "a.txt", "bye")
    assert [p.name for p in tmp_path.iterdir()] == ["a.txt"]
    assert (tmp_path / "a.txt").read_text() == "bye"


def test_failed_write_keeps_the_old_file(tmp_path, monkeypatch):
    path = tmp_path / "a.txt"
    ser.atomic_write_text(path, "old")

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(ser.os, "replace", boom)
    with pytest.raises(OSError):
        ser.atomic_write_text(path, "new")
    assert path.read_text() == "old"
    assert [p.name for p in tmp_path.iterdir()] == ["a.txt"]


def test_dataset_roundtrip(tiny_data, tmp_path):
    path = tmp_path / "d.jsonl"
    ser.save_dataset(path, tiny_data)
    assert ser.load_dataset(path) == tiny_data
    first = json.loads(path.read_text().splitlines()[0])
    assert set(first) == {"id", "task", "query", "response"}


def test_malformed_dataset_line(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text('{"id": "a", "task": "copy", "query": "q"}\n')
    with pytest.raises(CorruptionError, match=":1:"):
        ser.load_dataset(path)


labels = st.text(st.characters(blacklist_categories=("Cs",), blacklist_characters="\x00\r\n"), min_size=1, max_size=20)


@settings(max_examples=50)
@given(st.lists(st.tuples(st.integers(0, 10_000), labels,
                          st.floats(allow_nan=False, allow_infinity=False)), max_size=10))
def test_trace_csv_roundtrip(rows):
    text = ser.dumps_trace_rows(rows)
    assert text.splitlines()[0] == "step,metric,value"
    parsed = [(int(s), m, float(v)) for s, m, v in list(csv.reader(io.StringIO(text, newline="")))[1:]]
    assert parsed == [(s, m, v) for s, m, v in rows]


@pytest.mark.parametrize("label", ["a\rb", "a\nb"])
def test_trace_csv_rejects_line_breaks(label):
    with pytest.raises(ValueError, match="line breaks"):
        ser.dumps_trace_rows([(0, label, 1.0)])


def test_trace_csv_file(tmp_path):
    rows = [(0, "CoT→In-task non-CoT", 0.1), (50, "CoT→In-task non-CoT", -2.5e-7)]
    ser.save_trace_csv(tmp_path / "t.csv", rows)
    assert ser.load_trace_csv(tmp_path / "t.csv") == rows
    (tmp_path / "bad.csv").write_text("a,b,c\n")
    with pytest.raises(CorruptionError):
        ser.load_trace_csv(tmp_path / "bad.csv")


def test_example_text_roundtrip_through_jsonl(tmp_path):
    z = Example.from_text("x/1", "copy", "Copy: é\n\"q\".", "[é]")
    ser.save_dataset(tmp_path / "d.jsonl", [z])
    assert ser.load_dataset(tmp_path / "d.jsonl") == [z]
