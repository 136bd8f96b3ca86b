"""On-disk formats: JSONL datasets, binary checkpoints, trace CSVs, run manifests.

Checkpoint layout (all integers little-endian)::

    b"GTCK"                          magic
    u32   version                    currently 1
    u32   meta length, then UTF-8 JSON {"run_id", "step", "config"}
    u32   tensor count
    per tensor:
        u16 name length, name (UTF-8; "base." or "adapter." prefix)
        u32 ndim, u64 * ndim dims
        u64 byte offset into the payload
    payload: float64 little-endian values, row-major
    u64   FNV-1a 64 hash of every preceding byte

All writes go to a temporary file in the target directory and are renamed
into place, so a crash never leaves a half-written file under the final name.
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CorruptionError, VersionError
from .model import Example, ModelConfig, ModelState
from .trainer import CheckpointSeries

MAGIC = b"GTCK"
VERSION = 1
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes, h: int = FNV_OFFSET) -> int:
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK64
    return h


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write(path, text.encode("utf-8"))


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

def dumps_dataset(examples: Iterable[Example]) -> str:
    lines = []
    for z in examples:
        obj = {"id": z.id, "task": z.task, "query": z.query_text, "response": z.response_text}
        lines.append(json.dumps(obj, ensure_ascii=False))
    return "".join(line + "\n" for line in lines)


def save_dataset(path, examples: Iterable[Example]) -> None:
    atomic_write_text(path, dumps_dataset(examples))


def load_dataset(path, context_len: int = 256) -> list[Example]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(Example.from_text(obj["id"], obj["task"], obj["query"], obj["response"], context_len))
            except (json.JSONDecodeError, KeyError) as exc:
                raise CorruptionError(f"{path}:{lineno}: malformed dataset line ({exc})") from exc
    return out


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def checkpoint_bytes(state: ModelState) -> bytes:
    meta = json.dumps(
        {"run_id": state.run_id, "step": state.step, "config": state.config.to_dict()}, sort_keys=True
    ).encode()
    tensors = [("base." + k, v) for k, v in state.base.items()] + [("adapter." + k, v) for k, v in state.adapter.items()]
    head = io.BytesIO()
    head.write(MAGIC)
    head.write(struct.pack("<II", VERSION, len(meta)))
    head.write(meta)
    head.write(struct.pack("<I", len(tensors)))
    payload = io.BytesIO()
    for name, v in tensors:
        raw = name.encode()
        head.write(struct.pack("<HI", len(raw), v.ndim))
        head.write(raw)
        head.write(struct.pack(f"<{v.ndim}Q", *v.shape))
        head.write(struct.pack("<Q", payload.tell()))
        payload.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    body = head.getvalue() + payload.getvalue()
    return body + struct.pack("<Q", fnv1a64(body))


def save_checkpoint(path, state: ModelState) -> int:
    """Write ``state`` atomically; returns the content hash."""
    data = checkpoint_bytes(state)
    atomic_write(path, data)
    return struct.unpack("<Q", data[-8:])[0]


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data, self.pos, self.end = data, 0, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise CorruptionError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_from_bytes(data: bytes) -> ModelState:
    if len(data) < 4 + 4 + 8 or data[:4] != MAGIC:
        raise CorruptionError("bad checkpoint magic")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    body, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    if fnv1a64(body) != stored:
        raise CorruptionError("checkpoint hash mismatch")
    r = _Reader(body, len(body))
    r.pos = 8
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len))
        cfg = ModelConfig(**meta["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptionError(f"bad checkpoint metadata: {exc}") from exc
    (count,) = r.unpack("<I")
    entries = []
    for _ in range(count):
        name_len, ndim = r.unpack("<HI")
        name = r.take(name_len).decode()
        shape = r.unpack(f"<{ndim}Q")
        (offset,) = r.unpack("<Q")
        entries.append((name, shape, offset))
    payload = body[r.pos:]
    base, adapter = {}, {}
    for name, shape, offset in entries:
        n = int(np.prod(shape, dtype=np.int64))
        if offset + 8 * n > len(payload):
            raise CorruptionError(f"tensor {name!r} runs past the payload")
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)
        group, _, key = name.partition(".")
        {"base": base, "adapter": adapter}[group][key] = arr
    return ModelState(cfg, int(meta["step"]), base, adapter, meta.get("run_id", ""))


def load_checkpoint(path) -> ModelState:
    return checkpoint_from_bytes(Path(path).read_bytes())


def stored_hash(path) -> int:
    with open(path, "rb") as fh:
        fh.seek(-8, os.SEEK_END)
        return struct.unpack("<Q", fh.read(8))[0]


# --------------------------------------------------------------------------
# run manifests
# --------------------------------------------------------------------------

@dataclass
class RunManifest:
    run_id: str
    config: dict
    checkpoints: list[dict] = field(default_factory=list)  # {"step", "file", "fnv1a64"}
    schedule: dict[str, float] = field(default_factory=dict)
    losses: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def save_run(directory, series: CheckpointSeries, config: dict) -> RunManifest:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for state in series.checkpoints:
        name = f"step-{state.step:06d}.gtck"
        h = save_checkpoint(directory / name, state)
        entries.append({"step": state.step, "file": name, "fnv1a64": f"{h:016x}"})
    manifest = RunManifest(
        run_id=series.run_id,
        config=config,
        checkpoints=entries,
        schedule={str(k): v for k, v in sorted(series.schedule.items())},
        losses={str(k): v for k, v in sorted(series.losses.items())},
    )
    atomic_write_text(directory / "manifest.json", manifest.to_json())
    return manifest


def load_manifest(directory) -> RunManifest:
    directory = Path(directory)
    try:
        raw = json.loads((directory / "manifest.json").read_text())
        manifest = RunManifest(**raw)
    except (OSError, ValueError, TypeError) as exc:
        raise CorruptionError(f"cannot read manifest in {directory}: {exc}") from exc
    for entry in manifest.checkpoints:
        path = directory / entry["file"]
        if not path.exists():
            raise CorruptionError(f"manifest references missing file {path}")
    return manifest


def load_run(directory) -> tuple[RunManifest, CheckpointSeries]:
    directory = Path(directory)
    manifest = load_manifest(directory)
    states = []
    for entry in manifest.checkpoints:
        path = directory / entry["file"]
        if f"{stored_hash(path):016x}" != entry["fnv1a64"]:
            raise CorruptionError(f"{path} does not match the manifest hash")
        states.append(load_checkpoint(path))
    series = CheckpointSeries(
        manifest.run_id,
        states,
        {int(k): v for k, v in manifest.schedule.items()},
        {int(k): v for k, v in manifest.losses.items()},
    )
    return manifest, series


# --------------------------------------------------------------------------
# traces
# --------------------------------------------------------------------------

TRACE_HEADER = ("step", "metric", "value")


def _label(text: str) -> str:
    # csv.writer does not always quote a bare CR, so labels must be one line
    if "\r" in text or "\n" in text:
        raise ValueError(f"CSV label must not contain line breaks: {text!r}")
    return text


def dumps_trace_rows(rows: Sequence[tuple[int, str, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for step, metric, value in rows:
        w.writerow((int(step), _label(metric), repr(float(value))))
    return buf.getvalue()


def save_trace_csv(path, rows: Sequence[tuple[int, str, float]]) -> None:
    atomic_write_text(path, dumps_trace_rows(rows))


def load_trace_csv(path) -> list[tuple[int, str, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != TRACE_HEADER:
            raise CorruptionError(f"{path}: expected header {','.join(TRACE_HEADER)}")
        return [(int(s), m, float(v)) for s, m, v in reader]


def dumps_matrix_rows(traces) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("step", "pairing", "i", "j", "value"))
    for tr in traces:
        for rec in tr.records:
            n = rec.matrix.shape[0]
            for i in range(n):
                for j in range(n):
                    w.writerow((rec.step, _label(tr.label_in), i, j, repr(float(rec.matrix[i, j]))))
    return buf.getvalue()


def save_matrix_csv(path, traces) -> None:
    atomic_write_text(path, dumps_matrix_rows(traces))
