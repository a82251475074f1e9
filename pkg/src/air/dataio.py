"""Binary and text file formats shared across modules.

All binary formats are little-endian with a 4-byte ASCII magic:

  AIRD  dataset     header (version, record count, T, n, V as u32) then per
                    record T*n target ids (u16) followed by T*n condition ids
  AIRM  frame mask  T as u32 then T bytes of 0/1
  AIRC  checkpoint  version u32, entry count u32, then name-sorted entries:
                    name_len u16 + UTF-8 name, rank u8, dims u32 each,
                    dtype tag u8 (0 = float32), raw values

Configs echo into checkpoints as rank-0 `config.{key}` entries so files are
self-describing.  Text configs are `key = value` lines; unknown keys are
rejected rather than ignored so typos fail loudly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

CHECKPOINT_VERSION = 1
DATASET_VERSION = 1


class FormatError(ValueError):
    """Raised for bad magic, bad version, or truncated binary files."""


# ---------------------------------------------------------------------------
# AIRD datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray  # (N, T, n) target token grids
    c: np.ndarray  # (N, T, n) condition token grids
    vocab: int

    def __len__(self) -> int:
        return self.x.shape[0]


def write_dataset(path, x: np.ndarray, c: np.ndarray, vocab: int) -> None:
    x = np.asarray(x)
    c = np.asarray(c)
    if x.shape != c.shape or x.ndim != 3:
        raise ValueError("targets and conditions must both be (N, T, n)")
    if vocab > 0xFFFF:
        raise ValueError("u16 token storage caps the vocabulary at 65535")
    if x.size and (max(x.max(), c.max()) >= vocab or min(x.min(), c.min()) < 0):
        raise ValueError("token id out of range")
    N, T, n = x.shape
    with open(path, "wb") as f:
        f.write(b"AIRD")
        f.write(struct.pack("<5I", DATASET_VERSION, N, T, n, vocab))
        for i in range(N):
            f.write(x[i].astype("<u2").tobytes())
            f.write(c[i].astype("<u2").tobytes())


def read_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != b"AIRD":
        raise FormatError("not an AIRD dataset file")
    if len(blob) < 24:
        raise FormatError("truncated dataset header")
    version, N, T, n, vocab = struct.unpack_from("<5I", blob, 4)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    need = 24 + N * 2 * T * n * 2
    if len(blob) != need:
        raise FormatError(f"dataset file is {len(blob)} bytes, expected {need}")
    body = np.frombuffer(blob, dtype="<u2", offset=24).reshape(N, 2, T, n)
    return Dataset(body[:, 0].astype(np.int64), body[:, 1].astype(np.int64),
                   vocab)


# ---------------------------------------------------------------------------
# AIRM masks
# ---------------------------------------------------------------------------


def write_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 1 or not np.isin(mask, (0, 1)).all():
        raise ValueError("mask must be a 1-D 0/1 vector")
    with open(path, "wb") as f:
        f.write(b"AIRM")
        f.write(struct.pack("<I", mask.shape[0]))
        f.write(mask.astype(np.uint8).tobytes())


def read_mask(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != b"AIRM":
        raise FormatError("not an AIRM mask file")
    if len(blob) < 8:
        raise FormatError("truncated mask header")
    (T,) = struct.unpack_from("<I", blob, 4)
    if len(blob) != 8 + T:
        raise FormatError(f"mask file is {len(blob)} bytes, expected {8 + T}")
    mask = np.frombuffer(blob, dtype=np.uint8, offset=8)
    if not np.isin(mask, (0, 1)).all():
        raise FormatError("mask bytes must be 0 or 1")
    return mask.copy()


# ---------------------------------------------------------------------------
# AIRC checkpoints
# ---------------------------------------------------------------------------


def write_checkpoint(path, entries: dict[str, np.ndarray],
                     config: dict[str, float] | None = None) -> None:
    """Write named float32 arrays; config items become `config.{key}` scalars."""
    record: dict[str, np.ndarray] = {}
    for name, arr in entries.items():
        record[name] = np.asarray(arr, dtype=np.float32)
    for key, val in (config or {}).items():
        record[f"config.{key}"] = np.asarray(float(val), dtype=np.float32)
    parts = [b"AIRC", struct.pack("<2I", CHECKPOINT_VERSION, len(record))]
    for name in sorted(record):
        arr = record[name]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            parts.append(struct.pack("<I", dim))
        parts.append(struct.pack("<B", 0))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, float]]:
    """Return (arrays, config) with `config.*` entries split out."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != b"AIRC":
        raise FormatError("not an AIRC checkpoint file")
    if len(blob) < 12:
        raise FormatError("truncated checkpoint header")
    version, count = struct.unpack_from("<2I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = 12
    entries: dict[str, np.ndarray] = {}
    config: dict[str, float] = {}

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise FormatError("truncated checkpoint entry")
        chunk = blob[off:off + n]
        off += n
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(rank))
        (tag,) = struct.unpack("<B", take(1))
        if tag != 0:
            raise FormatError(f"unknown dtype tag {tag}")
        n_vals = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(4 * n_vals), dtype="<f4").reshape(shape).copy()
        if name.startswith("config."):
            config[name[len("config."):]] = float(arr)
        else:
            entries[name] = arr
    if off != len(blob):
        raise FormatError("trailing bytes after final checkpoint entry")
    return entries, config


# ---------------------------------------------------------------------------
# text formats
# ---------------------------------------------------------------------------


def parse_config_text(text: str, known: dict[str, type]) -> dict:
    """Parse `key = value` lines; blank lines and # comments allowed."""
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.strip()
        if not body or body.startswith("#"):
            continue
        if "=" not in body:
            raise ValueError(f"line {lineno}: expected key = value")
        key, _, val = body.partition("=")
        key, val = key.strip(), val.strip()
        if key not in known:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        out[key] = known[key](val)
    return out


def write_report_csv(path, rows: list[dict], comments: list[str] = ()) -> None:
    """Metric rows to CSV with a fixed column order and # header comments."""
    cols = ("model", "task", "pattern", "mode", "metric", "value", "n", "seed")
    lines = [f"# {c}" for c in comments]
    lines.append(",".join(cols))
    for row in rows:
        cells = []
        for c in cols:
            v = row[c]
            cells.append(f"{v:.6f}" if isinstance(v, float) else str(v))
        lines.append(",".join(cells))
    with open(path, "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def read_report_csv(path) -> list[dict]:
    rows = []
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f if not ln.startswith("#")]
    header = lines[0].split(",")
    for ln in lines[1:]:
        if not ln:
            continue
        cells = ln.split(",")
        row = dict(zip(header, cells))
        row["value"] = float(row["value"])
        row["n"] = int(row["n"])
        row["seed"] = int(row["seed"])
        row["pattern"] = int(row["pattern"])
        rows.append(row)
    return rows
