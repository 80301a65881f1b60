"""Binary container and CSV helpers.

Container layout (all little-endian)::

    magic      8 bytes
    version    uint32
    hlen       uint32
    header     hlen bytes of UTF-8 JSON (sorted keys); lists array shapes
    body       float64 arrays, concatenated in header order

The JSON header carries every scalar (Ts, counts, config text) so a file
can be inspected without knowing the array layout in advance.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

VERSION = 1
FLOAT_FMT = "%.17g"


class FormatError(ValueError):
    pass


def write_container(path, magic: bytes, header: dict, arrays: dict[str, np.ndarray]) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    header = dict(header)
    header["arrays"] = [[name, list(np.shape(a))] for name, a in arrays.items()]
    text = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", VERSION, len(text)))
        fh.write(text)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != magic:
        raise FormatError(f"{path}: bad magic {data[:8]!r}, expected {magic!r}")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    header = json.loads(data[16:16 + hlen].decode())
    offset = 16 + hlen
    arrays = {}
    for name, shape in header.pop("arrays"):
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).astype(float)
        offset += 8 * count
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes")
    return header, arrays


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (str, np.str_)):
        return str(value)
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return FLOAT_FMT % float(value)


def csv_text(columns: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def parse_csv(text: str) -> tuple[list[str], list[list]]:
    """Parse CSV written by :func:`csv_text`; numeric cells become floats/ints."""
    reader = csv.reader(io.StringIO(text))
    columns = next(reader)
    rows = []
    for raw in reader:
        row = []
        for cell in raw:
            if cell == "":
                row.append(None)
                continue
            try:
                row.append(int(cell))
            except ValueError:
                try:
                    row.append(float(cell))
                except ValueError:
                    row.append(cell)
        rows.append(row)
    return columns, rows


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
