"""Parser for the "EVC1" dataset container, stdlib only.

Record layout: magic b"EVC1", little-endian u32 fields (n, m, d, id-length),
UTF-8 id, then n*d and m*d little-endian float32 values, row-major. A file is
a sequence of records.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

_HEADER = struct.Struct("<4sIIII")
MAGIC = b"EVC1"


@dataclass
class Record:
    id: str
    visual: list[list[float]]  # n rows of d floats
    text: list[list[float]]  # m rows of d floats

    @property
    def n(self) -> int:
        return len(self.visual)


class ContainerError(ValueError):
    pass


def _read_rows(blob: bytes, offset: int, rows: int, cols: int) -> tuple[list[list[float]], int]:
    count = rows * cols
    values = struct.unpack_from(f"<{count}f", blob, offset)
    out = [list(values[r * cols : (r + 1) * cols]) for r in range(rows)]
    return out, offset + count * 4


def parse_container(path: str) -> dict[str, Record]:
    with open(path, "rb") as fh:
        blob = fh.read()
    records: dict[str, Record] = {}
    offset = 0
    while offset < len(blob):
        if len(blob) - offset < _HEADER.size:
            raise ContainerError(f"truncated record header at byte {offset}")
        magic, n, m, d, id_len = _HEADER.unpack_from(blob, offset)
        if magic != MAGIC:
            raise ContainerError(f"bad magic at byte {offset}")
        offset += _HEADER.size
        sample_id = blob[offset : offset + id_len].decode("utf-8")
        offset += id_len
        if len(blob) - offset < (n + m) * d * 4:
            raise ContainerError(f"truncated payload for record {sample_id!r}")
        visual, offset = _read_rows(blob, offset, n, d)
        text, offset = _read_rows(blob, offset, m, d)
        records[sample_id] = Record(id=sample_id, visual=visual, text=text)
    return records
