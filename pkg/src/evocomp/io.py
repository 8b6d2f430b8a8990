"""Bit-exact file formats.

Dataset container: the magic bytes ``EVC1`` followed by little-endian u32
fields (n, m, d, id-length), the UTF-8 id, then n*d and m*d little-endian
float32 values, row-major. A file holds a sequence of such records, and a
JSON sidecar manifest next to it lists the record count and a content
checksum.

Label records are one JSON object per line:
``{"sample_id", "mask": [0|1, ...], "loss", "partition_digest", "scorer_id", "seed"}``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from evocomp.core import AnchorSet, DataError, LabelRecord, Mask, Sample, validate_anchors, validate_sample

MAGIC = b"EVC1"
_HEADER = struct.Struct("<4sIIII")


def _encode_record(sample: Sample) -> bytes:
    id_bytes = sample.id.encode("utf-8")
    head = _HEADER.pack(MAGIC, sample.n, sample.m, sample.d, len(id_bytes))
    visual = np.ascontiguousarray(sample.visual, dtype="<f4").tobytes()
    text = np.ascontiguousarray(sample.text, dtype="<f4").tobytes()
    return head + id_bytes + visual + text


def manifest_path(path: str | Path) -> Path:
    return Path(str(path) + ".manifest.json")


def write_container(path: str | Path, samples: list[Sample]) -> None:
    """Write samples as consecutive records plus the sidecar manifest."""
    path = Path(path)
    blob = b"".join(_encode_record(s) for s in samples)
    path.write_bytes(blob)
    manifest = {
        "records": len(samples),
        "checksum": "sha256:" + hashlib.sha256(blob).hexdigest(),
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2) + "\n")


def read_container(path: str | Path, verify: bool = True) -> list[Sample]:
    """Read every record; optionally verify the sidecar checksum and count."""
    path = Path(path)
    blob = path.read_bytes()
    if verify:
        mpath = manifest_path(path)
        if mpath.exists():
            manifest = json.loads(mpath.read_text())
            digest = "sha256:" + hashlib.sha256(blob).hexdigest()
            if manifest.get("checksum") != digest:
                raise DataError(f"{path}: checksum mismatch against sidecar manifest")
    samples = []
    offset = 0
    while offset < len(blob):
        if len(blob) - offset < _HEADER.size:
            raise DataError(f"{path}: truncated record header at byte {offset}")
        magic, n, m, d, id_len = _HEADER.unpack_from(blob, offset)
        if magic != MAGIC:
            raise DataError(f"{path}: bad magic at byte {offset}")
        offset += _HEADER.size
        sid = blob[offset : offset + id_len].decode("utf-8")
        offset += id_len
        need = (n * d + m * d) * 4
        if len(blob) - offset < need:
            raise DataError(f"{path}: truncated payload for record {sid!r}")
        visual = np.frombuffer(blob, dtype="<f4", count=n * d, offset=offset).reshape(n, d)
        offset += n * d * 4
        text = np.frombuffer(blob, dtype="<f4", count=m * d, offset=offset).reshape(m, d)
        offset += m * d * 4
        samples.append(
            Sample(id=sid, visual=visual.astype(np.float64), text=text.astype(np.float64))
        )
    if verify:
        mpath = manifest_path(path)
        if mpath.exists():
            manifest = json.loads(mpath.read_text())
            if manifest.get("records") != len(samples):
                raise DataError(f"{path}: record count mismatch against sidecar manifest")
    for s in samples:
        validate_sample(s)
    return samples


def write_anchor_container(path: str | Path, anchors: AnchorSet, name: str = "anchors") -> None:
    """Anchor sets reuse the container format with the text slot unused (m=0)."""
    validate_anchors(anchors)
    sample = Sample(
        id=name,
        visual=anchors.anchors.astype(np.float64),
        text=np.zeros((0, anchors.d), dtype=np.float64),
    )
    write_container(path, [sample])


def read_anchor_container(path: str | Path) -> AnchorSet:
    records = read_container(path)
    if len(records) != 1:
        raise DataError(f"{path}: anchor container must hold exactly one record")
    anchors = AnchorSet(anchors=records[0].visual)
    validate_anchors(anchors)
    return anchors


def label_to_json(record: LabelRecord) -> str:
    return json.dumps(
        {
            "sample_id": record.sample_id,
            "mask": list(record.mask.bits),
            "loss": record.loss,
            "partition_digest": record.partition_digest,
            "scorer_id": record.scorer_id,
            "seed": record.seed,
        },
        separators=(",", ":"),
    )


def label_from_json(line: str) -> LabelRecord:
    try:
        obj = json.loads(line)
        return LabelRecord(
            sample_id=obj["sample_id"],
            mask=Mask(bits=tuple(int(b) for b in obj["mask"])),
            loss=float(obj["loss"]),
            partition_digest=obj["partition_digest"],
            scorer_id=obj["scorer_id"],
            seed=int(obj["seed"]),
        )
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"malformed label record: {exc}") from exc


def write_labels(path: str | Path, records: list[LabelRecord]) -> None:
    Path(path).write_text("".join(label_to_json(r) + "\n" for r in records))


def read_labels(path: str | Path) -> list[LabelRecord]:
    records = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            records.append(label_from_json(line))
    return records
