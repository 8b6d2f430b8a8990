"""Request loop for the wire protocol.

Requests are processed in arrival order; every request id is answered exactly
once. Malformed JSON gets an error reply carrying the request id when one can
be recovered, otherwise a line-level error (id null), and the loop continues.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, TextIO

from evocomp_bridge.adapters import AdapterError
from evocomp_bridge.container import ContainerError, Record, parse_container

Adapter = Callable[[Record, list[int]], float]


@dataclass
class BridgeSession:
    adapter: Adapter
    dataset: dict[str, Record] = field(default_factory=dict)
    requests_served: int = 0


def _send(out: TextIO, obj: dict) -> None:
    out.write(json.dumps(obj, separators=(",", ":")) + "\n")
    out.flush()


def _handle_score(session: BridgeSession, msg: dict, out: TextIO) -> None:
    rid = msg.get("id")
    if not isinstance(rid, int):
        _send(out, {"type": "error", "id": None, "message": "score request without integer id"})
        return
    session.requests_served += 1
    sample_id = msg.get("sample")
    mask = msg.get("mask")
    record = session.dataset.get(sample_id)
    if record is None:
        _send(out, {"type": "error", "id": rid, "message": f"unknown sample {sample_id!r}"})
        return
    if not isinstance(mask, list) or len(mask) != record.n or any(b not in (0, 1) for b in mask):
        _send(out, {
            "type": "error", "id": rid,
            "message": f"mask must be a 0/1 list of length {record.n}",
        })
        return
    try:
        loss = session.adapter(record, mask)
    except AdapterError as exc:
        _send(out, {"type": "error", "id": rid, "message": str(exc)})
        return
    _send(out, {"type": "loss", "id": rid, "loss": loss})


def serve(adapter: Adapter, in_stream: TextIO, out_stream: TextIO) -> int:
    """Run the protocol until shutdown or EOF; returns the intended exit code."""
    session = BridgeSession(adapter=adapter)
    for line in in_stream:
        line = line.strip()
        if not line:
            continue
        try:
            msg = json.loads(line)
        except json.JSONDecodeError:
            _send(out_stream, {"type": "error", "id": None, "message": "malformed json line"})
            continue
        if not isinstance(msg, dict):
            _send(out_stream, {"type": "error", "id": None, "message": "message must be an object"})
            continue
        kind = msg.get("type")
        if kind == "init":
            try:
                session.dataset = parse_container(msg.get("dataset", ""))
            except (ContainerError, OSError) as exc:
                _send(out_stream, {"type": "error", "id": msg.get("id"), "message": f"init failed: {exc}"})
                continue
            _send(out_stream, {"type": "ready"})
        elif kind == "score":
            _handle_score(session, msg, out_stream)
        elif kind == "shutdown":
            return 0
        else:
            rid = msg.get("id")
            if isinstance(rid, int):
                _send(out_stream, {"type": "error", "id": rid, "message": f"unknown message type {kind!r}"})
            else:
                _send(out_stream, {"type": "error", "id": None, "message": f"unknown message type {kind!r}"})
    return 0
