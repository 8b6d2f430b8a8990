"""Loss adapters: pure functions of (record, mask) -> float.

``echo`` returns the retained fraction (handy for protocol tests). ``pooled``
re-implements the main package's pooled surrogate from its documented
derivation so the two can be compared bit-for-bit-ish (<= 1e-9). The real
pretrained-model adapter is a documented stub: this is the hook where an
actual response loss would be computed.
"""

from __future__ import annotations

import hashlib
import struct

from evocomp_bridge.container import Record


class AdapterError(ValueError):
    """Scoring failed for this request; reported as a protocol error reply."""


def echo_adapter(record: Record, mask: list[int]) -> float:
    """Retained fraction: sum(bits) / n."""
    return sum(mask) / len(mask)


def _keyed_unit(tag: bytes, seed: int, i: int, j: int) -> float:
    h = hashlib.sha256()
    h.update(tag)
    h.update(struct.pack("<Q", seed % 2**64))
    h.update(struct.pack("<I", i))
    h.update(struct.pack("<I", j))
    return struct.unpack("<Q", h.digest()[:8])[0] / 2**64


class PooledAdapter:
    """Squared distance between the mean retained visual row and A @ mean(text).

    A is the d x d matrix with A[i][j] = 2 * U(seed, i, j) - 1 where U maps
    SHA-256("evocomp/pooled" || seed_le64 || i_le32 || j_le32) to [0, 1) via
    its first 8 digest bytes. This mirrors the derivation the main package
    documents, implemented here from scratch.
    """

    def __init__(self, seed: int):
        self.seed = seed
        self._maps: dict[int, list[list[float]]] = {}

    def _map(self, d: int) -> list[list[float]]:
        if d not in self._maps:
            self._maps[d] = [
                [2.0 * _keyed_unit(b"evocomp/pooled", self.seed, i, j) - 1.0 for j in range(d)]
                for i in range(d)
            ]
        return self._maps[d]

    def __call__(self, record: Record, mask: list[int]) -> float:
        kept = [row for row, bit in zip(record.visual, mask) if bit]
        if not kept:
            raise AdapterError("pooled adapter needs at least one retained token")
        if not record.text:
            raise AdapterError("pooled adapter needs at least one text token")
        d = len(record.visual[0])
        retained_mean = [sum(row[k] for row in kept) / len(kept) for k in range(d)]
        text_mean = [sum(row[k] for row in record.text) / len(record.text) for k in range(d)]
        a_map = self._map(d)
        target = [sum(a_map[i][j] * text_mean[j] for j in range(d)) for i in range(d)]
        return sum((rm - t) ** 2 for rm, t in zip(retained_mean, target))


class RealModelAdapter:
    """Placeholder for scoring with an actual pretrained multimodal model.

    A real deployment would load the model once at init time, and for every
    request rebuild the model input from the retained visual rows plus the
    sample's text, run a forward pass, and return the loss over the response
    tokens. Batching and device placement belong entirely behind this
    callable; the protocol stays stateless per request.
    """

    def __init__(self, checkpoint: str):
        raise NotImplementedError(
            "real-model scoring is out of scope for this reference bridge; "
            "implement __call__(record, mask) against your model runtime"
        )


def make_adapter(name: str, seed: int):
    if name == "echo":
        return echo_adapter
    if name == "pooled":
        return PooledAdapter(seed)
    raise AdapterError(f"unknown adapter {name!r}")
