"""Fitness scorers for the mask search.

At desk scale the host model's response loss is abstracted behind a small
contract: a scorer maps (sample, partition, mask) to a finite loss, is pure,
and declares whether concurrent calls are safe. Two synthetic scorers with
known optima (planted, pooled) make search results verifiable; the remote
scorer speaks a newline-delimited JSON protocol to an external process.
"""

from __future__ import annotations

import itertools
import json
import math
import shlex
import socket
import subprocess
import threading
from dataclasses import dataclass, field

import numpy as np

from evocomp.core import DataError, GroupPartition, Mask, Sample, decompose_mask
from evocomp.hashing import keyed_u64, keyed_unit, u32_bytes

BRUTE_FORCE_CAP = 10_000
_U64 = 2**64


class ScorerError(RuntimeError):
    """Base class for scorer failures."""


class ScorerTransportError(ScorerError):
    """The remote process or connection died or could not be reached."""


class ScorerProtocolError(ScorerError):
    """The remote side sent something the protocol does not allow."""


class RemoteScorerFailure(ScorerError):
    """The remote side reported an error for a specific request."""


class ScorerTimeout(ScorerError):
    """No response arrived within the configured timeout."""


@dataclass(frozen=True)
class ScorerSpec:
    """Declarative scorer selection, as it appears in CLI flags and manifests."""

    kind: str  # planted | pooled | remote
    seed: int = 0
    endpoint: str | None = None  # launch command or host:port for remote
    concurrency: str = "safe"  # safe | serialized

    def __post_init__(self) -> None:
        if self.kind not in ("planted", "pooled", "remote"):
            raise DataError(f"unknown scorer kind {self.kind!r}")
        if self.kind == "remote" and not self.endpoint:
            raise DataError("remote scorer requires an endpoint")
        if self.concurrency not in ("safe", "serialized"):
            raise DataError(f"unknown concurrency mode {self.concurrency!r}")


# ---------------------------------------------------------------------------
# Planted scorer: unique known optimum per (sample id, seed)


def planted_choice(sample_id: str, seed: int, group_index: int, group_size: int) -> int:
    """Planted member position for one group, stable under regeneration."""
    return keyed_u64(
        "evocomp/planted", seed, sample_id.encode("utf-8"), u32_bytes(group_index), b"k"
    ) % group_size


def planted_weight(sample_id: str, seed: int, group_index: int) -> float:
    """Planted group weight in (0, 1]."""
    raw = keyed_u64("evocomp/planted", seed, sample_id.encode("utf-8"), u32_bytes(group_index), b"w")
    return (raw + 1) / _U64


@dataclass(frozen=True)
class PlantedInstance:
    """Per-active-group planted positions and weights, keyed by the group's
    index in the partition's canonical group list."""

    choices: dict[int, int]
    weights: dict[int, float]

    @classmethod
    def derive(cls, sample_id: str, seed: int, part: GroupPartition) -> "PlantedInstance":
        choices = {}
        weights = {}
        for j, g in enumerate(part.groups):
            if not g.active:
                continue
            choices[j] = planted_choice(sample_id, seed, j, len(g.members))
            weights[j] = planted_weight(sample_id, seed, j)
        return cls(choices=choices, weights=weights)


def planted_score(sample: Sample, part: GroupPartition, mask: Mask, inst: PlantedInstance) -> float:
    """Mean over active groups of w_j * |chosen - planted| / max(1, n_j - 1).

    Zero exactly at the planted mask and strictly increasing with every step
    away from it inside any group.
    """
    selected = decompose_mask(mask, part)
    active = [(j, g) for j, g in enumerate(part.groups) if g.active]
    total = 0.0
    for (j, g), k_sel in zip(active, selected):
        n_j = len(g.members)
        total += inst.weights[j] * abs(k_sel - inst.choices[j]) / max(1, n_j - 1)
    return total / len(active)


def planted_mask(sample_id: str, seed: int, part: GroupPartition) -> Mask:
    """The unique loss-0 mask of the planted scorer for this instance."""
    from evocomp.core import compose_mask

    inst = PlantedInstance.derive(sample_id, seed, part)
    choices = [inst.choices[j] for j, g in enumerate(part.groups) if g.active]
    return compose_mask(part, choices)


# ---------------------------------------------------------------------------
# Pooled scorer: distance between retained-mean and a text-derived target


def pooled_map_rows(seed: int, d: int) -> list[list[float]]:
    """Fixed d x d projection with entries in [-1, 1), derived entry-wise from
    the seed by keyed hashing so any implementation can reproduce it."""
    return [
        [
            2.0 * keyed_unit("evocomp/pooled", seed, u32_bytes(i), u32_bytes(j)) - 1.0
            for j in range(d)
        ]
        for i in range(d)
    ]


def pooled_map(seed: int, d: int) -> np.ndarray:
    return np.asarray(pooled_map_rows(seed, d), dtype=np.float64)


_POOLED_MAP_CACHE: dict[tuple[int, int], list[list[float]]] = {}


def _pooled_map_cached(seed: int, d: int) -> list[list[float]]:
    key = (seed, d)
    if key not in _POOLED_MAP_CACHE:
        _POOLED_MAP_CACHE[key] = pooled_map_rows(seed, d)
    return _POOLED_MAP_CACHE[key]


def pooled_score(sample: Sample, mask: Mask, seed: int) -> float:
    """Squared distance between the mean retained visual row and A @ mean(text).

    Evaluated with plain sequential float64 accumulation (row order, then
    feature order) so any implementation of the same algorithm reproduces the
    loss bit for bit; search trajectories through an external scorer then
    match the in-process ones exactly.
    """
    if mask.n != sample.n:
        raise DataError(f"mask length {mask.n} != sample token count {sample.n}")
    if not any(mask.bits):
        raise DataError("pooled scorer needs at least one retained token")
    if sample.m == 0:
        raise DataError("pooled scorer needs at least one text token")
    visual = sample.visual.tolist()
    text = sample.text.tolist()
    kept = [visual[i] for i, b in enumerate(mask.bits) if b]
    d = sample.d
    retained_mean = [sum(row[k] for row in kept) / len(kept) for k in range(d)]
    text_mean = [sum(row[k] for row in text) / len(text) for k in range(d)]
    a_map = _pooled_map_cached(seed, d)
    target = [sum(a_map[i][j] * text_mean[j] for j in range(d)) for i in range(d)]
    return sum((rm - t) ** 2 for rm, t in zip(retained_mean, target))


# ---------------------------------------------------------------------------
# Scorer objects shared by the search and the CLI


class Scorer:
    """Callable fitness contract; subclasses must be pure in (sample, mask)."""

    scorer_id: str = "abstract"
    concurrent_safe: bool = True

    def score(self, sample: Sample, part: GroupPartition, mask: Mask) -> float:
        raise NotImplementedError

    def close(self) -> None:
        pass


class PlantedScorer(Scorer):
    def __init__(self, seed: int):
        self.seed = seed
        self.scorer_id = f"planted:{seed}"
        self._instances: dict[tuple[str, GroupPartition], PlantedInstance] = {}
        self._lock = threading.Lock()

    def score(self, sample: Sample, part: GroupPartition, mask: Mask) -> float:
        key = (sample.id, part)
        with self._lock:
            inst = self._instances.get(key)
            if inst is None:
                inst = PlantedInstance.derive(sample.id, self.seed, part)
                self._instances[key] = inst
        return planted_score(sample, part, mask, inst)


class PooledScorer(Scorer):
    def __init__(self, seed: int):
        self.seed = seed
        self.scorer_id = f"pooled:{seed}"

    def score(self, sample: Sample, part: GroupPartition, mask: Mask) -> float:
        return pooled_score(sample, mask, self.seed)


class DelayScorer(Scorer):
    """Wrap another scorer with a fixed artificial latency (benchmarks only)."""

    def __init__(self, inner: Scorer, delay_s: float):
        self.inner = inner
        self.delay_s = delay_s
        self.scorer_id = inner.scorer_id
        self.concurrent_safe = inner.concurrent_safe

    def score(self, sample: Sample, part: GroupPartition, mask: Mask) -> float:
        import time

        time.sleep(self.delay_s)
        return self.inner.score(sample, part, mask)


# ---------------------------------------------------------------------------
# Brute-force oracle


def brute_force_best(
    sample: Sample,
    part: GroupPartition,
    scorer: Scorer,
    cap: int = BRUTE_FORCE_CAP,
) -> tuple[Mask, float]:
    """Enumerate every valid mask in canonical order; first argmin wins.

    Canonical order is lexicographic over per-active-group choice tuples with
    the last group's choice varying fastest.
    """
    from evocomp.core import compose_mask

    sizes = [len(g.members) for g in part.active_groups()]
    space = math.prod(sizes)
    if space > cap:
        raise DataError(f"search space {space} exceeds brute-force cap {cap}")
    best_mask: Mask | None = None
    best_loss = math.inf
    for choices in itertools.product(*(range(s) for s in sizes)):
        mask = compose_mask(part, choices)
        loss = scorer.score(sample, part, mask)
        if loss < best_loss:
            best_mask = mask
            best_loss = loss
    assert best_mask is not None
    return best_mask, best_loss


# ---------------------------------------------------------------------------
# Remote scorer client (newline-delimited JSON over stdio or a socket)


@dataclass
class _Pending:
    event: threading.Event = field(default_factory=threading.Event)
    loss: float | None = None
    error: Exception | None = None


class RemoteScorerClient:
    """Multiplexes score requests over one connection to an external scorer.

    The wire protocol, all JSON objects separated by newlines:

        -> {"type": "init", "dataset": "<path>"}     <- {"type": "ready"}
        -> {"type": "score", "id": N, "sample": "<id>", "mask": [0|1, ...]}
                                                     <- {"type": "loss", "id": N, "loss": X}
        -> {"type": "shutdown"}                      <- process exit 0
        error responses: {"type": "error", "id": N, "message": "..."}

    Responses may arrive out of order; they are matched to callers by id.
    Callers on any thread may score concurrently.
    """

    def __init__(self, command: str | None = None, address: str | None = None, timeout: float = 30.0):
        if (command is None) == (address is None):
            raise DataError("remote client needs exactly one of command or address")
        self.timeout = timeout
        self._command = command
        self._address = address
        self._proc: subprocess.Popen | None = None
        self._sock: socket.socket | None = None
        self._writer = None
        self._reader = None
        self._write_lock = threading.Lock()
        self._state_lock = threading.Lock()
        self._pending: dict[int, _Pending] = {}
        self._next_id = 0
        self._fatal: Exception | None = None
        self._ready = threading.Event()
        self._reader_thread: threading.Thread | None = None

    # -- connection management

    def start(self, dataset_path: str) -> None:
        if self._command is not None:
            try:
                self._proc = subprocess.Popen(
                    shlex.split(self._command),
                    stdin=subprocess.PIPE,
                    stdout=subprocess.PIPE,
                    text=True,
                )
            except OSError as exc:
                raise ScorerTransportError(f"failed to launch scorer: {exc}") from exc
            self._writer = self._proc.stdin
            self._reader = self._proc.stdout
        else:
            host, _, port = self._address.rpartition(":")
            try:
                self._sock = socket.create_connection((host, int(port)), timeout=self.timeout)
            except OSError as exc:
                raise ScorerTransportError(f"failed to connect to {self._address}: {exc}") from exc
            self._writer = self._sock.makefile("w", encoding="utf-8", newline="\n")
            self._reader = self._sock.makefile("r", encoding="utf-8")
        self._reader_thread = threading.Thread(target=self._read_loop, daemon=True)
        self._reader_thread.start()
        self._send({"type": "init", "dataset": dataset_path})
        if not self._ready.wait(self.timeout):
            self._raise_fatal_or(ScorerTimeout("no ready message from remote scorer"))

    def _send(self, obj: dict) -> None:
        line = json.dumps(obj, separators=(",", ":"))
        with self._write_lock:
            if self._fatal is not None:
                raise self._fatal
            try:
                self._writer.write(line + "\n")
                self._writer.flush()
            except (OSError, ValueError) as exc:
                raise ScorerTransportError(f"failed to send to remote scorer: {exc}") from exc

    def _read_loop(self) -> None:
        try:
            for line in self._reader:
                line = line.strip()
                if not line:
                    continue
                try:
                    msg = json.loads(line)
                except json.JSONDecodeError:
                    self._fail_all(ScorerProtocolError(f"malformed response line: {line[:200]!r}"))
                    return
                if not self._dispatch(msg):
                    return
        except (OSError, ValueError) as exc:
            self._fail_all(ScorerTransportError(f"remote stream error: {exc}"))
            return
        self._fail_all(ScorerTransportError("remote scorer closed the connection"))

    def _dispatch(self, msg: dict) -> bool:
        kind = msg.get("type")
        if kind == "ready":
            self._ready.set()
            return True
        if kind in ("loss", "error"):
            rid = msg.get("id")
            with self._state_lock:
                pending = self._pending.pop(rid, None)
            if pending is None:
                self._fail_all(ScorerProtocolError(f"response with unknown id {rid!r}"))
                return False
            if kind == "loss":
                loss = msg.get("loss")
                if not isinstance(loss, (int, float)) or not math.isfinite(loss):
                    pending.error = ScorerProtocolError(f"non-numeric loss in response: {msg!r}")
                else:
                    pending.loss = float(loss)
            else:
                pending.error = RemoteScorerFailure(str(msg.get("message", "unspecified remote error")))
            pending.event.set()
            return True
        self._fail_all(ScorerProtocolError(f"unexpected message type {kind!r}"))
        return False

    def _fail_all(self, exc: Exception) -> None:
        with self._state_lock:
            if self._fatal is None:
                self._fatal = exc
            pending = list(self._pending.values())
            self._pending.clear()
        for p in pending:
            p.error = exc
            p.event.set()
        self._ready.set()

    def _raise_fatal_or(self, fallback: Exception):
        if self._fatal is not None:
            raise self._fatal
        raise fallback

    # -- scoring

    def score(self, sample_id: str, mask_bits: tuple[int, ...] | list[int]) -> float:
        return self.score_batch([(sample_id, mask_bits)])[0]

    def score_batch(self, items: list[tuple[str, tuple[int, ...] | list[int]]]) -> list[float]:
        """Send every request up front, then match responses by id."""
        if self._fatal is not None:
            raise self._fatal
        slots: list[_Pending] = []
        for sample_id, bits in items:
            pending = _Pending()
            with self._state_lock:
                rid = self._next_id
                self._next_id += 1
                self._pending[rid] = pending
            slots.append(pending)
            self._send({"type": "score", "id": rid, "sample": sample_id, "mask": list(bits)})
        losses = []
        for pending in slots:
            if not pending.event.wait(self.timeout):
                self._raise_fatal_or(ScorerTimeout(f"no response within {self.timeout}s"))
            if pending.error is not None:
                raise pending.error
            losses.append(pending.loss)
        return losses

    def shutdown(self) -> None:
        try:
            self._send({"type": "shutdown"})
        except ScorerError:
            pass
        if self._proc is not None:
            try:
                self._proc.wait(timeout=self.timeout)
            except subprocess.TimeoutExpired:
                self._proc.kill()
        if self._sock is not None:
            self._sock.close()


class RemoteScorer(Scorer):
    """Adapter making a RemoteScorerClient usable by the search."""

    def __init__(self, client: RemoteScorerClient, scorer_id: str, concurrent_safe: bool = True):
        self.client = client
        self.scorer_id = scorer_id
        self.concurrent_safe = concurrent_safe

    def score(self, sample: Sample, part: GroupPartition, mask: Mask) -> float:
        return self.client.score(sample.id, mask.bits)

    def close(self) -> None:
        self.client.shutdown()


def _looks_like_address(endpoint: str) -> bool:
    host, sep, port = endpoint.rpartition(":")
    return bool(sep) and bool(host) and port.isdigit() and " " not in endpoint


def make_scorer(spec: ScorerSpec, dataset_path: str | None = None, timeout: float = 30.0) -> Scorer:
    """Instantiate a scorer from its declarative spec. Remote endpoints are a
    host:port address or a launch command for a child process."""
    if spec.kind == "planted":
        return PlantedScorer(spec.seed)
    if spec.kind == "pooled":
        return PooledScorer(spec.seed)
    if dataset_path is None:
        raise DataError("remote scorer requires the dataset path for its init message")
    if _looks_like_address(spec.endpoint):
        client = RemoteScorerClient(address=spec.endpoint, timeout=timeout)
    else:
        client = RemoteScorerClient(command=spec.endpoint, timeout=timeout)
    client.start(dataset_path)
    return RemoteScorer(client, f"remote:{spec.endpoint}", spec.concurrency == "safe")
