"""Inference-time collection under the N x P x M protocol.

Two channels produce durations in nanoseconds:

* :class:`WallClockChannel` reads ``time.perf_counter_ns`` around real
  forward passes.
* :class:`SurrogateChannel` returns ``base + slope * updates + noise``, where
  ``updates`` is the total max-pool update count the model's own pooling
  variant executes on the input. It is deterministic for a given seed.
"""

from __future__ import annotations

import contextlib
import csv
import os
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .engine import MaxPool, ModelSpec, model_forward, update_counts
from .errors import FormatError, InsufficientInputs, PoolLeakError, ValidationError
from .tensor import Tensor

DUMP_HEADER = ["run", "class", "input_idx", "rep", "duration_ns"]


@dataclass(frozen=True)
class CollectionProtocol:
    N: int  # repetitions per input
    P: int  # inputs per class
    M: int  # independent run instances
    warmup: int = 10

    def __post_init__(self):
        if self.N < 1 or self.P < 1 or self.M < 1:
            raise ValidationError("N, P and M must all be >= 1")
        if self.warmup < 0:
            raise ValidationError("warmup must be >= 0")

    def to_dict(self) -> dict:
        return {"N": self.N, "P": self.P, "M": self.M, "warmup": self.warmup}


@dataclass
class TimingTrace:
    samples_ns: np.ndarray

    def __post_init__(self):
        self.samples_ns = np.asarray(self.samples_ns, dtype=np.float64)
        if self.samples_ns.ndim != 1 or self.samples_ns.size == 0:
            raise ValidationError("a trace holds a non-empty 1-D sample array")
        if np.any(self.samples_ns <= 0):
            raise ValidationError("durations must be positive")

    def __len__(self) -> int:
        return self.samples_ns.size


@dataclass
class TimingDistribution:
    class_id: int
    run_id: int
    traces: list[TimingTrace] = field(default_factory=list)

    def append(self, trace: TimingTrace) -> None:
        self.traces.append(trace)

    @property
    def flattened(self) -> np.ndarray:
        if not self.traces:
            return np.empty(0)
        return np.concatenate([t.samples_ns for t in self.traces])

    def __len__(self) -> int:
        return sum(len(t) for t in self.traces)


# ------------------------------------------------------------------ channels


def clock_resolution_ns() -> float:
    return time.get_clock_info("perf_counter").resolution * 1e9


class WallClockChannel:
    kind = "wall"

    def __init__(self):
        self.inferences = 0

    def describe(self) -> dict:
        return {"kind": self.kind, "clock": "perf_counter_ns", "resolution_ns": clock_resolution_ns()}

    def reset(self, seed: int | None = None) -> None:
        self.inferences = 0

    def measure_total(self, model: ModelSpec, x) -> float:
        self.inferences += 1
        clock = time.perf_counter_ns
        t1 = clock()
        model_forward(model, x, instrument=False)
        t2 = clock()
        # clamp to one tick so a sub-resolution run still counts as positive
        return float(max(t2 - t1, 1))

    def measure_layers(self, model: ModelSpec, x) -> np.ndarray:
        self.inferences += 1
        out = model_forward(model, x, instrument=True)
        return np.asarray(out.layer_times_ns, dtype=np.float64)

    def trace(self, model: ModelSpec, x, n: int, warmup: int) -> TimingTrace:
        for _ in range(warmup):
            self.measure_total(model, x)
        return TimingTrace([self.measure_total(model, x) for _ in range(n)])

    def layer_trace(self, model: ModelSpec, x, n: int, warmup: int) -> np.ndarray:
        for _ in range(warmup):
            self.measure_layers(model, x)
        return np.stack([self.measure_layers(model, x) for _ in range(n)])


class SurrogateChannel:
    """Affine function of the max-pool update count plus seeded Gaussian noise."""

    kind = "surrogate"

    def __init__(self, ns_per_update: float = 10.0, base_ns: float = 1e4,
                 noise_std_ns: float = 50.0, seed: int = 0):
        if min(ns_per_update, base_ns, noise_std_ns) < 0:
            raise ValidationError("surrogate parameters must be >= 0")
        self.ns_per_update = float(ns_per_update)
        self.base_ns = float(base_ns)
        self.noise_std_ns = float(noise_std_ns)
        self.seed = int(seed)
        self.inferences = 0
        self._rng = np.random.default_rng(self.seed)
        self._counts: dict = {}

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "ns_per_update": self.ns_per_update,
            "base_ns": self.base_ns,
            "noise_std_ns": self.noise_std_ns,
            "seed": self.seed,
        }

    def reset(self, seed: int | None = None) -> None:
        """Restart the noise stream (optionally from a new seed)."""
        if seed is not None:
            self.seed = int(seed)
        self._rng = np.random.default_rng(self.seed)
        self.inferences = 0

    def counts(self, model: ModelSpec, x) -> list[int]:
        arr = x.array if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
        # the model is kept in the key so its id cannot be recycled
        key = (id(model), arr.tobytes())
        hit = self._counts.get(key)
        if hit is None or hit[0] is not model:
            hit = (model, update_counts(model, arr))
            self._counts[key] = hit
        return hit[1]

    def _noise(self, size) -> np.ndarray:
        if self.noise_std_ns == 0:
            return np.zeros(size)
        return self._rng.standard_normal(size) * self.noise_std_ns

    def measure_total(self, model: ModelSpec, x) -> float:
        return float(self.trace(model, x, 1, 0).samples_ns[0])

    def trace(self, model: ModelSpec, x, n: int, warmup: int) -> TimingTrace:
        self.inferences += n + warmup
        mean = self.base_ns + self.ns_per_update * sum(self.counts(model, x))
        samples = np.maximum(mean + self._noise(n + warmup)[warmup:], 1.0)
        return TimingTrace(samples)

    def _layer_means(self, model: ModelSpec, x) -> np.ndarray:
        counts = iter(self.counts(model, x))
        base = self.base_ns / len(model.layers)
        return np.array([
            base + (self.ns_per_update * next(counts) if isinstance(l, MaxPool) else 0.0)
            for l in model.layers
        ])

    def measure_layers(self, model: ModelSpec, x) -> np.ndarray:
        return self.layer_trace(model, x, 1, 0)[0]

    def layer_trace(self, model: ModelSpec, x, n: int, warmup: int) -> np.ndarray:
        self.inferences += n + warmup
        means = self._layer_means(model, x)
        noise = self._noise((n + warmup, means.size))[warmup:]
        return np.maximum(means[None, :] + noise, 1.0)


Channel = WallClockChannel | SurrogateChannel


def make_channel(kind: str, **params) -> Channel:
    if kind in ("wall", "wallclock", "WallClock"):
        return WallClockChannel()
    if kind in ("surrogate", "Surrogate"):
        return SurrogateChannel(**params)
    raise ValidationError(f"unknown channel kind {kind!r}")


# ------------------------------------------------------------- measurements


def measure_total(model: ModelSpec, x, channel: Channel) -> float:
    return channel.measure_total(model, x)


def measure_layers(model: ModelSpec, x, channel: Channel | None = None) -> np.ndarray:
    return (channel or WallClockChannel()).measure_layers(model, x)


def collect_trace(model: ModelSpec, x, n: int, warmup: int, channel: Channel) -> TimingTrace:
    if n < 1:
        raise ValidationError("N must be >= 1")
    return channel.trace(model, x, n, warmup)


def _check_pool(groups: Mapping[int, Sequence], p: int) -> list[int]:
    classes = sorted(groups)
    short = [c for c in classes if len(groups[c]) < p]
    if short:
        raise InsufficientInputs(f"classes {short} have fewer than P={p} inputs")
    return classes


def run_protocol(
    model: ModelSpec,
    groups: Mapping[int, Sequence],
    protocol: CollectionProtocol,
    channel: Channel,
) -> dict[tuple[int, int], TimingDistribution]:
    """Collect one distribution per (class, run).

    Within a run the first P inputs of every class are visited class
    round-robin: input 0 of every class, then input 1, and so on.
    """
    classes = _check_pool(groups, protocol.P)
    dists = {(c, m): TimingDistribution(c, m) for m in range(protocol.M) for c in classes}
    for m in range(protocol.M):
        for k in range(protocol.P):
            for c in classes:
                trace = channel.trace(model, groups[c][k], protocol.N, protocol.warmup)
                dists[(c, m)].append(trace)
    return dists


def run_protocol_layers(
    model: ModelSpec,
    groups: Mapping[int, Sequence],
    protocol: CollectionProtocol,
    channel: Channel,
) -> dict[tuple[int, int], np.ndarray]:
    """Like :func:`run_protocol` but keeps per-layer durations:
    each value is a (P*N, layers) array."""
    classes = _check_pool(groups, protocol.P)
    parts: dict[tuple[int, int], list[np.ndarray]] = {(c, m): [] for m in range(protocol.M) for c in classes}
    for m in range(protocol.M):
        for k in range(protocol.P):
            for c in classes:
                parts[(c, m)].append(channel.layer_trace(model, groups[c][k], protocol.N, protocol.warmup))
    return {key: np.concatenate(v) for key, v in parts.items()}


# ------------------------------------------------------------------ raw dump


def write_dump(dists: Mapping[tuple[int, int], TimingDistribution], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DUMP_HEADER)
        for (c, m) in sorted(dists, key=lambda k: (k[1], k[0])):
            for k, trace in enumerate(dists[(c, m)].traces):
                for r, v in enumerate(trace.samples_ns):
                    w.writerow([m, c, k, r, repr(float(v))])


def read_dump(path) -> dict[tuple[int, int], TimingDistribution]:
    rows: dict[tuple[int, int], dict[int, list[tuple[int, float]]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != DUMP_HEADER:
            raise FormatError(f"unexpected dump header {header}")
        for rec in reader:
            m, c, k, r = (int(v) for v in rec[:4])
            rows.setdefault((c, m), {}).setdefault(k, []).append((r, float(rec[4])))
    out = {}
    for key, inputs in rows.items():
        dist = TimingDistribution(key[0], key[1])
        for k in sorted(inputs):
            dist.append(TimingTrace([v for _, v in sorted(inputs[k])]))
        out[key] = dist
    return out


# ------------------------------------------------------- exclusive regime


class CollectionBusy(PoolLeakError, RuntimeError):
    pass


_GUARD = threading.Lock()
DEFAULT_LOCK = Path(tempfile.gettempdir()) / "poolleak-collection.lock"


@contextlib.contextmanager
def collection_guard(lock_path: str | os.PathLike | None = DEFAULT_LOCK, pin_cpu: bool = True) -> Iterator[None]:
    """Hold the process-wide collection token (and a lock file) while timing.

    Raises :class:`CollectionBusy` if another collection holds either.
    CPU pinning is attempted and silently skipped where unsupported.
    """
    if not _GUARD.acquire(blocking=False):
        raise CollectionBusy("another collection is running in this process")
    fd = None
    old_affinity = None
    try:
        if lock_path is not None:
            try:
                fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
                os.write(fd, str(os.getpid()).encode())
            except FileExistsError:
                raise CollectionBusy(f"collection lock {lock_path} is present") from None
        if pin_cpu and hasattr(os, "sched_setaffinity"):
            try:
                old_affinity = os.sched_getaffinity(0)
                os.sched_setaffinity(0, {min(old_affinity)})
            except OSError:
                old_affinity = None
        yield
    finally:
        if old_affinity is not None:
            with contextlib.suppress(OSError):
                os.sched_setaffinity(0, old_affinity)
        if fd is not None:
            os.close(fd)
            with contextlib.suppress(FileNotFoundError):
                os.unlink(lock_path)
        _GUARD.release()


@dataclass
class SelfTestResult:
    median_ns: float
    p5_ns: float
    p95_ns: float
    jitter_budget_ns: float
    resolution_ns: float
    noisy: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def wallclock_self_test(samples: int = 2000, jitter_budget_ns: float = 2000.0) -> SelfTestResult:
    """Time an empty call; flag the host NOISY if p95 - p5 exceeds the budget."""
    clock = time.perf_counter_ns

    def noop():
        return None

    vals = np.empty(samples, dtype=np.float64)
    for i in range(samples):
        t1 = clock()
        noop()
        vals[i] = clock() - t1
    p5, med, p95 = np.percentile(vals, [5, 50, 95])
    return SelfTestResult(float(med), float(p5), float(p95), float(jitter_budget_ns),
                          clock_resolution_ns(), bool(p95 - p5 > jitter_budget_ns))
