"""Inference latency and throughput measurement.

Protocol: warm up, then time single-sample calls (default 300) for latency
and fixed-size batches (default 100 x 32) for throughput. Timings stop at an
explicit synchronization point so device-side work is included. Every raw
duration is kept (and can be written one-per-line), so the summary is
recomputable bit-exactly from the log.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import torch

logger = logging.getLogger(__name__)

DEFAULT_LATENCY_SAMPLES = 300
DEFAULT_THROUGHPUT_BATCHES = 100
DEFAULT_BATCH_SIZE = 32
DEFAULT_WARMUP = 10


def default_synchronize() -> None:
    if torch.cuda.is_available():  # pragma: no cover - CPU-only CI
        torch.cuda.synchronize()


def summarize(durations_s) -> dict:
    """Mean/std over raw durations; the single source for report numbers."""
    n = len(durations_s)
    if n == 0:
        raise ValueError("no durations recorded")
    mean = sum(durations_s) / n
    var = sum((d - mean) ** 2 for d in durations_s) / n
    return {"n": n, "mean_s": mean, "std_s": math.sqrt(var)}


def write_timing_log(durations_s, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in durations_s:
            fh.write(repr(d) + "\n")


def read_timing_log(path: str) -> list[float]:
    with open(path, encoding="utf-8") as fh:
        return [float(line) for line in fh if line.strip()]


@dataclass
class LatencyReport:
    name: str
    durations_s: list[float]
    requested: int
    warmup: int

    @property
    def n(self) -> int:
        return len(self.durations_s)

    @property
    def mean_ms(self) -> float:
        return summarize(self.durations_s)["mean_s"] * 1000.0

    @property
    def std_ms(self) -> float:
        return summarize(self.durations_s)["std_s"] * 1000.0

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": "latency",
            "n": self.n,
            "requested": self.requested,
            "warmup": self.warmup,
            "mean_ms": self.mean_ms,
            "std_ms": self.std_ms,
        }


@dataclass
class ThroughputReport:
    name: str
    durations_s: list[float]
    batch_size: int
    requested_batches: int
    warmup: int

    @property
    def n_batches(self) -> int:
        return len(self.durations_s)

    @property
    def per_batch_throughput(self) -> list[float]:
        return [self.batch_size / d for d in self.durations_s]

    @property
    def mean_samples_per_s(self) -> float:
        rates = self.per_batch_throughput
        return sum(rates) / len(rates)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": "throughput",
            "n_batches": self.n_batches,
            "requested_batches": self.requested_batches,
            "batch_size": self.batch_size,
            "warmup": self.warmup,
            "mean_samples_per_s": self.mean_samples_per_s,
        }


def _timed_calls(step, count: int, warmup: int, synchronize) -> list[float]:
    sync = synchronize or default_synchronize
    done = 0
    try:
        for _ in range(warmup):
            step()
            sync()
    except StopIteration:
        logger.warning("sample source exhausted during warmup")
        return []
    durations: list[float] = []
    try:
        for _ in range(count):
            start = time.perf_counter()
            step()
            sync()
            durations.append(time.perf_counter() - start)
            done += 1
    except StopIteration:
        logger.warning("sample source exhausted after %d of %d timed calls", done, count)
    return durations


def measure_latency(step, samples: int = DEFAULT_LATENCY_SAMPLES,
                    warmup: int = DEFAULT_WARMUP, synchronize=None,
                    name: str = "latency") -> LatencyReport:
    """Time `samples` single calls of step(); step may raise StopIteration early."""
    durations = _timed_calls(step, samples, warmup, synchronize)
    return LatencyReport(name, durations, samples, warmup)


def measure_throughput(step_batch, batches: int = DEFAULT_THROUGHPUT_BATCHES,
                       batch_size: int = DEFAULT_BATCH_SIZE, warmup: int = DEFAULT_WARMUP,
                       synchronize=None, name: str = "throughput") -> ThroughputReport:
    """Time `batches` calls of step_batch(), each processing batch_size samples."""
    durations = _timed_calls(step_batch, batches, warmup, synchronize)
    return ThroughputReport(name, durations, batch_size, batches, warmup)


def model_latency_step(model, ids: torch.Tensor, mask: torch.Tensor):
    """Single-sample runner cycling through the given rows."""
    state = {"i": 0}

    def step() -> None:
        i = state["i"] % ids.shape[0]
        state["i"] += 1
        with torch.no_grad():
            model(ids[i: i + 1], mask[i: i + 1])

    return step


def model_batch_step(model, ids: torch.Tensor, mask: torch.Tensor, batch_size: int):
    """Fixed-size batch runner cycling through the given rows."""
    if ids.shape[0] < batch_size:
        reps = -(-batch_size // ids.shape[0])
        ids = ids.repeat(reps, 1)
        mask = mask.repeat(reps, 1)
    state = {"i": 0}
    n = ids.shape[0]

    def step() -> None:
        lo = state["i"] % n
        state["i"] += batch_size
        take_ids = ids[lo: lo + batch_size]
        take_mask = mask[lo: lo + batch_size]
        if take_ids.shape[0] < batch_size:
            pad = batch_size - take_ids.shape[0]
            take_ids = torch.cat([take_ids, ids[:pad]])
            take_mask = torch.cat([take_mask, mask[:pad]])
        with torch.no_grad():
            model(take_ids, take_mask)

    return step
