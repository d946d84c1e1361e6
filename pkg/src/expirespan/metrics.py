"""Quality and efficiency instrumentation."""

from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import asdict, dataclass, fields
from typing import Callable, Iterable, Optional

import numpy as np

LN2 = math.log(2.0)


def bits_per_byte(nats_per_token: float) -> float:
    return nats_per_token / LN2


@dataclass
class RunMetrics:
    step: int
    task_loss: float  # nats per scored token
    span_loss: float
    bpb: float  # nan unless byte-level LM
    metric: float  # task metric: accuracy, error rate or bpb
    avg_mem: float  # mean |C_t| in entries
    peak_mem: int  # max resident bank size in entries
    ms_per_batch: float
    avg_span: float  # mean e_i in timesteps, nan in fixed-span mode
    lr: float

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> list:
        return [getattr(self, c) for c in self.columns()]


class MetricsCSV:
    """Appends RunMetrics rows; header written once per file."""

    def __init__(self, path):
        self.path = path
        with open(path, "a", newline="") as fh:
            if fh.tell() == 0:
                csv.writer(fh).writerow(RunMetrics.columns())

    def write(self, m: RunMetrics) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([repr(v) if isinstance(v, float) else v for v in m.row()])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class MemoryMeter:
    """Running memory statistics from per-block ``BlockStats``."""

    def __init__(self):
        self.blocks = 0
        self.mem_sum = 0.0
        self.peak = 0
        self.span_sum = 0.0
        self.span_n = 0

    def add(self, stats) -> None:
        self.blocks += 1
        self.mem_sum += stats.avg_mem
        self.peak = max(self.peak, stats.peak_mem)
        if not math.isnan(stats.mean_span):
            self.span_sum += stats.mean_span
            self.span_n += 1

    def result(self) -> tuple[float, int, float]:
        avg = self.mem_sum / self.blocks if self.blocks else 0.0
        span = self.span_sum / self.span_n if self.span_n else float("nan")
        return avg, self.peak, span


def memory_stats(block_stats: Iterable) -> tuple[float, int, float]:
    """(avg_mem, peak_mem, avg_span) over a window of blocks."""
    meter = MemoryMeter()
    for s in block_stats:
        meter.add(s)
    return meter.result()


def live_memory_count(spans: np.ndarray, birth: np.ndarray, t: int, R: float) -> np.ndarray:
    """Brute-force |C_t| per stream from stored spans: #{i < t : 1 + (e_i - (t - i))/R > 0}."""
    spans = np.atleast_2d(spans)
    count = np.zeros(spans.shape[0], dtype=np.int64)
    for j, i in enumerate(birth):
        if i >= t:
            continue
        for b in range(spans.shape[0]):
            if 1.0 + (spans[b, j] - (t - i)) / R > 0.0:
                count[b] += 1
    return count


@dataclass
class Timing:
    median_ms: float
    variance: float
    samples: list


def timed_batch(thunk: Callable[[], object], k: int = 5, clock=time.perf_counter) -> Timing:
    """Median (and variance) wall time of ``k`` calls, in milliseconds."""
    if k < 1:
        raise ValueError("k must be >= 1")
    out = []
    for _ in range(k):
        t0 = clock()
        thunk()
        out.append((clock() - t0) * 1000.0)
    var = statistics.pvariance(out) if len(out) > 1 else 0.0
    return Timing(statistics.median(out), var, out)


def as_dict(m: RunMetrics) -> dict:
    return asdict(m)


def answer_accuracy(per_sample: dict, expected: dict) -> tuple[float, int]:
    """Fraction of fully observed samples whose every answer is right."""
    done = [sid for sid, (right, seen) in per_sample.items() if seen == expected.get(sid, -1)]
    if not done:
        return float("nan"), 0
    ok = sum(per_sample[sid][0] == per_sample[sid][1] for sid in done)
    return ok / len(done), len(done)


def token_error(correct: int, total: int) -> Optional[float]:
    return None if total == 0 else 1.0 - correct / total
