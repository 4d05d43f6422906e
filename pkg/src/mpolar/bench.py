"""Wall-clock benchmark harness for the denoise and derive stages.

Timings cover in-memory compute only (no file I/O); warmup runs are
excluded from the statistics.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError


@dataclass
class BenchResult:
    stage: str
    shape: tuple
    repeats: int
    warmups: int
    samples_ms: list = field(default_factory=list)

    @property
    def mean_ms(self) -> float:
        return float(np.mean(self.samples_ms))

    @property
    def sd_ms(self) -> float:
        if len(self.samples_ms) < 2:
            return 0.0
        return float(np.std(self.samples_ms, ddof=1))

    def to_record(self) -> dict:
        return {
            "stage": self.stage,
            "shape": list(self.shape),
            "repeats": self.repeats,
            "warmups": self.warmups,
            "mean_ms": self.mean_ms,
            "sd_ms": self.sd_ms,
            "samples": self.samples_ms,
        }


def time_stage(stage: str, fn, shape, repeats: int = 30, warmups: int = 3) -> BenchResult:
    """Run fn() repeats times after warmups; record per-run milliseconds."""
    if repeats < 1 or warmups < 0:
        raise ParameterError("repeats must be >= 1 and warmups >= 0")
    for _ in range(warmups):
        fn()
    result = BenchResult(stage=stage, shape=tuple(shape), repeats=repeats, warmups=warmups)
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        elapsed = time.perf_counter() - start
        result.samples_ms.append(elapsed * 1000.0)
    return result
