"""Wall-clock scaling sweeps for spatial-mixing operators and log-log fits.

Two operators are timed on a ``1 x H x W x C`` map:

``mix-shift``
    The dual-branch regional operator with the default Tiny-stage settings
    (S=5, d=0..4, r=1,1,3,5,7).  Cost is linear in the token count.
``global-mix``
    Dense token mixing ``out[:, c] = W @ x[:, c]`` with an ``HW x HW`` weight.
    A full weight is ``(HW)^2`` floats (about 10 GB at 224x224 in float32), so
    the weight is stored as one ``tile x HW`` row block that is reused for
    every block of output rows.  Every output row still costs ``HW * C``
    multiply-accumulates, so the work is exactly ``(HW)^2 C``.
"""

from __future__ import annotations

import csv
import io
import math
import statistics
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .flops import ComplexityQuery, complexity_formula, mixshift_macs
from .mixshift import MixShiftSpec, init_params, mix_shift_forward
from .tensor import Tensor

OPERATORS = ("mix-shift", "global-mix")
BENCH_SPEC = MixShiftSpec(S=5, d=(0, 1, 2, 3, 4), r=(1, 1, 3, 5, 7))
GLOBAL_TILE = 1024
CSV_FIELDS = ("op", "h", "w", "c", "reps", "median_s", "macs")


@dataclass(frozen=True)
class ScalingRecord:
    op: str
    h: int
    w: int
    c: int
    reps: int
    median_s: float
    macs: int

    def __post_init__(self):
        if self.reps < 3:
            raise ValueError("at least 3 repetitions are required")
        if not self.median_s > 0:
            raise ValueError("median time must be positive")

    @property
    def tokens(self) -> int:
        return self.h * self.w


@dataclass(frozen=True)
class FitResult:
    slope: float
    intercept: float
    r2: float


def parse_sizes(text: str) -> list[tuple[int, int]]:
    """``"28x28,56x56"`` -> ``[(28, 28), (56, 56)]``."""
    sizes = []
    for part in text.split(","):
        part = part.strip().lower()
        if not part:
            continue
        h, sep, w = part.partition("x")
        if not sep:
            raise ValueError(f"size {part!r} is not of the form HxW")
        sizes.append((int(h), int(w)))
    if not sizes:
        raise ValueError("no sizes given")
    return sizes


def _mix_shift_runner(h, w, c, rng, dtype) -> tuple[Callable[[], object], int]:
    params = init_params(BENCH_SPEC, c, rng, dtype=dtype)
    x = Tensor(rng.standard_normal((1, h, w, c)).astype(dtype))
    return (lambda: mix_shift_forward(x, BENCH_SPEC, params)), mixshift_macs(BENCH_SPEC, h, w, c)


def _global_mix_runner(h, w, c, rng, dtype, tile=GLOBAL_TILE) -> tuple[Callable[[], object], int]:
    n = h * w
    tile = min(tile, n)
    weight = (rng.standard_normal((tile, n)) / math.sqrt(n)).astype(dtype)
    x = rng.standard_normal((n, c)).astype(dtype)
    out = np.empty((n, c), dtype=dtype)

    def run():
        for start in range(0, n, tile):
            stop = min(start + tile, n)
            np.matmul(weight[:stop - start], x, out=out[start:stop])
        return out

    return run, complexity_formula(ComplexityQuery("global-mix", H=h, W=w, C=c))


_RUNNERS = {"mix-shift": _mix_shift_runner, "global-mix": _global_mix_runner}


def run_scaling_sweep(operator: str, sizes: Sequence[tuple[int, int]], channels: int = 96, reps: int = 5,
                      seed: int = 0, dtype=np.float32) -> list[ScalingRecord]:
    """Median-of-``reps`` wall time per size, after one untimed warm-up call."""
    if operator not in _RUNNERS:
        raise ValueError(f"unknown operator {operator!r}; choose from {', '.join(OPERATORS)}")
    if reps < 3:
        raise ValueError("at least 3 repetitions are required")
    sizes = [(int(h), int(w)) for h, w in sizes]
    if len(set(sizes)) != len(sizes):
        raise ValueError("sizes must be distinct")
    records = []
    for h, w in sizes:
        rng = np.random.default_rng(seed)
        run, macs = _RUNNERS[operator](h, w, channels, rng, dtype)
        run()  # warm-up
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            run()
            times.append(time.perf_counter() - t0)
        records.append(ScalingRecord(operator, h, w, channels, reps, statistics.median(times), int(macs)))
    return records


def fit_scaling(records: Iterable[ScalingRecord]) -> FitResult:
    """Least-squares line through ``(log HW, log median_s)``."""
    records = list(records)
    if len(records) < 4:
        raise ValueError("need at least 4 records to fit")
    x = np.log([r.tokens for r in records])
    y = np.log([r.median_s for r in records])
    if np.ptp(x) == 0:
        raise ValueError("all records have the same token count")
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return FitResult(float(slope), float(intercept), r2)


def records_to_csv(records: Iterable[ScalingRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in records:
        w.writerow([r.op, r.h, r.w, r.c, r.reps, repr(r.median_s), r.macs])
    return buf.getvalue()


def records_from_csv(text: str) -> list[ScalingRecord]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_FIELDS:
        raise ValueError(f"expected header {','.join(CSV_FIELDS)}")
    out = []
    for row in reader:
        out.append(ScalingRecord(
            op=row["op"], h=int(row["h"]), w=int(row["w"]), c=int(row["c"]), reps=int(row["reps"]),
            median_s=float(row["median_s"]), macs=int(row["macs"]),
        ))
    return out
