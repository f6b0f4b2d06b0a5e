"""Wall-clock benchmark of one ELBO-gradient iteration per backend."""
from __future__ import annotations

import gc
import os
import time
from typing import NamedTuple

import numpy as np
import torch

from ..grad import loss_gradient
from ..svae.model import SvaeConfig, elbo, init_model

BACKEND_ALIASES = {"seq": "sequential", "sequential": "sequential", "par": "parallel", "parallel": "parallel"}


class BenchRow(NamedTuple):
    T: int
    backend: str
    median_s: float
    min_s: float
    max_s: float
    reps: int
    loss: float
    grad_norm: float


class BenchResult(NamedTuple):
    rows: list[BenchRow]
    cores: int
    threads: int
    batch: int

    def row(self, T: int, backend: str) -> BenchRow:
        return next(r for r in self.rows if r.T == T and r.backend == backend)


def available_cores() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def benchmark_runtime(
    lengths,
    backends=("sequential", "parallel"),
    reps: int = 3,
    warmup: int = 1,
    batch: int = 10,
    D: int = 3,
    N: int = 5,
    seed: int = 0,
    threads: int | None = None,
) -> BenchResult:
    """Median seconds per full ELBO-gradient iteration on a batch of sequences.

    Backends run interleaved within each repetition; warm-up passes are not
    timed, and garbage collection is paused while a pass is timed.  Losses
    are recorded so backends can be checked for agreement.
    """
    backends = [BACKEND_ALIASES[b] for b in backends]
    rng = np.random.default_rng(seed)
    model = init_model(SvaeConfig(D, N), rng)
    flat = model.flat()
    rows = []
    for T in lengths:
        y = torch.from_numpy(rng.standard_normal((batch, T, N)))
        times: dict[str, list[float]] = {b: [] for b in backends}
        results: dict[str, tuple[float, float]] = {}
        for rep in range(warmup + reps):
            for b in backends:
                def loss(x, b=b):
                    return -elbo(model.with_flat(x), y, backend=b, threads=threads).elbo.mean() / (T * N)

                # as in timeit: the cyclic collector's cost grows with the
                # autograd graph and would make long sequences look superlinear
                gc.collect()
                gc.disable()
                try:
                    t0 = time.perf_counter()
                    value, g = loss_gradient(loss, flat)
                    dt = time.perf_counter() - t0
                finally:
                    gc.enable()
                if rep >= warmup:
                    times[b].append(dt)
                results[b] = (value, float(g.norm()))
        for b in backends:
            ts = np.asarray(times[b])
            rows.append(BenchRow(T, b, float(np.median(ts)), float(ts.min()), float(ts.max()), len(ts),
                                 *results[b]))
    return BenchResult(rows, available_cores(), threads or torch.get_num_threads(), batch)
