"""Parallel-in-time Gaussian message passing via associative scans.

Two scan entry points share one executor vocabulary:

* :func:`prefix_scan` works on a Python list of arbitrary elements and a
  binary operator.  The parallel executor is a chunked fork-join scan: each
  chunk (``chunk_size`` elements) is folded locally, chunk totals are scanned
  recursively, and chunk offsets are applied back in parallel.
* :func:`associative_scan` works on *stacked* elements, a tuple of tensors
  sharing a leading time axis.  The parallel executor is the balanced
  odd/even tree: every level applies all of its compositions in one
  vectorized call, for ``O(log T)`` levels.  Large levels may be split across
  a thread pool; torch kernels release the GIL.

Results never depend on the executor or thread count beyond rounding.
"""
from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, NamedTuple, Sequence, TypeVar

import torch

from .gaussian import GaussianMoment, dot, eye_like, mv, symmetrize
from .inference import (
    FilterResult,
    PosteriorResult,
    PotentialSeq,
    backward_conditionals,
)
from .lgssm import LgssmParams

E = TypeVar("E")
EXECUTORS = ("sequential", "parallel")


class CompositionCounter:
    """Thread-safe tally of element compositions performed by a scan."""

    def __init__(self) -> None:
        self.count = 0
        self._lock = threading.Lock()

    def add(self, k: int) -> None:
        with self._lock:
            self.count += k


class MargElement(NamedTuple):
    """Linear-Gaussian conditional ``x_j | x_{i-1} ~ N(A x + b, Q)``."""

    A: torch.Tensor
    b: torch.Tensor
    Q: torch.Tensor


# The backward conditionals x_t | x_{t+1} compose exactly like forward ones.
SmoothElement = MargElement


class FilterElement(NamedTuple):
    """Conditional of ``x_j`` given ``x_{i-1}`` and potentials ``psi_{i..j}``.

    ``x_j | x_{i-1} ~ N(F x + c, C)`` together with the mass of the potentials
    as a function of ``x_{i-1}``: ``exp(logw + eta'x - x'Jx/2)``.
    """

    F: torch.Tensor
    c: torch.Tensor
    C: torch.Tensor
    eta: torch.Tensor
    J: torch.Tensor
    logw: torch.Tensor


def marg_compose(ai: MargElement, aj: MargElement) -> MargElement:
    if ai.A.shape[-1] != aj.A.shape[-1] or ai.b.shape[-1] != aj.b.shape[-1]:
        raise ValueError("element shapes do not match")
    return MargElement(
        aj.A @ ai.A,
        mv(aj.A, ai.b) + aj.b,
        symmetrize(aj.A @ ai.Q @ aj.A.mT + aj.Q),
    )


def filter_compose(ei: FilterElement, ej: FilterElement) -> FilterElement:
    I = eye_like(ei.C)
    # (I + C_i J_j)^{-1} [F_i | c_i + C_i eta_j | C_i]
    S = I + ei.C @ ej.J
    D = ei.F.shape[-1]
    rhs = torch.cat([ei.F, (ei.c + mv(ei.C, ej.eta)).unsqueeze(-1), ei.C], -1)
    X = torch.linalg.solve(S, rhs)
    XF, Xc, XC = X[..., :D], X[..., D], X[..., D + 1:]
    # (I + J_j C_i)^{-1} = S^{-T}
    u = ej.eta - mv(ej.J, ei.c)
    Y = torch.linalg.solve(S.mT, torch.cat([u.unsqueeze(-1), ej.J @ ei.F], -1))
    v, YJ = Y[..., 0], Y[..., 1:]
    logw = (
        ei.logw
        + ej.logw
        + dot(ej.eta, ei.c)
        - 0.5 * dot(ei.c, mv(ej.J, ei.c))
        + 0.5 * dot(mv(ei.C, u), v)
        - 0.5 * torch.linalg.slogdet(S)[1]
    )
    return FilterElement(
        ej.F @ XF,
        mv(ej.F, Xc) + ej.c,
        symmetrize(ej.F @ XC @ ej.F.mT + ej.C),
        mv(ei.F.mT, v) + ei.eta,
        symmetrize(ei.F.mT @ YJ) + ei.J,
        logw,
    )


# ---------------------------------------------------------------------------
# generic list scan


def _fold(elements: Sequence[E], compose: Callable[[E, E], E], counter) -> list[E]:
    out = [elements[0]]
    for e in elements[1:]:
        out.append(compose(out[-1], e))
    if counter is not None:
        counter.add(len(elements) - 1)
    return out


def prefix_scan(
    elements: Sequence[E],
    compose: Callable[[E, E], E],
    executor: str = "sequential",
    *,
    chunk_size: int = 32,
    threads: int | None = None,
    counter: CompositionCounter | None = None,
) -> list[E]:
    """Inclusive scan: ``out[t] = e_1 (x) ... (x) e_t``."""
    if len(elements) == 0:
        raise ValueError("cannot scan an empty sequence")
    if executor == "sequential":
        return _fold(list(elements), compose, counter)
    if executor != "parallel":
        raise ValueError(f"unknown executor {executor!r}")
    if chunk_size < 2:
        raise ValueError("chunk_size must be at least 2")
    with ThreadPoolExecutor(max_workers=threads or 1) as pool:
        return _chunked_scan(list(elements), compose, chunk_size, pool, counter)


def _chunked_scan(elements, compose, chunk_size, pool, counter):
    n = len(elements)
    if n <= chunk_size:
        return _fold(elements, compose, counter)
    chunks = [elements[i:i + chunk_size] for i in range(0, n, chunk_size)]
    local = list(pool.map(lambda c: _fold(c, compose, counter), chunks))
    carries = _chunked_scan([c[-1] for c in local[:-1]], compose, chunk_size, pool, counter)

    def fix(k):
        # a chunk's last prefix is already known from the carry scan
        body = local[k] if k == len(local) - 1 else local[k][:-1]
        out = [compose(carries[k - 1], e) for e in body]
        if counter is not None:
            counter.add(len(out))
        return out if k == len(local) - 1 else out + [carries[k]]

    fixed = list(pool.map(fix, range(1, len(local))))
    return [e for chunk in [local[0], *fixed] for e in chunk]


# ---------------------------------------------------------------------------
# stacked (vectorized) scan


def _tmap(fn, elems):
    return type(elems)(*(fn(x) for x in elems))


class _Applier:
    def __init__(self, compose, threads: int | None, counter, min_split: int = 256):
        self.compose = compose
        self.threads = threads or 1
        self.counter = counter
        self.min_split = min_split
        self.pool = ThreadPoolExecutor(max_workers=self.threads) if self.threads > 1 else None

    def __call__(self, left, right):
        n = left[0].shape[0]
        if self.counter is not None:
            self.counter.add(n)
        if self.pool is None or n < self.min_split:
            return self.compose(left, right)
        bounds = [round(k * n / self.threads) for k in range(self.threads + 1)]
        parts = [(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
        futures = [
            self.pool.submit(self.compose, _tmap(lambda x: x[a:b], left), _tmap(lambda x: x[a:b], right))
            for a, b in parts
        ]
        done = [f.result() for f in futures]
        return type(left)(*(torch.cat(xs, 0) for xs in zip(*done)))

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def _tree_scan(apply, elems):
    n = elems[0].shape[0]
    if n < 2:
        return elems
    reduced = apply(_tmap(lambda x: x[0:-1:2], elems), _tmap(lambda x: x[1::2], elems))
    odd = _tree_scan(apply, reduced)
    if n % 2 == 0:
        even = apply(_tmap(lambda x: x[:-1], odd), _tmap(lambda x: x[2::2], elems))
    else:
        even = apply(odd, _tmap(lambda x: x[2::2], elems))
    even = _tmap2(lambda e0, e: torch.cat([e0[:1], e], 0), elems, even)

    def interleave(e, o):
        paired = torch.stack([e[: o.shape[0]], o], 1).flatten(0, 1)
        return torch.cat([paired, e[o.shape[0]:]], 0)

    return _tmap2(interleave, even, odd)


def _tmap2(fn, a, b):
    return type(a)(*(fn(x, y) for x, y in zip(a, b)))


def associative_scan(
    compose: Callable,
    elems,
    executor: str = "parallel",
    *,
    reverse: bool = False,
    threads: int | None = None,
    counter: CompositionCounter | None = None,
):
    """Inclusive scan over a tuple of tensors stacked along axis 0.

    ``compose(a, b)`` must broadcast over leading axes.  With ``reverse=True``
    the scan runs from the last element backwards, so ``out[t]`` composes
    ``e_T, e_{T-1}, ..., e_t`` in that order.
    """
    n = elems[0].shape[0]
    if n == 0:
        raise ValueError("cannot scan an empty sequence")
    if reverse:
        elems = _tmap(lambda x: torch.flip(x, (0,)), elems)
    if executor == "sequential":
        steps = list(zip(*(x.unbind(0) for x in elems)))
        acc = type(elems)(*steps[0])
        outs = [acc]
        for t in range(1, n):
            acc = compose(acc, type(elems)(*steps[t]))
            outs.append(acc)
        if counter is not None:
            counter.add(n - 1)
        result = type(elems)(*(torch.stack(xs, 0) for xs in zip(*outs)))
    elif executor == "parallel":
        apply = _Applier(compose, threads, counter)
        try:
            result = _tree_scan(apply, elems)
        finally:
            apply.close()
    else:
        raise ValueError(f"unknown executor {executor!r}")
    if reverse:
        result = _tmap(lambda x: torch.flip(x, (0,)), result)
    return result


def _time_first(x: torch.Tensor, event_dims: int) -> torch.Tensor:
    return torch.movedim(x, -1 - event_dims, 0)


def _time_last(x: torch.Tensor, event_dims: int) -> torch.Tensor:
    return torch.movedim(x, 0, -1 - event_dims)


# ---------------------------------------------------------------------------
# model-level scans


def marginals_chain(theta: LgssmParams, T: int, executor: str = "parallel", threads: int | None = None) -> GaussianMoment:
    """Prior marginals ``p(x_t)`` read off the prefixes of the marginalization scan."""
    if T < 1:
        raise ValueError("T must be at least 1")
    D = theta.dim
    A = torch.cat([torch.zeros_like(theta.A)[None], theta.A.expand(T - 1, D, D)], 0)
    b = torch.cat([theta.mu1[None], theta.b.expand(T - 1, D)], 0)
    Q = torch.cat([theta.Q1[None], theta.Q.expand(T - 1, D, D)], 0)
    out = associative_scan(marg_compose, MargElement(A, b, Q), executor, threads=threads)
    return GaussianMoment(out.b, out.Q)


def filter_elements(theta: LgssmParams, psi: PotentialSeq) -> FilterElement:
    """Per-step elements, time-first; the first folds in ``p(x_1)`` and ``psi_1``."""
    psi = psi.dense()
    h = _time_first(psi.h, 1)
    Jp = _time_first(psi.J, 2)
    cp = _time_first(psi.log_norm, 0)
    T, batch, D = h.shape[0], h.shape[1:-1], h.shape[-1]
    dtype = h.dtype
    zeros_m = torch.zeros(T, *batch, D, D, dtype=dtype)
    zeros_v = torch.zeros(T, *batch, D, dtype=dtype)
    eye = torch.eye(D, dtype=dtype).expand(T, *batch, D, D)

    A = torch.cat([torch.zeros_like(theta.A)[None], theta.A.expand(T - 1, D, D)], 0)
    b = torch.cat([theta.mu1[None], theta.b.expand(T - 1, D)], 0)
    Q = torch.cat([theta.Q1[None], theta.Q.expand(T - 1, D, D)], 0)
    shape_m = (T, *batch, D, D)
    prior = FilterElement(
        _expand_time(A, shape_m),
        _expand_time(b, (T, *batch, D)),
        _expand_time(Q, shape_m),
        zeros_v,
        zeros_m,
        torch.zeros(T, *batch, dtype=dtype),
    )
    potential = FilterElement(eye, zeros_v, zeros_m, h, Jp, cp)
    return filter_compose(prior, potential)


def _expand_time(x: torch.Tensor, shape) -> torch.Tensor:
    # x has shape (T, *event); insert batch axes after time
    T, event = x.shape[0], x.shape[1:]
    n_batch = len(shape) - 1 - len(event)
    return x.reshape(T, *([1] * n_batch), *event).expand(shape)


def parallel_filter(
    theta: LgssmParams,
    psi: PotentialSeq,
    executor: str = "parallel",
    threads: int | None = None,
) -> FilterResult:
    if psi.h.shape[-2] < 1:
        raise ValueError("need at least one time step")
    if psi.dim != theta.dim:
        raise ValueError(f"potential dim {psi.dim} does not match latent dim {theta.dim}")
    elems = filter_elements(theta, psi)
    out = associative_scan(filter_compose, elems, executor, threads=threads)
    fm = _time_last(out.c, 1)
    fc = _time_last(out.C, 2)
    log_z = out.logw[-1]
    batch = fm.shape[:-2]
    D = theta.dim
    pm = torch.cat([theta.mu1.expand(*batch, 1, D), mv(theta.A, fm[..., :-1, :]) + theta.b], -2)
    pc = torch.cat([
        theta.Q1.expand(*batch, 1, D, D),
        symmetrize(theta.A @ fc[..., :-1, :, :] @ theta.A.mT + theta.Q),
    ], -3)
    return FilterResult(GaussianMoment(pm, pc), GaussianMoment(fm, fc), log_z)


def parallel_smooth(
    theta: LgssmParams,
    fr: FilterResult,
    executor: str = "parallel",
    threads: int | None = None,
) -> PosteriorResult:
    E, g, S = backward_conditionals(theta, fr)
    elems = SmoothElement(_time_first(E, 2), _time_first(g, 1), _time_first(S, 2))
    out = associative_scan(marg_compose, elems, executor, reverse=True, threads=threads)
    smoothed = GaussianMoment(_time_last(out.b, 1), _time_last(out.Q, 2))
    G = E[..., :-1, :, :]
    cross = G @ smoothed.cov[..., 1:, :, :]
    return PosteriorResult(smoothed, G, cross, fr.log_normalizer)


def parallel_sample(
    theta: LgssmParams,
    fr: FilterResult,
    noise: torch.Tensor,
    executor: str = "parallel",
    threads: int | None = None,
) -> torch.Tensor:
    """Backward sampling as a reverse scan of affine maps; same law as ``ffbs_sample``."""
    from .gaussian import cholesky

    E, g, S = backward_conditionals(theta, fr)
    offsets = g + mv(cholesky(S, "backward conditional covariance"), noise)
    E = E.expand(*offsets.shape, offsets.shape[-1])
    T = offsets.shape[-2]
    # the affine maps carry no covariance; a per-step placeholder keeps the element shape
    elems = MargElement(_time_first(E, 2), _time_first(offsets, 1), torch.zeros(T, dtype=offsets.dtype))
    out = associative_scan(_affine_compose, elems, executor, reverse=True, threads=threads)
    return _time_last(out.b, 1)


def _affine_compose(ai: MargElement, aj: MargElement) -> MargElement:
    return MargElement(aj.A @ ai.A, mv(aj.A, ai.b) + aj.b, ai.Q)
