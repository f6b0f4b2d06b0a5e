"""Parameter registry, SPD reparameterizations, gradients, and Adam.

Gradients come from torch's reverse-mode autograd through the filter,
smoother, and scan code; :func:`finite_diff_check` is the contract test.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
import torch


class NonFiniteError(FloatingPointError):
    """A loss or gradient evaluated to inf/nan."""


class ParamVector:
    """Fixed ordered registry ``name -> shape`` for a flat parameter vector."""

    def __init__(self, shapes: Mapping[str, tuple[int, ...]]):
        self.shapes = {k: tuple(int(d) for d in v) for k, v in shapes.items()}
        self.offsets = {}
        n = 0
        for k, shape in self.shapes.items():
            size = math.prod(shape)
            self.offsets[k] = (n, n + size)
            n += size
        self.size = n

    def __contains__(self, name: str) -> bool:
        return name in self.shapes

    def __iter__(self):
        return iter(self.shapes)

    def flatten(self, params: Mapping[str, torch.Tensor]) -> torch.Tensor:
        missing = set(self.shapes) - set(params)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        return torch.cat([params[k].reshape(-1).to(torch.float64) for k in self.shapes])

    def unflatten(self, flat: torch.Tensor) -> dict[str, torch.Tensor]:
        if flat.shape != (self.size,):
            raise ValueError(f"expected a flat vector of length {self.size}, got {tuple(flat.shape)}")
        return {k: flat[a:b].reshape(self.shapes[k]) for k, (a, b) in self.offsets.items()}


# --- SPD <-> unconstrained --------------------------------------------------

def n_tril(D: int) -> int:
    return D * (D + 1) // 2


def spd_from_unconstrained(v: torch.Tensor, D: int, mode: str = "full") -> torch.Tensor:
    """Map a raw vector to an SPD matrix.

    ``full``: ``v`` holds the lower triangle of a Cholesky factor, diagonal
    stored as logs.  ``diag``: ``v`` holds log-variances.
    """
    if mode == "diag":
        return torch.diag_embed(torch.exp(v))
    rows, cols = torch.tril_indices(D, D)
    L = tril_to_chol(torch.where(rows == cols, torch.exp(v), v), D)
    return L @ L.mT


def tril_to_chol(vals: torch.Tensor, D: int) -> torch.Tensor:
    """Place a ``(..., D(D+1)/2)`` vector into lower-triangular ``(..., D, D)``."""
    rows, cols = torch.tril_indices(D, D)
    flat = vals.new_zeros(*vals.shape[:-1], D * D).index_add(-1, rows * D + cols, vals)
    return flat.reshape(*vals.shape[:-1], D, D)


def spd_to_unconstrained(S: torch.Tensor, mode: str = "full") -> torch.Tensor:
    D = S.shape[-1]
    if mode == "diag":
        return torch.log(torch.diagonal(S, dim1=-2, dim2=-1))
    L = torch.linalg.cholesky(S)
    rows, cols = torch.tril_indices(D, D)
    vals = L[..., rows, cols]
    return torch.where(rows == cols, torch.log(vals), vals)


def spd_raw_size(D: int, mode: str) -> int:
    return D if mode == "diag" else n_tril(D)


# --- gradients --------------------------------------------------------------

def loss_gradient(loss: Callable[[torch.Tensor], torch.Tensor], at: torch.Tensor) -> tuple[float, torch.Tensor]:
    """Value and reverse-mode gradient of a scalar loss of a flat vector."""
    x = at.detach().clone().requires_grad_(True)
    value = loss(x)
    if not bool(torch.isfinite(value)):
        raise NonFiniteError(f"loss evaluated to {value.item()}")
    g = torch.autograd.grad(value, x, allow_unused=True)[0] if value.requires_grad else None
    if g is None:
        g = torch.zeros_like(x)
    return float(value.detach()), g.detach()


@dataclass
class FiniteDiffReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max()) if self.rel_error.size else 0.0

    @property
    def mean_rel_error(self) -> float:
        return float(self.rel_error.mean()) if self.rel_error.size else 0.0


def finite_diff_check(
    loss: Callable[[torch.Tensor], torch.Tensor],
    at: torch.Tensor,
    step: float = 1e-5,
    floor: float = 1e-8,
) -> FiniteDiffReport:
    """Compare autograd with central differences coordinate by coordinate."""
    _, g = loss_gradient(loss, at)
    x0 = at.detach().clone()
    numeric = np.empty(x0.numel())
    with torch.no_grad():
        for i in range(x0.numel()):
            xp = x0.clone()
            xp[i] += step
            xm = x0.clone()
            xm[i] -= step
            numeric[i] = (float(loss(xp)) - float(loss(xm))) / (2 * step)
    analytic = g.numpy().astype(np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return FiniteDiffReport(analytic, numeric, np.abs(analytic - numeric) / denom)


# --- Adam -------------------------------------------------------------------

@dataclass
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    step: int = 0

    @classmethod
    def zeros_like(cls, params: torch.Tensor) -> "AdamState":
        return cls(torch.zeros_like(params), torch.zeros_like(params), 0)


def adam_step(
    state: AdamState,
    params: torch.Tensor,
    grads: torch.Tensor,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[torch.Tensor, AdamState]:
    """One bias-corrected Adam descent step; returns new params and state."""
    if params.shape != grads.shape:
        raise ValueError("params and grads differ in shape")
    if not bool(torch.isfinite(grads).all()):
        raise NonFiniteError("non-finite gradient")
    step = state.step + 1
    m = beta1 * state.m + (1 - beta1) * grads
    v = beta2 * state.v + (1 - beta2) * grads * grads
    m_hat = m / (1 - beta1 ** step)
    v_hat = v / (1 - beta2 ** step)
    new = params - lr * m_hat / (torch.sqrt(v_hat) + eps)
    return new, AdamState(m, v, step)
