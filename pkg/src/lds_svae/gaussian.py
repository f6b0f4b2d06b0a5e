"""Dense multivariate Gaussian algebra in moment and information form.

All containers hold ``torch`` tensors and broadcast over arbitrary leading
batch dimensions: a vector field has shape ``(..., D)`` and a matrix field
``(..., D, D)``.  A :class:`GaussianNatural` with ``diag=True`` stores its
precision as the vector of diagonal entries ``(..., D)``.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import torch

LOG_2PI = math.log(2.0 * math.pi)


class DegenerateCovarianceError(ValueError):
    """A covariance (or precision) matrix failed its Cholesky factorization."""


class CannotNormalizeError(DegenerateCovarianceError):
    """An improper factor (singular precision) was asked for its moments."""


class GaussianMoment(NamedTuple):
    mean: torch.Tensor
    cov: torch.Tensor


class GaussianNatural(NamedTuple):
    """Factor ``exp(-x'Jx/2 + h'x + log_norm)``."""

    h: torch.Tensor
    J: torch.Tensor
    log_norm: torch.Tensor
    diag: bool = False

    @property
    def dim(self) -> int:
        return self.h.shape[-1]

    def dense(self) -> "GaussianNatural":
        """Return the same factor with a full precision matrix."""
        if not self.diag:
            return self
        return GaussianNatural(self.h, torch.diag_embed(self.J), self.log_norm)


class LinearGaussianCond(NamedTuple):
    """Conditional ``N(y; A x + b, Q)``."""

    A: torch.Tensor
    b: torch.Tensor
    Q: torch.Tensor


def symmetrize(M: torch.Tensor) -> torch.Tensor:
    return 0.5 * (M + M.mT)


def eye_like(M: torch.Tensor) -> torch.Tensor:
    return torch.eye(M.shape[-1], dtype=M.dtype, device=M.device)


def mv(M: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    return (M @ v.unsqueeze(-1)).squeeze(-1)


def dot(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    return (u * v).sum(-1)


def cholesky(M: torch.Tensor, what: str = "covariance") -> torch.Tensor:
    """Lower Cholesky factor, raising :class:`DegenerateCovarianceError` on failure."""
    L, info = torch.linalg.cholesky_ex(M)
    if bool((info > 0).any()):
        raise DegenerateCovarianceError(f"{what} is not positive definite")
    return L


def logdet_from_chol(L: torch.Tensor) -> torch.Tensor:
    return 2.0 * torch.log(torch.diagonal(L, dim1=-2, dim2=-1)).sum(-1)


def zeros_natural(shape: tuple[int, ...], D: int, dtype=torch.float64, diag: bool = False) -> GaussianNatural:
    """The uninformative (masked) factor: ``h = 0, J = 0, log_norm = 0``."""
    J_shape = (*shape, D) if diag else (*shape, D, D)
    return GaussianNatural(
        torch.zeros(*shape, D, dtype=dtype),
        torch.zeros(J_shape, dtype=dtype),
        torch.zeros(shape, dtype=dtype),
        diag,
    )


def to_natural(g: GaussianMoment) -> GaussianNatural:
    L = cholesky(g.cov)
    J = symmetrize(torch.cholesky_inverse(L))
    h = mv(J, g.mean)
    D = g.mean.shape[-1]
    log_norm = -0.5 * dot(h, g.mean) - 0.5 * logdet_from_chol(L) - 0.5 * D * LOG_2PI
    return GaussianNatural(h, J, log_norm)


def to_moment(n: GaussianNatural) -> GaussianMoment:
    if n.diag:
        if bool((n.J <= 0).any()):
            raise CannotNormalizeError("precision has non-positive diagonal entries")
        var = 1.0 / n.J
        return GaussianMoment(n.h * var, torch.diag_embed(var))
    try:
        L = cholesky(n.J, "precision")
    except DegenerateCovarianceError as exc:
        raise CannotNormalizeError(str(exc)) from None
    cov = symmetrize(torch.cholesky_inverse(L))
    mean = torch.cholesky_solve(n.h.unsqueeze(-1), L).squeeze(-1)
    return GaussianMoment(mean, cov)


def multiply(a: GaussianNatural, b: GaussianNatural) -> GaussianNatural:
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if a.diag and b.diag:
        return GaussianNatural(a.h + b.h, a.J + b.J, a.log_norm + b.log_norm, True)
    a, b = a.dense(), b.dense()
    return GaussianNatural(a.h + b.h, symmetrize(a.J + b.J), a.log_norm + b.log_norm)


def log_factor(n: GaussianNatural, x: torch.Tensor) -> torch.Tensor:
    """Evaluate ``-x'Jx/2 + h'x + log_norm`` at ``x``."""
    quad = dot(x, n.J * x) if n.diag else dot(x, mv(n.J, x))
    return -0.5 * quad + dot(n.h, x) + n.log_norm


def log_density(g: GaussianMoment, x: torch.Tensor) -> torch.Tensor:
    L = cholesky(g.cov)
    z = torch.linalg.solve_triangular(L, (x - g.mean).unsqueeze(-1), upper=False).squeeze(-1)
    D = x.shape[-1]
    return -0.5 * dot(z, z) - 0.5 * logdet_from_chol(L) - 0.5 * D * LOG_2PI


def pushforward(p: GaussianMoment, cond: LinearGaussianCond) -> GaussianMoment:
    if cond.A.shape[-1] != p.mean.shape[-1]:
        raise ValueError(f"shape mismatch: A is {tuple(cond.A.shape)}, mean has dim {p.mean.shape[-1]}")
    mean = mv(cond.A, p.mean) + cond.b
    cov = symmetrize(cond.A @ p.cov @ cond.A.mT + cond.Q)
    return GaussianMoment(mean, cov)


def kl_moment(p: GaussianMoment, q: GaussianMoment) -> torch.Tensor:
    """``KL(p || q)`` for two Gaussians of equal dimension."""
    if p.mean.shape[-1] != q.mean.shape[-1]:
        raise ValueError("dimension mismatch")
    Lp = cholesky(p.cov)
    Lq = cholesky(q.cov)
    D = p.mean.shape[-1]
    M = torch.linalg.solve_triangular(Lq, Lp, upper=False)
    z = torch.linalg.solve_triangular(Lq, (q.mean - p.mean).unsqueeze(-1), upper=False).squeeze(-1)
    trace = (M * M).sum((-2, -1))
    return 0.5 * (trace + dot(z, z) - D + logdet_from_chol(Lq) - logdet_from_chol(Lp))


def expected_log_factor(factor: GaussianNatural, under: GaussianMoment) -> torch.Tensor:
    """``E[log factor(x)]`` for ``x ~ under``, in closed form."""
    if factor.dim != under.mean.shape[-1]:
        raise ValueError("shape mismatch between factor and distribution")
    m, S = under.mean, under.cov
    if factor.diag:
        quad = (factor.J * (torch.diagonal(S, dim1=-2, dim2=-1) + m * m)).sum(-1)
    else:
        second = S + m.unsqueeze(-1) * m.unsqueeze(-2)
        quad = (factor.J * second).sum((-2, -1))
    return -0.5 * quad + dot(factor.h, m) + factor.log_norm


def sample(g: GaussianMoment, noise: torch.Tensor) -> torch.Tensor:
    """Reparameterized draw ``mean + chol(cov) @ noise``."""
    return g.mean + mv(cholesky(g.cov), noise)
