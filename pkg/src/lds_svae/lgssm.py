"""Linear-Gaussian latent prior and linear emissions."""
from __future__ import annotations

from typing import NamedTuple

import torch

from .gaussian import (
    LOG_2PI,
    GaussianMoment,
    GaussianNatural,
    LinearGaussianCond,
    cholesky,
    dot,
    log_density,
    logdet_from_chol,
    mv,
    pushforward,
    symmetrize,
)


class LgssmParams(NamedTuple):
    """``x_1 ~ N(mu1, Q1)``, ``x_t | x_{t-1} ~ N(A x_{t-1} + b, Q)``."""

    mu1: torch.Tensor
    Q1: torch.Tensor
    A: torch.Tensor
    b: torch.Tensor
    Q: torch.Tensor

    @property
    def dim(self) -> int:
        return self.mu1.shape[-1]

    @property
    def transition(self) -> LinearGaussianCond:
        return LinearGaussianCond(self.A, self.b, self.Q)

    @classmethod
    def from_numpy(cls, mu1, Q1, A, b, Q) -> "LgssmParams":
        return cls(*(torch.as_tensor(v, dtype=torch.float64) for v in (mu1, Q1, A, b, Q)))


class LinearEmission(NamedTuple):
    """``y_t | x_t ~ N(C x_t + d, R)``."""

    C: torch.Tensor
    d: torch.Tensor
    R: torch.Tensor

    @classmethod
    def from_numpy(cls, C, d, R) -> "LinearEmission":
        return cls(*(torch.as_tensor(v, dtype=torch.float64) for v in (C, d, R)))


def sample_prior(theta: LgssmParams, T: int, noise: torch.Tensor) -> torch.Tensor:
    """Roll the prior forward with given standard-normal draws ``noise[..., T, D]``."""
    if noise.shape[-2] != T or noise.shape[-1] != theta.dim:
        raise ValueError(f"noise must end in ({T}, {theta.dim}), got {tuple(noise.shape)}")
    L1 = cholesky(theta.Q1, "Q1")
    L = cholesky(theta.Q, "Q")
    eps = noise.unbind(-2)
    x = theta.mu1 + mv(L1, eps[0])
    xs = [x]
    for t in range(1, T):
        x = mv(theta.A, x) + theta.b + mv(L, eps[t])
        xs.append(x)
    return torch.stack(xs, dim=-2)


def log_prior(theta: LgssmParams, x: torch.Tensor) -> torch.Tensor:
    lp = log_density(GaussianMoment(theta.mu1, theta.Q1), x[..., 0, :])
    if x.shape[-2] > 1:
        pred = mv(theta.A, x[..., :-1, :]) + theta.b
        lp = lp + log_density(GaussianMoment(pred, theta.Q), x[..., 1:, :]).sum(-1)
    return lp


def prior_marginals(theta: LgssmParams, T: int) -> GaussianMoment:
    """Marginals ``p(x_t)`` for ``t = 1..T`` stacked along axis ``-2`` / ``-3``."""
    g = GaussianMoment(theta.mu1, theta.Q1)
    means, covs = [g.mean], [g.cov]
    for _ in range(1, T):
        g = pushforward(g, theta.transition)
        means.append(g.mean)
        covs.append(g.cov)
    return GaussianMoment(torch.stack(means, -2), torch.stack(covs, -3))


def emission_potentials(emission: LinearEmission, y: torch.Tensor) -> GaussianNatural:
    """Exact likelihoods ``N(y_t; C x + d, R)`` viewed as factors in ``x_t``."""
    LR = cholesky(emission.R, "R")
    N = emission.R.shape[-1]
    Rinv_C = torch.cholesky_solve(emission.C, LR)
    r = y - emission.d
    Rinv_r = torch.cholesky_solve(r.unsqueeze(-1), LR).squeeze(-1)
    J = symmetrize(emission.C.mT @ Rinv_C)
    J = J.expand(*y.shape[:-1], *J.shape[-2:])
    h = mv(emission.C.mT, Rinv_r)
    log_norm = -0.5 * dot(r, Rinv_r) - 0.5 * logdet_from_chol(LR) - 0.5 * N * LOG_2PI
    return GaussianNatural(h, J, log_norm)


def exact_mll(theta: LgssmParams, emission: LinearEmission, y: torch.Tensor) -> torch.Tensor:
    """``log p(y_{1:T})`` under the linear-Gaussian model, by Kalman filtering."""
    from .inference import kalman_filter

    return kalman_filter(theta, emission_potentials(emission, y)).log_normalizer


def null_model_mll(theta: LgssmParams, emission: LinearEmission, y: torch.Tensor) -> torch.Tensor:
    """Log-likelihood of the static model that keeps only the per-step marginals."""
    marg = prior_marginals(theta, y.shape[-2])
    C = emission.C
    mean = mv(C, marg.mean) + emission.d
    cov = symmetrize(C @ marg.cov @ C.mT + emission.R)
    return log_density(GaussianMoment(mean, cov), y).sum(-1)
