"""Sequential exact inference against conjugate Gaussian potentials.

A potential sequence is a :class:`~lds_svae.gaussian.GaussianNatural` whose
fields carry a time axis just before the event dimensions, i.e. ``h`` is
``(..., T, D)``.  Masked steps are zero factors and need no special casing.
"""
from __future__ import annotations

from typing import NamedTuple

import torch

from .gaussian import (
    DegenerateCovarianceError,
    GaussianMoment,
    GaussianNatural,
    cholesky,
    dot,
    expected_log_factor,
    eye_like,
    mv,
    symmetrize,
)
from .lgssm import LgssmParams

PotentialSeq = GaussianNatural


class FilterResult(NamedTuple):
    predicted: GaussianMoment
    filtered: GaussianMoment
    log_normalizer: torch.Tensor


class PosteriorResult(NamedTuple):
    smoothed: GaussianMoment
    gains: torch.Tensor
    cross_cov: torch.Tensor
    log_normalizer: torch.Tensor


def masked_potentials(psi: PotentialSeq, mask: torch.Tensor) -> PotentialSeq:
    """Zero out potentials where ``mask`` (shape ``(..., T)``) is false."""
    w = mask.to(psi.h.dtype)
    J_w = w[..., None] if psi.diag else w[..., None, None]
    return GaussianNatural(psi.h * w[..., None], psi.J * J_w, psi.log_norm * w, psi.diag)


def condition(pred: GaussianMoment, psi: GaussianNatural) -> tuple[GaussianMoment, torch.Tensor]:
    """Multiply a Gaussian by a factor; return the normalized result and its log mass.

    Uses ``P_f = L (I + L'JL)^{-1} L'`` with ``P = LL'`` so a zero factor
    passes ``pred`` through unchanged.
    """
    psi = psi.dense()
    m, P = pred
    L = cholesky(P, "predicted covariance")
    M = symmetrize(eye_like(P) + L.mT @ psi.J @ L)
    Lm, info = torch.linalg.cholesky_ex(M)
    if bool((info > 0).any()):
        raise DegenerateCovarianceError("degenerate update: I + L'JL is not positive definite")
    W = torch.linalg.solve_triangular(Lm, L.mT, upper=False)
    P_f = symmetrize(W.mT @ W)
    u = psi.h - mv(psi.J, m)
    m_f = m + mv(P_f, u)
    log_z = (
        psi.log_norm
        + dot(psi.h, m)
        - 0.5 * dot(m, mv(psi.J, m))
        + 0.5 * dot(u, mv(P_f, u))
        - torch.log(torch.diagonal(Lm, dim1=-2, dim2=-1)).sum(-1)
    )
    return GaussianMoment(m_f, P_f), log_z


def _batch_shape(psi: PotentialSeq) -> torch.Size:
    return psi.h.shape[:-2]


def kalman_filter(theta: LgssmParams, psi: PotentialSeq) -> FilterResult:
    T = psi.h.shape[-2]
    if T < 1:
        raise ValueError("need at least one time step")
    if psi.dim != theta.dim:
        raise ValueError(f"potential dim {psi.dim} does not match latent dim {theta.dim}")
    psi = psi.dense()
    batch = _batch_shape(psi)
    D = theta.dim
    pred = GaussianMoment(theta.mu1.expand(*batch, D), theta.Q1.expand(*batch, D, D))
    pm, pc, fm, fc = [], [], [], []
    log_z = torch.zeros(batch, dtype=psi.h.dtype)
    # unbind, not indexing: per-step index backward would be O(T) each
    steps = zip(psi.h.unbind(-2), psi.J.unbind(-3), psi.log_norm.unbind(-1))
    for t, (h_t, J_t, c_t) in enumerate(steps):
        if t > 0:
            pred = GaussianMoment(mv(theta.A, filt.mean) + theta.b,
                                  symmetrize(theta.A @ filt.cov @ theta.A.mT + theta.Q))
        filt, lz = condition(pred, GaussianNatural(h_t, J_t, c_t))
        log_z = log_z + lz
        pm.append(pred.mean)
        pc.append(pred.cov)
        fm.append(filt.mean)
        fc.append(filt.cov)
    return FilterResult(
        GaussianMoment(torch.stack(pm, -2), torch.stack(pc, -3)),
        GaussianMoment(torch.stack(fm, -2), torch.stack(fc, -3)),
        log_z,
    )


def smoother_gains(theta: LgssmParams, fr: FilterResult) -> torch.Tensor:
    """``G_t = P^f_t A' (P^p_{t+1})^{-1}`` for ``t = 1..T-1``, computed in one batch."""
    Pf = fr.filtered.cov[..., :-1, :, :]
    Pp = fr.predicted.cov[..., 1:, :, :]
    L = cholesky(Pp, "predicted covariance")
    return torch.cholesky_solve(theta.A @ Pf, L).mT


def rts_smooth(theta: LgssmParams, fr: FilterResult) -> PosteriorResult:
    fm, fc = fr.filtered
    pm, pc = fr.predicted
    T = fm.shape[-2]
    G = smoother_gains(theta, fr)
    fm_t, fc_t = fm.unbind(-2), fc.unbind(-3)
    pm_t, pc_t, G_t = pm.unbind(-2), pc.unbind(-3), G.unbind(-3)
    ms, Ps = fm_t[-1], fc_t[-1]
    means, covs = [ms], [Ps]
    for t in range(T - 2, -1, -1):
        Gt = G_t[t]
        ms = fm_t[t] + mv(Gt, ms - pm_t[t + 1])
        Ps = symmetrize(fc_t[t] + Gt @ (Ps - pc_t[t + 1]) @ Gt.mT)
        means.append(ms)
        covs.append(Ps)
    smoothed = GaussianMoment(torch.stack(means[::-1], -2), torch.stack(covs[::-1], -3))
    cross = G @ smoothed.cov[..., 1:, :, :]
    return PosteriorResult(smoothed, G, cross, fr.log_normalizer)


def backward_conditionals(theta: LgssmParams, fr: FilterResult) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Affine maps ``x_t = E_t x_{t+1} + g_t + chol_t eps`` of ``q(x_t | x_{t+1})``.

    The last step has ``E_T = 0`` and the filtered marginal at ``T``.
    Returns ``(E, g, S)`` where ``S`` are the conditional covariances.
    """
    fm, fc = fr.filtered
    G = smoother_gains(theta, fr)
    g = fm[..., :-1, :] - mv(G, fr.predicted.mean[..., 1:, :])
    S = symmetrize(fc[..., :-1, :, :] - G @ fr.predicted.cov[..., 1:, :, :] @ G.mT)
    E = torch.cat([G, fc.new_zeros((*G.shape[:-3], 1, *G.shape[-2:]))], -3)
    g = torch.cat([g, fm[..., -1:, :]], -2)
    S = torch.cat([S, fc[..., -1:, :, :]], -3)
    return E, g, S


def ffbs_sample(theta: LgssmParams, fr: FilterResult, noise: torch.Tensor) -> torch.Tensor:
    """Reparameterized joint posterior draw; ``noise`` is ``(S..., batch..., T, D)``."""
    E, g, S = backward_conditionals(theta, fr)
    T = g.shape[-2]
    offsets = (g + mv(cholesky(S, "backward conditional covariance"), noise)).unbind(-2)
    E_t = E.unbind(-3)
    x = offsets[-1]
    xs = [x]
    for t in range(T - 2, -1, -1):
        x = mv(E_t[t], x) + offsets[t]
        xs.append(x)
    return torch.stack(xs[::-1], -2)


class ExpectedStats(NamedTuple):
    Ex: torch.Tensor
    ExxT: torch.Tensor
    ExxnT: torch.Tensor


def expected_stats(pr: PosteriorResult) -> ExpectedStats:
    m, P = pr.smoothed
    outer = m.unsqueeze(-1) * m.unsqueeze(-2)
    cross_outer = m[..., :-1, :].unsqueeze(-1) * m[..., 1:, :].unsqueeze(-2)
    return ExpectedStats(m, P + outer, pr.cross_cov + cross_outer)


def surrogate_kl(psi: PotentialSeq, pr: PosteriorResult) -> torch.Tensor:
    """``KL(q || p_theta)`` via ``log q - log p_theta = sum_t log psi_t - log Z``."""
    return expected_log_factor(psi, pr.smoothed).sum(-1) - pr.log_normalizer


def smooth(theta: LgssmParams, psi: PotentialSeq, backend: str = "sequential", threads: int | None = None) -> PosteriorResult:
    """Filter then smooth with the chosen backend (``sequential`` or ``parallel``)."""
    if backend == "sequential":
        return rts_smooth(theta, kalman_filter(theta, psi))
    if backend == "parallel":
        from .pscan import parallel_filter, parallel_smooth

        fr = parallel_filter(theta, psi, threads=threads)
        return parallel_smooth(theta, fr, threads=threads)
    raise ValueError(f"unknown backend {backend!r}")
