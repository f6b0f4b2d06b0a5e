"""Monte-Carlo forecasting under the learned latent dynamics."""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
import torch

from ..gaussian import cholesky, mv
from ..inference import kalman_filter
from .model import SvaeModel, decode_log_lik, encode


class ForecastResult(NamedTuple):
    latents: torch.Tensor          # (n_traj, batch..., H, D)
    traj_log_lik: torch.Tensor     # (n_traj, batch...)
    log_lik: torch.Tensor          # (batch...)
    per_frame_dim: torch.Tensor    # (batch...)
    stderr: torch.Tensor           # (batch...) delta-method s.e. of log_lik


def predict_forecast(
    model: SvaeModel,
    y: torch.Tensor,
    t0: int,
    horizon: int,
    n_traj: int,
    rng: np.random.Generator,
    backend: str | None = None,
) -> ForecastResult:
    """Estimate ``log p(y_{t0+1:t0+H} | y_{1:t0})`` from ``n_traj`` sampled latent rollouts.

    ``y`` holds at least ``t0 + horizon`` frames; only the first ``t0`` are
    encoded.
    """
    if t0 < 1 or horizon < 1:
        raise ValueError("need t0 >= 1 and horizon >= 1")
    if y.shape[-2] < t0 + horizon:
        raise ValueError(f"sequence has {y.shape[-2]} frames, need {t0 + horizon}")
    theta = model.prior()
    backend = backend or model.config.backend
    with torch.no_grad():
        psi = encode(model.encoder(), y[..., :t0, :])
        if backend == "parallel":
            from ..pscan import parallel_filter

            fr = parallel_filter(theta, psi)
        else:
            fr = kalman_filter(theta, psi)
        batch = y.shape[:-2]
        D = theta.dim
        last = fr.filtered.mean[..., -1, :], fr.filtered.cov[..., -1, :, :]
        eps = torch.from_numpy(rng.standard_normal((n_traj, *batch, horizon + 1, D)))
        x = last[0] + mv(cholesky(last[1]), eps[..., 0, :])
        LQ = cholesky(theta.Q, "Q")
        xs = []
        for k in range(horizon):
            x = mv(theta.A, x) + theta.b + mv(LQ, eps[..., k + 1, :])
            xs.append(x)
        latents = torch.stack(xs, -2)
        future = y[..., t0:t0 + horizon, :]
        traj_ll = decode_log_lik(model.decoder(), latents, future).sum(-1)
        log_lik = torch.logsumexp(traj_ll, 0) - math.log(n_traj)
        w = torch.exp(traj_ll - traj_ll.max(0).values)
        stderr = w.std(0, unbiased=True) / (math.sqrt(n_traj) * w.mean(0)) if n_traj > 1 else torch.full_like(log_lik, float("inf"))
        per = log_lik / (horizon * y.shape[-1])
    return ForecastResult(latents, traj_ll, log_lik, per, stderr)
