from __future__ import annotations

from typing import NamedTuple

import numpy as np


class DegenerateGapError(ValueError):
    pass


def normalized_elbo(elbo: float, null_mll: float, true_mll: float) -> float:
    """Fraction of the null-to-true log-likelihood gap covered by ``elbo``."""
    gap = true_mll - null_mll
    if not gap > 0:
        raise DegenerateGapError(f"true_mll - null_mll = {gap} is not positive")
    return (elbo - null_mll) / gap


class R2Result(NamedTuple):
    r2: float
    rank_deficient: bool
    coef: np.ndarray


def _design(latents: np.ndarray) -> np.ndarray:
    latents = np.asarray(latents, float).reshape(len(latents), -1)
    return np.hstack([latents, np.ones((len(latents), 1))])


def linear_decode_r2(train_latents, train_targets, test_latents, test_targets) -> R2Result:
    """Held-out R^2 of an OLS fit with intercept.

    Multi-output targets are pooled: ``1 - sum SSE / sum SST`` over columns,
    with SST about the test-set mean.
    """
    X, Xt = _design(train_latents), _design(test_latents)
    Y = np.asarray(train_targets, float).reshape(len(X), -1)
    Yt = np.asarray(test_targets, float).reshape(len(Xt), -1)
    if len(X) < X.shape[1] + 1:
        raise ValueError(f"need at least {X.shape[1] + 1} training samples, got {len(X)}")
    coef, _, rank, _ = np.linalg.lstsq(X, Y, rcond=None)
    resid = Yt - Xt @ coef
    sst = ((Yt - Yt.mean(0)) ** 2).sum()
    return R2Result(float(1.0 - (resid ** 2).sum() / sst), bool(rank < X.shape[1]), coef)
