"""Mini-batch ELBO ascent with fresh contiguous masks every iteration."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, NamedTuple

import numpy as np
import torch

from ..gaussian import DegenerateCovarianceError
from ..grad import AdamState, NonFiniteError, adam_step, loss_gradient
from .masking import random_mask
from .model import SvaeModel, elbo

log = logging.getLogger(__name__)

SKIPPABLE = (NonFiniteError, DegenerateCovarianceError, torch.linalg.LinAlgError)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 10
    lr: float = 1e-3
    lr_schedule: str = "constant"
    lr_min_factor: float = 0.1
    mask_fraction: float = 0.4
    seed: int = 0
    backend: str | None = None
    threads: int | None = None
    eval_every: int = 1
    max_consecutive_skips: int = 50

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")

    def to_dict(self) -> dict:
        return asdict(self)


class TrainResult(NamedTuple):
    model: SvaeModel
    history: list[dict]
    adam: AdamState | None
    rng_state: dict


class TrainingAborted(RuntimeError):
    pass


def learning_rate(cfg: TrainConfig, it: int, total: int) -> float:
    if cfg.lr_schedule == "constant" or total <= 1:
        return cfg.lr
    frac = it / (total - 1)
    return cfg.lr * (cfg.lr_min_factor + (1 - cfg.lr_min_factor) * 0.5 * (1 + math.cos(math.pi * frac)))


def mc_noise(model: SvaeModel, rng: np.random.Generator, batch: int, T: int) -> torch.Tensor | None:
    if model.config.elbo_mode != "mc":
        return None
    shape = (model.config.n_samples, batch, T, model.config.latent_dim)
    return torch.from_numpy(rng.standard_normal(shape))


def spectral_radius(model: SvaeModel) -> float:
    """Largest eigenvalue modulus of the dynamics matrix."""
    with torch.no_grad():
        return float(torch.linalg.eigvals(model.prior().A).abs().max())


def evaluate_elbo(model: SvaeModel, y: torch.Tensor, seed: int = 0, backend: str | None = None,
                  threads: int | None = None, batch_size: int = 50) -> float:
    """Unmasked ELBO per frame and observed dimension, averaged over sequences."""
    rng = np.random.default_rng(seed)
    n, T, N = y.shape
    total = 0.0
    with torch.no_grad():
        for a in range(0, n, batch_size):
            yb = y[a:a + batch_size]
            noise = mc_noise(model, rng, yb.shape[0], T)
            total += float(elbo(model, yb, None, noise, backend=backend, threads=threads).elbo.sum())
    return total / (n * T * N)


def train(model0: SvaeModel, train_y: torch.Tensor, val_y: torch.Tensor | None, config: TrainConfig,
          callback: Callable[[dict], None] | None = None) -> TrainResult:
    """Adam ascent on the masked ELBO; deterministic given ``config.seed``.

    ``callback`` receives each per-epoch history record as soon as it exists.
    """
    rng = np.random.default_rng(config.seed)
    n, T, N = train_y.shape
    if N != model0.config.obs_dim:
        raise ValueError(f"data has {N} dims, model expects {model0.config.obs_dim}")
    model = model0
    flat = model.flat().detach().clone()
    adam = AdamState.zeros_like(flat)
    per_epoch = math.ceil(n / config.batch_size)
    total = config.epochs * per_epoch
    history: list[dict] = []
    it = 0
    skips = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        values, skipped = [], 0
        for a in range(0, n, config.batch_size):
            idx = order[a:a + config.batch_size]
            yb = train_y[idx]
            mask = torch.from_numpy(np.stack([random_mask(rng, T, config.mask_fraction) for _ in idx]))
            noise = mc_noise(model, rng, len(idx), T)

            def loss(x, yb=yb, mask=mask, noise=noise):
                terms = elbo(model.with_flat(x), yb, mask, noise, backend=config.backend, threads=config.threads)
                return -terms.elbo.mean() / (T * N)

            lr = learning_rate(config, it, total)
            it += 1
            try:
                value, g = loss_gradient(loss, flat)
                flat, adam = adam_step(adam, flat, g, lr=lr)
            except SKIPPABLE as exc:
                skips += 1
                skipped += 1
                log.warning("skipping batch at iteration %d: %s", it, exc)
                if skips >= config.max_consecutive_skips:
                    raise TrainingAborted(f"{skips} consecutive skipped batches") from exc
                continue
            skips = 0
            values.append(-value)
        model = model.with_flat(flat)
        record = {
            "epoch": epoch + 1,
            "iterations": it,
            "train_elbo": float(np.mean(values)) if values else float("nan"),
            "skipped": skipped,
        }
        # A is unconstrained: its spectral radius is monitored, not enforced
        record["spectral_radius"] = spectral_radius(model)
        if val_y is not None and ((epoch + 1) % config.eval_every == 0 or epoch + 1 == config.epochs):
            try:
                record["val_elbo"] = evaluate_elbo(model, val_y, seed=config.seed + epoch + 1,
                                                   backend=config.backend, threads=config.threads)
            except SKIPPABLE as exc:
                log.warning("validation ELBO undefined at epoch %d: %s", epoch + 1, exc)
                record["val_elbo"] = float("nan")
        history.append(record)
        if callback is not None:
            callback(record)
        log.info("epoch %d: %s", epoch + 1, record)
    return TrainResult(model.with_flat(flat.detach()), history, adam if it else None,
                       rng.bit_generator.state)
