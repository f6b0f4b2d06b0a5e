"""Synthetic datasets: random-rotation LDS and a rendered nonlinear pendulum."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch

from ..lgssm import LgssmParams, LinearEmission, sample_prior

SPLIT_FRACTIONS = (0.8, 0.1, 0.1)


@dataclass(frozen=True)
class LdsDatasetConfig:
    D: int = 3
    N: int = 5
    q: float = 0.1
    r: float = 0.1
    T: int = 200
    n_seq: int = 100
    rotation_angle: float | None = None
    revolutions: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.q <= 0 or self.r <= 0:
            raise ValueError("noise scales q and r must be positive")
        if self.D < 2:
            raise ValueError("need D >= 2 for a rotation plane")
        if self.N < 1 or self.T < 1 or self.n_seq < 1:
            raise ValueError("N, T and n_seq must be positive")

    @property
    def angle(self) -> float:
        if self.rotation_angle is not None:
            return self.rotation_angle
        return 2 * math.pi * self.revolutions / self.T

    @property
    def snr(self) -> float:
        return self.q / self.r


@dataclass(frozen=True)
class PendulumConfig:
    image_size: int = 24
    T: int = 100
    n_seq: int = 100
    g_over_l: float = 9.81
    dt: float = 0.1
    substeps: int = 20
    angle_range: tuple[float, float] = (-math.pi, math.pi)
    velocity_range: tuple[float, float] = (-2.0, 2.0)
    rod_length: float = 10.0
    line_width: float = 2.0
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "angle_range", tuple(self.angle_range))
        object.__setattr__(self, "velocity_range", tuple(self.velocity_range))
        if self.g_over_l <= 0 or self.dt <= 0 or self.substeps < 1:
            raise ValueError("physical constants must be positive")
        if self.noise_std < 0 or self.image_size < 4:
            raise ValueError("invalid rendering parameters")


class Split(NamedTuple):
    y: np.ndarray
    latents: dict[str, np.ndarray]


class Dataset(NamedTuple):
    kind: str
    config: dict
    splits: dict[str, Split]
    truth: dict[str, np.ndarray] | None


def split_indices(rng: np.random.Generator, n: int) -> dict[str, np.ndarray]:
    order = rng.permutation(n)
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    return {
        "train": np.sort(order[:n_train]),
        "val": np.sort(order[n_train:n_train + n_val]),
        "test": np.sort(order[n_train + n_val:]),
    }


def rotation_matrix(rng: np.random.Generator, D: int, angle: float) -> np.ndarray:
    """Rotation by ``angle`` in a uniformly random 2-plane; identity on its complement."""
    basis, _ = np.linalg.qr(rng.standard_normal((D, 2)))
    u, v = basis[:, 0], basis[:, 1]
    c, s = math.cos(angle), math.sin(angle)
    return np.eye(D) + (c - 1) * (np.outer(u, u) + np.outer(v, v)) + s * (np.outer(v, u) - np.outer(u, v))


def lds_truth(cfg: LdsDatasetConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    D, N = cfg.D, cfg.N
    return {
        "mu1": np.zeros(D),
        "Q1": np.eye(D),
        "A": rotation_matrix(rng, D, cfg.angle),
        "b": np.zeros(D),
        "Q": cfg.q * np.eye(D),
        "C": rng.standard_normal((N, D)) / math.sqrt(D),
        "d": np.zeros(N),
        "R": cfg.r * np.eye(N),
    }


def truth_models(truth: dict[str, np.ndarray]) -> tuple[LgssmParams, LinearEmission]:
    theta = LgssmParams.from_numpy(truth["mu1"], truth["Q1"], truth["A"], truth["b"], truth["Q"])
    return theta, LinearEmission.from_numpy(truth["C"], truth["d"], truth["R"])


def gen_lds_dataset(cfg: LdsDatasetConfig) -> Dataset:
    rng = np.random.default_rng(cfg.seed)
    truth = lds_truth(cfg, rng)
    theta, emission = truth_models(truth)
    eps_x = torch.from_numpy(rng.standard_normal((cfg.n_seq, cfg.T, cfg.D)))
    eps_y = rng.standard_normal((cfg.n_seq, cfg.T, cfg.N))
    x = sample_prior(theta, cfg.T, eps_x).numpy()
    y = x @ truth["C"].T + truth["d"] + eps_y @ np.linalg.cholesky(truth["R"]).T
    idx = split_indices(rng, cfg.n_seq)
    splits = {k: Split(y[i], {"x": x[i]}) for k, i in idx.items()}
    config = {"kind": "lds", **asdict(cfg), "snr": cfg.snr}
    return Dataset("lds", config, splits, truth)


# --- pendulum -----------------------------------------------------------------

def pendulum_rhs(state: np.ndarray, g_over_l: float) -> np.ndarray:
    theta, omega = state[..., 0], state[..., 1]
    return np.stack([omega, -g_over_l * np.sin(theta)], -1)


def integrate_pendulum(theta0, omega0, T: int, dt: float, substeps: int, g_over_l: float) -> np.ndarray:
    """RK4 integration sampled every ``dt``; returns ``(..., T, 2)`` of (angle, velocity)."""
    state = np.stack(np.broadcast_arrays(np.asarray(theta0, float), np.asarray(omega0, float)), -1)
    h = dt / substeps
    out = [state]
    for _ in range(T - 1):
        for _ in range(substeps):
            k1 = pendulum_rhs(state, g_over_l)
            k2 = pendulum_rhs(state + 0.5 * h * k1, g_over_l)
            k3 = pendulum_rhs(state + 0.5 * h * k2, g_over_l)
            k4 = pendulum_rhs(state + h * k3, g_over_l)
            state = state + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        out.append(state)
    return np.stack(out, -2)


def pendulum_energy(state: np.ndarray, g_over_l: float) -> np.ndarray:
    return 0.5 * state[..., 1] ** 2 - g_over_l * np.cos(state[..., 0])


def render_pendulum(angles: np.ndarray, size: int, rod_length: float, width: float) -> np.ndarray:
    """Anti-aliased rod from the image center; angle 0 hangs straight down.

    Intensity falls linearly from 1 to 0 over one pixel beyond half the line width.
    """
    c = (size - 1) / 2.0
    rows, cols = np.mgrid[0:size, 0:size].astype(float)
    px = np.stack([cols.ravel() - c, rows.ravel() - c], -1)            # (P, 2), (x right, y down)
    a = np.asarray(angles, float)[..., None]
    tip = np.stack([rod_length * np.sin(a), rod_length * np.cos(a)], -1)  # (..., 1, 2)
    t = np.clip((px * tip).sum(-1) / rod_length ** 2, 0.0, 1.0)
    dist = np.linalg.norm(px - t[..., None] * tip, axis=-1)
    img = np.clip(width / 2 + 0.5 - dist, 0.0, 1.0)
    return img.reshape(*np.shape(angles), size, size)


def gen_pendulum_dataset(cfg: PendulumConfig) -> Dataset:
    rng = np.random.default_rng(cfg.seed)
    theta0 = rng.uniform(*cfg.angle_range, size=cfg.n_seq)
    omega0 = rng.uniform(*cfg.velocity_range, size=cfg.n_seq)
    states = integrate_pendulum(theta0, omega0, cfg.T, cfg.dt, cfg.substeps, cfg.g_over_l)
    frames = render_pendulum(states[..., 0], cfg.image_size, cfg.rod_length, cfg.line_width)
    frames = frames + cfg.noise_std * rng.standard_normal(frames.shape)
    y = frames.reshape(cfg.n_seq, cfg.T, cfg.image_size ** 2)
    idx = split_indices(rng, cfg.n_seq)
    splits = {
        k: Split(y[i], {"angle": states[i, :, 0], "velocity": states[i, :, 1]})
        for k, i in idx.items()
    }
    config = {"kind": "pendulum", **asdict(cfg)}
    config["angle_range"] = list(cfg.angle_range)
    config["velocity_range"] = list(cfg.velocity_range)
    return Dataset("pendulum", config, splits, None)
