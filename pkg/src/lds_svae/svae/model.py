"""Recognition network, decoder, and ELBO assembly for the LDS-SVAE."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as Fn

from ..gaussian import LOG_2PI, GaussianMoment, GaussianNatural, cholesky, dot, logdet_from_chol, mv, symmetrize
from ..grad import ParamVector, spd_from_unconstrained, spd_raw_size, spd_to_unconstrained, tril_to_chol
from ..inference import ffbs_sample, kalman_filter, masked_potentials, smooth, surrogate_kl
from ..lgssm import LgssmParams, LinearEmission

COV_MODES = ("diag", "full")


@dataclass(frozen=True)
class SvaeConfig:
    latent_dim: int
    obs_dim: int
    encoder_hidden: tuple[int, ...] = ()
    decoder_hidden: tuple[int, ...] = ()
    potential_cov: str = "diag"
    dynamics_cov: str = "full"
    emission_cov: str = "diag"
    learn_dynamics_bias: bool = False
    elbo_mode: str = "analytic"
    n_samples: int = 1
    backend: str = "parallel"
    init_Q_scale: float = 0.1
    init_R_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "encoder_hidden", tuple(self.encoder_hidden))
        object.__setattr__(self, "decoder_hidden", tuple(self.decoder_hidden))
        for name in ("potential_cov", "dynamics_cov", "emission_cov"):
            if getattr(self, name) not in COV_MODES:
                raise ValueError(f"{name} must be one of {COV_MODES}")
        if self.elbo_mode not in ("analytic", "mc"):
            raise ValueError("elbo_mode must be 'analytic' or 'mc'")
        if self.backend not in ("sequential", "parallel"):
            raise ValueError("backend must be 'sequential' or 'parallel'")

    @property
    def linear_decoder(self) -> bool:
        return not self.decoder_hidden

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_hidden"] = list(self.encoder_hidden)
        d["decoder_hidden"] = list(self.decoder_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SvaeConfig":
        return cls(**d)

    def registry(self) -> ParamVector:
        D, N = self.latent_dim, self.obs_dim
        shapes: dict[str, tuple[int, ...]] = {
            "prior.mu1": (D,),
            "prior.Q1": (spd_raw_size(D, self.dynamics_cov),),
            "prior.A": (D, D),
            "prior.Q": (spd_raw_size(D, self.dynamics_cov),),
        }
        if self.learn_dynamics_bias:
            shapes["prior.b"] = (D,)
        width = N
        for i, h in enumerate(self.encoder_hidden):
            shapes[f"enc.h{i}.W"] = (h, width)
            shapes[f"enc.h{i}.b"] = (h,)
            width = h
        n_prec = D if self.potential_cov == "diag" else D * (D + 1) // 2
        shapes["enc.mean.W"] = (D, width)
        shapes["enc.mean.b"] = (D,)
        shapes["enc.prec.W"] = (n_prec, width)
        shapes["enc.prec.b"] = (n_prec,)
        width = D
        for i, h in enumerate(self.decoder_hidden):
            shapes[f"dec.h{i}.W"] = (h, width)
            shapes[f"dec.h{i}.b"] = (h,)
            width = h
        shapes["dec.out.W"] = (N, width)
        shapes["dec.out.b"] = (N,)
        shapes["dec.R"] = (spd_raw_size(N, self.emission_cov),)
        return ParamVector(shapes)


class EncoderParams(NamedTuple):
    hidden: list[tuple[torch.Tensor, torch.Tensor]]
    mean: tuple[torch.Tensor, torch.Tensor]
    prec: tuple[torch.Tensor, torch.Tensor]
    cov_mode: str


class DecoderParams(NamedTuple):
    hidden: list[tuple[torch.Tensor, torch.Tensor]]
    out: tuple[torch.Tensor, torch.Tensor]
    R: torch.Tensor  # variances (N,) when diag, else (N, N)
    diag: bool

    @property
    def linear(self) -> bool:
        return not self.hidden

    def as_emission(self) -> LinearEmission:
        if not self.linear:
            raise ValueError("decoder is not linear")
        R = torch.diag_embed(self.R) if self.diag else self.R
        return LinearEmission(self.out[0], self.out[1], R)


@dataclass
class SvaeModel:
    config: SvaeConfig
    params: dict[str, torch.Tensor] = field(repr=False)

    @property
    def registry(self) -> ParamVector:
        return self.config.registry()

    def flat(self) -> torch.Tensor:
        return self.registry.flatten(self.params)

    def with_flat(self, flat: torch.Tensor) -> "SvaeModel":
        return SvaeModel(self.config, self.registry.unflatten(flat))

    def prior(self) -> LgssmParams:
        p, D, mode = self.params, self.config.latent_dim, self.config.dynamics_cov
        b = p["prior.b"] if "prior.b" in p else torch.zeros(D, dtype=torch.float64)
        return LgssmParams(
            p["prior.mu1"],
            spd_from_unconstrained(p["prior.Q1"], D, mode),
            p["prior.A"],
            b,
            spd_from_unconstrained(p["prior.Q"], D, mode),
        )

    def encoder(self) -> EncoderParams:
        p = self.params
        hidden = [(p[f"enc.h{i}.W"], p[f"enc.h{i}.b"]) for i in range(len(self.config.encoder_hidden))]
        return EncoderParams(hidden, (p["enc.mean.W"], p["enc.mean.b"]),
                             (p["enc.prec.W"], p["enc.prec.b"]), self.config.potential_cov)

    def decoder(self) -> DecoderParams:
        p, N = self.params, self.config.obs_dim
        hidden = [(p[f"dec.h{i}.W"], p[f"dec.h{i}.b"]) for i in range(len(self.config.decoder_hidden))]
        if self.config.emission_cov == "diag":
            R = torch.exp(p["dec.R"])
        else:
            R = spd_from_unconstrained(p["dec.R"], N, "full")
        return DecoderParams(hidden, (p["dec.out.W"], p["dec.out.b"]), R, self.config.emission_cov == "diag")


def _linear(x, Wb):
    W, b = Wb
    return x @ W.mT + b


def _mlp(x, hidden):
    for Wb in hidden:
        x = torch.relu(_linear(x, Wb))
    return x


def _inverse_softplus(x: torch.Tensor) -> torch.Tensor:
    return x + torch.log(-torch.expm1(-x))


def encode(phi: EncoderParams, y: torch.Tensor, mask: torch.Tensor | None = None) -> GaussianNatural:
    """Per-step conjugate potentials ``N(x_t; m(y_t), V(y_t))`` in natural form.

    Each potential depends on its own frame only; masked steps become the
    zero factor.
    """
    feat = _mlp(y, phi.hidden)
    m = _linear(feat, phi.mean)
    raw = _linear(feat, phi.prec)
    D = m.shape[-1]
    # the readout is the precision (or its Cholesky factor): J needs no
    # inversion, so a near-singular V cannot turn into a non-PSD J
    if phi.cov_mode == "diag":
        J = Fn.softplus(raw)
        assert bool((J > 0).all()), "encoder emitted a non-positive precision"
        log_norm = -0.5 * (m * m * J).sum(-1) + 0.5 * torch.log(J).sum(-1) - 0.5 * D * LOG_2PI
        psi = GaussianNatural(m * J, J, log_norm, True)
    else:
        rows, cols = torch.tril_indices(D, D)
        on_diag = rows == cols
        L = tril_to_chol(torch.where(on_diag, Fn.softplus(raw), raw), D)
        J = symmetrize(L @ L.mT)
        h = mv(J, m)
        log_norm = -0.5 * dot(h, m) + 0.5 * logdet_from_chol(L) - 0.5 * D * LOG_2PI
        psi = GaussianNatural(h, J, log_norm)
    if mask is not None:
        psi = masked_potentials(psi, torch.as_tensor(mask))
    return psi


def decode_mean(gamma: DecoderParams, x: torch.Tensor) -> torch.Tensor:
    return _linear(_mlp(x, gamma.hidden), gamma.out)


def decode_log_lik(gamma: DecoderParams, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """``log N(y_t; f(x_t), R)`` for every leading index."""
    r = y - decode_mean(gamma, x)
    N = y.shape[-1]
    if gamma.diag:
        return -0.5 * ((r * r) / gamma.R).sum(-1) - 0.5 * torch.log(gamma.R).sum(-1) - 0.5 * N * LOG_2PI
    L = cholesky(gamma.R, "R")
    z = torch.linalg.solve_triangular(L, r.unsqueeze(-1), upper=False).squeeze(-1)
    return -0.5 * dot(z, z) - 0.5 * logdet_from_chol(L) - 0.5 * N * LOG_2PI


def expected_linear_log_lik(gamma: DecoderParams, q: GaussianMoment, y: torch.Tensor) -> torch.Tensor:
    """``E_q[log N(y_t; C x_t + d, R)]`` in closed form, per step."""
    C, d = gamma.out
    r = y - mv(C, q.mean) - d
    N = y.shape[-1]
    CPC = C @ q.cov @ C.mT
    if gamma.diag:
        quad = (r * r / gamma.R).sum(-1) + (torch.diagonal(CPC, dim1=-2, dim2=-1) / gamma.R).sum(-1)
        logdet = torch.log(gamma.R).sum(-1)
    else:
        L = cholesky(gamma.R, "R")
        z = torch.linalg.solve_triangular(L, r.unsqueeze(-1), upper=False).squeeze(-1)
        quad = dot(z, z) + (torch.cholesky_solve(CPC, L)).diagonal(dim1=-2, dim2=-1).sum(-1)
        logdet = logdet_from_chol(L)
    return -0.5 * quad - 0.5 * logdet - 0.5 * N * LOG_2PI


class ElboTerms(NamedTuple):
    elbo: torch.Tensor
    recon: torch.Tensor
    kl: torch.Tensor


def elbo(
    model: SvaeModel,
    y: torch.Tensor,
    mask: torch.Tensor | np.ndarray | None = None,
    noise: torch.Tensor | None = None,
    mode: str | None = None,
    backend: str | None = None,
    threads: int | None = None,
) -> ElboTerms:
    """ELBO per sequence: reconstruction of *all* frames minus ``KL(q || p_theta)``.

    ``mask`` (``(..., T)``, True = observed) drops potentials but not targets.
    ``mc`` mode needs ``noise`` of shape ``(S, ..., T, D)``.
    """
    cfg = model.config
    mode = mode or cfg.elbo_mode
    backend = backend or cfg.backend
    theta, phi, gamma = model.prior(), model.encoder(), model.decoder()
    psi = encode(phi, y, mask)
    if mode == "analytic":
        if not gamma.linear:
            raise ValueError("analytic reconstruction requires a linear decoder")
        post = smooth(theta, psi, backend, threads)
        recon = expected_linear_log_lik(gamma, post.smoothed, y).sum(-1)
    elif mode == "mc":
        if noise is None:
            raise ValueError("mc mode needs reparameterization noise")
        if backend == "parallel":
            from ..pscan import parallel_filter, parallel_sample, parallel_smooth

            fr = parallel_filter(theta, psi, threads=threads)
            post = parallel_smooth(theta, fr, threads=threads)
            x = parallel_sample(theta, fr, noise, threads=threads)
        else:
            from ..inference import rts_smooth

            fr = kalman_filter(theta, psi)
            post = rts_smooth(theta, fr)
            x = ffbs_sample(theta, fr, noise)
        recon = decode_log_lik(gamma, x, y).sum(-1).mean(0)
    else:
        raise ValueError(f"unknown elbo mode {mode!r}")
    kl = surrogate_kl(psi, post)
    return ElboTerms(recon - kl, recon, kl)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return torch.from_numpy(rng.uniform(-bound, bound, size=shape))


def random_orthogonal(rng: np.random.Generator, D: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((D, D)))
    return q * np.sign(np.diag(r))


def init_model(config: SvaeConfig, rng: np.random.Generator) -> SvaeModel:
    """Seeded initialization: ``A = 0.9 * orthogonal``, scaled-identity noises, fan-in uniform weights."""
    D, N = config.latent_dim, config.obs_dim
    reg = config.registry()
    eye = torch.eye(D, dtype=torch.float64)
    params: dict[str, torch.Tensor] = {
        "prior.mu1": torch.zeros(D, dtype=torch.float64),
        "prior.Q1": spd_to_unconstrained(eye, config.dynamics_cov),
        "prior.A": torch.from_numpy(0.9 * random_orthogonal(rng, D)),
        "prior.Q": spd_to_unconstrained(config.init_Q_scale * eye, config.dynamics_cov),
    }
    if config.learn_dynamics_bias:
        params["prior.b"] = torch.zeros(D, dtype=torch.float64)
    for name, shape in reg.shapes.items():
        if name.startswith(("enc.", "dec.")) and name != "dec.R":
            W_name = name[:-1] + "W"
            fan_in = reg.shapes[W_name][1]
            params[name] = _uniform(rng, shape, fan_in)
    # unit potential precision
    n_prec = reg.shapes["enc.prec.b"][0]
    prec_b = torch.zeros(n_prec, dtype=torch.float64)
    if config.potential_cov == "diag":
        prec_b[:] = float(_inverse_softplus(torch.tensor(1.0, dtype=torch.float64)))
    else:
        rows, cols = torch.tril_indices(D, D)
        prec_b[rows == cols] = float(_inverse_softplus(torch.tensor(1.0, dtype=torch.float64)))
    params["enc.prec.b"] = prec_b
    R = config.init_R_scale * torch.eye(N, dtype=torch.float64)
    params["dec.R"] = spd_to_unconstrained(R, config.emission_cov)
    return SvaeModel(config, {k: params[k] for k in reg})


def true_model(theta: LgssmParams, emission: LinearEmission, **overrides) -> SvaeModel:
    """Linear SVAE whose potentials are the exact emission likelihoods.

    Needs ``C' R^{-1} C`` to be invertible (``N >= D`` with full column rank).
    """
    D, N = theta.dim, emission.R.shape[-1]
    config = SvaeConfig(latent_dim=D, obs_dim=N, potential_cov="full", dynamics_cov="full",
                        emission_cov="full", learn_dynamics_bias=True, **overrides)
    C, d, R = emission
    Rinv_C = torch.linalg.solve(R, C)
    J = symmetrize(C.mT @ Rinv_C)
    V = symmetrize(torch.linalg.inv(J))
    W_mean = V @ Rinv_C.mT
    Lj = torch.linalg.cholesky(J)
    rows, cols = torch.tril_indices(D, D)
    raw = Lj[rows, cols]
    raw = torch.where(rows == cols, _inverse_softplus(raw), raw)
    params = {
        "prior.mu1": theta.mu1,
        "prior.Q1": spd_to_unconstrained(theta.Q1),
        "prior.A": theta.A,
        "prior.Q": spd_to_unconstrained(theta.Q),
        "prior.b": theta.b,
        "enc.mean.W": W_mean,
        "enc.mean.b": -mv(W_mean, d),
        "enc.prec.W": torch.zeros(raw.shape[0], N, dtype=torch.float64),
        "enc.prec.b": raw,
        "dec.out.W": C,
        "dec.out.b": d,
        "dec.R": spd_to_unconstrained(R),
    }
    reg = config.registry()
    return SvaeModel(config, {k: params[k].to(torch.float64).clone() for k in reg})
