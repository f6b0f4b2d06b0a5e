"""Conversions between numpy oracle instances and package types."""
from __future__ import annotations

import numpy as np
import torch

from lds_svae.gaussian import GaussianNatural
from lds_svae.lgssm import LgssmParams

from oracles import Instance


def t64(x):
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def theta_of(inst: Instance) -> LgssmParams:
    return LgssmParams.from_numpy(inst.mu1, inst.Q1, inst.A, inst.b, inst.Q)


def psi_of(inst: Instance) -> GaussianNatural:
    return GaussianNatural(t64(inst.h), t64(inst.J), t64(inst.c))


def stack_instances(insts) -> tuple[LgssmParams, GaussianNatural]:
    """Shared prior from the first instance, batched potentials from all."""
    psi = GaussianNatural(
        t64(np.stack([i.h for i in insts])),
        t64(np.stack([i.J for i in insts])),
        t64(np.stack([i.c for i in insts])),
    )
    return theta_of(insts[0]), psi


def assert_rel(actual, expected, rtol, atol=0.0, err_msg=""):
    """Relative agreement with respect to the magnitude of ``expected``."""
    a = np.asarray(actual.detach() if isinstance(actual, torch.Tensor) else actual, dtype=float)
    e = np.asarray(expected.detach() if isinstance(expected, torch.Tensor) else expected, dtype=float)
    scale = max(np.abs(e).max(initial=0.0), 1.0)
    np.testing.assert_allclose(a, e, rtol=0, atol=rtol * scale + atol, err_msg=err_msg)
