from typing import NamedTuple

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lds_svae.gaussian import GaussianNatural
from lds_svae.inference import ffbs_sample, kalman_filter, rts_smooth
from lds_svae.lgssm import LgssmParams, prior_marginals
from lds_svae.pscan import (
    CompositionCounter,
    FilterElement,
    MargElement,
    associative_scan,
    filter_compose,
    filter_elements,
    marg_compose,
    marginals_chain,
    parallel_filter,
    parallel_sample,
    parallel_smooth,
    prefix_scan,
)

import oracles
from helpers import assert_rel, psi_of, t64, theta_of


class Scalar(NamedTuple):
    x: torch.Tensor


def random_marg(rng, D, batch=()):
    A = t64(rng.standard_normal((*batch, D, D)) / np.sqrt(D))
    b = t64(rng.standard_normal((*batch, D)))
    M = rng.standard_normal((*batch, D, D))
    Q = t64(M @ np.swapaxes(M, -1, -2) / D + 0.1 * np.eye(D))
    return MargElement(A, b, Q)


def identity_marg(D):
    return MargElement(torch.eye(D, dtype=torch.float64), torch.zeros(D, dtype=torch.float64),
                       torch.zeros(D, D, dtype=torch.float64))


def assert_elements_close(a, b, tol):
    for x, y in zip(a, b):
        assert_rel(x, y, tol)


def random_potentials(rng, T, D, batch=(), mask_prob=0.2):
    M = rng.standard_normal((*batch, T, D, D))
    J = M @ np.swapaxes(M, -1, -2) / D + 0.2 * np.eye(D)
    keep = rng.random((*batch, T)) >= mask_prob
    h = rng.standard_normal((*batch, T, D)) * keep[..., None]
    J = J * keep[..., None, None]
    c = rng.standard_normal((*batch, T)) * keep
    return GaussianNatural(t64(h), t64(J), t64(c))


def stable_theta(rng, D):
    inst = oracles.random_instance(rng, 1, D)
    # a contraction keeps long sequences well conditioned
    A = inst.A / max(1.0, np.abs(np.linalg.eigvals(inst.A)).max() / 0.95)
    return LgssmParams.from_numpy(inst.mu1, inst.Q1, A, inst.b, inst.Q)


# --- marg_compose -------------------------------------------------------------
def test_marg_compose_identity():
    rng = np.random.default_rng(0)
    a = random_marg(rng, 3)
    e = identity_marg(3)
    assert_elements_close(marg_compose(e, a), a, 1e-15)
    assert_elements_close(marg_compose(a, e), a, 1e-15)


def test_marg_compose_scalar():
    out = marg_compose(MargElement(t64([[2.0]]), t64([1.0]), t64([[1.0]])),
                       MargElement(t64([[3.0]]), t64([0.0]), t64([[2.0]])))
    np.testing.assert_allclose(out.A, [[6.0]])
    np.testing.assert_allclose(out.b, [3.0])
    np.testing.assert_allclose(out.Q, [[11.0]])


def test_marg_compose_associative_1000_trials():
    rng = np.random.default_rng(1)
    a, b, c = (random_marg(rng, 3, (1000,)) for _ in range(3))
    assert_elements_close(marg_compose(marg_compose(a, b), c), marg_compose(a, marg_compose(b, c)), 1e-12)


def test_marg_compose_shape_mismatch():
    rng = np.random.default_rng(2)
    with pytest.raises(ValueError):
        marg_compose(random_marg(rng, 2), random_marg(rng, 3))


# --- filter_compose -----------------------------------------------------------
def random_filter_elements(rng, T, D):
    theta = stable_theta(rng, D)
    psi = random_potentials(rng, T, D, mask_prob=0.0)
    return filter_elements(theta, psi)


def test_filter_compose_associative():
    rng = np.random.default_rng(3)
    e = random_filter_elements(rng, 3, 3)
    a, b, c = (FilterElement(*(x[i] for x in e)) for i in range(3))
    assert_elements_close(filter_compose(filter_compose(a, b), c), filter_compose(a, filter_compose(b, c)), 1e-10)


def test_filter_compose_identity():
    rng = np.random.default_rng(4)
    e = random_filter_elements(rng, 2, 2)
    a = FilterElement(*(x[1] for x in e))
    D = 2
    ident = FilterElement(torch.eye(D, dtype=torch.float64), torch.zeros(D, dtype=torch.float64),
                          torch.zeros(D, D, dtype=torch.float64), torch.zeros(D, dtype=torch.float64),
                          torch.zeros(D, D, dtype=torch.float64), torch.zeros((), dtype=torch.float64))
    assert_elements_close(filter_compose(ident, a), a, 1e-14)
    assert_elements_close(filter_compose(a, ident), a, 1e-14)


def test_two_step_composition_is_two_step_filter():
    rng = np.random.default_rng(5)
    theta = stable_theta(rng, 2)
    psi = random_potentials(rng, 2, 2, mask_prob=0.0)
    e = filter_elements(theta, psi)
    out = filter_compose(FilterElement(*(x[0] for x in e)), FilterElement(*(x[1] for x in e)))
    fr = kalman_filter(theta, psi)
    np.testing.assert_allclose(out.c, fr.filtered.mean[1], atol=1e-12)
    np.testing.assert_allclose(out.C, fr.filtered.cov[1], atol=1e-12)
    np.testing.assert_allclose(out.logw, fr.log_normalizer, atol=1e-12)


# --- prefix_scan --------------------------------------------------------------
@pytest.mark.parametrize("executor", ["sequential", "parallel"])
def test_prefix_scan_length_one(executor):
    assert prefix_scan([7], lambda a, b: a + b, executor) == [7]


@pytest.mark.parametrize("executor", ["sequential", "parallel"])
def test_prefix_scan_integers(executor):
    assert prefix_scan([1, 2, 3, 4], lambda a, b: a + b, executor, chunk_size=2) == [1, 3, 6, 10]


def test_prefix_scan_empty():
    with pytest.raises(ValueError):
        prefix_scan([], lambda a, b: a + b)


def test_prefix_scan_preserves_order_for_noncommutative_operator():
    words = [chr(ord("a") + i % 26) for i in range(100)]
    out = prefix_scan(words, lambda a, b: a + b, "parallel", chunk_size=4, threads=3)
    assert out == ["".join(words[:k + 1]) for k in range(100)]


@pytest.mark.parametrize("threads", [1, 4])
@pytest.mark.parametrize("T", [1, 2, 3, 257, 1024])
def test_prefix_scan_marg_elements_match_fold(T, threads):
    rng = np.random.default_rng(T)
    stacked = random_marg(rng, 3, (T,))
    stacked = stacked._replace(A=0.7 * stacked.A)
    elems = [MargElement(*(x[i] for x in stacked)) for i in range(T)]
    seq = prefix_scan(elems, marg_compose, "sequential")
    par = prefix_scan(elems, marg_compose, "parallel", threads=threads)
    for s, p in zip(seq, par):
        assert_elements_close(p, s, 1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 300), st.integers(2, 40), st.integers(1, 4))
def test_prefix_scan_work_bound(n, chunk, threads):
    seq, par = CompositionCounter(), CompositionCounter()
    a = prefix_scan(list(range(n)), lambda x, y: x + y, "sequential", counter=seq)
    b = prefix_scan(list(range(n)), lambda x, y: x + y, "parallel", chunk_size=chunk, threads=threads, counter=par)
    assert a == b
    assert par.count <= 2 * seq.count


def test_prefix_scan_rejects_tiny_chunks():
    with pytest.raises(ValueError):
        prefix_scan([1, 2], lambda a, b: a + b, "parallel", chunk_size=1)


# --- associative_scan ---------------------------------------------------------
@pytest.mark.parametrize("T", [1, 2, 3, 257, 1024])
def test_stacked_scan_executor_equivalence(T):
    rng = np.random.default_rng(10 + T)
    elems = random_marg(rng, 3, (T,))
    elems = elems._replace(A=0.7 * elems.A)
    seq = associative_scan(marg_compose, elems, "sequential")
    for threads in (1, 4):
        par = associative_scan(marg_compose, elems, "parallel", threads=threads)
        assert_elements_close(par, seq, 1e-10)


def test_stacked_scan_reverse():
    rng = np.random.default_rng(9)
    mats = t64(rng.standard_normal((6, 2, 2)))

    def compose(a, b):
        return Scalar(b.x @ a.x)

    out = associative_scan(compose, Scalar(mats), "parallel", reverse=True)
    # out[t] composes e_T first and e_t last
    for t in range(6):
        expect = mats[-1]
        for s in range(4, t - 1, -1):
            expect = mats[s] @ expect
        np.testing.assert_allclose(out.x[t], expect, atol=1e-12)
    seq = associative_scan(compose, Scalar(mats), "sequential", reverse=True)
    np.testing.assert_allclose(out.x, seq.x, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 600))
def test_stacked_scan_work_bound(n):
    seq, par = CompositionCounter(), CompositionCounter()
    x = Scalar(torch.arange(n, dtype=torch.float64))
    a = associative_scan(lambda u, v: Scalar(u.x + v.x), x, "sequential", counter=seq)
    b = associative_scan(lambda u, v: Scalar(u.x + v.x), x, "parallel", counter=par)
    assert torch.equal(a.x, b.x)
    assert par.count <= 2 * seq.count


def test_stacked_scan_rejects_empty_and_unknown():
    x = Scalar(torch.zeros(0))
    with pytest.raises(ValueError):
        associative_scan(lambda u, v: u, x)
    with pytest.raises(ValueError):
        associative_scan(lambda u, v: u, Scalar(torch.zeros(3)), "gpu")


# --- marginals_chain ----------------------------------------------------------
def test_marginals_chain_single_step():
    rng = np.random.default_rng(20)
    theta = stable_theta(rng, 2)
    g = marginals_chain(theta, 1)
    np.testing.assert_array_equal(g.mean[0], theta.mu1)
    np.testing.assert_array_equal(g.cov[0], theta.Q1)


def test_marginals_chain_random_walk():
    rng = np.random.default_rng(21)
    theta = stable_theta(rng, 2)
    theta = theta._replace(A=torch.eye(2, dtype=torch.float64), b=torch.zeros(2, dtype=torch.float64))
    g = marginals_chain(theta, 10)
    for t in range(10):
        np.testing.assert_allclose(g.cov[t], theta.Q1 + t * theta.Q, atol=1e-12)


@pytest.mark.parametrize("executor", ["sequential", "parallel"])
def test_marginals_chain_matches_recursion(executor):
    rng = np.random.default_rng(22)
    theta = stable_theta(rng, 3)
    a = marginals_chain(theta, 50, executor)
    b = prior_marginals(theta, 50)
    assert_rel(a.mean, b.mean, 1e-10)
    assert_rel(a.cov, b.cov, 1e-10)


# --- parallel filter / smoother / sampler ------------------------------------
def test_parallel_all_masked_is_prior():
    rng = np.random.default_rng(23)
    theta = stable_theta(rng, 2)
    T = 7
    psi = random_potentials(rng, T, 2, mask_prob=1.0)
    fr = parallel_filter(theta, psi)
    prior = prior_marginals(theta, T)
    np.testing.assert_allclose(fr.filtered.mean, prior.mean, atol=1e-12)
    np.testing.assert_allclose(fr.filtered.cov, prior.cov, atol=1e-12)
    assert float(fr.log_normalizer) == 0.0
    pr = parallel_smooth(theta, fr)
    np.testing.assert_allclose(pr.smoothed.mean, prior.mean, atol=1e-12)
    np.testing.assert_allclose(pr.smoothed.cov, prior.cov, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 3))
def test_parallel_matches_dense_oracle(seed, T, D):
    inst = oracles.random_instance(np.random.default_rng(seed), T, D, mask_prob=0.2)
    theta, psi = theta_of(inst), psi_of(inst)
    fr = parallel_filter(theta, psi)
    pr = parallel_smooth(theta, fr)
    fm, fc, pm, pc = oracles.filtered(inst)
    post = oracles.posterior(inst)
    assert_rel(fr.filtered.mean, fm, 1e-8)
    assert_rel(fr.filtered.cov, fc, 1e-8)
    assert_rel(fr.predicted.cov, pc, 1e-8)
    assert_rel(fr.log_normalizer, post.log_z, 1e-8)
    assert_rel(pr.smoothed.mean, post.mean, 1e-8)
    assert_rel(pr.smoothed.cov, np.stack([post.marginal_cov(t) for t in range(T)]), 1e-8)
    if T > 1:
        assert_rel(pr.cross_cov, np.stack([post.cross_cov(t) for t in range(T - 1)]), 1e-8)


@pytest.mark.parametrize("T", [1, 2, 3, 257, 1024])
def test_parallel_matches_sequential(T):
    rng = np.random.default_rng(30 + T)
    theta = stable_theta(rng, 3)
    psi = random_potentials(rng, T, 3, batch=(2,))
    a = kalman_filter(theta, psi)
    b = parallel_filter(theta, psi)
    for x, y in zip((*a.predicted, *a.filtered, a.log_normalizer), (*b.predicted, *b.filtered, b.log_normalizer)):
        assert_rel(y, x, 1e-8)
    sa, sb = rts_smooth(theta, a), parallel_smooth(theta, b)
    for x, y in zip((*sa.smoothed, sa.gains, sa.cross_cov), (*sb.smoothed, sb.gains, sb.cross_cov)):
        assert_rel(y, x, 1e-8)


def test_parallel_sample_matches_ffbs():
    rng = np.random.default_rng(40)
    theta = stable_theta(rng, 3)
    psi = random_potentials(rng, 257, 3, batch=(2,))
    fr = kalman_filter(theta, psi)
    eps = t64(rng.standard_normal((4, 2, 257, 3)))
    assert_rel(parallel_sample(theta, fr, eps), ffbs_sample(theta, fr, eps), 1e-8)


def test_parallel_filter_threads_equivalent():
    rng = np.random.default_rng(41)
    theta = stable_theta(rng, 3)
    psi = random_potentials(rng, 1024, 3)
    a = parallel_filter(theta, psi, threads=1)
    b = parallel_filter(theta, psi, threads=4)
    for x, y in zip(a.filtered, b.filtered):
        assert_rel(y, x, 1e-10)


def test_parallel_filter_diag_potentials():
    rng = np.random.default_rng(42)
    theta = stable_theta(rng, 2)
    diag = GaussianNatural(t64(rng.standard_normal((9, 2))), t64(rng.uniform(0.5, 2, (9, 2))), t64(np.zeros(9)),
                           diag=True)
    a = parallel_filter(theta, diag)
    b = kalman_filter(theta, diag)
    assert_rel(a.filtered.cov, b.filtered.cov, 1e-10)
    assert_rel(a.log_normalizer, b.log_normalizer, 1e-10)
