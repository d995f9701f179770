from __future__ import annotations

import numpy as np
import pytest

from firesale_lab.beliefs import (
    Prior,
    SignalModel,
    is_predictive,
    posterior_mean_cov,
    revealing_model,
    sample_signal,
    sample_theta,
    scenarios,
    uninformative_model,
    update,
)
from firesale_lab.errors import FactorizationFailure


def make_prior(D=5, seed=0):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(D, D))
    return Prior(rng.normal(size=D), A @ A.T / D + 0.1 * np.eye(D))


def test_zero_covariance_draws_equal_mean():
    prior = Prior(np.arange(3.0), np.zeros((3, 3)))
    assert np.array_equal(sample_theta(prior, 1, 10), np.tile(prior.mean0, (10, 1)))


def test_sample_moments():
    prior = make_prior()
    x = sample_theta(prior, 11, 100_000)
    sd = np.sqrt(np.diag(prior.cov0))
    assert np.all(np.abs(x.mean(axis=0) - prior.mean0) <= 4 * sd / np.sqrt(len(x)))
    emp = np.cov(x.T)
    assert np.linalg.norm(emp - prior.cov0) / np.linalg.norm(prior.cov0) < 0.05


def test_sampling_is_reproducible():
    prior = make_prior()
    assert np.array_equal(sample_theta(prior, 3, 7), sample_theta(prior, 3, 7))


def test_non_psd_covariance_rejected():
    prior = Prior(np.zeros(2), np.array([[1.0, 0.0], [0.0, -1.0]]))
    with pytest.raises(FactorizationFailure):
        sample_theta(prior, 0, 2)


def test_uninformative_limit():
    prior = make_prior()
    m = SignalModel(np.eye(5), 1e12 * np.eye(5))
    post = update(prior, m, np.full(5, 3.0))
    assert np.allclose(post.mean_post, prior.mean0, rtol=1e-6, atol=1e-9)
    assert np.linalg.norm(post.cov_post - prior.cov0) / np.linalg.norm(prior.cov0) < 1e-6
    exact = update(prior, uninformative_model(5), np.array([1.0]))
    assert np.array_equal(exact.mean_post, prior.mean0)
    assert np.array_equal(exact.cov_post, prior.cov0)


def test_revealing_limit():
    prior = make_prior()
    s = np.array([1.0, -2.0, 0.5, 0.0, 4.0])
    post = update(prior, revealing_model(5), s)
    assert np.allclose(post.mean_post, s, atol=1e-9)


def test_law_of_total_variance():
    prior = make_prior()
    rng = np.random.default_rng(5)
    m = SignalModel(rng.normal(size=(3, 5)), np.diag([0.5, 1.0, 2.0]))
    thetas = sample_theta(prior, 6, 10_000)
    means = np.array([update(prior, m, sample_signal(m, th, rng)).mean_post for th in thetas])
    post_cov = update(prior, m, np.zeros(3)).cov_post
    total = np.cov(means.T) + post_cov
    assert np.linalg.norm(total - prior.cov0) / np.linalg.norm(prior.cov0) < 0.03
    assert np.allclose(posterior_mean_cov(prior, m) + post_cov, prior.cov0, atol=1e-12)


def test_posterior_shrinks_covariance():
    prior = make_prior()
    rng = np.random.default_rng(1)
    for _ in range(5):
        m = SignalModel(rng.normal(size=(2, 5)), np.diag(rng.uniform(0.1, 2, 2)))
        post = update(prior, m, rng.normal(size=2))
        assert np.linalg.eigvalsh(prior.cov0 - post.cov_post).min() >= -1e-10
        assert is_predictive(m)


def test_antithetic_scenarios_are_balanced():
    prior = make_prior()
    sc = scenarios(prior, uninformative_model(5), seed=2, count=64)
    assert len(sc) == 64
    assert np.allclose(sc.thetas.mean(axis=0), prior.mean0, atol=1e-12)
    assert np.isclose(sc.weights.sum(), 1.0)
