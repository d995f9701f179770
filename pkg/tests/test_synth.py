from __future__ import annotations

import numpy as np
import pytest

from firesale_lab.beliefs import Posterior, revealing_model, update
from firesale_lab.economy import no_intervention_liquidations
from firesale_lab.errors import InvalidParams, UncalibratedModel
from firesale_lab.graph_net import trade_targets
from firesale_lab.policy import LinearPolicy, optimal_tau
from firesale_lab.synth import (
    Calibration,
    GeneratorSpec,
    calibrate,
    class_forecast,
    forecast_to_posterior,
    gen_economy,
    gen_panel,
    liquidation_signal_map,
    welfare_comparison,
)

SMALL = dict(n_investors=60, n_panel_assets=30, n_periods=5, holdings_density=0.15, crisis_periods=(4,))


def oracle_correlation(panel) -> float:
    """Pooled correlation between the planted signal and realised trade targets."""
    s, y = [], []
    for t in panel.periods[1:]:
        prev = panel.graph(t - 1)
        tt = trade_targets(prev, panel.graph(t))
        s.extend(panel.planted[t][(prev.investors[i], prev.assets[a])] for i, a in zip(tt.inv_idx, tt.asset_idx))
        y.extend(tt.y)
    return float(np.corrcoef(s, y)[0, 1])


def test_gen_economy_is_deterministic_and_valid():
    a = gen_economy(GeneratorSpec(n_assets=3, n_intermediaries=2, n_constraints=2, seed=11))
    b = gen_economy(GeneratorSpec(n_assets=3, n_intermediaries=2, n_constraints=2, seed=11))
    for name in ("A_q", "A_ell", "H_ell", "H_q", "Gamma", "Delta", "rho", "R", "p", "gamma_bar"):
        assert np.array_equal(getattr(a[0], name), getattr(b[0], name))
    assert np.array_equal(a[1].cov0, b[1].cov0) and np.array_equal(a[2], b[2])
    a[0].validate()
    np.linalg.cholesky(a[1].cov0)


def test_unit_spectrum_gives_identity():
    spec = GeneratorSpec(n_assets=3, n_intermediaries=2, h_ell_spectrum=(1.0, 1.0), h_q_spectrum=(1.0, 1.0), gamma_spectrum=(1.0, 1.0), seed=4)
    params, _, _ = gen_economy(spec)
    for H in list(params.H_ell) + list(params.H_q) + [params.Gamma]:
        assert np.allclose(H, np.eye(3), atol=1e-12)


def test_spec_validation():
    with pytest.raises(InvalidParams):
        GeneratorSpec(beta=1.5).validate()
    with pytest.raises(InvalidParams):
        GeneratorSpec(n_periods=2).validate()
    with pytest.raises(InvalidParams):
        GeneratorSpec(h_ell_spectrum=(2.0, 1.0)).validate()


def test_panel_deterministic_and_valid():
    a, b = gen_panel(GeneratorSpec(seed=5, **SMALL)), gen_panel(GeneratorSpec(seed=5, **SMALL))
    assert len(a.graphs) == 5
    for ga, gb in zip(a.graphs, b.graphs):
        ga.validate()
        assert np.array_equal(ga.weight, gb.weight) and np.array_equal(ga.numeric, gb.numeric)
        assert np.array_equal(ga.inv_idx, gb.inv_idx)
    assert np.array_equal(a.stress, b.stress)
    # the crisis period is flagged by the stress series
    assert a.stressed[4] and a.stressed.sum() <= 3


def test_labels_match_no_intervention_liquidations():
    spec = GeneratorSpec(seed=2, **SMALL)
    params, prior, q_ref = gen_economy(spec)
    panel = gen_panel(spec, (params, prior, q_ref))
    assert np.allclose(panel.label(0).q, q_ref)
    for lb in panel.labels:
        ell, L = no_intervention_liquidations(params.with_theta(lb.theta), lb.q)
        assert np.allclose(L, lb.L, atol=1e-10)
        assert np.allclose(ell.ravel(), lb.ell.ravel(), atol=1e-10)


def test_oracle_correlation_bounds():
    assert abs(oracle_correlation(gen_panel(GeneratorSpec(seed=1, beta=0.0, **SMALL)))) < 0.1
    exact = gen_panel(GeneratorSpec(seed=1, beta=1.0, noise=0.0, churn=0.0, **SMALL))
    assert oracle_correlation(exact) == pytest.approx(1.0, abs=1e-10)
    # churn only re-standardises over surviving positions
    assert oracle_correlation(gen_panel(GeneratorSpec(seed=1, beta=1.0, noise=0.0, **SMALL))) > 0.99
    mid = oracle_correlation(gen_panel(GeneratorSpec(seed=1, beta=0.8, **SMALL)))
    assert abs(mid - np.sqrt(0.8)) < 0.05


def test_class_forecast_weights_by_position():
    panel = gen_panel(GeneratorSpec(seed=3, **SMALL))
    g = panel.graph(0)
    pred = np.ones(g.n_edges)
    f = class_forecast(panel, 0, g.inv_idx, g.asset_idx, pred)
    assert np.allclose(f[np.isin(np.arange(2), panel.asset_class)], 1.0)
    # a prediction on an unheld pair carries no weight
    held = set(zip(g.inv_idx.tolist(), g.asset_idx.tolist()))
    i, a = next((i, a) for i in range(60) for a in range(30) if (i, a) not in held)
    f2 = class_forecast(panel, 0, np.append(g.inv_idx, i), np.append(g.asset_idx, a), np.append(pred, 100.0))
    assert np.allclose(f, f2)


# -- the forecast bridge ------------------------------------------------------------


@pytest.fixture
def bridge_economy():
    params, prior, q = gen_economy(GeneratorSpec(seed=9))
    return params, prior, q


def test_perfect_forecasts_reproduce_analytic_tau(bridge_economy):
    params, prior, q = bridge_economy
    pol = LinearPolicy.build(params, q)
    rng = np.random.default_rng(0)
    thetas = rng.multivariate_normal(prior.mean0, prior.cov0, size=12)
    L = np.array([pol.total_liquidations(th) for th in thetas])
    cal = calibrate(L, L)  # forecasts equal to the realised liquidations
    assert np.allclose(cal.slope, np.eye(2), atol=1e-9) and np.allclose(cal.intercept, 0, atol=1e-9)
    for th in rng.multivariate_normal(prior.mean0, prior.cov0, size=3):
        post = forecast_to_posterior(pol.total_liquidations(th), cal, params, q, prior)
        tau_gnn = optimal_tau(params, q, post)
        tau_exact = optimal_tau(params, q, update(prior, revealing_model(prior.dim), th))
        assert np.allclose(tau_gnn, tau_exact, rtol=0, atol=1e-6 * max(1.0, np.abs(tau_exact).max()))


def test_uninformative_forecasts_give_prior_policy(bridge_economy):
    params, prior, q = bridge_economy
    L0, SJ = liquidation_signal_map(params, q, prior)
    prior_tau = optimal_tau(params, q, Posterior(prior.mean0, prior.cov0))
    flat = Calibration(L0, np.zeros((2, 2)), SJ @ prior.cov0 @ SJ.T, [1, 2, 3])
    post = forecast_to_posterior(np.array([3.0, -7.0]), flat, params, q, prior)
    assert np.allclose(post.mean_post, prior.mean0, atol=1e-14)
    assert np.allclose(optimal_tau(params, q, post), prior_tau, atol=1e-12)
    noisy = Calibration(np.zeros(2), np.eye(2), 1e8 * np.eye(2), [1, 2, 3])
    post = forecast_to_posterior(np.array([5.0, 5.0]), noisy, params, q, prior)
    assert np.allclose(optimal_tau(params, q, post), prior_tau, atol=1e-6)


def test_uncalibrated_errors(bridge_economy):
    params, prior, q = bridge_economy
    with pytest.raises(UncalibratedModel):
        forecast_to_posterior(np.zeros(2), None, params, q, prior)
    with pytest.raises(UncalibratedModel):
        calibrate(np.zeros((3, 2)), np.zeros((3, 2)))


def test_calibration_recovers_affine_map():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((40, 2))
    B = np.array([[0.5, -0.2], [0.1, 0.3]])
    Y = 1.0 + X @ B.T + 0.01 * rng.standard_normal((40, 2))
    cal = calibrate(X, Y)
    assert np.allclose(cal.slope, B, atol=0.01) and np.allclose(cal.intercept, 1.0, atol=0.01)
    assert np.all(np.linalg.eigvalsh(cal.resid_cov) > 0)
    assert np.allclose(np.diag(cal.resid_cov), 1e-4, rtol=0.5)


def test_welfare_ordering_for_a_noisy_forecast(bridge_economy):
    params, prior, q = bridge_economy
    _, SJ = liquidation_signal_map(params, q, prior)
    cal = Calibration(np.zeros(2), np.eye(2), 0.5 * SJ @ prior.cov0 @ SJ.T, [1, 2, 3, 4])
    out = welfare_comparison(params, q, prior, cal, draws=400, seed=3)
    cf = out["closed_form"]
    assert cf["uninformative"] < cf["gnn"] < cf["full"]
    assert out["ordering_closed_form"] and out["ordering_monte_carlo"]
    assert all(se > 0 for se in out["paired_se"].values())
