from __future__ import annotations

import numpy as np
import pytest

from conftest import random_instance
from oracles import best_response, central_jacobian

from firesale_lab.beliefs import SignalModel, scenarios
from firesale_lab.economy import solve_middle
from firesale_lab.ex_ante import (
    ExAnteProblem,
    ex_ante_wedges,
    moral_hazard_decomposition,
    private_allocation,
    social_welfare,
)
from firesale_lab.policy import LinearPolicy


def diag_model(prior, noise=0.5):
    return SignalModel(np.eye(prior.dim), noise * prior.cov0, 0.0, f"diag{noise}")


def private_payoff_gradient(params, prior, q, t, i, mode="tax"):
    """d/dq_i of intermediary i's payoff with price and wedges frozen at their equilibrium values.

    Liquidations respond to q_i through the intermediary's own problem, solved
    by the oracle QP. All objects are affine in theta given the pattern, so the
    expected gradient equals the gradient at the prior mean.
    """
    pr = params.with_theta(prior.mean0)
    I, M, N = pr.A_q.shape
    tau = LinearPolicy.build(pr, q).tau_star(prior.mean0)
    eq = solve_middle(pr, q, tau)
    tau_i = tau.reshape(I, N)[i]
    t_i = np.asarray(t).reshape(I, N)[i]

    def payoff(qi):
        ell = best_response(pr, i, qi, eq.gamma, tau_i)
        u = (
            qi @ (pr.R[i] - pr.p[i])
            - ell @ (pr.R[i] + tau_i - eq.gamma)
            - 0.5 * qi @ pr.H_q[i] @ qi
            - 0.5 * ell @ pr.H_ell[i] @ ell
            - t_i @ qi
        )
        if mode == "subsidy":
            u += qi @ tau_i
        return np.array([u])

    return central_jacobian(payoff, q.reshape(I, N)[i], step=1e-5).ravel()


def test_private_foc_residual_and_oracle(demo_economy):
    params, prior, _ = demo_economy
    model = diag_model(prior)
    t = np.array([0.01, -0.02, 0.03, 0.0])
    sol = private_allocation(params, prior, model, t=t)
    assert sol.residual <= 1e-8
    for i in range(2):
        g = private_payoff_gradient(params, prior, sol.q_star, t, i)
        assert np.abs(g).max() < 1e-6


def test_private_foc_subsidy_oracle(demo_economy):
    params, prior, _ = demo_economy
    sol = private_allocation(params, prior, diag_model(prior), mode="subsidy")
    assert sol.residual <= 1e-8
    for i in range(2):
        assert np.abs(private_payoff_gradient(params, prior, sol.q_star, sol.t_star, i, "subsidy")).max() < 1e-6


def test_frictionless_allocation():
    params, prior, q, _ = random_instance(3)
    I, M, N = params.A_q.shape
    # constraints that can never bind, no price impact, so no liquidation and no policy
    params = params.with_theta(prior.mean0)
    params.rho = np.full_like(params.rho, -1e3)
    params.Gamma = np.zeros_like(params.Gamma)
    prior.mean0 = params.theta
    sol = private_allocation(params, prior, diag_model(prior))
    expect = np.concatenate([np.linalg.solve(params.H_q[i], params.R[i] - params.p[i]) for i in range(I)])
    assert np.allclose(sol.q_star, expect, atol=1e-10)
    assert sol.residual <= 1e-8


def test_scenario_average_matches_prior_mean_form(demo_economy):
    params, prior, _ = demo_economy
    model = diag_model(prior)
    sc = scenarios(prior, model, seed=3, count=32)
    a = ex_ante_wedges(params, prior, model)
    b = ex_ante_wedges(params, prior, model, scenarios=sc)
    # every draw shares the pattern here, so the antithetic average is exact
    assert np.allclose(a.q_star, b.q_star, atol=1e-10)
    assert np.allclose(a.t_star, b.t_star, atol=1e-10)


def test_wedges_induce_planner_holdings(demo_economy):
    params, prior, _ = demo_economy
    model = diag_model(prior)
    sol = ex_ante_wedges(params, prior, model)
    again = private_allocation(params, prior, model, t=sol.t_star)
    assert again.residual <= 1e-8
    assert np.allclose(again.q_star, sol.q_star, atol=1e-10)


def test_no_ex_post_intervention_reduces_to_line_one(demo_economy):
    params, prior, _ = demo_economy
    params = params.with_theta(prior.mean0)
    params.Delta = 1e9 * np.eye(params.Delta.shape[0])
    model = diag_model(prior)
    sol = ex_ante_wedges(params, prior, model)
    prob = ExAnteProblem(params, prior, model)
    ev = prob.evaluate(sol.q_star, prob.patterns_at(sol.q_star))
    assert np.abs(ev.expected_tau).max() < 1e-7
    assert np.allclose(sol.t_star, ev.line1, atol=1e-8)
    assert np.abs(sol.t_star).max() > 1e-3  # the standard price externality survives


def test_gamma_zero_gives_zero_wedge():
    params, prior, _, _ = random_instance(5)
    params = params.with_theta(prior.mean0)
    params.Gamma = np.zeros_like(params.Gamma)
    sol = ex_ante_wedges(params, prior, diag_model(prior))
    assert np.abs(sol.t_star).max() < 1e-10


def test_planner_holdings_same_in_both_modes(demo_economy):
    params, prior, _ = demo_economy
    model = diag_model(prior)
    tax = ex_ante_wedges(params, prior, model, mode="tax")
    sub = ex_ante_wedges(params, prior, model, mode="subsidy")
    assert np.allclose(tax.q_star, sub.q_star, atol=1e-10)
    assert np.allclose(sub.t_star - tax.t_star, tax.expected_tau, atol=1e-10)


def test_higher_anticipated_tax_lowers_holdings(demo_economy):
    params, prior, _ = demo_economy
    model = diag_model(prior)
    base = private_allocation(params, prior, model)
    from firesale_lab.economy import sensitivities

    sens = sensitivities(params.with_theta(prior.mean0), base.q_star)
    for i in range(2):
        for n in range(2):
            if not (sens.Lambda_q[i] > 0).all():
                continue
            shift = np.zeros(4)
            shift[i * 2 + n] = 0.05
            moved = private_allocation(params, prior, model, tau_shift=shift)
            assert moved.q_star[i * 2 + n] <= base.q_star[i * 2 + n] + 1e-12


def test_moral_hazard_decomposition(demo_economy):
    params, prior, _ = demo_economy
    sol = ex_ante_wedges(params, prior, diag_model(prior))
    reports = [
        moral_hazard_decomposition(params, prior, m, sol.q_star, mode="subsidy")
        for m in (diag_model(prior, 0.1), diag_model(prior, 5.0))
    ]
    for r in reports:
        assert np.all(r.covariance == 0.0)
    assert np.array_equal(reports[0].overinvestment, reports[1].overinvestment)
    assert reports[0].overinvestment_value == reports[1].overinvestment_value
    rows = reports[0].rows(2, 2)
    assert len(rows) == 4 and rows[0]["overinvestment"] is not None


def test_covariance_zero_over_scenarios(demo_economy):
    params, prior, _ = demo_economy
    model = diag_model(prior)
    sc = scenarios(prior, model, seed=1, count=16)
    sol = ex_ante_wedges(params, prior, model)
    r = moral_hazard_decomposition(params, prior, model, sol.q_star, scenarios=sc)
    assert np.abs(r.covariance).max() < 1e-14


def local_optimality_probe(params, prior, model, delta=1e-3, draws=2000, seed=11):
    """Largest welfare improvement from a +-delta coordinate perturbation of t, in paired MC standard errors."""
    sol = ex_ante_wedges(params, prior, model)
    base = social_welfare(params, prior, model, sol.q_star, draws, seed, return_samples=True)
    worst = -np.inf
    for k in range(sol.t_star.size):
        for sgn in (1.0, -1.0):
            t = sol.t_star.copy()
            t[k] += sgn * delta
            q = private_allocation(params, prior, model, t=t, q0=sol.q_star).q_star
            alt = social_welfare(params, prior, model, q, draws, seed, return_samples=True)
            diff = alt - base
            se = diff.std(ddof=1) / np.sqrt(diff.size)
            worst = max(worst, (diff.mean() - 2 * se))
    return sol, worst


def test_local_optimality_probe(demo_economy):
    params, prior, _ = demo_economy
    _, worst = local_optimality_probe(params, prior, diag_model(prior), draws=400)
    assert worst <= 0.0


def test_invalid_mode(demo_economy):
    params, prior, _ = demo_economy
    from firesale_lab.errors import InvalidParams

    with pytest.raises(InvalidParams):
        private_allocation(params, prior, diag_model(prior), mode="bonus")
