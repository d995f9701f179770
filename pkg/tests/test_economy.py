from __future__ import annotations

import numpy as np
import pytest
from conftest import random_instance
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import best_response, central_jacobian, norm_close, oracle_liquidations, rel_err

from firesale_lab.economy import (
    EconomyParams,
    arbitrageur_payoff,
    fire_sale_discount,
    intermediary_payoff,
    no_intervention_liquidations,
    sensitivities,
    solve_intermediary,
    solve_middle,
)
from firesale_lab.errors import InvalidParams


def nondegenerate(params, q, tau, margin=1e-4):
    """True when every active row has a clearly positive multiplier and every inactive row clear slack."""
    eq = solve_middle(params, q, tau)
    I, M, N = params.A_q.shape
    qi = q.reshape(I, N)
    slack = np.einsum("imn,in->im", params.A_ell, eq.ell.reshape(I, N)) - (
        np.einsum("imn,in->im", params.A_q, qi) + params.rho
    )
    ok_b = np.all(eq.lam[eq.binding] > margin) and np.all(slack[~eq.binding] > margin)
    ok_c = np.all(eq.mu[eq.clipped] > margin) and np.all(eq.ell.reshape(I, N)[~eq.clipped] > margin)
    return ok_b and ok_c


def sensitivity_instances(count):
    out, seed = [], 0
    while len(out) < count:
        params, prior, q, tau = random_instance(seed)
        if nondegenerate(params, q, tau):
            out.append((params, q, tau))
        seed += 1
    return out


@pytest.mark.parametrize("seed", range(10))
def test_matches_dual_oracle(seed):
    params, _, q, tau = random_instance(seed)
    eq = solve_middle(params, q, tau)
    assert rel_err(eq.ell, oracle_liquidations(params, q, tau)) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_each_intermediary_best_responds(seed):
    params, _, q, tau = random_instance(seed)
    eq = solve_middle(params, q, tau)
    I, _, N = params.A_q.shape
    for i in range(I):
        br = best_response(params, i, q.reshape(I, N)[i], eq.gamma, tau.reshape(I, N)[i])
        assert np.allclose(br, eq.ell_i(i), atol=1e-7)


@pytest.mark.parametrize("seed", range(5))
def test_market_clearing_and_price(seed):
    params, _, q, tau = random_instance(seed)
    eq = solve_middle(params, q, tau)
    I, M, N = params.A_q.shape
    assert np.allclose(eq.L, eq.ell.reshape(I, N).sum(axis=0), atol=1e-14)
    assert np.array_equal(eq.gamma, params.gamma_bar - params.Gamma @ eq.L)
    rows = np.einsum("imn,in->im", params.A_ell, eq.ell.reshape(I, N))
    rhs = np.einsum("imn,in->im", params.A_q, q.reshape(I, N)) + params.rho
    assert np.allclose(rows[eq.binding], rhs[eq.binding], atol=1e-10)
    assert np.all(eq.lam[eq.binding] >= -1e-10)
    assert eq.kkt_residual <= 1e-10


def test_no_forced_sales_gives_zero():
    params, _, q, _ = random_instance(3)
    params = params.with_theta(np.concatenate([0 * params.rho.ravel(), params.R.ravel(), params.gamma_bar]))
    eq = solve_middle(params, 0 * q, None)
    assert np.allclose(eq.ell, 0, atol=1e-14)
    assert np.allclose(eq.gamma, params.gamma_bar)


def test_zero_price_impact_decouples():
    params, _, q, _ = random_instance(4)
    params.Gamma = np.zeros_like(params.Gamma)
    eq = solve_middle(params, q)
    I, M, N = params.A_q.shape
    assert np.array_equal(eq.gamma, params.gamma_bar)
    for i in range(I):
        alone = solve_intermediary(params, i, q.reshape(I, N)[i], params.gamma_bar)
        assert np.allclose(alone, eq.ell_i(i), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.2, 3.0))
def test_homogeneity_under_joint_scaling(seed, alpha):
    params, _, q, _ = random_instance(seed)
    # with R = gamma_bar the potential has no linear term, so the solution is 1-homogeneous in (rho, q)
    params.R = np.tile(params.gamma_bar, (params.R.shape[0], 1))
    eq0 = solve_middle(params, q)
    scaled = EconomyParams(**{**params.__dict__, "rho": alpha * params.rho})
    eq1 = solve_middle(scaled, alpha * q)
    assert eq1.pattern == eq0.pattern
    assert np.allclose(eq1.ell, alpha * eq0.ell, rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("case", range(6))
def test_reconstruction_with_same_pattern(case):
    params, q, tau = sensitivity_instances(6)[case]
    sens = sensitivities(params, q, tau)
    rng = np.random.default_rng(case)
    for _ in range(5):
        dq = q * (1 + 1e-3 * rng.normal(size=q.shape))
        dt = tau + 1e-3 * rng.normal(size=tau.shape)
        eq = solve_middle(params, dq, dt)
        if eq.pattern != sens.pattern:
            continue
        assert rel_err(sens.liquidations(dq, dt), eq.ell) < 1e-9


def test_sensitivities_match_finite_differences():
    for params, q, tau in sensitivity_instances(8):
        sens = sensitivities(params, q, tau)
        I, M, N = params.A_q.shape
        Jq = central_jacobian(lambda x: solve_middle(params, x, tau).ell, q)
        Jt = central_jacobian(lambda x: solve_middle(params, q, x).ell, tau)
        assert norm_close(sens.Lambda_bar_q, Jq)
        assert norm_close(sens.Lambda_bar_tau, -Jt)
        eq = solve_middle(params, q, tau)
        qi, ti = q.reshape(I, N), tau.reshape(I, N)
        for i in range(I):
            own_q = central_jacobian(lambda x: solve_intermediary(params, i, x, eq.gamma, ti[i]), qi[i])
            own_t = central_jacobian(lambda x: solve_intermediary(params, i, qi[i], eq.gamma, x), ti[i])
            assert norm_close(sens.Lambda_q[i], own_q)
            assert norm_close(sens.Lambda_tau[i], -own_t)
            for j in range(I):
                blk_q = Jq[i * N : (i + 1) * N, j * N : (j + 1) * N]
                blk_t = -Jt[i * N : (i + 1) * N, j * N : (j + 1) * N]
                eye = float(i == j)
                assert np.allclose(sens.Lambda_qe[i, j], eye * sens.Lambda_q[i] - blk_q, atol=1e-6)
                assert np.allclose(sens.Lambda_taue[i, j], eye * sens.Lambda_tau[i] - blk_t, atol=1e-6)
        Jth = central_jacobian(lambda th: solve_middle(params.with_theta(th), q, tau).ell, params.theta)
        assert norm_close(sens.theta_jac, Jth)


def test_zero_price_impact_kills_equilibrium_channels():
    params, q, tau = sensitivity_instances(1)[0]
    params.Gamma = np.zeros_like(params.Gamma)
    sens = sensitivities(params, q, tau)
    assert np.all(sens.Lambda_qe == 0.0)
    assert np.all(sens.Lambda_taue == 0.0)


def test_doubling_liquidation_cost_halves_own_channel():
    from firesale_lab.synth import GeneratorSpec, gen_economy

    # one intermediary, one binding row, two assets so the wedge has room to act
    params, _, q = gen_economy(GeneratorSpec(2, 1, 1, seed=3))
    s1 = sensitivities(params, q)
    doubled = EconomyParams(**{**params.__dict__, "H_ell": 2 * params.H_ell})
    s2 = sensitivities(doubled, q)
    assert np.allclose(s2.Lambda_tau, 0.5 * s1.Lambda_tau, atol=1e-12)
    # the total response carries the price feedback, checked against finite differences
    fd = central_jacobian(lambda t: solve_middle(doubled, q, t).ell, np.zeros(2))
    assert norm_close(s2.Lambda_bar_tau, -fd)
    assert not np.allclose(s2.Lambda_bar_tau, 0.5 * s1.Lambda_bar_tau)


def test_no_intervention_and_discount():
    params, _, q, _ = random_instance(5)
    ell, L = no_intervention_liquidations(params, q)
    eq = solve_middle(params, q)
    assert np.allclose(L, eq.L, atol=1e-12)
    assert np.allclose(ell.ravel(), eq.ell, atol=1e-12)
    theta = fire_sale_discount(params, q)
    assert np.allclose(theta, params.R - eq.gamma, atol=1e-12)


def test_payoffs():
    params, _, q, tau = random_instance(6)
    I, M, N = params.A_q.shape
    eq = solve_middle(params, q, tau)
    zero = np.zeros(N)
    assert intermediary_payoff(params, 0, zero, zero, eq.gamma) == 0.0
    base = intermediary_payoff(params, 0, q[:N], eq.ell_i(0), eq.gamma)
    assert intermediary_payoff(params, 0, q[:N], eq.ell_i(0), eq.gamma, tau[:N], eq.ell_i(0)) == base
    assert arbitrageur_payoff(params, zero, params.gamma_bar) == 0.0
    UA = arbitrageur_payoff(params, eq.L, eq.gamma)
    assert np.isclose(UA, 0.5 * eq.L @ params.Gamma @ eq.L)
    assert UA > 0


def test_json_round_trip(tmp_path):
    params, _, _, _ = random_instance(7)
    params.save(tmp_path / "econ.json")
    back = EconomyParams.load(tmp_path / "econ.json")
    assert np.array_equal(back.theta, params.theta)
    assert np.array_equal(back.Delta, params.Delta)


def test_invalid_params_rejected():
    params, _, _, _ = random_instance(8)
    bad = EconomyParams(**{**params.__dict__, "Gamma": -np.eye(params.Gamma.shape[0])})
    with pytest.raises(InvalidParams):
        bad.validate()
    doc = params.to_dict()
    doc["dims"]["N"] += 1
    with pytest.raises(InvalidParams):
        EconomyParams.from_dict(doc)
