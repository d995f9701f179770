"""Ex-post regulator: optimal liquidation wedges and the welfare they buy.

The wedge formula and the welfare decomposition are evaluated on the linear
economy obtained by holding the active-constraint pattern found at the
reference point (the economy's own ``theta``) fixed. Under that pattern
liquidations are affine in ``theta`` and the wedge-response matrices are
deterministic, which is what makes the moments below closed-form.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from numpy.typing import NDArray

from .beliefs import Posterior, Prior, SignalModel, posterior_mean_cov, psd_factor, update
from .economy import EconomyParams, Sensitivities, sensitivities, sensitivities_at, solve_middle
from .errors import NonConcave, SingularXi

Array = NDArray[np.float64]

XI_COND_LIMIT = 1e12


@dataclass
class RegulatorConstants:
    Xi: Array  # (NI, NI)
    Psi0: Array  # (NI, NI)
    Upsilon0: Array  # (NI, N)
    B: Array  # sum_i Lambda_bar_tau_i, (N, NI)
    Lambda_bar_tau: Array  # (NI, NI)


@dataclass
class WelfareReport:
    baseline: float
    expected_intervention_gain: float
    precision_gain: float
    total: float
    baseline_se: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def block_diag_H(params: EconomyParams) -> Array:
    I, _, N = params.A_q.shape
    H = np.zeros((N * I, N * I))
    for i in range(I):
        H[i * N : (i + 1) * N, i * N : (i + 1) * N] = params.H_ell[i]
    return H


def _sum_rows(I: int, N: int) -> Array:
    """S = 1' (x) I_N, mapping stacked per-intermediary vectors to totals."""
    return np.kron(np.ones((1, I)), np.eye(N))


def regulator_constants(params: EconomyParams, sens: Sensitivities) -> RegulatorConstants:
    Lb = sens.Lambda_bar_tau
    B = sens.sum_Lambda_bar_tau
    G = params.Gamma
    # Lambda_bar_tau is -d ell / d tau, symmetric for a potential game; use it verbatim
    Xi = Lb.T + B.T @ G @ B + params.Delta
    Psi0 = 2.0 * B.T @ G @ B + params.Delta + Lb.T @ block_diag_H(params) @ Lb
    Xi_s = 0.5 * (Xi + Xi.T)
    if np.linalg.cond(Xi_s) > XI_COND_LIMIT:
        raise SingularXi(f"Xi is numerically singular (cond {np.linalg.cond(Xi_s):.3e})")
    Upsilon0 = np.linalg.solve(Xi_s, B.T @ G)
    return RegulatorConstants(Xi_s, 0.5 * (Psi0 + Psi0.T), Upsilon0, B, Lb)


@dataclass
class LinearPolicy:
    """The regulator's linear view of the economy at allocation ``q``."""

    params: EconomyParams
    q: Array
    sens: Sensitivities
    const: RegulatorConstants

    @classmethod
    def build(cls, params: EconomyParams, q) -> "LinearPolicy":
        q = np.asarray(q, dtype=float).ravel()
        sens = sensitivities(params, q)
        return cls(params, q, sens, regulator_constants(params, sens))

    @property
    def S(self) -> Array:
        I, N = self.sens.dims
        return _sum_rows(I, N)

    def liquidations(self, theta, tau=None) -> Array:
        return self.sens.liquidations(self.q, tau, theta)

    def total_liquidations(self, theta) -> Array:
        """L(q) at ``theta`` with no intervention (affine in ``theta``)."""
        return self.S @ self.liquidations(theta)

    @property
    def tau_map(self) -> Array:
        """Xi^{-1} B' Gamma: from expected total liquidations to wedges."""
        return self.const.Upsilon0

    @property
    def theta_to_tau(self) -> Array:
        """Linear map from a posterior mean of ``theta`` to the optimal wedge."""
        return self.tau_map @ self.S @ self.sens.theta_jac

    def tau_star(self, theta_mean) -> Array:
        return self.tau_map @ self.total_liquidations(theta_mean)


def optimal_tau(
    params: EconomyParams,
    q,
    posterior: Posterior,
    mode: str = "tax",
    policy: LinearPolicy | None = None,
    draws: int | None = None,
    seed: int = 0,
) -> Array:
    """Optimal ex-post wedges given a posterior over ``theta``.

    By default the causal factor is taken from the reference pattern, so the
    expectation only touches the predicted total liquidations, which are
    affine in the posterior mean. With ``draws`` the conditional expectations
    of ``Xi`` and ``B' Gamma L`` are instead averaged over posterior draws,
    each draw using the sensitivities of its own active pattern; this is the
    general form and remains exact when draws straddle pattern boundaries.
    ``mode`` is accepted for symmetry with the ex-ante stage: a subsidy on
    held assets is a de facto tax on sales and leaves the wedge unchanged.
    """
    if mode not in ("tax", "subsidy"):
        raise ValueError(f"unknown mode {mode!r}")
    if draws is not None:
        return _optimal_tau_sampled(params, q, posterior, draws, seed)
    pol = policy or LinearPolicy.build(params, q)
    return pol.tau_star(posterior.mean_post)


def _optimal_tau_sampled(params: EconomyParams, q, posterior: Posterior, draws: int, seed: int) -> Array:
    q = np.asarray(q, dtype=float).ravel()
    thetas = posterior_draws(posterior, draws, seed)
    cache: dict = {}
    Xi_sum = np.zeros((q.size, q.size))
    b_sum = np.zeros(q.size)
    for th in thetas:
        p_t = params.with_theta(th)
        eq = solve_middle(p_t, q)
        if eq.pattern not in cache:
            cache[eq.pattern] = regulator_constants(p_t, sensitivities_at(p_t, q, None, eq))
        c = cache[eq.pattern]
        Xi_sum += c.Xi
        b_sum += c.B.T @ params.Gamma @ eq.L
    Xi_bar = Xi_sum / len(thetas)
    try:
        return np.linalg.solve(Xi_bar, b_sum / len(thetas))
    except np.linalg.LinAlgError as exc:
        raise SingularXi("posterior expectation of Xi is singular") from exc


def posterior_draws(posterior: Posterior, count: int, seed: int) -> Array:
    """Antithetic draws of ``theta`` from a Gaussian posterior, one per row."""
    F = psd_factor(posterior.cov_post)
    z = _antithetic_normals(seed, count, posterior.mean_post.shape[0])
    return posterior.mean_post + z @ F.T


def _antithetic_normals(seed: int, count: int, dim: int) -> Array:
    half = max(1, count // 2)
    z = np.random.default_rng(seed).standard_normal((half, dim))
    return np.concatenate([z, -z])


def draw_welfare_quadratic(params: EconomyParams, q: Array, theta: Array, D_cache: dict, step: float = 1e-3):
    """Realised welfare at ``theta`` as a quadratic in the wedges: (value at 0, gradient, -Hessian).

    Built from direct equilibrium solves; the response to wedges is exact
    within an active-constraint pattern and is cached per pattern.
    """
    p_t = params.with_theta(theta)
    I, M, N = params.A_q.shape
    eq = solve_middle(p_t, q)
    key = eq.pattern
    if key not in D_cache:
        cols = []
        for j in range(N * I):
            e = np.zeros(N * I)
            e[j] = step
            cols.append((solve_middle(p_t, q, e).ell - solve_middle(p_t, q, -e).ell) / (2 * step))
        D_cache[key] = np.column_stack(cols)
    Dm = D_cache[key]
    S = _sum_rows(I, N)
    H = block_diag_H(params)
    G = params.Gamma
    a = eq.ell
    r = (p_t.R - p_t.gamma_bar).ravel()
    grad = -Dm.T @ r - 2.0 * Dm.T @ S.T @ G @ S @ a - Dm.T @ H @ a
    negH = 2.0 * Dm.T @ S.T @ G @ S @ Dm + Dm.T @ H @ Dm + params.Delta
    value = realized_welfare(p_t, q, eq.ell, eq.gamma)
    return value, grad, negH


def realized_welfare(params: EconomyParams, q, ell, gamma, tau=None) -> float:
    """Sum of intermediary payoffs (remissions net out) less the regulatory cost."""
    I, M, N = params.A_q.shape
    qi = np.asarray(q, dtype=float).reshape(I, N)
    li = np.asarray(ell, dtype=float).reshape(I, N)
    total = 0.0
    for i in range(I):
        total += (
            qi[i] @ (params.R[i] - params.p[i])
            - li[i] @ (params.R[i] - gamma)
            - 0.5 * qi[i] @ params.H_q[i] @ qi[i]
            - 0.5 * li[i] @ params.H_ell[i] @ li[i]
        )
    if tau is not None:
        tau = np.asarray(tau, dtype=float).ravel()
        total -= 0.5 * tau @ params.Delta @ tau
    return float(total)


def welfare_oracle_tau(params: EconomyParams, q, posterior: Posterior, mc_draws: int = 10_000, seed: int = 0) -> Array:
    """Brute-force maximiser of posterior-expected welfare over wedges.

    Draws ``theta`` from the posterior (antithetic pairs), solves the Middle
    equilibrium directly for each draw, and maximises the average of the
    per-draw quadratics exactly.
    """
    q = np.asarray(q, dtype=float).ravel()
    thetas = posterior_draws(posterior, mc_draws, seed)
    cache: dict = {}
    g_sum = np.zeros(q.size)
    H_sum = np.zeros((q.size, q.size))
    for th in thetas:
        _, g, negH = draw_welfare_quadratic(params, q, th, cache)
        g_sum += g
        H_sum += negH
    g_bar, H_bar = g_sum / len(thetas), H_sum / len(thetas)
    H_bar = 0.5 * (H_bar + H_bar.T)
    w = np.linalg.eigvalsh(H_bar)
    if w.min() <= 1e-12 * max(1.0, w.max()):
        raise NonConcave(f"expected welfare is not strictly concave in the wedges (min eig {w.min():.3e})")
    return np.linalg.solve(H_bar, g_bar)


def tau_prior_moments(params: EconomyParams, q, prior: Prior, model: SignalModel, policy: LinearPolicy | None = None):
    """Prior mean and covariance of the optimal wedge under ``model``."""
    pol = policy or LinearPolicy.build(params, q)
    mean = pol.tau_star(prior.mean0)
    K = pol.theta_to_tau
    cov = K @ posterior_mean_cov(prior, model) @ K.T
    return mean, 0.5 * (cov + cov.T)


def baseline_welfare(params: EconomyParams, q, prior: Prior, draws: int = 10_000, seed: int = 0) -> tuple[float, float]:
    """Monte Carlo prior expectation of no-intervention welfare, with its standard error."""
    q = np.asarray(q, dtype=float).ravel()
    F = psd_factor(prior.cov0)
    z = _antithetic_normals(seed, draws, prior.dim)
    half = z.shape[0] // 2
    vals = np.empty(z.shape[0])
    for k, zk in enumerate(z):
        p_t = params.with_theta(prior.mean0 + F @ zk)
        eq = solve_middle(p_t, q)
        vals[k] = realized_welfare(p_t, q, eq.ell, eq.gamma)
    pair = 0.5 * (vals[:half] + vals[half:])
    se = float(pair.std(ddof=1) / np.sqrt(half)) if half > 1 else 0.0
    return float(vals.mean()), se


def expected_welfare(
    params: EconomyParams,
    q,
    prior: Prior,
    model: SignalModel,
    draws: int = 10_000,
    seed: int = 0,
    policy: LinearPolicy | None = None,
    baseline: tuple[float, float] | None = None,
) -> WelfareReport:
    """Ex-ante welfare of deploying ``model`` at positions ``q``.

    The baseline does not depend on the model, so callers comparing models
    can pass a precomputed ``(value, standard_error)`` pair.
    """
    pol = policy or LinearPolicy.build(params, q)
    mean, cov = tau_prior_moments(params, q, prior, model, pol)
    Psi0 = pol.const.Psi0
    base, se = baseline if baseline is not None else baseline_welfare(params, q, prior, draws, seed)
    gain_mean = 0.5 * float(mean @ Psi0 @ mean)
    gain_prec = 0.5 * float(np.trace(Psi0 @ cov))
    return WelfareReport(base, gain_mean, gain_prec, base + gain_mean + gain_prec, se)


def simulate_policy_welfare(
    params: EconomyParams,
    q,
    prior: Prior,
    model: SignalModel,
    draws: int = 10_000,
    seed: int = 0,
    tau_rule=None,
    policy: LinearPolicy | None = None,
    return_samples: bool = False,
):
    """End-to-end Monte Carlo of realised welfare when wedges follow ``tau_rule``.

    Each draw samples ``theta`` from the prior and a signal from ``model``,
    sets the wedge from the posterior (or from ``tau_rule(s, posterior)``),
    and solves the Middle equilibrium at the true ``theta``. Draws are
    antithetic in the joint shock. Returns the mean and its standard error,
    or with ``return_samples`` the antithetic pair averages themselves (for
    paired comparisons under common random numbers).
    """
    q = np.asarray(q, dtype=float).ravel()
    pol = policy or LinearPolicy.build(params, q)
    D, S = prior.dim, model.n_signals
    Ft, Fe = psd_factor(prior.cov0), psd_factor(model.noise_cov)
    # separate streams for theta and signal noise keep theta draws common across models
    z = _antithetic_normals(seed, draws, D)
    e = _antithetic_normals(seed + 7919, draws, S)
    half = z.shape[0] // 2
    vals = np.empty(z.shape[0])
    for k, zk in enumerate(z):
        theta = prior.mean0 + Ft @ zk
        s = model.loading @ theta + Fe @ e[k]
        post = update(prior, model, s)
        tau = pol.tau_star(post.mean_post) if tau_rule is None else tau_rule(s, post)
        p_t = params.with_theta(theta)
        eq = solve_middle(p_t, q, tau)
        vals[k] = realized_welfare(p_t, q, eq.ell, eq.gamma, tau)
    pair = 0.5 * (vals[:half] + vals[half:])
    if return_samples:
        return pair
    se = float(pair.std(ddof=1) / np.sqrt(half)) if half > 1 else 0.0
    return float(vals.mean()), se


def subsidy_variant_payoff(params: EconomyParams, i: int, q_i, ell_i, gamma, tau_i, q_star_i, ell_star_i) -> float:
    """Payoff when the wedge is paid as a subsidy on assets held to maturity.

    Remissions are evaluated at the equilibrium ``(q*, l*)`` so they vanish
    there and the payoff collapses to the wedge-free one.
    """
    q_i, ell_i, gamma, tau_i = (np.asarray(a, dtype=float) for a in (q_i, ell_i, gamma, tau_i))
    U = (
        q_i @ (params.R[i] - params.p[i])
        - ell_i @ (params.R[i] - gamma)
        - 0.5 * q_i @ params.H_q[i] @ q_i
        - 0.5 * ell_i @ params.H_ell[i] @ ell_i
    )
    return float(U + (q_i - np.asarray(q_star_i)) @ tau_i - (ell_i - np.asarray(ell_star_i)) @ tau_i)


def tau_report(params: EconomyParams, q, posterior: Posterior, mc_draws: int = 10_000, seed: int = 0, rtol: float = 1e-4) -> dict:
    """Formula wedge next to the brute-force oracle, flagged when they disagree."""
    formula = optimal_tau(params, q, posterior)
    try:
        oracle = welfare_oracle_tau(params, q, posterior, mc_draws, seed)
    except NonConcave as exc:
        return {"tau": formula.tolist(), "oracle": None, "relative_gap": None, "flagged": True, "note": str(exc)}
    scale = max(np.linalg.norm(oracle), 1e-12)
    gap = float(np.linalg.norm(formula - oracle) / scale) if np.linalg.norm(oracle) > 0 else float(np.linalg.norm(formula))
    return {
        "tau": formula.tolist(),
        "oracle": oracle.tolist(),
        "relative_gap": gap,
        "flagged": bool(gap > rtol),
    }
