"""Beginning-stage portfolios: private optimum under anticipated policy and the planner's holding wedges.

Everything an intermediary anticipates (its own liquidations, the fire-sale
discount, the regulator's wedge) is affine in holdings once each scenario's
active-constraint pattern is fixed. The first-order conditions are therefore
solved exactly by one linear solve per pattern guess, and the guess is
re-verified against the full equilibrium solver afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .beliefs import Prior, ScenarioSet, SignalModel, scenarios as draw_scenarios, update
from .economy import EconomyParams, Pattern, Sensitivities, sensitivities_at, solve_fixed, solve_middle
from .errors import InvalidParams, NoFixedPoint, SingularFoc
from .model_choice import CostFamily
from .policy import LinearPolicy, regulator_constants, simulate_policy_welfare, tau_prior_moments

Array = NDArray[np.float64]

FOC_TOL = 1e-8
MAX_PATTERN_ITER = 50
DAMPING = 0.5


@dataclass
class ExAnteSolution:
    q_star: Array
    t_star: Array
    residual: float
    iterations: int
    mode: str = "tax"
    expected_tau: Array | None = None

    def as_dict(self) -> dict:
        return {
            "q_star": self.q_star.tolist(),
            "t_star": self.t_star.tolist(),
            "residual": self.residual,
            "iterations": self.iterations,
            "mode": self.mode,
            "expected_tau": None if self.expected_tau is None else self.expected_tau.tolist(),
        }


@dataclass
class _Draw:
    theta: Array
    theta_hat: Array  # posterior mean the regulator acts on
    weight: float


@dataclass
class _Evaluation:
    """Scenario-averaged objects at one allocation with patterns held fixed."""

    private: Array  # private marginal value before the holding wedge
    line1: Array
    line2: Array
    expected_tau: Array
    direct_tax: Array
    price: Array
    holding_cost: Array
    covariance: Array
    t_social: Array = field(init=False)

    def __post_init__(self):
        self.t_social = self.line1 + self.line2


class ExAnteProblem:
    """Scenario discretisation of prior expectations at the Beginning.

    ``scenarios=None`` evaluates expectations exactly at the prior mean, which
    is the prior expectation of every affine object here. Passing a
    :class:`ScenarioSet` averages over its draws instead, each carrying its
    own active pattern.
    """

    def __init__(
        self,
        params: EconomyParams,
        prior: Prior,
        model: SignalModel,
        mode: str = "tax",
        scenarios: ScenarioSet | None = None,
        cost: CostFamily | None = None,
        tau_shift=None,
    ):
        if mode not in ("tax", "subsidy"):
            raise InvalidParams(f"unknown mode {mode!r}")
        self.params = params.with_theta(prior.mean0)
        self.prior = prior
        self.model = model
        self.mode = mode
        self.cost = cost
        I, M, N = params.A_q.shape
        self.I, self.N = I, N
        self.tau_shift = np.zeros(N * I) if tau_shift is None else np.asarray(tau_shift, dtype=float)
        if scenarios is None:
            self.draws = [_Draw(prior.mean0, prior.mean0, 1.0)]
        else:
            self.draws = [
                _Draw(th, update(prior, model, s).mean_post, float(w))
                for th, s, w in zip(scenarios.thetas, scenarios.signals, scenarios.weights)
            ]

    # -- pattern bookkeeping ---------------------------------------------------

    def patterns_at(self, q) -> tuple[Pattern, list[Pattern]]:
        ref = solve_middle(self.params, q).pattern
        per = [solve_middle(self.params.with_theta(d.theta), q).pattern for d in self.draws]
        return ref, per

    # -- evaluation ------------------------------------------------------------

    def evaluate(self, q, patterns: tuple[Pattern, list[Pattern]]) -> _Evaluation:
        q = np.asarray(q, dtype=float).ravel()
        I, N = self.I, self.N
        ref_pat, per = patterns
        pr = self.params
        eq_ref = solve_fixed(pr, q, None, ref_pat)
        sens_ref = sensitivities_at(pr, q, None, eq_ref)
        const = regulator_constants(pr, sens_ref)
        pol = LinearPolicy(pr, q, sens_ref, const)
        Gam = pr.Gamma
        qi = q.reshape(I, N)

        private = np.zeros(N * I)
        line1 = np.zeros(N * I)
        e_tau = np.zeros(N * I)
        e_Bq = np.zeros((N, N * I))
        direct = np.zeros(N * I)
        price = np.zeros(N * I)
        holding = np.zeros(N * I)
        lam_tau_mean = np.zeros((I, N))  # E[Lambda_i' tau_i], for the covariance split
        lam_mean = np.zeros((I, N, N))
        for d, pat in zip(self.draws, per):
            p_k = pr.with_theta(d.theta)
            eq = solve_fixed(p_k, q, None, pat)
            sens = sensitivities_at(p_k, q, None, eq)
            tau = pol.tau_star(d.theta_hat) + self.tau_shift
            B = sens.sum_Lambda_bar_tau
            Bq = sens.sum_Lambda_bar_q
            ell = eq.ell.reshape(I, N)
            taui = tau.reshape(I, N)
            fire = p_k.R - eq.gamma  # theta_i(q), one row per intermediary
            w = d.weight
            for i in range(I):
                sl = slice(i * N, (i + 1) * N)
                Lq = sens.Lambda_q[i]
                H = p_k.H_ell[i]
                r_i = p_k.R[i] - p_k.p[i] - p_k.H_q[i] @ qi[i] - Lq.T @ (fire[i] + H @ ell[i])
                if self.mode == "subsidy":
                    r_i = r_i + taui[i]
                private[sl] += w * r_i
                d_i = Lq.T @ taui[i]
                p_i = Lq.T @ (Gam @ B @ tau)
                h_i = Lq.T @ (H @ sens.Lambda_bar_tau_i(i) @ tau)
                direct[sl] += w * d_i
                price[sl] += w * p_i
                holding[sl] += w * h_i
                lam_tau_mean[i] += w * d_i
                lam_mean[i] += w * Lq
                # uninternalised price effects of q_j, summed over the intermediaries they hit
                for j in range(I):
                    line1[j * N : (j + 1) * N] -= w * sens.Lambda_qe[i, j].T @ (fire[i] + H @ ell[i])
            line1 += w * (Bq.T @ Gam @ eq.L)
            e_tau += w * tau
            e_Bq += w * Bq
        dC = np.zeros(N * I) if self.cost is None else self.cost.dcost_dq(q)
        Ups, Psi = const.Upsilon0, const.Psi0
        e_psi_tau = direct - price - holding
        line2 = dC - e_Bq.T @ (Ups.T @ Psi @ e_tau) - e_psi_tau
        covariance = np.zeros(N * I)
        for i in range(I):
            covariance[i * N : (i + 1) * N] = lam_tau_mean[i] - lam_mean[i].T @ e_tau.reshape(I, N)[i]
        # the anticipated regulation enters the private marginal value with a minus sign
        private = private - e_psi_tau
        if self.mode == "subsidy":
            # the subsidy on held assets pulls holdings up by E[tau*]; the wedge takes it back
            line2 = line2 + e_tau
        return _Evaluation(private, line1, line2, e_tau, direct, price, holding, covariance)

    def private_residual(self, q, t, patterns) -> Array:
        return self.evaluate(q, patterns).private - np.asarray(t, dtype=float).ravel()

    # -- solvers -----------------------------------------------------------------

    def _affine_solve(self, fn, q0) -> Array:
        """Root of an affine map given as a function, recovered from n + 1 evaluations."""
        f0 = fn(q0)
        n = q0.size
        A = np.empty((n, n))
        for j in range(n):
            e = np.zeros(n)
            e[j] = 1.0
            A[:, j] = fn(q0 + e) - f0
        try:
            if np.linalg.cond(A) > 1e12:
                raise np.linalg.LinAlgError
            step = np.linalg.solve(A, -f0)
        except np.linalg.LinAlgError as exc:
            raise SingularFoc("first-order system in holdings is singular") from exc
        return q0 + step

    def _fixed_point(self, fn_of_patterns, q0) -> tuple[Array, tuple, int]:
        q = np.asarray(q0, dtype=float).ravel()
        patterns = self.patterns_at(q)
        for it in range(1, MAX_PATTERN_ITER + 1):
            q_new = self._affine_solve(lambda x: fn_of_patterns(x, patterns), q)
            new_patterns = self.patterns_at(q_new)
            if _same(new_patterns, patterns):
                return q_new, patterns, it
            q = q + DAMPING * (q_new - q)
            patterns = self.patterns_at(q)
        raise NoFixedPoint(f"active patterns kept shifting after {MAX_PATTERN_ITER} iterations")

    def private_allocation(self, t=None, q0=None) -> ExAnteSolution:
        t = np.zeros(self.N * self.I) if t is None else np.asarray(t, dtype=float).ravel()
        q0 = self._start(q0)
        q, pats, it = self._fixed_point(lambda x, p: self.private_residual(x, t, p), q0)
        ev = self.evaluate(q, pats)
        res = float(np.abs(ev.private - t).max())
        return ExAnteSolution(q, t, res, it, self.mode, ev.expected_tau)

    def planner(self, q0=None) -> ExAnteSolution:
        """Holdings and wedges such that the private optimum under ``t`` satisfies the planner's FOC."""
        q0 = self._start(q0)

        def social(x, p):
            ev = self.evaluate(x, p)
            return ev.private - ev.t_social

        q, pats, it = self._fixed_point(social, q0)
        ev = self.evaluate(q, pats)
        t = ev.t_social
        res = float(np.abs(ev.private - t).max())
        return ExAnteSolution(q, t, res, it, self.mode, ev.expected_tau)

    def _start(self, q0):
        if q0 is not None:
            return np.asarray(q0, dtype=float).ravel()
        # frictionless portfolio as a neutral starting point
        pr = self.params
        return np.concatenate([np.linalg.solve(pr.H_q[i], pr.R[i] - pr.p[i]) for i in range(self.I)])


def _same(a, b) -> bool:
    return a[0] == b[0] and all(x == y for x, y in zip(a[1], b[1]))


def private_allocation(
    params: EconomyParams,
    prior: Prior,
    model: SignalModel,
    scenarios: ScenarioSet | None = None,
    t=None,
    mode: str = "tax",
    q0=None,
    tau_shift=None,
) -> ExAnteSolution:
    """Privately optimal holdings given the holding wedge ``t`` and anticipated ex-post policy."""
    prob = ExAnteProblem(params, prior, model, mode, scenarios, tau_shift=tau_shift)
    return prob.private_allocation(t, q0)


def ex_ante_wedges(
    params: EconomyParams,
    prior: Prior,
    model: SignalModel,
    cost: CostFamily | None = None,
    scenarios: ScenarioSet | None = None,
    mode: str = "tax",
    q0=None,
) -> ExAnteSolution:
    """Planner's holding wedges, iterated jointly with the holdings they induce.

    The returned ``q_star`` is the private response to ``t_star`` and is
    re-derived from scratch as a consistency check.
    """
    prob = ExAnteProblem(params, prior, model, mode, scenarios, cost)
    sol = prob.planner(q0)
    check = prob.private_allocation(sol.t_star, sol.q_star)
    if np.abs(check.q_star - sol.q_star).max() > 1e-8 * max(1.0, np.abs(sol.q_star).max()):
        raise NoFixedPoint("holdings induced by the wedges differ from the planner's holdings")
    sol.q_star = check.q_star
    sol.residual = check.residual
    sol.iterations += check.iterations
    return sol


@dataclass
class MoralHazardReport:
    direct_tax: Array  # E[Lambda_i' tau_i]
    price: Array  # E[Lambda_i' Gamma B tau]
    holding_cost: Array  # E[Lambda_i' H_i Lambda_bar_i tau]
    covariance: Array  # E[Lambda' tau] - E[Lambda]' E[tau]
    overinvestment: Array | None  # subsidy only: E[tau_i*], the marginal of q_i' E[tau_i*]
    overinvestment_value: float | None
    note: str = ""

    def rows(self, I: int, N: int) -> list[dict]:
        out = []
        for i in range(I):
            for n in range(N):
                k = i * N + n
                out.append(
                    {
                        "intermediary": i,
                        "asset": n,
                        "direct_tax": float(self.direct_tax[k]),
                        "price": float(self.price[k]),
                        "holding_cost": float(self.holding_cost[k]),
                        "covariance": float(self.covariance[k]),
                        "overinvestment": None if self.overinvestment is None else float(self.overinvestment[k]),
                    }
                )
        return out


def moral_hazard_decomposition(
    params: EconomyParams,
    prior: Prior,
    model: SignalModel,
    q,
    scenarios: ScenarioSet | None = None,
    mode: str = "tax",
) -> MoralHazardReport:
    """Split the regulation term of the private FOC into its channels.

    The liquidation response to holdings is deterministic here, so the
    covariance channel is identically zero whatever the model.
    """
    q = np.asarray(q, dtype=float).ravel()
    prob = ExAnteProblem(params, prior, model, mode, scenarios)
    ev = prob.evaluate(q, prob.patterns_at(q))
    over = over_val = None
    if mode == "subsidy":
        mean_tau, _ = tau_prior_moments(prob.params, q, prior, model)
        over = mean_tau
        over_val = float(q @ mean_tau)
    note = "holdings response is deterministic, so the covariance channel is exactly zero"
    return MoralHazardReport(ev.direct_tax, ev.price, ev.holding_cost, ev.covariance, over, over_val, note)


def social_welfare(
    params: EconomyParams,
    prior: Prior,
    model: SignalModel,
    q,
    draws: int = 4000,
    seed: int = 0,
    cost: CostFamily | None = None,
    return_samples: bool = False,
):
    """End-to-end Monte Carlo welfare at holdings ``q`` net of the information cost."""
    pr = params.with_theta(prior.mean0)
    q = np.asarray(q, dtype=float).ravel()
    out = simulate_policy_welfare(pr, q, prior, model, draws, seed, return_samples=return_samples)
    c = 0.0
    if cost is not None:
        _, Sig = tau_prior_moments(pr, q, prior, model)
        c = cost.cost(Sig)
    if return_samples:
        return out - c
    return out[0] - c, out[1]


def default_scenarios(prior: Prior, model: SignalModel, seed: int = 0, count: int = 64) -> ScenarioSet:
    return draw_scenarios(prior, model, seed, count)
