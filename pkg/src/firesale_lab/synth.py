"""Synthetic economies and holdings panels.

The panel generator plants a bilinear, features-driven component in the trade
z-scores so that the best achievable prediction correlation is known in
closed form (it equals ``sqrt(beta)``), and ties each period to the economy
by labelling it with the Middle equilibrium liquidations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.stats import ortho_group

from .beliefs import Posterior, Prior, SignalModel, revealing_model, uninformative_model, update
from .economy import Dimensions, EconomyParams, solve_middle
from .errors import InvalidParams, UncalibratedModel
from .graph_net import FeatureSchema, HoldingsGraph

Array = NDArray[np.float64]


@dataclass
class GeneratorSpec:
    n_assets: int = 2
    n_intermediaries: int = 2
    n_constraints: int = 1
    h_ell_spectrum: tuple[float, float] = (1.0, 2.0)
    h_q_spectrum: tuple[float, float] = (1.0, 2.0)
    gamma_spectrum: tuple[float, float] = (0.3, 0.8)
    delta_scale: float = 0.05
    prior_scale: float = 0.05
    # holdings panel
    n_investors: int = 200
    n_panel_assets: int = 100
    n_periods: int = 12
    holdings_density: float = 0.08
    beta: float = 0.8
    noise: float = 1.0
    crisis_periods: tuple[int, ...] = (9, 10, 11)
    crisis_shock: float = 0.25
    stress_threshold: float = 1.5
    signal_rank: int = 3  # latent characteristics per node in the planted bilinear signal
    churn: float = 0.02
    pressure_noise: float = 0.3
    pressure_loading: float = 0.15  # weight of size x pressure in the planted signal
    seed: int = 0

    @property
    def dims(self) -> Dimensions:
        return Dimensions(self.n_assets, self.n_intermediaries, self.n_constraints)

    def validate(self) -> None:
        self.dims
        for name in ("h_ell_spectrum", "h_q_spectrum", "gamma_spectrum"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise InvalidParams(f"{name} must satisfy 0 < lo <= hi")
        if not 0.0 <= self.beta <= 1.0:
            raise InvalidParams("beta must lie in [0, 1]")
        if self.n_periods < 3:
            raise InvalidParams("a panel needs at least 3 periods")
        if not 0 < self.holdings_density <= 1:
            raise InvalidParams("holdings_density must lie in (0, 1]")
        if self.delta_scale < 0 or self.prior_scale < 0 or self.noise < 0:
            raise InvalidParams("scales must be nonnegative")


def random_spd(rng: np.random.Generator, n: int, lo: float, hi: float) -> Array:
    """Symmetric matrix with eigenvalues drawn in [lo, hi] in a random basis."""
    if n == 1:
        return np.array([[rng.uniform(lo, hi)]])
    Q = ortho_group.rvs(n, random_state=rng)
    eig = rng.uniform(lo, hi, size=n)
    S = (Q * eig) @ Q.T
    return 0.5 * (S + S.T)


def gen_economy(spec: GeneratorSpec) -> tuple[EconomyParams, Prior, Array]:
    """Random economy, a prior centred on its uncertain block, and a reference allocation.

    Returns ``(params, prior, q_ref)``. The construction keeps every rollover
    row binding with strictly positive liquidations at ``q_ref`` so that the
    pattern is stable under moderate prior uncertainty.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    N, I, M = spec.n_assets, spec.n_intermediaries, spec.n_constraints
    A_ell = rng.uniform(0.6, 1.4, size=(I, M, N))
    A_q = rng.uniform(0.2, 0.5, size=(I, M, N))
    # near-diagonal adjustment costs keep H^{-1} A' positive, hence interior sales
    H_ell = np.array([_mild_spd(rng, N, *spec.h_ell_spectrum) for _ in range(I)])
    H_q = np.array([_mild_spd(rng, N, *spec.h_q_spectrum) for _ in range(I)])
    Gamma = _mild_spd(rng, N, *spec.gamma_spectrum)
    Delta = spec.delta_scale * _mild_spd(rng, N * I, 0.5, 1.5) if spec.delta_scale > 0 else np.zeros((N * I, N * I))
    q_ref = rng.uniform(0.8, 1.2, size=(I, N))
    rho = rng.uniform(0.2, 0.4, size=(I, M))
    gamma_bar = rng.uniform(0.85, 0.95, size=N)
    R = gamma_bar + rng.uniform(0.02, 0.08, size=(I, N))
    p = R - rng.uniform(0.5, 0.7, size=(I, N))
    params = EconomyParams(
        A_q=A_q, A_ell=A_ell, H_ell=H_ell, rho=rho, R=R, H_q=H_q, p=p,
        gamma_bar=gamma_bar, Gamma=Gamma, Delta=Delta,
    )
    params.validate()
    theta = params.theta
    D = theta.size
    # prior sd proportional to prior_scale, with mild cross-correlation
    F = rng.normal(size=(D, 2)) / np.sqrt(2)
    corr = 0.7 * np.eye(D) + 0.3 * (F @ F.T) / max(1.0, np.abs(F @ F.T).max())
    corr = 0.5 * (corr + corr.T)
    scale = spec.prior_scale * np.concatenate([np.full(I * M, 0.3), np.full(I * N, 0.1), np.full(N, 0.1)])
    cov0 = corr * np.outer(scale, scale)
    prior = Prior(mean0=theta.copy(), cov0=cov0)
    return params, prior, q_ref.ravel()


def _mild_spd(rng, n, lo, hi):
    """SPD matrix close to diagonal: a random rotation by a small angle."""
    if n == 1:
        return np.array([[rng.uniform(lo, hi)]])
    A = rng.normal(size=(n, n)) * 0.15
    Q, _ = np.linalg.qr(np.eye(n) + A - A.T)
    Q = Q * np.sign(np.diag(Q))
    eig = rng.uniform(lo, hi, size=n)
    S = (Q * eig) @ Q.T
    return 0.5 * (S + S.T)


# -- holdings panels ------------------------------------------------------------------

STYLES = ("active", "passive", "hedge")
TRADE_SCALE = 0.05


@dataclass
class LiquidationLabel:
    period: int
    theta: Array
    q: Array  # aggregate holdings by (intermediary type, asset class), flattened
    ell: Array
    L: Array


@dataclass
class Panel:
    graphs: list[HoldingsGraph]
    stress: Array  # scalar stress series, one value per period
    stress_threshold: float
    labels: list[LiquidationLabel]
    investor_type: Array  # economy intermediary each investor maps to
    investor_style: Array
    asset_class: Array  # economy asset each panel asset maps to
    planted: dict  # period -> {(investor_id, asset_id): standardised planted signal}
    spec: GeneratorSpec
    q_ref: Array = field(default_factory=lambda: np.zeros(0))

    @property
    def periods(self) -> list[int]:
        return [g.period for g in self.graphs]

    @property
    def stressed(self) -> Array:
        return self.stress > self.stress_threshold

    def graph(self, period: int) -> HoldingsGraph:
        return self.graphs[self.periods.index(period)]

    def label(self, period: int) -> LiquidationLabel:
        return next(lb for lb in self.labels if lb.period == period)


def panel_schema(spec: GeneratorSpec) -> FeatureSchema:
    k = spec.signal_rank
    return FeatureSchema(
        ["size"] + [f"x{j + 1}" for j in range(k)] + ["pressure"],
        {"node_type": 2, "group": max(spec.n_assets, spec.n_intermediaries), "style": 3},
        log1p=["size"],
    )


def _zscore(v: Array) -> Array:
    sd = v.std()
    return (v - v.mean()) / sd if sd > 1e-12 else np.zeros_like(v)


def _aggregate(spec, inv_type, asset_class, ii, aa, w) -> Array:
    q = np.zeros((spec.n_intermediaries, spec.n_assets))
    np.add.at(q, (inv_type[ii], asset_class[aa]), w)
    return q


def gen_panel(spec: GeneratorSpec, economy=None) -> Panel:
    """Holdings panel with a planted, features-bilinear trade signal.

    Trade z-scores are ``sqrt(beta)`` times the within-asset standardised
    planted signal ``u_i' W v_a + c * size_i * pressure_a`` (all at t-1) plus
    independent noise. Asset ``pressure`` at t-1 is a noisy leading indicator
    of next period's liquidations in the asset's class, which is what lets
    trade forecasts inform the regulator. Every period is labelled with the
    Middle equilibrium at the aggregated holdings and a prior draw of theta.
    """
    spec.validate()
    params, prior, q_ref = economy if economy is not None else gen_economy(spec)
    rng = np.random.default_rng([spec.seed, 1])
    I, N, M = spec.n_intermediaries, spec.n_assets, spec.n_constraints
    nI, nA, T, k = spec.n_investors, spec.n_panel_assets, spec.n_periods, spec.signal_rank
    schema = panel_schema(spec)

    inv_type = rng.integers(0, I, nI)
    inv_style = rng.choice(3, size=nI, p=[0.5, 0.3, 0.2])
    asset_class = rng.integers(0, N, nA)
    sector = rng.integers(0, 3, nA)
    log_aum = rng.normal(0.0, 1.0, nI)
    log_mcap = rng.normal(0.0, 1.0, nA)
    x_inv = rng.standard_normal((nI, k))
    x_ast = rng.standard_normal((nA, k))
    W = rng.standard_normal((k, k)) / np.sqrt(k)

    # economy states, with the crisis tightening rollover needs
    chol = np.linalg.cholesky(prior.cov0 + 1e-14 * np.eye(prior.dim))
    thetas = []
    for t in range(T):
        th = prior.mean0 + chol @ rng.standard_normal(prior.dim)
        if t in spec.crisis_periods:
            th[: I * M] *= 1.0 + spec.crisis_shock
        thetas.append(th)
    L_ref = np.array([solve_middle(params.with_theta(th), q_ref).L for th in thetas])
    press_class = (L_ref - L_ref.mean(axis=0)) / np.where(L_ref.std(axis=0) > 1e-12, L_ref.std(axis=0), 1.0)

    # initial holdings: every investor holds something, every asset has at least three holders
    mask = rng.random((nI, nA)) < spec.holdings_density
    mask[np.arange(nI), rng.integers(0, nA, nI)] = True
    for a in range(nA):
        short = 3 - mask[:, a].sum()
        if short > 0:
            mask[rng.choice(np.flatnonzero(~mask[:, a]), short, replace=False), a] = True
    ii, aa = np.nonzero(mask)
    w = np.exp(0.6 * log_aum[ii] + 0.4 * log_mcap[aa] + 0.3 * rng.standard_normal(ii.size))

    def pressure_at(t):
        """Asset pressure observed at t, leading period t+1 liquidations."""
        base = press_class[t + 1][asset_class] if t + 1 < T else rng.standard_normal(N)[asset_class]
        return base + spec.pressure_noise * rng.standard_normal(nA)

    def make_graph(t, ii, aa, w, press):
        numeric = np.zeros((nI + nA, k + 2))
        numeric[:nI, 0] = np.exp(log_aum)
        numeric[nI:, 0] = np.exp(log_mcap)
        numeric[:nI, 1 : k + 1] = x_inv
        numeric[nI:, 1 : k + 1] = x_ast
        numeric[nI:, k + 1] = press
        cat = np.zeros((nI + nA, 3), dtype=np.int64)
        cat[nI:, 0] = 1
        cat[:nI, 1], cat[nI:, 1] = inv_type, asset_class
        cat[:nI, 2], cat[nI:, 2] = inv_style, sector
        order = np.lexsort((aa, ii))
        return HoldingsGraph(
            np.array([f"inv{j:04d}" for j in range(nI)], dtype=object),
            np.array([f"ast{j:04d}" for j in range(nA)], dtype=object),
            ii[order], aa[order], w[order], numeric, cat, t, schema,
        )

    press = pressure_at(0)
    graphs = [make_graph(0, ii, aa, w, press)]
    planted: dict = {}
    base_q = _aggregate(spec, inv_type, asset_class, ii, aa, w)
    norm = q_ref.reshape(I, N) / np.where(base_q > 0, base_q, 1.0)
    labels = []

    def label(t, ii, aa, w):
        q = (_aggregate(spec, inv_type, asset_class, ii, aa, w) * norm).ravel()
        eq = solve_middle(params.with_theta(thetas[t]), q)
        return LiquidationLabel(t, thetas[t], q, eq.ell, eq.L)

    labels.append(label(0, ii, aa, w))
    phi = 0.9
    for t in range(1, T):
        sz = (log_aum - log_aum.mean()) / log_aum.std()
        s_raw = np.einsum("ek,kl,el->e", x_inv[ii], W, x_ast[aa]) + spec.pressure_loading * sz[ii] * press[aa]
        s_std = np.zeros_like(s_raw)
        for a in range(nA):
            sel = aa == a
            s_std[sel] = _zscore(s_raw[sel])
        z = np.sqrt(spec.beta) * s_std + spec.noise * np.sqrt(1.0 - spec.beta) * rng.standard_normal(ii.size)
        common = -0.1 * spec.crisis_shock if t in spec.crisis_periods else 0.0
        pct = np.maximum(TRADE_SCALE * z + common + 0.005 * spec.noise * rng.standard_normal(nA)[aa], -0.9)
        prev_ids = graphs[-1]
        planted[t] = {(prev_ids.investors[i], prev_ids.assets[a]): v for i, a, v in zip(ii, aa, s_std)}
        w = w * (1.0 + pct)
        # churn: some positions close, as many new ones open
        holders = np.bincount(aa, minlength=nA)
        close = rng.random(ii.size) < spec.churn
        close &= holders[aa] > 3
        keep = ~close
        ii, aa, w = ii[keep], aa[keep], w[keep]
        n_new = int(close.sum())
        existing = set((ii * nA + aa).tolist())
        cand = [c for c in rng.permutation(nI * nA)[: 4 * n_new + 10].tolist() if c not in existing][:n_new]
        if cand:
            cand = np.array(cand)
            ni, na = cand // nA, cand % nA
            ii = np.concatenate([ii, ni])
            aa = np.concatenate([aa, na])
            w = np.concatenate([w, np.exp(0.6 * log_aum[ni] + 0.4 * log_mcap[na] + 0.3 * rng.standard_normal(ni.size))])
        # characteristics drift
        x_inv = phi * x_inv + np.sqrt(1 - phi**2) * rng.standard_normal(x_inv.shape)
        x_ast = phi * x_ast + np.sqrt(1 - phi**2) * rng.standard_normal(x_ast.shape)
        log_aum = log_aum + 0.05 * rng.standard_normal(nI)
        log_mcap = log_mcap + 0.05 * rng.standard_normal(nA)
        press = pressure_at(t)
        graphs.append(make_graph(t, ii, aa, w, press))
        labels.append(label(t, ii, aa, w))
    stress = 0.5 * rng.standard_normal(T)
    for t in spec.crisis_periods:
        if t < T:
            stress[t] = 2.0 + abs(0.3 * rng.standard_normal())
    for g in graphs:
        g.validate()
    return Panel(graphs, stress, spec.stress_threshold, labels, inv_type, inv_style, asset_class, planted, spec, q_ref)


# -- forecast bridge --------------------------------------------------------------------


def class_forecast(panel: Panel, prev_period: int, inv_idx, asset_idx, pred) -> Array:
    """Position-weighted mean predicted trade z-score per economy asset class."""
    g = panel.graph(prev_period)
    pos = {(i, a): w for i, a, w in zip(g.inv_idx.tolist(), g.asset_idx.tolist(), g.weight)}
    N = panel.spec.n_assets
    num, den = np.zeros(N), np.zeros(N)
    for i, a, p in zip(np.asarray(inv_idx).tolist(), np.asarray(asset_idx).tolist(), np.asarray(pred, float)):
        wt = pos.get((i, a), 0.0)
        c = panel.asset_class[a]
        num[c] += wt * p
        den[c] += wt
    return num / np.where(den > 0, den, 1.0)


@dataclass
class Calibration:
    """Affine map from per-class forecasts to expected total liquidations, fit on training periods."""

    intercept: Array
    slope: Array  # (N, F)
    resid_cov: Array  # (N, N), the effective signal noise
    periods: list[int]

    def predict(self, forecast) -> Array:
        return self.intercept + self.slope @ np.asarray(forecast, float)

    def to_dict(self) -> dict:
        return {
            "intercept": self.intercept.tolist(),
            "slope": self.slope.tolist(),
            "resid_cov": self.resid_cov.tolist(),
            "periods": list(self.periods),
        }


NOISE_FLOOR = 1e-12


def calibrate(forecasts, L, periods=None) -> Calibration:
    """OLS of realised total liquidations on forecasts, residual covariance with a small floor."""
    X = np.atleast_2d(np.asarray(forecasts, float))
    Y = np.atleast_2d(np.asarray(L, float))
    n, F = X.shape
    if n <= F + 1:
        raise UncalibratedModel(f"{n} calibration periods cannot identify {F + 1} coefficients")
    Z = np.column_stack([np.ones(n), X])
    coef, *_ = np.linalg.lstsq(Z, Y, rcond=None)
    resid = Y - Z @ coef
    cov = resid.T @ resid / (n - F - 1)
    cov = 0.5 * (cov + cov.T) + NOISE_FLOOR * np.eye(Y.shape[1])
    return Calibration(coef[0], coef[1:].T, cov, list(periods) if periods is not None else list(range(n)))


def liquidation_signal_map(params: EconomyParams, q, prior: Prior):
    """(L0, SJ): total liquidations at the prior mean and their theta-Jacobian."""
    from .policy import LinearPolicy

    pol = LinearPolicy.build(params.with_theta(prior.mean0), q)
    return pol.total_liquidations(prior.mean0), pol.S @ pol.sens.theta_jac


def effective_signal_model(params: EconomyParams, q, prior: Prior, calibration: Calibration, name: str = "gnn") -> SignalModel:
    """A calibrated forecast read as a noisy observation of total liquidations."""
    _, SJ = liquidation_signal_map(params, q, prior)
    return SignalModel(SJ, calibration.resid_cov, 0.0, name)


def forecast_to_posterior(forecast, calibration: Calibration | None, params: EconomyParams, q, prior: Prior) -> Posterior:
    """Posterior over theta implied by a model forecast; its mean plugs into ``optimal_tau``."""
    if calibration is None:
        raise UncalibratedModel("no calibration fitted on training periods")
    L_hat = calibration.predict(forecast)
    L0, SJ = liquidation_signal_map(params, q, prior)
    model = SignalModel(SJ, calibration.resid_cov, 0.0, "gnn")
    return update(prior, model, L_hat - L0 + SJ @ prior.mean0)


def welfare_comparison(params: EconomyParams, q, prior: Prior, calibration: Calibration, draws: int = 2000, seed: int = 0) -> dict:
    """Uninformative, forecast-informed and full-information welfare, closed form and end-to-end.

    The Monte Carlo runs share theta draws, so differences between models
    are measured with paired standard errors.
    """
    from .policy import expected_welfare, simulate_policy_welfare

    pr = params.with_theta(prior.mean0)
    q = np.asarray(q, float).ravel()
    models = {
        "uninformative": uninformative_model(prior.dim),
        "gnn": effective_signal_model(pr, q, prior, calibration),
        "full": revealing_model(prior.dim),
    }
    out: dict = {"closed_form": {}, "monte_carlo": {}, "paired_se": {}}
    base = None
    for name, m in models.items():
        rep = expected_welfare(pr, q, prior, m, draws=draws, seed=seed, baseline=base)
        base = (rep.baseline, rep.baseline_se)
        out["closed_form"][name] = rep.total
    samples = {n: simulate_policy_welfare(pr, q, prior, m, draws, seed, return_samples=True) for n, m in models.items()}
    for name, v in samples.items():
        out["monte_carlo"][name] = float(v.mean())
    for a, b in (("uninformative", "gnn"), ("gnn", "full")):
        d = samples[b] - samples[a]
        out["paired_se"][f"{b}-{a}"] = float(d.std(ddof=1) / np.sqrt(d.size))
    cf, mc, se = out["closed_form"], out["monte_carlo"], out["paired_se"]
    out["ordering_closed_form"] = bool(cf["uninformative"] <= cf["gnn"] + 1e-12 and cf["gnn"] <= cf["full"] + 1e-12)
    out["ordering_monte_carlo"] = bool(
        mc["uninformative"] <= mc["gnn"] + 2 * se["gnn-uninformative"] and mc["gnn"] <= mc["full"] + 2 * se["full-gnn"]
    )
    return out
