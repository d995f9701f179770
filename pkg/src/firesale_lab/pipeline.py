"""End-to-end run: synthetic panel, graph model, calibrated forecasts, policy and welfare.

The chain is gen_economy -> gen_panel -> train -> per-class forecasts ->
calibration on training periods -> posterior -> optimal wedge, closed by a
three-way welfare comparison between the uninformative model, the calibrated
graph model and full information.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .beliefs import Posterior, Prior, revealing_model, update
from .economy import EconomyParams
from .graph_net import GnnConfig
from .policy import LinearPolicy, optimal_tau
from .synth import Calibration, GeneratorSpec, Panel, calibrate, class_forecast, forecast_to_posterior, gen_economy, gen_panel, welfare_comparison
from .trainer import TrainConfig, TrainResult, predict_positions, train


@dataclass
class PipelineResult:
    params: EconomyParams
    prior: Prior
    q: np.ndarray
    panel: Panel
    training: TrainResult
    forecasts: dict  # target period -> per-class forecast
    calibration: Calibration
    tau: dict  # "prior", "gnn", "full" wedges at the last period
    perfect_forecast_gap: float
    welfare: dict = field(default_factory=dict)

    def summary(self) -> dict:
        m = self.training.metrics
        return {
            "train_periods": self.training.train_periods,
            "validation_periods": self.training.validation_periods,
            "best_epoch": self.training.best_epoch,
            "trade_correlation": {"train": m.corr("train"), "validation": m.corr("validation")},
            "mae_correlation": {"train": m.corr("train", "mae"), "validation": m.corr("validation", "mae")},
            "calibration": self.calibration.to_dict(),
            "tau": {k: v.tolist() for k, v in self.tau.items()},
            "perfect_forecast_gap": self.perfect_forecast_gap,
            "welfare": self.welfare,
        }


def period_forecasts(params, panel: Panel, periods) -> dict:
    """Per-class forecast for each target period, from positions held the period before."""
    out = {}
    for t in periods:
        ii, aa, pred = predict_positions(params, panel, t - 1)
        out[t] = class_forecast(panel, t - 1, ii, aa, pred)
    return out


def perfect_forecast_gap(params: EconomyParams, q, prior: Prior, thetas) -> float:
    """Largest gap between the bridge wedge under exact forecasts and the analytic full-information wedge.

    Exact forecasts are the linearised total liquidations at each ``theta``;
    calibrating them against themselves gives the identity map.
    """
    pol = LinearPolicy.build(params, q)
    L = np.array([pol.total_liquidations(th) for th in thetas])
    cal = calibrate(L, L)
    gap = 0.0
    for th, l in zip(thetas, L):
        via_bridge = optimal_tau(params, q, forecast_to_posterior(l, cal, params, q, prior), policy=pol)
        exact = optimal_tau(params, q, update(prior, revealing_model(prior.dim), th), policy=pol)
        gap = max(gap, float(np.abs(via_bridge - exact).max() / max(1.0, np.abs(exact).max())))
    return gap


def run_pipeline(
    spec: GeneratorSpec,
    train_cfg: TrainConfig,
    gnn_cfg: GnnConfig,
    draws: int = 2000,
    seed: int = 0,
    economy=None,
) -> PipelineResult:
    params, prior, q = economy if economy is not None else gen_economy(spec)
    panel = gen_panel(spec, (params, prior, q))
    res = train(panel, train_cfg, gnn_cfg)
    targets = panel.periods[1:]
    forecasts = period_forecasts(res.params, panel, targets)
    tr = res.train_periods
    cal = calibrate([forecasts[t] for t in tr], [panel.label(t).L for t in tr], tr)

    pr = params.with_theta(prior.mean0)
    last = targets[-1]
    post = forecast_to_posterior(forecasts[last], cal, pr, q, prior)
    theta_last = panel.label(last).theta
    tau = {
        "prior": optimal_tau(pr, q, Posterior(prior.mean0, prior.cov0)),
        "gnn": optimal_tau(pr, q, post),
        "full": optimal_tau(pr, q, update(prior, revealing_model(prior.dim), theta_last)),
    }
    gap = perfect_forecast_gap(pr, q, prior, [panel.label(t).theta for t in targets])
    welfare = welfare_comparison(pr, q, prior, cal, draws=draws, seed=seed)
    return PipelineResult(pr, prior, q, panel, res, forecasts, cal, tau, gap, welfare)
