"""Command-line front end: scenario document in, CSV and JSON reports out.

Every command reads the same scenario document, writes under ``--out`` and
stamps each output with the config hash and seed. Failures print a JSON
error object on stderr and exit with 2 (configuration), 3 (numerical
failure) or 4 (non-convergence).

Set ``FIRESALE_LOG`` (DEBUG, INFO, WARNING) to change log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .beliefs import Posterior, Prior, SignalModel, revealing_model, uninformative_model
from .config import ScenarioConfig, SignalSection, load_config
from .economy import EconomyParams, sensitivities, solve_middle
from .errors import ConfigError, LabError
from .ex_ante import default_scenarios, ex_ante_wedges, moral_hazard_decomposition
from .graph_net import load_checkpoint, save_checkpoint, write_panel_csv
from .model_choice import CostFamily, choose_model, lyapunov_residual, noise_family
from .pipeline import run_pipeline
from .policy import LinearPolicy, baseline_welfare, expected_welfare, simulate_policy_welfare, tau_prior_moments, tau_report
from .synth import gen_economy, gen_panel, liquidation_signal_map
from .trainer import evaluate, train

log = logging.getLogger("firesale_lab")

COMMANDS = (
    "solve-middle",
    "optimal-tau",
    "welfare",
    "model-choice",
    "ex-ante",
    "gen-data",
    "train",
    "evaluate",
    "pipeline",
    "sweep",
)


# -- output helpers -------------------------------------------------------------------


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def _plain(obj):
    """JSON-ready copy with numpy values converted."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


class Output:
    """Writes files under the output root, each stamped with the config hash and seed."""

    def __init__(self, root, cfg: ScenarioConfig):
        self.root = Path(root)
        self.stamp = {"config_hash": cfg.config_hash(), "seed": cfg.seed}
        self.written: list[str] = []

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.written.append(rel)
        return p

    def csv(self, rel: str, header: list[str], rows) -> None:
        with open(self.path(rel), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["config_hash", "seed"] + header)
            for r in rows:
                w.writerow([self.stamp["config_hash"], self.stamp["seed"]] + [_cell(v) for v in r])

    def json(self, rel: str, doc: dict) -> None:
        body = {**self.stamp, **_plain(doc)}
        self.path(rel).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")

    def series(self, rel: str, points) -> None:
        """Plot-ready long format: (period, series, value)."""
        self.csv(rel, ["period", "series", "value"], points)


# -- scenario objects -----------------------------------------------------------------


def scenario_economy(cfg: ScenarioConfig) -> tuple[EconomyParams, Prior, np.ndarray]:
    if cfg.economy is not None:
        params = EconomyParams.from_dict(cfg.economy.model_dump())
        if cfg.prior is None or cfg.q is None:
            raise ConfigError("an explicit economy needs a prior and holdings q")
        prior, q = Prior.from_dict(cfg.prior.model_dump()), np.asarray(cfg.q, float)
    else:
        params, prior, q = gen_economy(cfg.generator_spec())
        if cfg.prior is not None:
            prior = Prior.from_dict(cfg.prior.model_dump())
        if cfg.q is not None:
            q = np.asarray(cfg.q, float)
    if prior.dim != params.theta.size:
        raise ConfigError(f"prior has dimension {prior.dim}, the economy has {params.theta.size} uncertain parameters")
    I, N = params.dims.n_intermediaries, params.dims.n_assets
    if q.size != I * N:
        raise ConfigError(f"q has {q.size} entries, expected {I * N}")
    return params.with_theta(prior.mean0), prior, q


def build_model(spec: SignalSection, params, q, prior: Prior) -> SignalModel:
    D = prior.dim
    if spec.kind == "uninformative":
        m = uninformative_model(D)
    elif spec.kind == "full_information":
        m = revealing_model(D)
    elif spec.kind == "liquidations":
        _, SJ = liquidation_signal_map(params, q, prior)
        cov = SJ @ prior.cov0 @ SJ.T
        m = SignalModel(SJ, spec.noise_scale * 0.5 * (cov + cov.T), 0.0, f"liquidations@{spec.noise_scale:g}")
    else:
        if spec.loading is None or spec.noise_cov is None:
            raise ConfigError("a custom signal model needs loading and noise_cov")
        m = SignalModel(np.asarray(spec.loading), np.asarray(spec.noise_cov))
    return SignalModel(m.loading, m.noise_cov, spec.cost_scale, spec.name or m.name or spec.kind)


def build_cost(cfg: ScenarioConfig, n: int, k_scale: float | None = None) -> CostFamily:
    c = cfg.cost
    scale = c.k_scale if k_scale is None else k_scale
    K = np.asarray(c.K, float) * (scale / c.k_scale) if c.K is not None else scale * np.eye(n)
    if K.shape != (n, n):
        raise ConfigError(f"cost K has shape {K.shape}, expected {(n, n)}")
    return CostFamily(K, c.level_offset)


def _grid(I, N):
    return [(i, n) for i in range(I) for n in range(N)]


# -- commands -------------------------------------------------------------------------


def cmd_solve_middle(cfg: ScenarioConfig, out: Output, args) -> dict:
    params, prior, q = scenario_economy(cfg)
    eq = solve_middle(params, q)
    sens = sensitivities(params, q)
    I, N = params.dims.n_intermediaries, params.dims.n_assets
    out.csv(
        "equilibrium/liquidations.csv",
        ["intermediary", "asset", "q", "ell", "clipped"],
        [(i, n, q[i * N + n], eq.ell[i * N + n], eq.clipped[i, n]) for i, n in _grid(I, N)],
    )
    out.csv("equilibrium/prices.csv", ["asset", "L", "gamma"], [(n, eq.L[n], eq.gamma[n]) for n in range(N)])
    blocks = {
        "Lambda_bar_q": sens.Lambda_bar_q,
        "Lambda_bar_tau": sens.Lambda_bar_tau,
        "theta_jac": sens.theta_jac,
        "ell_bar": sens.ell_bar.reshape(-1, 1),
    }
    rows = [(name, r, c, M[r, c]) for name, M in blocks.items() for r in range(M.shape[0]) for c in range(M.shape[1])]
    for kind, arr in (("Lambda_qe", sens.Lambda_qe), ("Lambda_taue", sens.Lambda_taue)):
        for i, j in _grid(I, I):
            rows += [(f"{kind}[{i},{j}]", r, c, arr[i, j, r, c]) for r in range(N) for c in range(N)]
    out.csv("equilibrium/sensitivities.csv", ["block", "row", "col", "value"], rows)
    summary = {
        "L": eq.L,
        "gamma": eq.gamma,
        "binding": eq.binding,
        "clipped": eq.clipped,
        "iterations": eq.iterations,
        "kkt_residual": eq.kkt_residual,
    }
    out.json("equilibrium/summary.json", summary)
    return summary


def cmd_optimal_tau(cfg: ScenarioConfig, out: Output, args) -> dict:
    params, prior, q = scenario_economy(cfg)
    post = Posterior(prior.mean0, prior.cov0)
    rep = tau_report(params, q, post, mc_draws=cfg.welfare.oracle_draws, seed=cfg.seed)
    I, N = params.dims.n_intermediaries, params.dims.n_assets
    tau, oracle = rep["tau"], rep["oracle"]
    out.csv(
        "policy/tau.csv",
        ["intermediary", "asset", "tau", "oracle_tau"],
        [(i, n, tau[i * N + n], None if oracle is None else oracle[i * N + n]) for i, n in _grid(I, N)],
    )
    out.json("policy/tau_report.json", rep)
    return rep


def cmd_welfare(cfg: ScenarioConfig, out: Output, args) -> dict:
    params, prior, q = scenario_economy(cfg)
    pol = LinearPolicy.build(params, q)
    base = baseline_welfare(params, q, prior, cfg.welfare.draws, cfg.seed)
    rows, doc = [], {}
    for spec in cfg.signal_models:
        m = build_model(spec, params, q, prior)
        rep = expected_welfare(params, q, prior, m, policy=pol, baseline=base)
        mc, se = simulate_policy_welfare(params, q, prior, m, cfg.welfare.draws, cfg.seed, policy=pol)
        rows.append((m.name, rep.baseline, rep.expected_intervention_gain, rep.precision_gain, rep.total, mc, se))
        doc[m.name] = {**rep.as_dict(), "monte_carlo": mc, "monte_carlo_se": se}
    out.csv(
        "policy/welfare.csv",
        ["model", "baseline", "expected_intervention_gain", "precision_gain", "total", "monte_carlo", "monte_carlo_se"],
        rows,
    )
    out.json("policy/welfare.json", doc)
    return doc


def _model_choice(cfg, params, q, prior, psi_scale=None, k_scale=None):
    mc = cfg.model_choice
    b = build_model(mc.base, params, q, prior)
    base = SignalModel(b.loading, b.noise_cov, b.cost_scale, mc.base.name or mc.base.kind)
    adopt = (lambda c: mc.adoption_cost / c) if mc.adoption_cost > 0 else None
    family = noise_family(base, mc.noise_scales, adopt)
    pol = LinearPolicy.build(params, q)
    cost = build_cost(cfg, q.size, k_scale)
    psi = mc.psi_scale if psi_scale is None else psi_scale
    chosen, res = choose_model(params, q, prior, cost, family, psi_scale=psi, policy=pol)
    resid = lyapunov_residual(cost.K, res.Sigma_star, psi * pol.const.Psi0)
    return family, chosen, res, resid


def cmd_model_choice(cfg: ScenarioConfig, out: Output, args) -> dict:
    params, prior, q = scenario_economy(cfg)
    family, chosen, res, resid = _model_choice(cfg, params, q, prior)
    scales = cfg.model_choice.noise_scales
    out.csv(
        "model_choice/selection.csv",
        ["model", "noise_scale", "trace_sigma", "objective", "chosen"],
        [(m.name, scales[k], res.model_traces[k], res.model_values[k], k == res.chosen_index) for k, m in enumerate(family)],
    )
    S = res.Sigma_star
    out.csv("model_choice/sigma_star.csv", ["row", "col", "value"], [(r, c, S[r, c]) for r in range(S.shape[0]) for c in range(S.shape[1])])
    doc = {**res.as_dict(), "chosen_model": chosen.name, "lyapunov_residual": resid}
    out.json("model_choice/summary.json", doc)
    return doc


def cmd_ex_ante(cfg: ScenarioConfig, out: Output, args) -> dict:
    params, prior, q = scenario_economy(cfg)
    if cfg.ex_ante.model >= len(cfg.signal_models):
        raise ConfigError(f"ex_ante.model {cfg.ex_ante.model} is not an index into signal_models")
    model = build_model(cfg.signal_models[cfg.ex_ante.model], params, q, prior)
    scen = default_scenarios(prior, model, cfg.seed, cfg.ex_ante.scenarios) if cfg.ex_ante.scenarios else None
    sol = ex_ante_wedges(params, prior, model, scenarios=scen, mode=cfg.mode, q0=q)
    mh = moral_hazard_decomposition(params, prior, model, sol.q_star, scenarios=scen, mode=cfg.mode)
    I, N = params.dims.n_intermediaries, params.dims.n_assets
    et = sol.expected_tau if sol.expected_tau is not None else np.full(I * N, np.nan)
    out.csv(
        "ex_ante/wedges.csv",
        ["intermediary", "asset", "q_star", "t_star", "expected_tau"],
        [(i, n, sol.q_star[i * N + n], sol.t_star[i * N + n], et[i * N + n]) for i, n in _grid(I, N)],
    )
    cols = ["intermediary", "asset", "direct_tax", "price", "holding_cost", "covariance", "overinvestment"]
    out.csv("ex_ante/moral_hazard.csv", cols, [[r[c] for c in cols] for r in mh.rows(I, N)])
    doc = {**sol.as_dict(), "model": model.name, "overinvestment_value": mh.overinvestment_value, "note": mh.note}
    out.json("ex_ante/summary.json", doc)
    return doc


def _panel(cfg: ScenarioConfig):
    spec = cfg.generator_spec()
    economy = scenario_economy(cfg) if cfg.economy is not None else None
    return gen_panel(spec, economy)


def cmd_gen_data(cfg: ScenarioConfig, out: Output, args) -> dict:
    panel = _panel(cfg)
    d = out.root / "gnn" / "panel"
    write_panel_csv(panel.graphs, d, provenance=out.stamp)
    out.written += [f"gnn/panel/{n}" for n in ("edges.csv", "investor_features.csv", "asset_features.csv", "schema.json")]
    N = panel.spec.n_assets
    out.csv(
        "gnn/labels.csv",
        ["period", "asset", "L", "stress", "stressed"],
        [(lb.period, n, lb.L[n], panel.stress[k], panel.stressed[k]) for k, lb in enumerate(panel.labels) for n in range(N)],
    )
    out.csv(
        "gnn/investors.csv",
        ["investor", "intermediary_type", "style"],
        [(k, panel.investor_type[k], panel.investor_style[k]) for k in range(panel.investor_type.size)],
    )
    out.csv("gnn/assets.csv", ["asset", "asset_class"], [(k, panel.asset_class[k]) for k in range(panel.asset_class.size)])
    doc = {"periods": panel.periods, "edges": [g.n_edges for g in panel.graphs], "stressed": panel.stressed}
    out.json("gnn/panel_summary.json", doc)
    return doc


def _write_metrics(out: Output, rel: str, rep) -> None:
    out.csv(
        rel,
        ["period", "split", "slice", "task", "correlation", "n", "stressed"],
        [(r["period"], r["split"], r["slice"], r["task"], r["correlation"], r["n"], r["stressed"]) for r in rep.rows],
    )


def _write_training(out: Output, res) -> None:
    save_checkpoint(res.params, out.root / "gnn" / "checkpoint", meta=out.stamp)
    out.written += ["gnn/checkpoint/manifest.json", "gnn/checkpoint/params.bin"]
    _write_metrics(out, "gnn/metrics.csv", res.metrics)
    out.csv("gnn/history.csv", ["epoch", "train_loss", "validation_loss"], [(h["epoch"], h["train_loss"], h["validation_loss"]) for h in res.history])
    points = [
        (r["period"], f"{r['task']}_{r['slice']}", r["correlation"])
        for r in res.metrics.rows
        if r["correlation"] is not None
    ]
    out.series("reports/correlation_series.csv", points)


def cmd_train(cfg: ScenarioConfig, out: Output, args) -> dict:
    panel = _panel(cfg)
    res = train(panel, cfg.train_config(args.threads), cfg.gnn_config())
    _write_training(out, res)
    doc = {
        **res.metrics.to_json(),
        "best_epoch": res.best_epoch,
        "epochs_run": len(res.history),
        "train_periods": res.train_periods,
        "validation_periods": res.validation_periods,
        "leak_audits": res.leak_audits,
        "n_parameters": res.params.n_parameters,
    }
    out.json("gnn/summary.json", doc)
    return doc


def cmd_evaluate(cfg: ScenarioConfig, out: Output, args) -> dict:
    ckpt = out.root / "gnn" / "checkpoint"
    if not (ckpt / "manifest.json").exists():
        raise ConfigError(f"no checkpoint under {ckpt}; run `train` first")
    params = load_checkpoint(ckpt)
    panel = _panel(cfg)
    tc = cfg.train_config(args.threads)
    tr, va = tc.resolve(panel)
    rep = evaluate(params, panel, {"train": tr, "validation": va}, tc)
    _write_metrics(out, "gnn/evaluation.csv", rep)
    doc = rep.to_json()
    out.json("gnn/evaluation.json", doc)
    return doc


def cmd_pipeline(cfg: ScenarioConfig, out: Output, args) -> dict:
    economy = scenario_economy(cfg) if cfg.economy is not None else None
    res = run_pipeline(cfg.generator_spec(), cfg.train_config(args.threads), cfg.gnn_config(), cfg.welfare.draws, cfg.seed, economy)
    _write_training(out, res.training)
    w = res.welfare
    out.csv(
        "reports/welfare_comparison.csv",
        ["model", "closed_form", "monte_carlo"],
        [(k, w["closed_form"][k], w["monte_carlo"][k]) for k in ("uninformative", "gnn", "full")],
    )
    N = res.calibration.intercept.size
    pts = []
    for t, f in res.forecasts.items():
        L = res.panel.label(t).L
        pred = res.calibration.predict(f)
        for n in range(N):
            pts += [(t, f"forecast_{n}", f[n]), (t, f"L_predicted_{n}", pred[n]), (t, f"L_realised_{n}", L[n])]
    out.series("reports/liquidation_forecasts.csv", pts)
    I = res.params.dims.n_intermediaries
    out.csv(
        "policy/pipeline_tau.csv",
        ["intermediary", "asset", "tau_prior", "tau_gnn", "tau_full"],
        [(i, n, res.tau["prior"][i * N + n], res.tau["gnn"][i * N + n], res.tau["full"][i * N + n]) for i, n in _grid(I, N)],
    )
    doc = res.summary()
    doc["ordering_holds"] = bool(w["ordering_closed_form"] and w["ordering_monte_carlo"])
    out.json("reports/pipeline.json", doc)
    return doc


def cmd_sweep(cfg: ScenarioConfig, out: Output, args) -> dict:
    sw = cfg.sweep
    rows = []
    base_cache = {}
    for v in sw.values:
        if sw.parameter in ("prior_scale", "delta_scale"):
            c = cfg.model_copy(update={"generator": cfg.generator.model_copy(update={sw.parameter: v})})
            params, prior, q = scenario_economy(c)
        else:
            params, prior, q = scenario_economy(cfg)
        if sw.parameter in ("psi_scale", "k_scale"):
            kw = {sw.parameter: v}
            family, chosen, res, _ = _model_choice(cfg, params, q, prior, **kw)
            for k, m in enumerate(family):
                rows.append((sw.parameter, v, m.name, res.model_traces[k], None, None, res.model_values[k], k == res.chosen_index))
            continue
        key = (sw.parameter, v) if sw.parameter in ("prior_scale", "delta_scale") else "fixed"
        if key not in base_cache:
            base_cache[key] = baseline_welfare(params, q, prior, cfg.welfare.draws, cfg.seed)
        pol = LinearPolicy.build(params, q)
        specs = [SignalSection(kind="liquidations", noise_scale=v)] if sw.parameter == "noise_scale" else cfg.signal_models
        for spec in specs:
            m = build_model(spec, params, q, prior)
            rep = expected_welfare(params, q, prior, m, policy=pol, baseline=base_cache[key])
            _, Sig = tau_prior_moments(params, q, prior, m, pol)
            rows.append((sw.parameter, v, m.name, float(np.trace(Sig)), rep.precision_gain, rep.total, None, None))
    header = ["parameter", "value", "model", "trace_sigma", "precision_gain", "total", "objective", "chosen"]
    out.csv("reports/sweep.csv", header, rows)
    doc = {"parameter": sw.parameter, "values": sw.values, "rows": len(rows)}
    if sw.parameter == "noise_scale":
        gains = [r[4] for r in rows]
        doc["precision_gain_monotone"] = bool(all(a >= b for a, b in zip(gains, gains[1:]))) if sorted(sw.values) == list(sw.values) else None
    out.json("reports/sweep.json", doc)
    return doc


HANDLERS = {
    "solve-middle": cmd_solve_middle,
    "optimal-tau": cmd_optimal_tau,
    "welfare": cmd_welfare,
    "model-choice": cmd_model_choice,
    "ex-ante": cmd_ex_ante,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "pipeline": cmd_pipeline,
    "sweep": cmd_sweep,
}


# -- entry point ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="firesale-lab", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="scenario JSON document (defaults apply when omitted)")
    ap.add_argument("--seed", type=int, help="overrides the seed in the config")
    ap.add_argument("--out", help="output directory (overrides output_dir in the config)")
    ap.add_argument("--mode", choices=("tax", "subsidy"), help="ex-ante regulation mode")
    ap.add_argument("--threads", type=int, default=1, help="BLAS threads")
    return ap


def _fail(exc: Exception, code: int) -> int:
    doc = exc.to_dict() if isinstance(exc, LabError) else {"error": type(exc).__name__, "kind": "numerical_failure", "message": str(exc)}
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    return code


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=os.environ.get("FIRESALE_LOG", "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = load_config(args.config, seed=args.seed, mode=args.mode)
        out = Output(args.out or cfg.output_dir, cfg)
        with threadpool_limits(limits=args.threads):
            result = HANDLERS[args.command](cfg, out, args)
    except LabError as exc:
        return _fail(exc, exc.exit_code)
    except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        return _fail(exc, 3)
    summary = {"command": args.command, **out.stamp, "outputs": sorted(set(out.written))}
    print(json.dumps(summary, sort_keys=True))
    log.debug("result keys: %s", sorted(result) if isinstance(result, dict) else None)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
