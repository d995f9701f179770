"""Training and evaluation of the graph transformer on a holdings panel.

A batch is one target period ``t``: the graph at ``t-1`` with a random subset
of its edges masked drives message passing, the masked edges (plus sampled
non-edges) are reconstructed, and trades between ``t-1`` and ``t`` are
predicted. Periods are assigned wholly to training or validation.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .errors import DivergedLoss, EmptySplit, InvalidParams
from .graph_net import (
    FeatureScaler,
    GnnConfig,
    GnnParams,
    TradeTargets,
    encode,
    init_params,
    joint_loss,
    leak_audit,
    mae_head,
    make_mask,
    prepare,
    trade_head,
    trade_targets,
)
from .synth import Panel

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    max_epochs: int = 500
    early_stop_patience: int = 20
    train_periods: list[int] | None = None  # target periods; default: the first 70% of them
    validation_periods: list[int] | None = None
    cutoff: int | None = None  # last period whose data may enter training
    mask_fraction: float = 0.15
    negative_fraction: float = 0.15
    shuffle_targets: bool = False  # negative control: permute trade targets within each period, once
    seed: int = 0
    threads: int = 1

    def resolve(self, panel: Panel) -> tuple[list[int], list[int]]:
        targets = panel.periods[1:]
        tr = list(self.train_periods) if self.train_periods is not None else targets[: max(1, int(round(0.7 * len(targets))))]
        va = list(self.validation_periods) if self.validation_periods is not None else [t for t in targets if t not in tr]
        unknown = set(tr + va) - set(targets)
        if unknown:
            raise InvalidParams(f"periods {sorted(unknown)} have no trade targets")
        if set(tr) & set(va):
            raise InvalidParams("a period cannot be both training and validation")
        if not tr:
            raise EmptySplit("no training periods")
        if not va:
            raise EmptySplit("no validation periods")
        cutoff = self.cutoff if self.cutoff is not None else max(tr)
        if max(tr) > cutoff:
            raise InvalidParams(f"training period {max(tr)} lies after the cutoff {cutoff}")
        return sorted(tr), sorted(va)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    period: int
    prepared: object
    mask: object
    targets: TradeTargets
    style: np.ndarray  # investor style of each trade pair
    stressed: bool


def build_batch(panel: Panel, period: int, scaler: FeatureScaler, cfg: TrainConfig, mask_seed: int, shuffle_rng=None) -> Batch:
    prev, cur = panel.graph(period - 1), panel.graph(period)
    mask = make_mask(prev, cfg.mask_fraction, cfg.negative_fraction, mask_seed)
    pg = prepare(mask.graph, scaler)
    tt = trade_targets(prev, cur)
    if shuffle_rng is not None:
        tt = TradeTargets(tt.inv_idx, tt.asset_idx, shuffle_rng.permutation(tt.y), tt.period, tt.dropped_assets)
    style = panel.investor_style[tt.inv_idx] if len(tt) else np.zeros(0, dtype=int)
    return Batch(period, pg, mask, tt, style, bool(panel.stressed[panel.periods.index(period)]))


def _forward(params: GnnParams, b: Batch, mode: str, key=(0, 0)):
    emb = encode(b.prepared, params, mode, key)
    pa = mae_head(params, emb, b.mask.inv_idx, b.mask.asset_idx)
    pt = trade_head(params, emb, b.targets.inv_idx, b.targets.asset_idx)
    loss = joint_loss(pa, b.mask.target, pt, b.targets.y, params.config.kappa)
    return loss, pa, pt


def _mask_seed(seed: int, epoch: int, period: int) -> int:
    # epoch -1 marks the fixed evaluation masks
    return int(np.random.SeedSequence([seed, epoch + 1, period]).generate_state(1)[0])


# -- metrics --------------------------------------------------------------------------


def pearson(x, y) -> float | None:
    """Pearson correlation over pairwise-complete observations; None when undefined."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    ok = np.isfinite(x) & np.isfinite(y)
    x, y = x[ok], y[ok]
    if x.size < 2:
        return None
    xs, ys = x - x.mean(), y - y.mean()
    den = math.sqrt(float(xs @ xs) * float(ys @ ys))
    if den <= 1e-300 or not np.isfinite(den):
        return None
    return float(np.clip((xs @ ys) / den, -1.0, 1.0))


SLICES = ("all", "active", "passive", "hedge")


@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)  # period x slice x task
    summary: dict = field(default_factory=dict)  # split -> task -> slice -> pooled correlation
    stress: dict = field(default_factory=dict)  # period -> flagged
    predictions: dict = field(default_factory=dict)  # period -> {"trade": (pred, y, style), "mae": (pred, y)}

    def corr(self, split: str, task: str = "trade", slice_: str = "all") -> float | None:
        return self.summary.get(split, {}).get(task, {}).get(slice_)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["period", "split", "slice", "task", "correlation", "n", "stressed"])
            for r in self.rows:
                c = "" if r["correlation"] is None else f"{r['correlation']:.10g}"
                w.writerow([r["period"], r["split"], r["slice"], r["task"], c, r["n"], int(r["stressed"])])

    def to_json(self) -> dict:
        return {"summary": self.summary, "stress": {str(k): v for k, v in self.stress.items()}}


def _slice_masks(style: np.ndarray) -> dict[str, np.ndarray]:
    return {"all": np.ones(style.size, bool), "active": style == 0, "passive": style == 1, "hedge": style == 2}


def evaluate(params: GnnParams, panel: Panel, splits: dict[str, list[int]], cfg: TrainConfig | None = None, batches=None) -> MetricsReport:
    """Correlations per period, slice and task, plus pooled correlations per split.

    Evaluation masks are fixed by period so repeated calls agree exactly.
    Slices with undefined correlation are reported with ``None``.
    """
    cfg = cfg or TrainConfig()
    rep = MetricsReport()
    for split, periods in splits.items():
        pooled: dict[str, dict[str, list]] = {"trade": {s: ([], []) for s in SLICES}, "mae": {"all": ([], [])}}
        for t in periods:
            b = batches[t] if batches and t in batches else build_batch(panel, t, params.scaler, cfg, _mask_seed(cfg.seed, -1, t))
            _, pa, pt = _forward(params, b, "eval")
            rep.stress[t] = b.stressed
            rep.predictions[t] = {
                "trade": (pt.data.astype(float), b.targets.y, b.style),
                "mae": (pa.data.astype(float), b.mask.target),
            }
            for name, sel in _slice_masks(b.style).items():
                p, y = pt.data[sel].astype(float), b.targets.y[sel]
                rep.rows.append({"period": t, "split": split, "slice": name, "task": "trade", "correlation": pearson(p, y), "n": int(sel.sum()), "stressed": b.stressed})
                pooled["trade"][name][0].append(p)
                pooled["trade"][name][1].append(y)
            c = pearson(pa.data, b.mask.target)
            rep.rows.append({"period": t, "split": split, "slice": "all", "task": "mae", "correlation": c, "n": int(b.mask.target.size), "stressed": b.stressed})
            pooled["mae"]["all"][0].append(pa.data.astype(float))
            pooled["mae"]["all"][1].append(b.mask.target)
        rep.summary[split] = {
            task: {s: (pearson(np.concatenate(v[0]), np.concatenate(v[1])) if v[0] else None) for s, v in d.items()}
            for task, d in pooled.items()
        }
    return rep


# -- training -------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: GnnParams
    metrics: MetricsReport
    history: list[dict]
    best_epoch: int
    train_periods: list[int]
    validation_periods: list[int]
    leak_audits: int = 0


def train(panel: Panel, cfg: TrainConfig, gnn_cfg: GnnConfig) -> TrainResult:
    """Adam on the joint loss over training periods, early stopping on validation joint loss.

    Only training-period graphs reach the gradient; the feature scaler is fit
    on them alone. The returned parameters are those of the best validation
    epoch.
    """
    tr, va = cfg.resolve(panel)
    with threadpool_limits(limits=cfg.threads):
        return _train(panel, cfg, gnn_cfg, tr, va)


def _train(panel, cfg, gnn_cfg, tr, va) -> TrainResult:
    scaler = FeatureScaler.fit([panel.graph(t - 1) for t in tr])
    params = init_params(gnn_cfg, panel.graphs[0].schema, scaler, seed=cfg.seed)
    state = ad.AdamState.zeros_like(params.parameters())
    shuffle_rng = np.random.default_rng([cfg.seed, 99]) if cfg.shuffle_targets else None
    # shuffled targets are fixed once so the control sees a consistent (meaningless) task
    fixed_targets = {t: build_batch(panel, t, scaler, cfg, 0, shuffle_rng).targets for t in tr} if shuffle_rng else {}
    val_batches = {t: build_batch(panel, t, scaler, cfg, _mask_seed(cfg.seed, -1, t)) for t in va}
    # the control must not see real targets through model selection either, so
    # early stopping scores it on permuted validation targets; the final report
    # uses the real ones
    stop_batches = val_batches
    if shuffle_rng is not None:
        stop_batches = {t: build_batch(panel, t, scaler, cfg, _mask_seed(cfg.seed, -1, t), shuffle_rng) for t in va}
    best, best_loss, best_epoch, since = params.copy(), math.inf, -1, 0
    history: list[dict] = []
    audits = 0
    for epoch in range(cfg.max_epochs):
        losses = []
        for t in tr:
            b = build_batch(panel, t, scaler, cfg, _mask_seed(cfg.seed, epoch, t))
            if t in fixed_targets:
                b.targets = fixed_targets[t]
                b.style = panel.investor_style[b.targets.inv_idx]
            if not leak_audit(b.prepared, b.mask):
                raise AssertionError(f"masked edges leaked into message passing in period {t}")
            audits += 1
            params.zero_grad()
            with ad.Tape(training=True) as tape:
                loss, _, _ = _forward(params, b, "train", (cfg.seed, epoch))
            val = float(loss.data)
            if not math.isfinite(val):
                raise DivergedLoss(f"non-finite training loss at epoch {epoch}, period {t}")
            grads = ad.backward(tape, loss, params.parameters())
            ad.adam_step(
                params.parameters(),
                [grads[id(p)] for p in params.parameters()],
                state,
                lr=gnn_cfg.lr,
                weight_decay=gnn_cfg.weight_decay,
            )
            losses.append(val)
        v_losses = [float(_forward(params, stop_batches[t], "eval")[0].data) for t in va]
        v = float(np.mean(v_losses))
        if not math.isfinite(v):
            raise DivergedLoss(f"non-finite validation loss at epoch {epoch}")
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "validation_loss": v})
        log.info("epoch %d train %.5f validation %.5f", epoch, history[-1]["train_loss"], v)
        if v < best_loss:
            best, best_loss, best_epoch, since = params.copy(), v, epoch, 0
        else:
            since += 1
            if since > cfg.early_stop_patience:
                break
    metrics = evaluate(best, panel, {"train": tr, "validation": va}, cfg, batches=val_batches)
    return TrainResult(best, metrics, history, best_epoch, tr, va, audits)


def save_history(history: list[dict], path) -> None:
    Path(path).write_text(json.dumps(history, indent=2))


def predict_positions(params: GnnParams, panel: Panel, prev_period: int):
    """Trade predictions for every position held at ``prev_period``, on the unmasked graph.

    Only information dated ``prev_period`` is used: which positions survive to
    the next period is not known when the forecast is made.
    """
    g = panel.graph(prev_period)
    emb = encode(g, params, "eval")
    pred = trade_head(params, emb, g.inv_idx, g.asset_idx)
    return g.inv_idx, g.asset_idx, pred.data.astype(float)
