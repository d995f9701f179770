"""Graph transformer over bipartite holdings graphs.

Investors and assets share one node schema (a ``node_type`` code plus the
union of their characteristics). Each holding becomes two directed edges so
that investors aggregate over the assets they hold and assets over their
holders. Every parameter is shared across nodes, so the model applies to
graphs with nodes it has never seen.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegenerateCrossSection, SchemaMismatch, ShapeMismatch, UnknownNode

CHECKPOINT_VERSION = 1
WINSOR = 5.0
MIN_HOLDERS = 3


# -- data -----------------------------------------------------------------------------


@dataclass
class FeatureSchema:
    numeric: list[str]
    categorical: dict[str, int]  # field -> number of codes, in schema order
    log1p: list[str] = field(default_factory=list)  # amounts and counts, log1p-transformed first

    def __post_init__(self):
        self.numeric = list(self.numeric)
        self.categorical = dict(self.categorical)
        unknown = set(self.log1p) - set(self.numeric)
        if unknown:
            raise SchemaMismatch(f"log1p fields not in schema: {sorted(unknown)}")

    def to_dict(self) -> dict:
        # a list of pairs keeps the field order through key-sorted JSON
        return {"numeric": self.numeric, "categorical": [[k, v] for k, v in self.categorical.items()], "log1p": list(self.log1p)}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        cat = d["categorical"]
        if isinstance(cat, dict):
            raise SchemaMismatch("categorical fields must be an ordered list of [name, cardinality] pairs")
        return cls(d["numeric"], {str(k): int(v) for k, v in cat}, d.get("log1p", []))


@dataclass
class HoldingsGraph:
    """One period of holdings. Node rows are investors first, then assets."""

    investors: np.ndarray
    assets: np.ndarray
    inv_idx: np.ndarray
    asset_idx: np.ndarray
    weight: np.ndarray
    numeric: np.ndarray  # (n_nodes, n_numeric)
    categorical: np.ndarray  # (n_nodes, n_categorical) integer codes
    period: int
    schema: FeatureSchema

    def __post_init__(self):
        self.investors = np.asarray(self.investors)
        self.assets = np.asarray(self.assets)
        self.inv_idx = np.asarray(self.inv_idx, dtype=np.int64)
        self.asset_idx = np.asarray(self.asset_idx, dtype=np.int64)
        self.weight = np.asarray(self.weight, dtype=float)
        self.numeric = np.asarray(self.numeric, dtype=float).reshape(self.n_nodes, -1)
        self.categorical = np.asarray(self.categorical, dtype=np.int64).reshape(self.n_nodes, -1)

    @property
    def n_investors(self) -> int:
        return len(self.investors)

    @property
    def n_assets(self) -> int:
        return len(self.assets)

    @property
    def n_nodes(self) -> int:
        return self.n_investors + self.n_assets

    @property
    def n_edges(self) -> int:
        return len(self.weight)

    def validate(self) -> None:
        E = self.n_edges
        if self.inv_idx.shape != (E,) or self.asset_idx.shape != (E,):
            raise ShapeMismatch("edge index arrays must match the weight vector")
        if E and (self.inv_idx.min() < 0 or self.inv_idx.max() >= self.n_investors):
            raise UnknownNode("edge references an unknown investor")
        if E and (self.asset_idx.min() < 0 or self.asset_idx.max() >= self.n_assets):
            raise UnknownNode("edge references an unknown asset")
        if not np.all(np.isfinite(self.weight)) or np.any(self.weight <= 0):
            raise SchemaMismatch("position sizes must be positive and finite")
        keys = self.inv_idx * self.n_assets + self.asset_idx
        if np.unique(keys).size != E:
            raise SchemaMismatch("duplicate investor-asset edge")
        if self.numeric.shape[1] != len(self.schema.numeric):
            raise SchemaMismatch("numeric feature columns do not match the schema")
        if self.categorical.shape[1] != len(self.schema.categorical):
            raise SchemaMismatch("categorical feature columns do not match the schema")
        for k, (name, card) in enumerate(self.schema.categorical.items()):
            col = self.categorical[:, k]
            if col.size and (col.min() < 0 or col.max() >= card):
                raise SchemaMismatch(f"categorical field {name!r} has codes outside [0, {card})")

    def edge_keys(self) -> set[tuple]:
        return {(self.investors[i], self.assets[a]) for i, a in zip(self.inv_idx, self.asset_idx)}

    def neighborhood(self, node: int) -> np.ndarray:
        """Node indices adjacent to ``node`` (assets offset by the investor count)."""
        nI = self.n_investors
        if node < nI:
            return nI + self.asset_idx[self.inv_idx == node]
        return self.inv_idx[self.asset_idx == node - nI]

    def with_edges(self, keep: np.ndarray) -> "HoldingsGraph":
        keep = np.asarray(keep, dtype=bool)
        return HoldingsGraph(
            self.investors,
            self.assets,
            self.inv_idx[keep],
            self.asset_idx[keep],
            self.weight[keep],
            self.numeric,
            self.categorical,
            self.period,
            self.schema,
        )

    def permuted(self, inv_perm: np.ndarray, asset_perm: np.ndarray) -> "HoldingsGraph":
        """Relabel nodes: new investor k is old investor inv_perm[k], likewise assets."""
        inv_inv = np.argsort(inv_perm)
        asset_inv = np.argsort(asset_perm)
        nI = self.n_investors
        rows = np.concatenate([inv_perm, nI + asset_perm])
        order = np.random.default_rng(0).permutation(self.n_edges)  # edge order is arbitrary too
        return HoldingsGraph(
            self.investors[inv_perm],
            self.assets[asset_perm],
            inv_inv[self.inv_idx][order],
            asset_inv[self.asset_idx][order],
            self.weight[order],
            self.numeric[rows],
            self.categorical[rows],
            self.period,
            self.schema,
        )


@dataclass
class FeatureScaler:
    """log1p on amount fields, then standardisation with statistics from training periods only."""

    mean: np.ndarray
    std: np.ndarray
    log_mask: np.ndarray

    @classmethod
    def fit(cls, graphs: list[HoldingsGraph]) -> "FeatureScaler":
        if not graphs:
            raise SchemaMismatch("cannot fit feature statistics on no graphs")
        schema = graphs[0].schema
        mask = np.array([n in schema.log1p for n in schema.numeric], dtype=bool)
        X = np.vstack([g.numeric for g in graphs])
        X = np.where(mask, np.log1p(np.maximum(X, 0.0)), X)
        std = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(std > 1e-12, std, 1.0), mask)

    @classmethod
    def identity(cls, schema: FeatureSchema) -> "FeatureScaler":
        F = len(schema.numeric)
        return cls(np.zeros(F), np.ones(F), np.zeros(F, dtype=bool))

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.where(self.log_mask, np.log1p(np.maximum(X, 0.0)), X)
        return (X - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "log_mask": self.log_mask.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureScaler":
        return cls(np.array(d["mean"], float), np.array(d["std"], float), np.array(d["log_mask"], bool))


# -- configuration and parameters -----------------------------------------------------


@dataclass
class GnnConfig:
    d_h: int = 256
    d_e: int = 128
    L: int = 3
    heads: int = 4
    d_c: int = 8
    dropout: float = 0.1
    kappa: float = 1.0
    lr: float = 1e-2
    weight_decay: float = 1e-5
    scale_logits: bool = True  # divide attention logits by sqrt(d_h)
    head_concat: bool = False  # conventional multi-head concatenation instead of averaged attention
    zero_init_heads: bool = False
    seed: int = 0

    def validate(self) -> None:
        for name in ("d_h", "d_e", "L", "heads", "d_c"):
            if getattr(self, name) < 1:
                raise SchemaMismatch(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise SchemaMismatch("dropout must lie in [0, 1)")
        if self.head_concat and self.d_h % self.heads:
            raise SchemaMismatch("head concatenation needs d_h divisible by the number of heads")

    def to_dict(self) -> dict:
        return asdict(self)


def _mlp_shapes(prefix: str, d_in: int, d_hid: int, d_out: int) -> list[tuple[str, tuple[int, ...]]]:
    return [
        (f"{prefix}.W1", (d_in, d_hid)),
        (f"{prefix}.b1", (d_hid,)),
        (f"{prefix}.W2", (d_hid, d_out)),
        (f"{prefix}.b2", (d_out,)),
    ]


def parameter_shapes(config: GnnConfig, schema: FeatureSchema) -> list[tuple[str, tuple[int, ...]]]:
    c = config
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for name, card in schema.categorical.items():
        shapes.append((f"emb.{name}", (card, c.d_c)))
    d_in = len(schema.numeric) + c.d_c * len(schema.categorical)
    shapes += _mlp_shapes("phi", d_in, c.d_h, c.d_h)
    for l in range(c.L):
        shapes += _mlp_shapes(f"layer{l}.msg", c.d_h, c.d_h, c.d_h)
        shapes.append((f"layer{l}.Wq", (c.d_h, c.heads * c.d_h)))
        shapes.append((f"layer{l}.Wk", (c.d_h, c.heads * c.d_h)))
        shapes += _mlp_shapes(f"layer{l}.upd", 2 * c.d_h, c.d_h, c.d_h)
    shapes += _mlp_shapes("readout", c.d_h, c.d_h, c.d_e)
    shapes += _mlp_shapes("ae", 2 * c.d_e, c.d_h, 1)
    shapes += _mlp_shapes("tp", 2 * c.d_e, c.d_h, 1)
    return shapes


@dataclass
class GnnParams:
    config: GnnConfig
    schema: FeatureSchema
    scaler: FeatureScaler
    tensors: dict[str, Tensor]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    @property
    def n_parameters(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def copy(self) -> "GnnParams":
        return GnnParams(
            self.config,
            self.schema,
            self.scaler,
            {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.tensors.items()},
        )

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None


def init_params(config: GnnConfig, schema: FeatureSchema, scaler: FeatureScaler | None = None, seed=None, dtype=np.float32) -> GnnParams:
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config, schema):
        if name.startswith("emb."):
            arr = rng.standard_normal(shape) * 0.5
        elif name.endswith((".b1", ".b2")):
            arr = np.zeros(shape)
        else:
            arr = rng.standard_normal(shape) / math.sqrt(shape[0])
        if config.zero_init_heads and name in ("ae.W2", "tp.W2"):
            arr = np.zeros(shape)
        tensors[name] = Tensor(arr, requires_grad=True, name=name, dtype=dtype)
    return GnnParams(config, schema, scaler or FeatureScaler.identity(schema), tensors)


# -- forward pass ---------------------------------------------------------------------


@dataclass
class PreparedGraph:
    """Arrays consumed by :func:`encode`; message edges run from ``src`` to ``dst``."""

    n_nodes: int
    n_investors: int
    numeric: np.ndarray
    categorical: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    edge_weight: np.ndarray  # log1p(position), normalised to sum to one over each neighbourhood


def prepare(graph: HoldingsGraph, scaler: FeatureScaler) -> PreparedGraph:
    graph.validate()
    nI = graph.n_investors
    inv, ast = graph.inv_idx, nI + graph.asset_idx
    src = np.concatenate([ast, inv])
    dst = np.concatenate([inv, ast])
    w = np.log1p(np.concatenate([graph.weight, graph.weight]))
    tot = np.zeros(graph.n_nodes)
    np.add.at(tot, dst, w)
    w = w / np.where(tot[dst] > 0, tot[dst], 1.0)
    return PreparedGraph(graph.n_nodes, nI, scaler.transform(graph.numeric), graph.categorical, src, dst, w)


@dataclass
class EmbeddingSet:
    e: Tensor  # (n_nodes, d_e)
    hidden: list[Tensor]
    attention: list[np.ndarray]  # per layer, (n_directed_edges, heads)
    n_investors: int
    prepared: PreparedGraph


def _mlp(params: GnnParams, prefix: str, x: Tensor) -> Tensor:
    t = params.tensors
    h = ad.gelu(ad.add(ad.matmul(x, t[f"{prefix}.W1"]), t[f"{prefix}.b1"]))
    return ad.add(ad.matmul(h, t[f"{prefix}.W2"]), t[f"{prefix}.b2"])


def _dtype(params: GnnParams):
    return next(iter(params.tensors.values())).dtype


def node_inputs(params: GnnParams, pg: PreparedGraph) -> Tensor:
    schema = params.schema
    if pg.numeric.shape[1] != len(schema.numeric) or pg.categorical.shape[1] != len(schema.categorical):
        raise SchemaMismatch("graph features do not match the parameter schema")
    parts = [Tensor(pg.numeric, dtype=_dtype(params))]
    for k, name in enumerate(schema.categorical):
        parts.append(ad.gather_rows(params.tensors[f"emb.{name}"], pg.categorical[:, k]))
    return ad.concat(parts, axis=1)


def encode(
    graph: HoldingsGraph | PreparedGraph,
    params: GnnParams,
    mode: str = "eval",
    dropout_key: tuple[int, int] = (0, 0),
) -> EmbeddingSet:
    """Embeddings for every node; dropout is applied only when ``mode == 'train'``."""
    if mode not in ("train", "eval"):
        raise SchemaMismatch(f"unknown mode {mode!r}")
    pg = graph if isinstance(graph, PreparedGraph) else prepare(graph, params.scaler)
    c = params.config
    t = params.tensors
    train = mode == "train" and c.dropout > 0
    seed, epoch = dropout_key

    def drop(x: Tensor, layer: int) -> Tensor:
        return ad.dropout(x, c.dropout, key=(seed, epoch, layer)) if train else x

    n, S, dh = pg.n_nodes, c.heads, c.d_h
    E = pg.src.size
    h = drop(_mlp(params, "phi", node_inputs(params, pg)), 0)
    hidden = [h]
    attn_log = []
    w_edge = Tensor(pg.edge_weight[:, None] * np.ones((1, S)), dtype=h.dtype)
    for l in range(c.L):
        msg = _mlp(params, f"layer{l}.msg", h)
        Q = ad.reshape(ad.matmul(h, t[f"layer{l}.Wq"]), (n, S, dh))
        K = ad.reshape(ad.matmul(h, t[f"layer{l}.Wk"]), (n, S, dh))
        logits = ad.sum_axis(ad.mul(ad.gather_rows(Q, pg.dst), ad.gather_rows(K, pg.src)), 2)  # (E, S)
        if c.scale_logits:
            logits = ad.scale(logits, 1.0 / math.sqrt(dh))
        alpha = ad.segment_softmax(logits, pg.dst, n)  # per head, sums to one over N(v)
        attn_log.append(alpha.data.copy())
        msg_src = ad.gather_rows(msg, pg.src)
        if c.head_concat:
            coef = ad.mul(alpha, w_edge)
            vals = ad.reshape(msg_src, (E, S, dh // S))
            m = ad.reshape(ad.segment_weighted_sum(vals, coef, pg.dst, n), (n, dh))
        else:
            coef = ad.mul(ad.mean_axis(alpha, 1), Tensor(pg.edge_weight, dtype=h.dtype))
            m = ad.segment_weighted_sum(msg_src, coef, pg.dst, n)
        h = drop(_mlp(params, f"layer{l}.upd", ad.concat([h, m], axis=1)), l + 1)
        hidden.append(h)
    e = _mlp(params, "readout", h)
    return EmbeddingSet(e, hidden, attn_log, pg.n_investors, pg)


def _pair_inputs(emb: EmbeddingSet, inv_idx, asset_idx) -> Tensor:
    inv_idx = np.asarray(inv_idx, dtype=np.int64)
    asset_idx = np.asarray(asset_idx, dtype=np.int64)
    nI = emb.n_investors
    nA = emb.e.shape[0] - nI
    if inv_idx.size and (inv_idx.min() < 0 or inv_idx.max() >= nI):
        raise UnknownNode("pair references an unknown investor")
    if asset_idx.size and (asset_idx.min() < 0 or asset_idx.max() >= nA):
        raise UnknownNode("pair references an unknown asset")
    return ad.concat([ad.gather_rows(emb.e, inv_idx), ad.gather_rows(emb.e, nI + asset_idx)], axis=1)


def _head(params: GnnParams, prefix: str, emb: EmbeddingSet, inv_idx, asset_idx) -> Tensor:
    out = _mlp(params, prefix, _pair_inputs(emb, inv_idx, asset_idx))
    return ad.reshape(out, (out.shape[0],))


def mae_head(params: GnnParams, emb: EmbeddingSet, inv_idx, asset_idx) -> Tensor:
    """Predicted (log1p) position sizes for investor-asset pairs."""
    return _head(params, "ae", emb, inv_idx, asset_idx)


def trade_head(params: GnnParams, emb: EmbeddingSet, inv_idx, asset_idx) -> Tensor:
    """Predicted trade z-scores for investor-asset pairs."""
    return _head(params, "tp", emb, inv_idx, asset_idx)


def joint_loss(pred_ae: Tensor, target_ae, pred_tp: Tensor, target_tp, kappa: float = 1.0) -> Tensor:
    """Masked-edge reconstruction error plus kappa times trade-prediction error."""
    l_ae = ad.mse(pred_ae, Tensor(np.asarray(target_ae), dtype=pred_ae.dtype))
    l_tp = ad.mse(pred_tp, Tensor(np.asarray(target_tp), dtype=pred_tp.dtype))
    if kappa == 0:
        return l_ae
    return ad.add(l_ae, ad.scale(l_tp, kappa))


# -- masking --------------------------------------------------------------------------


@dataclass
class MaskBatch:
    graph: HoldingsGraph  # message-passing graph with masked edges removed
    inv_idx: np.ndarray  # prediction pairs: masked true edges, then sampled non-edges
    asset_idx: np.ndarray
    target: np.ndarray  # log1p(position) for true edges, 0 for non-edges
    negative: np.ndarray  # True for sampled non-edges


def make_mask(graph: HoldingsGraph, mask_fraction: float, negative_fraction: float, seed: int) -> MaskBatch:
    """Hide a random subset of edges from message passing and add random non-edges with target 0.

    The number of sampled non-edges is ``negative_fraction`` times the
    number of edges in the graph.
    """
    if not (0.0 <= mask_fraction <= 1.0 and 0.0 <= negative_fraction <= 1.0):
        raise SchemaMismatch("mask fractions must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    E = graph.n_edges
    n_mask = int(round(mask_fraction * E))
    masked = np.zeros(E, dtype=bool)
    masked[rng.choice(E, size=n_mask, replace=False)] = True
    n_neg = int(round(negative_fraction * E))
    nI, nA = graph.n_investors, graph.n_assets
    existing = set((graph.inv_idx * nA + graph.asset_idx).tolist())
    n_neg = min(n_neg, nI * nA - E)
    neg: list[int] = []
    seen: set[int] = set()
    while len(neg) < n_neg:
        for k in rng.integers(0, nI * nA, size=2 * (n_neg - len(neg)) + 8).tolist():
            if k not in existing and k not in seen:
                seen.add(k)
                neg.append(k)
                if len(neg) == n_neg:
                    break
    neg_arr = np.array(neg, dtype=np.int64)
    inv = np.concatenate([graph.inv_idx[masked], neg_arr // nA])
    ast = np.concatenate([graph.asset_idx[masked], neg_arr % nA])
    target = np.concatenate([np.log1p(graph.weight[masked]), np.zeros(neg_arr.size)])
    negative = np.concatenate([np.zeros(n_mask, dtype=bool), np.ones(neg_arr.size, dtype=bool)])
    return MaskBatch(graph.with_edges(~masked), inv, ast, target, negative)


def leak_audit(prepared: PreparedGraph, batch: MaskBatch) -> bool:
    """True when no masked true edge appears in any message-passing neighbourhood."""
    nI = prepared.n_investors
    n = prepared.n_nodes
    used = set((prepared.src * n + prepared.dst).tolist())
    true = ~batch.negative
    for i, a in zip(batch.inv_idx[true], batch.asset_idx[true]):
        if (nI + a) * n + i in used or i * n + (nI + a) in used:
            return False
    return True


# -- trade targets --------------------------------------------------------------------


@dataclass
class TradeTargets:
    """Cross-sectional trade z-scores for period ``period``, indexed into the previous period's graph."""

    inv_idx: np.ndarray
    asset_idx: np.ndarray
    y: np.ndarray
    period: int
    dropped_assets: list = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.y.size)


def zscore_cross_section(pct: np.ndarray, winsor: float = WINSOR, min_holders: int = MIN_HOLDERS) -> np.ndarray:
    """Population z-scores of winsorised percent changes; raises on degenerate cross-sections."""
    pct = np.clip(np.asarray(pct, dtype=float), -winsor, winsor)
    if pct.size < min_holders:
        raise DegenerateCrossSection(f"only {pct.size} holders")
    sd = pct.std()
    if sd <= 1e-12:
        raise DegenerateCrossSection("no variation in trades")
    return (pct - pct.mean()) / sd


def trade_targets(prev: HoldingsGraph, cur: HoldingsGraph, winsor: float = WINSOR, min_holders: int = MIN_HOLDERS) -> TradeTargets:
    """Percent changes of positions held in both periods, z-scored within each asset.

    Asset cross-sections with fewer than ``min_holders`` surviving positions
    or with zero dispersion after winsorising are dropped.
    """
    cur_w = {
        (cur.investors[i], cur.assets[a]): w for i, a, w in zip(cur.inv_idx, cur.asset_idx, cur.weight)
    }
    by_asset: dict[int, list[tuple[int, float]]] = {}
    for i, a, w in zip(prev.inv_idx, prev.asset_idx, prev.weight):
        key = (prev.investors[i], prev.assets[a])
        if key in cur_w and w != 0:
            by_asset.setdefault(int(a), []).append((int(i), (cur_w[key] - w) / w))
    inv, ast, ys, dropped = [], [], [], []
    for a in sorted(by_asset):
        rows = by_asset[a]
        try:
            z = zscore_cross_section(np.array([r[1] for r in rows]), winsor, min_holders)
        except DegenerateCrossSection:
            dropped.append(prev.assets[a])
            continue
        inv.extend(r[0] for r in rows)
        ast.extend([a] * len(rows))
        ys.extend(z.tolist())
    return TradeTargets(np.array(inv, dtype=np.int64), np.array(ast, dtype=np.int64), np.array(ys), cur.period, dropped)


# -- checkpoints ----------------------------------------------------------------------


def save_checkpoint(params: GnnParams, directory, meta: dict | None = None) -> Path:
    """Write ``manifest.json`` and a little-endian float32 blob ``params.bin``.

    ``meta`` is copied into the manifest verbatim (run provenance, for instance).
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(d / "params.bin", "wb") as fh:
        for name, t in params.tensors.items():
            raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "dtype": "float32-le",
        "config": params.config.to_dict(),
        "schema": params.schema.to_dict(),
        "scaler": params.scaler.to_dict(),
        "tensors": entries,
        "blob": "params.bin",
    }
    if meta:
        manifest["meta"] = meta
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d / "manifest.json"


def load_checkpoint(directory) -> GnnParams:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise SchemaMismatch(f"unsupported checkpoint version {manifest.get('version')!r}")
    blob = (d / manifest["blob"]).read_bytes()
    config = GnnConfig(**manifest["config"])
    schema = FeatureSchema.from_dict(manifest["schema"])
    expected = dict(parameter_shapes(config, schema))
    tensors = {}
    for ent in manifest["tensors"]:
        shape = tuple(ent["shape"])
        if expected.get(ent["name"]) != shape:
            raise SchemaMismatch(f"tensor {ent['name']!r} has unexpected shape {shape}")
        arr = np.frombuffer(blob, dtype="<f4", count=int(np.prod(shape)), offset=ent["offset"]).reshape(shape)
        tensors[ent["name"]] = Tensor(arr.astype(np.float32), requires_grad=True, name=ent["name"])
    if set(tensors) != set(expected):
        raise SchemaMismatch("checkpoint is missing tensors")
    tensors = {name: tensors[name] for name, _ in parameter_shapes(config, schema)}
    return GnnParams(config, schema, FeatureScaler.from_dict(manifest["scaler"]), tensors)


# -- CSV panel format -----------------------------------------------------------------


def write_panel_csv(graphs: list[HoldingsGraph], directory, provenance: dict | None = None) -> None:
    """``edges.csv`` (period, investor_id, asset_id, weight) plus one feature CSV per node kind.

    ``provenance`` entries become trailing constant columns, which readers ignore.
    """
    extra_cols = list(provenance) if provenance else []
    extra_vals = [provenance[k] for k in extra_cols] if provenance else []
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    schema = graphs[0].schema
    cols = ["period", "node_id"] + schema.numeric + list(schema.categorical)
    with open(d / "edges.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["period", "investor_id", "asset_id", "weight"] + extra_cols)
        for g in graphs:
            for i, a, x in zip(g.inv_idx, g.asset_idx, g.weight):
                w.writerow([g.period, g.investors[i], g.assets[a], repr(float(x))] + extra_vals)
    for kind in ("investor", "asset"):
        with open(d / f"{kind}_features.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols + extra_cols)
            for g in graphs:
                ids, off = (g.investors, 0) if kind == "investor" else (g.assets, g.n_investors)
                for k, nid in enumerate(ids):
                    r = off + k
                    w.writerow([g.period, nid] + [repr(float(v)) for v in g.numeric[r]] + [int(v) for v in g.categorical[r]] + extra_vals)
    doc = schema.to_dict()
    if provenance:
        doc["provenance"] = provenance
    (d / "schema.json").write_text(json.dumps(doc, indent=2))


def read_panel_csv(directory) -> list[HoldingsGraph]:
    d = Path(directory)
    schema = FeatureSchema.from_dict(json.loads((d / "schema.json").read_text()))
    nn, nc = len(schema.numeric), len(schema.categorical)
    feats: dict[str, dict[int, list]] = {}
    for kind in ("investor", "asset"):
        per: dict[int, list] = {}
        with open(d / f"{kind}_features.csv", newline="") as fh:
            rd = csv.reader(fh)
            header = next(rd)
            if header[2 : 2 + nn + nc] != schema.numeric + list(schema.categorical):
                raise SchemaMismatch(f"{kind} feature columns do not follow the schema order")
            for row in rd:
                per.setdefault(int(row[0]), []).append(
                    (row[1], [float(v) for v in row[2 : 2 + nn]], [int(v) for v in row[2 + nn : 2 + nn + nc]])
                )
        feats[kind] = per
    edges: dict[int, list] = {}
    with open(d / "edges.csv", newline="") as fh:
        rd = csv.reader(fh)
        if next(rd)[:4] != ["period", "investor_id", "asset_id", "weight"]:
            raise SchemaMismatch("edges.csv header must be period, investor_id, asset_id, weight")
        for row in rd:
            edges.setdefault(int(row[0]), []).append((row[1], row[2], float(row[3])))
    graphs = []
    for t in sorted(feats["investor"]):
        inv_rows, ast_rows = feats["investor"][t], feats["asset"].get(t, [])
        inv_ids = np.array([r[0] for r in inv_rows], dtype=object)
        ast_ids = np.array([r[0] for r in ast_rows], dtype=object)
        ipos = {v: k for k, v in enumerate(inv_ids)}
        apos = {v: k for k, v in enumerate(ast_ids)}
        try:
            el = edges.get(t, [])
            ii = [ipos[e[0]] for e in el]
            aa = [apos[e[1]] for e in el]
        except KeyError as exc:
            raise UnknownNode(f"edge references node {exc.args[0]!r} absent from the feature files") from exc
        numeric = np.array([r[1] for r in inv_rows + ast_rows], dtype=float).reshape(-1, nn)
        cat = np.array([r[2] for r in inv_rows + ast_rows], dtype=np.int64).reshape(-1, nc)
        g = HoldingsGraph(inv_ids, ast_ids, ii, aa, [e[2] for e in el], numeric, cat, t, schema)
        g.validate()
        graphs.append(g)
    return graphs
