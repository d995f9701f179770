"""Scenario documents: one JSON file drives every command.

Validation happens before any computation and unknown keys are rejected at
every level. A single top-level ``seed`` drives generation, training and
Monte Carlo, so the nested sections do not accept seeds of their own.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, create_model

from .errors import ConfigError
from .graph_net import GnnConfig
from .synth import GeneratorSpec
from .trainer import TrainConfig


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _mirror(dc, name: str, drop=("seed",)):
    """A strict pydantic model with the fields and defaults of dataclass ``dc``."""
    hints = typing.get_type_hints(dc)
    fields = {}
    for f in dataclasses.fields(dc):
        if f.name in drop:
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        fields[f.name] = (hints[f.name], default)
    return create_model(name, __config__=ConfigDict(extra="forbid"), **fields)


GeneratorSection = _mirror(GeneratorSpec, "GeneratorSection")
TrainSection = _mirror(TrainConfig, "TrainSection", drop=("seed", "threads"))
GnnSection = _mirror(GnnConfig, "GnnSection")


class DimsSection(Strict):
    N: int
    I: int
    M: int


class EconomySection(Strict):
    """Explicit economy parameters; replaces the generated economy when given."""

    dims: DimsSection
    A_q: list
    A_ell: list
    H_ell: list
    rho: list
    R: list
    H_q: list
    p: list
    gamma_bar: list
    Gamma: list
    Delta: list


class PriorSection(Strict):
    mean0: list[float]
    cov0: list[list[float]]


class SignalSection(Strict):
    """A signal model.

    ``liquidations`` observes total liquidations with noise equal to
    ``noise_scale`` times their prior covariance; ``custom`` takes an explicit
    loading and noise covariance over theta.
    """

    kind: Literal["uninformative", "full_information", "liquidations", "custom"]
    name: str | None = None
    noise_scale: float = Field(1.0, gt=0)
    loading: list[list[float]] | None = None
    noise_cov: list[list[float]] | None = None
    cost_scale: float = Field(0.0, ge=0)


class CostSection(Strict):
    """Quadratic-trace information cost; ``K`` defaults to ``k_scale`` times the identity."""

    K: list[list[float]] | None = None
    k_scale: float = Field(1.0, gt=0)
    level_offset: float = 0.0


class ModelChoiceSection(Strict):
    base: SignalSection = Field(default_factory=lambda: SignalSection(kind="liquidations"))
    noise_scales: list[float] = Field(default_factory=lambda: [0.25, 0.5, 1.0, 2.0, 4.0])
    adoption_cost: float = Field(0.0, ge=0)  # per unit of precision (1 / noise scale)
    psi_scale: float = Field(1.0, gt=0)


class WelfareSection(Strict):
    draws: int = Field(2000, ge=2)
    oracle_draws: int = Field(2000, ge=2)


class ExAnteSection(Strict):
    model: int = Field(1, ge=0)  # index into signal_models
    scenarios: int | None = Field(None, ge=2)  # None evaluates expectations at the prior mean


class SweepSection(Strict):
    parameter: Literal["noise_scale", "psi_scale", "prior_scale", "delta_scale", "k_scale"] = "noise_scale"
    values: list[float] = Field(default_factory=lambda: [0.25, 0.5, 1.0, 2.0, 4.0])


def _default_models() -> list[SignalSection]:
    return [
        SignalSection(kind="uninformative"),
        SignalSection(kind="liquidations", noise_scale=1.0),
        SignalSection(kind="full_information"),
    ]


class ScenarioConfig(Strict):
    seed: int = Field(0, ge=0, lt=2**64)
    output_dir: str = "out"
    mode: Literal["tax", "subsidy"] = "tax"
    generator: GeneratorSection = Field(default_factory=GeneratorSection)
    economy: EconomySection | None = None
    prior: PriorSection | None = None
    q: list[float] | None = None
    signal_models: list[SignalSection] = Field(default_factory=_default_models, min_length=1)
    cost: CostSection = Field(default_factory=CostSection)
    model_choice: ModelChoiceSection = Field(default_factory=ModelChoiceSection)
    welfare: WelfareSection = Field(default_factory=WelfareSection)
    ex_ante: ExAnteSection = Field(default_factory=ExAnteSection)
    sweep: SweepSection = Field(default_factory=SweepSection)
    train: TrainSection = Field(default_factory=TrainSection)
    gnn: GnnSection = Field(default_factory=GnnSection)

    # -- derived objects ----------------------------------------------------

    def generator_spec(self, **overrides) -> GeneratorSpec:
        return GeneratorSpec(**{**self.generator.model_dump(), "seed": self.seed, **overrides})

    def train_config(self, threads: int = 1) -> TrainConfig:
        return TrainConfig(**self.train.model_dump(), seed=self.seed, threads=threads)

    def gnn_config(self) -> GnnConfig:
        cfg = GnnConfig(**self.gnn.model_dump(), seed=self.seed)
        cfg.validate()
        return cfg

    def config_hash(self) -> str:
        """Digest of the validated document; the output directory does not enter it."""
        doc = self.model_dump(mode="json", exclude={"output_dir"})
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path: str | Path | None, seed: int | None = None, mode: str | None = None) -> ScenarioConfig:
    """Read and validate a scenario document; command-line overrides are applied before hashing."""
    try:
        doc: dict[str, Any] = json.loads(Path(path).read_text()) if path else {}
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("a scenario document must be a JSON object")
    if seed is not None:
        doc["seed"] = seed
    if mode is not None:
        doc["mode"] = mode
    try:
        return ScenarioConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_describe(exc)) from exc


def _describe(exc: ValidationError) -> str:
    parts = []
    for e in exc.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)
