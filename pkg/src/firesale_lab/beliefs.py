"""Gaussian beliefs over the uncertain block and linear-Gaussian signal models.

Only ``theta = (rho_1..rho_I, R_1..R_I, gamma_bar)`` is uncertain. Every
matrix that governs how wedges move liquidations stays deterministic, so any
signal about ``theta`` is predictive and never informs the causal objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .errors import FactorizationFailure, InvalidParams, ShapeMismatch, SingularInnovation

Array = NDArray[np.float64]

PSD_TOL = 1e-12


def psd_factor(cov: Array, tol: float = PSD_TOL) -> Array:
    """Symmetric square-root factor ``F`` with ``F F' = cov`` (eigenvalue clipping)."""
    cov = 0.5 * (cov + cov.T)
    w, V = np.linalg.eigh(cov)
    scale = max(1.0, np.abs(w).max(initial=0.0))
    if w.size and w.min() < -tol * scale:
        raise FactorizationFailure(f"covariance has eigenvalue {w.min():.3e} < 0")
    return V * np.sqrt(np.clip(w, 0.0, None))


@dataclass
class Prior:
    mean0: Array
    cov0: Array

    def __post_init__(self):
        self.mean0 = np.asarray(self.mean0, dtype=float)
        self.cov0 = np.asarray(self.cov0, dtype=float)
        D = self.mean0.shape[0]
        if self.cov0.shape != (D, D):
            raise ShapeMismatch(f"cov0 has shape {self.cov0.shape}, expected {(D, D)}")
        if not np.allclose(self.cov0, self.cov0.T, atol=1e-12 * max(1.0, np.abs(self.cov0).max())):
            raise InvalidParams("cov0 is not symmetric")

    @property
    def dim(self) -> int:
        return self.mean0.shape[0]

    def to_dict(self) -> dict:
        return {"mean0": self.mean0.tolist(), "cov0": self.cov0.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "Prior":
        return cls(np.asarray(doc["mean0"], float), np.asarray(doc["cov0"], float))


@dataclass
class SignalModel:
    """s = loading @ theta + eps, eps ~ N(0, noise_cov).

    ``cost_scale`` is the model's adoption cost, added to the cost family when
    models are compared.
    """

    loading: Array
    noise_cov: Array
    cost_scale: float = 0.0
    name: str = ""

    def __post_init__(self):
        self.loading = np.atleast_2d(np.asarray(self.loading, dtype=float))
        self.noise_cov = np.atleast_2d(np.asarray(self.noise_cov, dtype=float))
        S = self.loading.shape[0]
        if self.noise_cov.shape != (S, S):
            raise ShapeMismatch(f"noise_cov has shape {self.noise_cov.shape}, expected {(S, S)}")
        if self.cost_scale < 0:
            raise InvalidParams("cost_scale must be nonnegative")
        w = np.linalg.eigvalsh(0.5 * (self.noise_cov + self.noise_cov.T))
        if w.min() <= 0:
            raise InvalidParams("noise_cov must be positive definite")

    @property
    def n_signals(self) -> int:
        return self.loading.shape[0]

    def scaled(self, factor: float, name: str | None = None) -> "SignalModel":
        return SignalModel(self.loading, factor * self.noise_cov, self.cost_scale, name or self.name)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "loading": self.loading.tolist(),
            "noise_cov": self.noise_cov.tolist(),
            "cost_scale": self.cost_scale,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SignalModel":
        return cls(
            np.asarray(doc["loading"], float),
            np.asarray(doc["noise_cov"], float),
            float(doc.get("cost_scale", 0.0)),
            str(doc.get("name", "")),
        )


def uninformative_model(dim: int, name: str = "uninformative") -> SignalModel:
    """A signal with zero loading: the posterior equals the prior exactly."""
    return SignalModel(np.zeros((1, dim)), np.eye(1), 0.0, name)


def revealing_model(dim: int, noise: float = 1e-12, name: str = "full_information") -> SignalModel:
    return SignalModel(np.eye(dim), noise * np.eye(dim), 0.0, name)


@dataclass
class Posterior:
    mean_post: Array
    cov_post: Array


def _gain(prior: Prior, model: SignalModel) -> Array:
    if model.loading.shape[1] != prior.dim:
        raise ShapeMismatch(f"model loads on {model.loading.shape[1]} parameters, prior has {prior.dim}")
    C = prior.cov0
    L = model.loading
    innov = L @ C @ L.T + model.noise_cov
    innov = 0.5 * (innov + innov.T)
    try:
        cho = np.linalg.cholesky(innov)
    except np.linalg.LinAlgError as exc:
        raise SingularInnovation("innovation covariance is not positive definite") from exc
    # K = C L' innov^{-1}, via two triangular solves
    tmp = np.linalg.solve(cho, L @ C)
    return np.linalg.solve(cho.T, tmp).T


def gain(prior: Prior, model: SignalModel) -> Array:
    """Kalman gain mapping signal innovations to posterior mean shifts (D x S)."""
    return _gain(prior, model)


def update(prior: Prior, model: SignalModel, s) -> Posterior:
    s = np.asarray(s, dtype=float).ravel()
    if s.shape != (model.n_signals,):
        raise ShapeMismatch(f"signal has {s.size} entries, expected {model.n_signals}")
    K = _gain(prior, model)
    mean = prior.mean0 + K @ (s - model.loading @ prior.mean0)
    cov = prior.cov0 - K @ model.loading @ prior.cov0
    return Posterior(mean, 0.5 * (cov + cov.T))


def posterior_mean_cov(prior: Prior, model: SignalModel) -> Array:
    """Prior covariance of the posterior mean, cov0 - E[cov_post]."""
    K = _gain(prior, model)
    out = K @ model.loading @ prior.cov0
    return 0.5 * (out + out.T)


def is_predictive(model: SignalModel) -> bool:
    """Every representable model is predictive.

    A signal can only load on ``theta``; the wedge-response matrices depend
    on the known blocks alone, so their conditional expectation never moves.
    """
    return bool(np.all(np.isfinite(model.loading)))


def sample_theta(prior: Prior, seed: int, count: int) -> Array:
    """``count`` draws from N(mean0, cov0), one per row."""
    F = psd_factor(prior.cov0)
    z = np.random.default_rng(seed).standard_normal((count, prior.dim))
    return prior.mean0 + z @ F.T


def sample_signal(model: SignalModel, theta: Array, rng: np.random.Generator) -> Array:
    F = psd_factor(model.noise_cov)
    eps = rng.standard_normal(model.n_signals) @ F.T
    return model.loading @ theta + eps


@dataclass
class ScenarioSet:
    """Weighted (theta, signal) draws that discretise prior expectations."""

    thetas: Array  # (K, D)
    signals: Array  # (K, S)
    weights: Array  # (K,)
    seed: int = 0
    shocks: Array | None = field(default=None, repr=False)  # standard normals behind the draws

    def __post_init__(self):
        if not np.isclose(self.weights.sum(), 1.0, atol=1e-12):
            raise InvalidParams("scenario weights must sum to one")

    def __len__(self):
        return self.weights.shape[0]


def scenarios(prior: Prior, model: SignalModel, seed: int, count: int, antithetic: bool = True) -> ScenarioSet:
    """Common-random-number scenario draws of (theta, s).

    With ``antithetic`` the draws come in mirrored pairs around the prior
    mean, so any expectation of an affine function is exact.
    """
    if count < 1:
        raise InvalidParams("need at least one scenario")
    D, S = prior.dim, model.n_signals
    rng = np.random.default_rng(seed)
    half = (count + 1) // 2 if antithetic else count
    z = rng.standard_normal((half, D + S))
    if antithetic:
        z = np.concatenate([z, -z])[:count] if count > 1 else z[:1] * 0.0
    Ft = psd_factor(prior.cov0)
    Fe = psd_factor(model.noise_cov)
    thetas = prior.mean0 + z[:, :D] @ Ft.T
    signals = thetas @ model.loading.T + z[:, D:] @ Fe.T
    w = np.full(z.shape[0], 1.0 / z.shape[0])
    return ScenarioSet(thetas, signals, w, seed, z)
