"""Choice of a predictive model through the covariance of the intervention it induces.

Only the prior covariance of the optimal wedge, ``Sigma = cov0(tau*)``,
depends on the model. With the cost ``C(Sigma) = 1/2 tr(Sigma K Sigma)`` the
first-order condition ``dC/dSigma + dC/dSigma' = Psi0`` is the Lyapunov
equation ``K Sigma + Sigma K = Psi0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.typing import NDArray

from .beliefs import Prior, SignalModel
from .economy import EconomyParams
from .errors import IllConditioned, InvalidParams
from .policy import LinearPolicy, tau_prior_moments

Array = NDArray[np.float64]

LYAPUNOV_GAP_TOL = 1e-12


@dataclass
class CostFamily:
    """Quadratic-trace information cost. ``dq_hook`` returns dC/dq (defaults to zero)."""

    K: Array
    level_offset: float = 0.0
    kind: str = "quadratic_trace"
    dq_hook: Callable[[Array], Array] | None = field(default=None, repr=False)

    def __post_init__(self):
        self.K = np.atleast_2d(np.asarray(self.K, dtype=float))
        if self.kind != "quadratic_trace":
            raise InvalidParams(f"unsupported cost family {self.kind!r}")
        if not np.allclose(self.K, self.K.T, atol=1e-12 * max(1.0, np.abs(self.K).max())):
            raise InvalidParams("K must be symmetric")
        if np.linalg.eigvalsh(self.K).min() <= 0:
            raise InvalidParams("K must be positive definite")

    def cost(self, Sigma: Array) -> float:
        return 0.5 * float(np.trace(Sigma @ self.K @ Sigma)) + self.level_offset

    def gradient(self, Sigma: Array) -> Array:
        """dC/dSigma for a general (not necessarily symmetric) argument."""
        return 0.5 * (self.K @ Sigma + Sigma @ self.K).T

    def dcost_dq(self, q) -> Array:
        q = np.asarray(q, dtype=float).ravel()
        return np.zeros_like(q) if self.dq_hook is None else np.asarray(self.dq_hook(q), dtype=float)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "K": self.K.tolist(), "level_offset": self.level_offset}


@dataclass
class ModelChoiceResult:
    Sigma_star: Array
    objective_value: float
    feasible: bool
    chosen_index: int = -1
    model_values: list[float] = field(default_factory=list)
    model_traces: list[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "Sigma_star": self.Sigma_star.tolist(),
            "objective_value": self.objective_value,
            "feasible": self.feasible,
            "chosen_index": self.chosen_index,
            "model_values": self.model_values,
            "model_traces": self.model_traces,
        }


def solve_lyapunov(K: Array, Psi0: Array) -> Array:
    """Solve K X + X K = Psi0 for symmetric positive definite K."""
    kappa, U = np.linalg.eigh(0.5 * (K + K.T))
    denom = kappa[:, None] + kappa[None, :]
    if denom.min() < LYAPUNOV_GAP_TOL:
        raise IllConditioned(f"kappa_i + kappa_j = {denom.min():.3e} is too small")
    Pt = U.T @ Psi0 @ U
    return U @ (Pt / denom) @ U.T


def project_psd(X: Array) -> Array:
    X = 0.5 * (X + X.T)
    w, V = np.linalg.eigh(X)
    return (V * np.clip(w, 0.0, None)) @ V.T


def solve_first_order(Psi0: Array, cost: CostFamily) -> Array:
    """Target covariance of the intervention: Lyapunov solution, symmetrised and clipped to PSD."""
    return project_psd(solve_lyapunov(cost.K, np.asarray(Psi0, dtype=float)))


def lyapunov_residual(K: Array, Sigma: Array, Psi0: Array) -> float:
    return float(np.linalg.norm(K @ Sigma + Sigma @ K - Psi0, "fro"))


def model_objective(Psi0: Array, Sigma: Array, cost: CostFamily, model: SignalModel | None = None) -> float:
    adoption = 0.0 if model is None else model.cost_scale
    return 0.5 * float(np.trace(Psi0 @ Sigma)) - cost.cost(Sigma) - adoption


def choose_model(
    params: EconomyParams,
    q,
    prior: Prior,
    cost: CostFamily,
    model_family: list[SignalModel],
    psi_scale: float = 1.0,
    policy: LinearPolicy | None = None,
) -> tuple[SignalModel, ModelChoiceResult]:
    """Best model in ``model_family`` by value of information net of cost.

    ``psi_scale`` multiplies the welfare weight on intervention variance and
    is the knob for complementarity sweeps. Ties go to the lowest index.
    """
    if not model_family:
        raise InvalidParams("model family is empty")
    pol = policy or LinearPolicy.build(params, q)
    Psi0 = psi_scale * pol.const.Psi0
    values, traces = [], []
    for m in model_family:
        _, Sig = tau_prior_moments(params, q, prior, m, pol)
        values.append(model_objective(Psi0, Sig, cost, m))
        traces.append(float(np.trace(Sig)))
    best = int(np.argmax(values))  # first maximiser
    Sigma_star = solve_first_order(Psi0, cost)
    K = pol.theta_to_tau
    Sigma_max = K @ prior.cov0 @ K.T
    gap = np.linalg.eigvalsh(0.5 * (Sigma_max - Sigma_star + (Sigma_max - Sigma_star).T))
    feasible = bool(gap.min() >= -1e-10 * max(1.0, np.abs(Sigma_max).max()))
    result = ModelChoiceResult(
        Sigma_star=Sigma_star,
        objective_value=model_objective(Psi0, Sigma_star, cost),
        feasible=feasible,
        chosen_index=best,
        model_values=values,
        model_traces=traces,
    )
    return model_family[best], result


def noise_family(base: SignalModel, scales, adoption_cost=None) -> list[SignalModel]:
    """Nested models that differ only in noise scale; optional per-model adoption cost."""
    out = []
    for k, c in enumerate(scales):
        cs = 0.0 if adoption_cost is None else float(adoption_cost(c))
        out.append(SignalModel(base.loading, c * base.noise_cov, cs, f"{base.name or 'model'}@{c:g}"))
    return out


def information_bound(params: EconomyParams, q, prior: Prior, policy: LinearPolicy | None = None) -> Array:
    """Largest achievable intervention covariance (a fully revealing signal)."""
    pol = policy or LinearPolicy.build(params, q)
    K = pol.theta_to_tau
    return K @ prior.cov0 @ K.T

