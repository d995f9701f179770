"""Fire-sale economy primitives and the Middle-stage equilibrium.

Intermediaries ``i = 1..I`` hold portfolios ``q_i`` over ``N`` assets and, in
the Middle, choose liquidations ``l_i >= 0`` subject to ``M`` rollover
constraints ``A_q q_i + rho_i <= A_ell l_i``. A representative arbitrageur
absorbs the sales at price ``gamma = gamma_bar - Gamma L``.

Because ``Gamma`` is symmetric the competitive equilibrium is the minimiser of
the potential

    sum_i [ l_i'(R_i + tau_i - gamma_bar) + 1/2 l_i' H_ell_i l_i ] + 1/2 L' Gamma L

over the joint feasible set, which is what :func:`solve_middle` solves with a
primal active-set method.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import linprog

from .errors import (
    InfeasibleConstraints,
    InvalidParams,
    NoConvergence,
    SingularSystem,
)

Array = NDArray[np.float64]

KKT_TOL = 1e-10
MAX_ACTIVE_SET_ITER = 100
_FEAS_TOL = 1e-9
_MULT_TOL = 1e-10


@dataclass(frozen=True)
class Dimensions:
    n_assets: int
    n_intermediaries: int
    n_constraints: int

    def __post_init__(self):
        N, I, M = self.n_assets, self.n_intermediaries, self.n_constraints
        if N < 1 or I < 1 or not 1 <= M <= N:
            raise InvalidParams(f"invalid dimensions N={N}, I={I}, M={M}")

    @property
    def theta_dim(self) -> int:
        N, I, M = self.n_assets, self.n_intermediaries, self.n_constraints
        return I * M + I * N + N


@dataclass
class EconomyParams:
    """All primitives; per-intermediary blocks are stacked on the first axis."""

    A_q: Array  # (I, M, N)
    A_ell: Array  # (I, M, N)
    H_ell: Array  # (I, N, N)
    rho: Array  # (I, M)
    R: Array  # (I, N)
    H_q: Array  # (I, N, N)
    p: Array  # (I, N)
    gamma_bar: Array  # (N,)
    Gamma: Array  # (N, N)
    Delta: Array  # (NI, NI)

    def __post_init__(self):
        for name in ("A_q", "A_ell", "H_ell", "rho", "R", "H_q", "p", "gamma_bar", "Gamma", "Delta"):
            setattr(self, name, np.array(getattr(self, name), dtype=float))

    @property
    def dims(self) -> Dimensions:
        I, M, N = self.A_q.shape
        return Dimensions(N, I, M)

    @property
    def theta(self) -> Array:
        """The uncertain block stacked as (rho_1..rho_I, R_1..R_I, gamma_bar)."""
        return np.concatenate([self.rho.ravel(), self.R.ravel(), self.gamma_bar])

    def with_theta(self, theta: Array) -> "EconomyParams":
        I, M, N = self.A_q.shape
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (I * M + I * N + N,):
            raise InvalidParams(f"theta has shape {theta.shape}, expected ({I * M + I * N + N},)")
        rho = theta[: I * M].reshape(I, M)
        R = theta[I * M : I * M + I * N].reshape(I, N)
        gamma_bar = theta[I * M + I * N :]
        return replace(self, rho=rho, R=R, gamma_bar=gamma_bar)

    def validate(self, tol: float = 1e-10) -> None:
        I, M, N = self.A_q.shape
        expected = {
            "A_q": (I, M, N),
            "A_ell": (I, M, N),
            "H_ell": (I, N, N),
            "rho": (I, M),
            "R": (I, N),
            "H_q": (I, N, N),
            "p": (I, N),
            "gamma_bar": (N,),
            "Gamma": (N, N),
            "Delta": (N * I, N * I),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise InvalidParams(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise InvalidParams(f"{name} has non-finite entries")
        Dimensions(N, I, M)

        def _sym(a, name):
            if not np.allclose(a, a.T, atol=tol * max(1.0, np.abs(a).max())):
                raise InvalidParams(f"{name} is not symmetric")

        def _min_eig(a):
            return np.linalg.eigvalsh(0.5 * (a + a.T)).min()

        for i in range(I):
            _sym(self.H_q[i], f"H_q[{i}]")
            _sym(self.H_ell[i], f"H_ell[{i}]")
            if _min_eig(self.H_ell[i]) <= tol:
                raise InvalidParams(f"H_ell[{i}] is not positive definite")
            if np.linalg.matrix_rank(self.A_ell[i]) < M:
                raise InvalidParams(f"A_ell[{i}] does not have full row rank")
        _sym(self.Gamma, "Gamma")
        _sym(self.Delta, "Delta")
        # semidefinite rather than definite, so the no-fire-sale limit Gamma = 0 stays admissible
        if _min_eig(self.Gamma) < -tol * max(1.0, np.abs(self.Gamma).max()):
            raise InvalidParams("Gamma is not positive semidefinite")
        if _min_eig(self.Delta) < -tol * max(1.0, np.abs(self.Delta).max()):
            raise InvalidParams("Delta is not positive semidefinite")

    # -- serialisation -------------------------------------------------------

    def to_dict(self) -> dict:
        d = self.dims
        out = {"dims": {"N": d.n_assets, "I": d.n_intermediaries, "M": d.n_constraints}}
        for name in ("A_q", "A_ell", "H_ell", "rho", "R", "H_q", "p", "gamma_bar", "Gamma", "Delta"):
            out[name] = getattr(self, name).tolist()
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "EconomyParams":
        try:
            dims = doc["dims"]
            N, I, M = int(dims["N"]), int(dims["I"]), int(dims["M"])
        except (KeyError, TypeError) as exc:
            raise InvalidParams("economy document needs a dims header {N, I, M}") from exc
        names = ("A_q", "A_ell", "H_ell", "rho", "R", "H_q", "p", "gamma_bar", "Gamma", "Delta")
        extra = set(doc) - set(names) - {"dims"}
        if extra:
            raise InvalidParams(f"unknown economy keys: {sorted(extra)}")
        missing = [n for n in names if n not in doc]
        if missing:
            raise InvalidParams(f"missing economy blocks: {missing}")
        params = cls(**{n: np.asarray(doc[n], dtype=float) for n in names})
        if params.dims != Dimensions(N, I, M):
            raise InvalidParams("dims header does not match the matrix blocks")
        params.validate()
        return params

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "EconomyParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Pattern:
    """Active constraints: binding rollover rows and clipped (zero) liquidations."""

    binding: NDArray[np.bool_]  # (I, M)
    clipped: NDArray[np.bool_]  # (I, N)

    def key(self) -> bytes:
        return np.packbits(np.concatenate([self.binding.ravel(), self.clipped.ravel()])).tobytes() + bytes(
            [self.binding.shape[0], self.binding.shape[1], self.clipped.shape[1]]
        )

    def __eq__(self, other):
        return (
            isinstance(other, Pattern)
            and np.array_equal(self.binding, other.binding)
            and np.array_equal(self.clipped, other.clipped)
        )

    def __hash__(self):
        return hash(self.key())

    @classmethod
    def all_binding(cls, dims: Dimensions) -> "Pattern":
        return cls(
            np.ones((dims.n_intermediaries, dims.n_constraints), dtype=bool),
            np.zeros((dims.n_intermediaries, dims.n_assets), dtype=bool),
        )


@dataclass
class MiddleEquilibrium:
    ell: Array  # (NI,)
    gamma: Array  # (N,)
    L: Array  # (N,)
    lam: Array  # (I, M)
    mu: Array  # (I, N) multipliers on l >= 0
    binding: NDArray[np.bool_]  # (I, M)
    clipped: NDArray[np.bool_]  # (I, N)
    iterations: int = 0
    kkt_residual: float = 0.0

    @property
    def pattern(self) -> Pattern:
        return Pattern(self.binding.copy(), self.clipped.copy())

    def ell_i(self, i: int) -> Array:
        N = self.gamma.shape[0]
        return self.ell[i * N : (i + 1) * N]


# -- joint QP assembly ---------------------------------------------------------


def _stack_q(q, dims: Dimensions) -> Array:
    q = np.asarray(q, dtype=float).ravel()
    if q.shape != (dims.n_assets * dims.n_intermediaries,):
        raise InvalidParams(f"allocation has {q.size} entries, expected {dims.n_assets * dims.n_intermediaries}")
    return q


def _qp_data(params: EconomyParams, q: Array, tau: Array):
    """Hessian P, linear term c and constraint system G x >= h of the potential."""
    I, M, N = params.A_q.shape
    NI = N * I
    P = np.kron(np.ones((I, I)), params.Gamma)
    for i in range(I):
        P[i * N : (i + 1) * N, i * N : (i + 1) * N] += params.H_ell[i]
    c = (params.R + tau.reshape(I, N) - params.gamma_bar).ravel()
    G = np.zeros((I * M + NI, NI))
    h = np.zeros(I * M + NI)
    qi = q.reshape(I, N)
    for i in range(I):
        G[i * M : (i + 1) * M, i * N : (i + 1) * N] = params.A_ell[i]
        h[i * M : (i + 1) * M] = params.A_q[i] @ qi[i] + params.rho[i]
    G[I * M :, :] = np.eye(NI)
    return P, c, G, h


def _kkt_solve(P, rhs_x, G_W, rhs_y):
    n, m = P.shape[0], G_W.shape[0]
    K = np.zeros((n + m, n + m))
    K[:n, :n] = P
    K[:n, n:] = -G_W.T
    K[n:, :n] = G_W
    try:
        sol = np.linalg.solve(K, np.concatenate([rhs_x, rhs_y]))
    except np.linalg.LinAlgError as exc:
        raise SingularSystem("KKT matrix is singular") from exc
    if not np.all(np.isfinite(sol)):
        raise SingularSystem("KKT solve produced non-finite values")
    return sol[:n], sol[n:]


def _independent_rows(G: Array, rows: list[int]) -> list[int]:
    kept: list[int] = []
    for r in rows:
        trial = kept + [r]
        if np.linalg.matrix_rank(G[trial]) == len(trial):
            kept = trial
    return kept


def _feasible_start(G, h, n):
    res = linprog(np.zeros(n), A_ub=-G, b_ub=-h, bounds=[(None, None)] * n, method="highs")
    if res.status != 0:
        raise InfeasibleConstraints("rollover constraints cannot be met with nonnegative liquidations")
    return res.x


def _active_set(P, c, G, h, start_rows, cap=MAX_ACTIVE_SET_ITER):
    """Primal active-set QP: min 1/2 x'Px + c'x s.t. G x >= h."""
    n = P.shape[0]
    W = list(start_rows)
    if m_rows := len(W):
        if np.linalg.matrix_rank(G[W]) < m_rows:
            raise SingularSystem("warm-start constraint rows are linearly dependent")
    tol = _FEAS_TOL * (1.0 + np.abs(h).max())
    x, _ = _kkt_solve(P, -c, G[W], h[W])
    # cheap repair of the warm start: pin coordinates that came out negative
    for _ in range(n):
        viol = G @ x - h < -tol
        if not viol.any():
            break
        extra = [j for j in np.flatnonzero(viol) if j not in W]
        trial = _independent_rows(G, W + extra)
        if len(trial) == len(W):
            break
        W = trial
        x, _ = _kkt_solve(P, -c, G[W], h[W])
    if np.any(G @ x - h < -tol):
        x = _feasible_start(G, h, n)
        active = [j for j in range(G.shape[0]) if abs(G[j] @ x - h[j]) <= 1e-9 * (1.0 + abs(h[j]))]
        W = _independent_rows(G, active)
    seen: set[tuple] = set()
    for it in range(1, cap + 1):
        g = P @ x + c
        p, y = _kkt_solve(P, -g, G[W], np.zeros(len(W)))
        if np.abs(p).max() <= 1e-12 * (1.0 + np.abs(x).max()):
            if not W or y.min() >= -_MULT_TOL * (1.0 + np.abs(g).max()):
                return x, W, it
            W.pop(int(np.argmin(y)))
            state = (tuple(sorted(W)), tuple(np.round(x, 12)))
            if state in seen:
                raise NoConvergence("active-set iteration is cycling")
            seen.add(state)
            continue
        alpha, block = 1.0, None
        Gp = G @ p
        slack = G @ x - h
        for j in range(G.shape[0]):
            if j in W or Gp[j] >= -1e-14:
                continue
            a = max(slack[j], 0.0) / -Gp[j]
            if a < alpha:
                alpha, block = a, j
        x = x + alpha * p
        if block is not None:
            W.append(block)
    raise NoConvergence(f"active set did not settle within {cap} iterations")


def _equilibrium_from(params, q, tau, P, c, G, h, W, iterations=0) -> MiddleEquilibrium:
    I, M, N = params.A_q.shape
    W = sorted(W)
    x, y = _kkt_solve(P, -c, G[W], h[W])
    resid = max(
        np.abs(P @ x + c - G[W].T @ y).max(initial=0.0),
        np.abs(G[W] @ x - h[W]).max(initial=0.0),
    )
    if resid > KKT_TOL * max(1.0, np.abs(c).max(), np.abs(h).max()):
        raise SingularSystem(f"KKT residual {resid:.3e} exceeds tolerance")
    lam = np.zeros(I * M)
    mu = np.zeros(N * I)
    for j, yj in zip(W, y):
        if j < I * M:
            lam[j] = yj
        else:
            mu[j - I * M] = yj
    act = np.zeros(G.shape[0], dtype=bool)
    act[W] = True
    L = x.reshape(I, N).sum(axis=0)
    return MiddleEquilibrium(
        ell=x,
        gamma=params.gamma_bar - params.Gamma @ L,
        L=L,
        lam=lam.reshape(I, M),
        mu=mu.reshape(I, N),
        binding=act[: I * M].reshape(I, M),
        clipped=act[I * M :].reshape(I, N),
        iterations=iterations,
        kkt_residual=float(resid),
    )


def solve_middle(params: EconomyParams, q, tau=None) -> MiddleEquilibrium:
    """Competitive Middle equilibrium for allocation ``q`` and wedges ``tau``.

    Complementary slackness is resolved by active-set iteration warm-started
    with every rollover row binding; ``l >= 0`` rows join the same machinery.
    """
    dims = params.dims
    q = _stack_q(q, dims)
    tau = np.zeros_like(q) if tau is None else _stack_q(tau, dims)
    P, c, G, h = _qp_data(params, q, tau)
    start = list(range(dims.n_intermediaries * dims.n_constraints))
    _, W, it = _active_set(P, c, G, h, start)
    return _equilibrium_from(params, q, tau, P, c, G, h, W, it)


def solve_intermediary(params: EconomyParams, i: int, q_i, gamma, tau_i=None) -> Array:
    """Intermediary ``i``'s optimal liquidations when it takes ``gamma`` as given."""
    I, M, N = params.A_q.shape
    q_i = np.asarray(q_i, dtype=float)
    tau_i = np.zeros(N) if tau_i is None else np.asarray(tau_i, dtype=float)
    P = params.H_ell[i]
    c = params.R[i] + tau_i - np.asarray(gamma, dtype=float)
    G = np.vstack([params.A_ell[i], np.eye(N)])
    h = np.concatenate([params.A_q[i] @ q_i + params.rho[i], np.zeros(N)])
    _, W, _ = _active_set(P, c, G, h, list(range(M)))
    x, _ = _kkt_solve(P, -c, G[sorted(W)], h[sorted(W)])
    return x


def pattern_rows(pattern: Pattern) -> list[int]:
    I, M = pattern.binding.shape
    rows = [int(j) for j in np.flatnonzero(pattern.binding.ravel())]
    rows += [I * M + int(j) for j in np.flatnonzero(pattern.clipped.ravel())]
    return rows


def solve_fixed(params: EconomyParams, q, tau, pattern: Pattern) -> MiddleEquilibrium:
    """Solve the linear first-order system with the active set held at ``pattern``.

    This is the globally linear economy of the liquidation formula; it agrees
    with :func:`solve_middle` whenever the equilibrium keeps that pattern.
    """
    dims = params.dims
    q = _stack_q(q, dims)
    tau = np.zeros_like(q) if tau is None else _stack_q(tau, dims)
    P, c, G, h = _qp_data(params, q, tau)
    return _equilibrium_from(params, q, tau, P, c, G, h, pattern_rows(pattern))


# -- sensitivities -------------------------------------------------------------


@dataclass
class Sensitivities:
    """Linear representation of the Middle equilibrium at a fixed pattern.

    ``Lambda_qe[i, j]`` and ``Lambda_taue[i, j]`` carry the price-channel
    effect of intermediary ``j``'s holdings (wedges) on intermediary ``i``'s
    liquidations. With identical liquidation technologies across
    intermediaries the blocks do not depend on ``i``.
    """

    pattern: Pattern
    ell_bar: Array  # (I, N)
    Lambda_q: Array  # (I, N, N) own channel, price held fixed
    Lambda_tau: Array  # (I, N, N)
    Lambda_qe: Array  # (I, I, N, N)
    Lambda_taue: Array  # (I, I, N, N)
    price_response: Array  # (I, N, N) d l_i / d gamma
    theta_jac: Array  # (NI, D) d l / d theta
    Gamma: Array = field(repr=False)
    H_ell: Array = field(repr=False)

    @property
    def dims(self) -> tuple[int, int]:
        I, N = self.ell_bar.shape
        return I, N

    def Lambda_bar_tau_i(self, i: int) -> Array:
        I, N = self.dims
        out = -np.concatenate(list(self.Lambda_taue[i]), axis=1)
        out[:, i * N : (i + 1) * N] += self.Lambda_tau[i]
        return out

    def Lambda_bar_q_i(self, i: int) -> Array:
        I, N = self.dims
        out = -np.concatenate(list(self.Lambda_qe[i]), axis=1)
        out[:, i * N : (i + 1) * N] += self.Lambda_q[i]
        return out

    @property
    def Lambda_bar_tau(self) -> Array:
        """Stacked (NI x NI): l = ... - Lambda_bar_tau @ tau."""
        return np.vstack([self.Lambda_bar_tau_i(i) for i in range(self.dims[0])])

    @property
    def Lambda_bar_q(self) -> Array:
        """Stacked (NI x NI): d l / d q."""
        return np.vstack([self.Lambda_bar_q_i(i) for i in range(self.dims[0])])

    @property
    def sum_Lambda_bar_tau(self) -> Array:
        """sum_i Lambda_bar_tau_i (N x NI): the causal impact of wedges on L."""
        return sum(self.Lambda_bar_tau_i(i) for i in range(self.dims[0]))

    @property
    def sum_Lambda_bar_q(self) -> Array:
        return sum(self.Lambda_bar_q_i(i) for i in range(self.dims[0]))

    def liquidations(self, q, tau=None, theta=None) -> Array:
        """Liquidations from the linear formula; ``theta`` swaps the uncertain block."""
        q = np.asarray(q, dtype=float).ravel()
        out = self.ell_bar.ravel() + self.Lambda_bar_q @ q
        if tau is not None:
            out = out - self.Lambda_bar_tau @ np.asarray(tau, dtype=float).ravel()
        if theta is not None:
            out = out + self.theta_jac @ (np.asarray(theta, dtype=float) - self._theta_ref)
        return out

    _theta_ref: Array = field(default=None, repr=False)


def _own_system(params: EconomyParams, i: int, pattern: Pattern):
    """Inverse blocks of intermediary ``i``'s KKT at fixed price."""
    I, M, N = params.A_q.shape
    rows_b = np.flatnonzero(pattern.binding[i])
    rows_c = np.flatnonzero(pattern.clipped[i])
    G = np.vstack([params.A_ell[i][rows_b], np.eye(N)[rows_c]]) if (rows_b.size + rows_c.size) else np.zeros((0, N))
    m = G.shape[0]
    if m and np.linalg.matrix_rank(G) < m:
        raise SingularSystem(f"intermediary {i}: active rows are dependent")
    K = np.zeros((N + m, N + m))
    K[:N, :N] = params.H_ell[i]
    K[:N, N:] = -G.T
    K[N:, :N] = G
    try:
        Kinv = np.linalg.inv(K)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(f"intermediary {i}: KKT matrix is singular") from exc
    Y11, Y12 = Kinv[:N, :N], Kinv[:N, N:]
    E_q = np.zeros((m, N))
    E_q[: rows_b.size] = params.A_q[i][rows_b]
    E_rho = np.zeros((m, M))
    E_rho[np.arange(rows_b.size), rows_b] = 1.0
    return Y11, Y12 @ E_q, Y12 @ E_rho


def sensitivities_at(params: EconomyParams, q, tau, eq: MiddleEquilibrium) -> Sensitivities:
    I, M, N = params.A_q.shape
    q = _stack_q(q, params.dims)
    tau = np.zeros_like(q) if tau is None else _stack_q(tau, params.dims)
    pattern = eq.pattern
    Pi, Kq, Kr = [], [], []
    for i in range(I):
        y11, kq, kr = _own_system(params, i, pattern)
        Pi.append(0.5 * (y11 + y11.T))
        Kq.append(kq)
        Kr.append(kr)
    Pi, Kq, Kr = np.array(Pi), np.array(Kq), np.array(Kr)
    Gamma = params.Gamma
    Mx = np.linalg.inv(np.eye(N) + Pi.sum(axis=0) @ Gamma)
    GM = Gamma @ Mx  # d gamma / d(aggregate shock) up to sign
    Lqe = np.einsum("iab,bc,jcd->ijad", Pi, GM, Kq)
    Lte = np.einsum("iab,bc,jcd->ijad", Pi, GM, Pi)

    D = params.dims.theta_dim
    J = np.zeros((N * I, D))
    Pi_sum = Pi.sum(axis=0)
    for i in range(I):
        rows = slice(i * N, (i + 1) * N)
        for j in range(I):
            J[rows, j * M : (j + 1) * M] = (i == j) * Kr[i] - Pi[i] @ GM @ Kr[j]
            cols = slice(I * M + j * N, I * M + (j + 1) * N)
            J[rows, cols] = -(i == j) * Pi[i] + Pi[i] @ GM @ Pi[j]
        J[rows, I * M + I * N :] = Pi[i] - Pi[i] @ GM @ Pi_sum

    sens = Sensitivities(
        pattern=pattern,
        ell_bar=np.zeros((I, N)),
        Lambda_q=Kq,
        Lambda_tau=Pi.copy(),
        Lambda_qe=Lqe,
        Lambda_taue=Lte,
        price_response=Pi,
        theta_jac=J,
        Gamma=Gamma.copy(),
        H_ell=params.H_ell.copy(),
    )
    sens._theta_ref = params.theta
    ell_bar = eq.ell - sens.Lambda_bar_q @ q + sens.Lambda_bar_tau @ tau
    sens.ell_bar = ell_bar.reshape(I, N)
    return sens


def sensitivities(params: EconomyParams, q, tau=None) -> Sensitivities:
    """Implicit-function Jacobians of the equilibrium, split into own and price channels."""
    eq = solve_middle(params, q, tau)
    return sensitivities_at(params, q, tau, eq)


def no_intervention_liquidations(params: EconomyParams, q, sens: Sensitivities | None = None):
    """Per-intermediary liquidations and their total when no wedges are applied."""
    I, M, N = params.A_q.shape
    q = _stack_q(q, params.dims)
    if sens is None:
        sens = sensitivities(params, q)
    ell = (sens.ell_bar.ravel() + sens.Lambda_bar_q @ q).reshape(I, N)
    return ell, ell.sum(axis=0)


def fire_sale_discount(params: EconomyParams, q, sens: Sensitivities | None = None) -> Array:
    """theta_i(q) = R_i - (gamma_bar - Gamma L(q)), one row per intermediary."""
    _, L = no_intervention_liquidations(params, q, sens)
    return params.R - (params.gamma_bar - params.Gamma @ L)


def intermediary_payoff(params: EconomyParams, i: int, q_i, ell_i, gamma, tau_i=None, ell_star_i=None) -> float:
    q_i, ell_i, gamma = (np.asarray(a, dtype=float) for a in (q_i, ell_i, gamma))
    R, p = params.R[i], params.p[i]
    u = (
        q_i @ (R - p)
        - ell_i @ (R - gamma)
        - 0.5 * q_i @ params.H_q[i] @ q_i
        - 0.5 * ell_i @ params.H_ell[i] @ ell_i
    )
    if tau_i is not None:
        ref = ell_i if ell_star_i is None else np.asarray(ell_star_i, dtype=float)
        u -= (ell_i - ref) @ np.asarray(tau_i, dtype=float)
    return float(u)


def arbitrageur_payoff(params: EconomyParams, L, gamma) -> float:
    L, gamma = np.asarray(L, dtype=float), np.asarray(gamma, dtype=float)
    return float(L @ (params.gamma_bar - gamma) - 0.5 * L @ params.Gamma @ L)


def intermediaries_welfare(params: EconomyParams, q, ell, gamma) -> float:
    """Sum of intermediary payoffs at equilibrium (remissions cancel)."""
    I, M, N = params.A_q.shape
    q = np.asarray(q, dtype=float).reshape(I, N)
    ell = np.asarray(ell, dtype=float).reshape(I, N)
    return sum(intermediary_payoff(params, i, q[i], ell[i], gamma) for i in range(I))
