"""Independent reference computations used only by the tests.

Nothing here reuses the package's solvers: constrained quadratic programs are
solved by accelerated projected gradient on the dual, and Jacobians by
central differences.
"""

from __future__ import annotations

import numpy as np


def dual_qp(P, c, G, h, tol=1e-13, max_iter=400_000):
    """min 1/2 x'Px + c'x  s.t.  G x >= h, by FISTA with restart on the dual.

    Returns the primal point x = P^{-1}(G'y - c) at the final multipliers.
    """
    Pinv = np.linalg.inv(P)
    Q = G @ Pinv @ G.T
    b = G @ Pinv @ c + h
    step = 1.0 / max(np.linalg.eigvalsh(0.5 * (Q + Q.T)).max(), 1e-12)
    y = np.zeros(G.shape[0])
    z, t = y.copy(), 1.0
    prev_obj = np.inf
    for k in range(max_iter):
        grad = Q @ z - b
        y_new = np.maximum(z - step * grad, 0.0)
        obj = 0.5 * y_new @ Q @ y_new - b @ y_new
        if obj > prev_obj:  # adaptive restart
            t, z = 1.0, y.copy()
            prev_obj = np.inf
            continue
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        z = y_new + ((t - 1) / t_new) * (y_new - y)
        if k % 50 == 0:
            x = Pinv @ (G.T @ y_new - c)
            viol = np.maximum(h - G @ x, 0).max(initial=0.0)
            comp = np.abs(y_new * (G @ x - h)).max(initial=0.0)
            if viol < tol * (1 + np.abs(h).max()) and comp < tol * (1 + np.abs(h).max()):
                return x
        y, t, prev_obj = y_new, t_new, obj
    return Pinv @ (G.T @ y - c)


def equilibrium_qp(params, q, tau=None):
    """Assemble the joint potential of the Middle equilibrium from primitives."""
    A_q, A_ell = params.A_q, params.A_ell
    I, M, N = A_q.shape
    q = np.asarray(q, float).reshape(I, N)
    tau = np.zeros((I, N)) if tau is None else np.asarray(tau, float).reshape(I, N)
    P = np.zeros((N * I, N * I))
    for i in range(I):
        for j in range(I):
            P[i * N : (i + 1) * N, j * N : (j + 1) * N] = params.Gamma
        P[i * N : (i + 1) * N, i * N : (i + 1) * N] += params.H_ell[i]
    c = (params.R + tau - params.gamma_bar).ravel()
    rows, rhs = [], []
    for i in range(I):
        for m in range(M):
            r = np.zeros(N * I)
            r[i * N : (i + 1) * N] = A_ell[i, m]
            rows.append(r)
            rhs.append(A_q[i, m] @ q[i] + params.rho[i, m])
    for k in range(N * I):
        r = np.zeros(N * I)
        r[k] = 1.0
        rows.append(r)
        rhs.append(0.0)
    return P, c, np.array(rows), np.array(rhs)


def oracle_liquidations(params, q, tau=None):
    return dual_qp(*equilibrium_qp(params, q, tau))


def best_response(params, i, q_i, gamma, tau_i=None):
    """Intermediary i's own liquidation problem at a fixed price vector."""
    N = gamma.shape[0]
    tau_i = np.zeros(N) if tau_i is None else tau_i
    P = params.H_ell[i]
    c = params.R[i] + tau_i - gamma
    G = np.vstack([params.A_ell[i], np.eye(N)])
    h = np.concatenate([params.A_q[i] @ q_i + params.rho[i], np.zeros(N)])
    return dual_qp(P, c, G, h)


def central_jacobian(f, x0, step=1e-6):
    x0 = np.asarray(x0, float)
    f0 = np.asarray(f(x0))
    J = np.zeros((f0.size, x0.size))
    for k in range(x0.size):
        e = np.zeros_like(x0)
        e[k] = step
        J[:, k] = (np.asarray(f(x0 + e)).ravel() - np.asarray(f(x0 - e)).ravel()) / (2 * step)
    return J


def rel_err(a, b, floor=1e-12):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))


def norm_close(a, b, rtol=1e-4, atol=1e-8):
    """Normwise ||a - b|| <= rtol ||b|| + atol; the floor covers structurally zero blocks."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return bool(np.linalg.norm(a - b) <= rtol * np.linalg.norm(b) + atol)
