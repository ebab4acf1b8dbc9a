"""AC injection model, Newton power flow and DC branch flows.

Branches are modelled as lossless series susceptances, so with
``d = theta_f - theta_t`` the injections are

    P_f += b V_f V_t sin d          P_t -= b V_f V_t sin d
    Q_f += b V_f (V_f - V_t cos d)  Q_t += b V_t (V_t - V_f cos d)

Every function here accepts arrays with arbitrary leading batch dimensions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError
from .grid_model import GridCase, MatrixBundle

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StateVector:
    theta: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float))
        if self.theta.shape != self.v.shape:
            raise ValueError("theta and v must have the same shape")

    @classmethod
    def flat(cls, n_bus: int) -> "StateVector":
        return cls(np.zeros(n_bus), np.ones(n_bus))

    def pack(self, ref: int) -> np.ndarray:
        """Estimator ordering: non-reference angles followed by all magnitudes."""
        return pack_state(self.theta, self.v, ref)

    @classmethod
    def unpack(cls, x: np.ndarray, ref: int) -> "StateVector":
        theta, v = unpack_state(x, ref)
        return cls(theta, v)

    def is_valid(self, ref: int) -> bool:
        return bool(self.theta[ref] == 0.0 and np.all(self.v > 0) and np.all(np.abs(self.theta) < np.pi))


def pack_state(theta, v, ref):
    theta = np.asarray(theta)
    return np.concatenate([np.delete(theta, ref, axis=-1), v], axis=-1)


def unpack_state(x, ref):
    x = np.asarray(x, dtype=float)
    n = (x.shape[-1] + 1) // 2
    theta = np.insert(x[..., : n - 1], ref, 0.0, axis=-1)
    return theta, x[..., n - 1:]


def _branch_terms(case: GridCase, theta, v):
    f, t, b = case.from_idx, case.to_idx, case.b
    d = theta[..., f] - theta[..., t]
    vv = b * v[..., f] * v[..., t]
    return vv * np.sin(d), vv * np.cos(d)


def injections(case: GridCase, theta, v):
    """Return ``(P, Q)`` bus injections for the given angles and magnitudes."""
    theta = np.asarray(theta, dtype=float)
    v = np.asarray(v, dtype=float)
    s, c = _branch_terms(case, theta, v)
    n = case.n_bus
    f, t = case.from_idx, case.to_idx
    P = np.zeros(theta.shape[:-1] + (n,))
    Q = np.zeros_like(P)
    # columns of the incidence matrix, unrolled
    for k in range(case.n_branch):
        P[..., f[k]] += s[..., k]
        P[..., t[k]] -= s[..., k]
        Q[..., f[k]] -= c[..., k]
        Q[..., t[k]] -= c[..., k]
    Q += _bus_b_total(case) * v ** 2
    return P, Q


def _bus_b_total(case: GridCase):
    tot = np.zeros(case.n_bus)
    np.add.at(tot, case.from_idx, case.b)
    np.add.at(tot, case.to_idx, case.b)
    return tot


def h_measure(case: GridCase, x) -> np.ndarray:
    """Noise-free measurement vector ``[P_1..P_n, Q_1..Q_n]``.

    ``x`` is either a :class:`StateVector` or a tuple ``(theta, v)`` of arrays.
    """
    theta, v = (x.theta, x.v) if isinstance(x, StateVector) else x
    P, Q = injections(case, theta, v)
    return np.concatenate([P, Q], axis=-1)


def h_vjp(case: GridCase, theta, v, g):
    """Vector-Jacobian product of :func:`h_measure`.

    ``g`` has shape ``(..., 2n)``; returns ``(g_theta, g_v)`` each ``(..., n)``.
    Batch dimensions of ``theta``/``v`` and ``g`` broadcast.
    """
    theta = np.asarray(theta, dtype=float)
    v = np.asarray(v, dtype=float)
    g = np.asarray(g, dtype=float)
    n = case.n_bus
    f, t = case.from_idx, case.to_idx
    gP, gQ = g[..., :n], g[..., n:]
    s, c = _branch_terms(case, theta, v)
    gs = gP[..., f] - gP[..., t]
    gc = -(gQ[..., f] + gQ[..., t])
    gd = gs * c - gc * s
    w = gs * s + gc * c
    shape = np.broadcast_shapes(gd.shape[:-1], theta.shape[:-1]) + (n,)
    g_theta = np.zeros(shape)
    g_v = np.zeros(shape)
    for k in range(case.n_branch):
        g_theta[..., f[k]] += gd[..., k]
        g_theta[..., t[k]] -= gd[..., k]
        g_v[..., f[k]] += w[..., k]
        g_v[..., t[k]] += w[..., k]
    g_v = g_v / v + 2.0 * _bus_b_total(case) * v * gQ
    return g_theta, g_v


def h_jacobian(case: GridCase, theta, v) -> np.ndarray:
    """Dense ``2n x 2n`` Jacobian with columns ``[d/dtheta, d/dV]`` (single state)."""
    m = 2 * case.n_bus
    g_theta, g_v = h_vjp(case, theta, v, np.eye(m))
    return np.concatenate([g_theta, g_v], axis=-1)


def dc_line_flows(bundle: MatrixBundle, theta) -> np.ndarray:
    """Signed from->to branch flows ``f = Y M^T theta``."""
    theta = np.asarray(theta, dtype=float)
    return theta @ (bundle.Y @ bundle.M.T).T


def solve_ac_power_flow(
    case: GridCase,
    p_load,
    q_load,
    *,
    v_ref: float = 1.0,
    tol: float = 1e-8,
    max_iter: int = 50,
    return_iterations: bool = False,
):
    """Newton-Raphson power flow; the reference bus is the slack, all others PQ.

    Loads are per-unit demand (positive = consumption). Starts from the flat
    state and halves the step while the mismatch grows.
    """
    n = case.n_bus
    ref = case.ref
    nonref = case.nonref
    p_sched = -np.asarray(p_load, dtype=float)[nonref]
    q_sched = -np.asarray(q_load, dtype=float)[nonref]
    theta = np.zeros(n)
    v = np.ones(n)
    v[ref] = v_ref

    rows = np.concatenate([nonref, n + nonref])
    cols = np.concatenate([nonref, n + nonref])

    def mismatch(theta, v):
        P, Q = injections(case, theta, v)
        return np.concatenate([p_sched - P[nonref], q_sched - Q[nonref]])

    mis = mismatch(theta, v)
    norm = np.max(np.abs(mis))
    it = 0
    while norm >= tol:
        if it >= max_iter:
            raise DivergenceError("AC power flow did not converge", norm, it)
        J = h_jacobian(case, theta, v)[np.ix_(rows, cols)]
        try:
            dx = np.linalg.solve(J, mis)
        except np.linalg.LinAlgError as exc:
            raise DivergenceError("singular power-flow Jacobian", norm, it) from exc
        step = 1.0
        while True:
            th_new = theta.copy()
            v_new = v.copy()
            th_new[nonref] += step * dx[: n - 1]
            v_new[nonref] += step * dx[n - 1:]
            new_mis = mismatch(th_new, v_new)
            new_norm = np.max(np.abs(new_mis))
            if new_norm < norm or step < 1e-3:
                break
            step *= 0.5
        theta, v, mis, norm = th_new, v_new, new_mis, new_norm
        it += 1
        if not np.all(np.isfinite(mis)) or np.any(v <= 0):
            raise DivergenceError("AC power flow diverged", float(norm), it)
    state = StateVector(theta, v)
    if return_iterations:
        return state, it
    return state
