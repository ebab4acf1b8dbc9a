"""Weighted least squares AC estimation, residual bad-data test and DC estimation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import UnobservableError
from .grid_model import GridCase, MatrixBundle
from .powerflow import StateVector, h_jacobian, h_measure

logger = logging.getLogger(__name__)

CLEAN = "clean"
BAD_DATA = "bad_data"


@dataclass(frozen=True)
class WlsConfig:
    """Estimator settings.

    ``sigma`` is the per-meter standard deviation (scalar or length-m array);
    the weights are ``sigma**-2``. ``normalizer`` divides the raw objective
    before it is compared with ``tau``; ``None`` means the meter count.
    ``v_ref`` pins the reference-bus magnitude to a known setpoint instead of
    estimating it.
    """

    sigma: float | np.ndarray = 0.01
    tol: float = 1e-8
    max_iter: int = 50
    tau: float = 0.5
    normalizer: Optional[float] = None
    v_ref: Optional[float] = None

    def __post_init__(self):
        if np.any(np.asarray(self.sigma) <= 0):
            raise ValueError("sigma must be positive")
        if self.tol <= 0 or self.tau <= 0:
            raise ValueError("tol and tau must be positive")

    def weights(self, m: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.sigma, dtype=float) ** -2, (m,)).copy()

    def scale(self, m: int) -> float:
        return float(m if self.normalizer is None else self.normalizer)


@dataclass(frozen=True)
class EstimateResult:
    x_hat: StateVector
    J: float
    r_norm: float
    converged: bool
    iterations: int
    J_norm: float = float("nan")
    J_start: float = float("nan")


def weighted_residual(case, z, theta, v, weights):
    r = np.asarray(z) - h_measure(case, (theta, v))
    return float(np.sum(weights * r ** 2)), r


def wls_estimate(case: GridCase, z, cfg: WlsConfig = WlsConfig()) -> EstimateResult:
    """Gauss-Newton solution of min (z - h(x))^T W (z - h(x)) from a flat start."""
    z = np.asarray(z, dtype=float)
    n = case.n_bus
    m = z.shape[0]
    if m < n:
        raise UnobservableError(f"{m} measurements cannot observe {n} buses")
    if not np.all(np.isfinite(z)):
        raise ValueError("measurement vector contains non-finite values")
    W = cfg.weights(m)
    ref = case.ref
    drop = [ref] if cfg.v_ref is None else [ref, n + ref]
    keep = np.delete(np.arange(2 * n), drop)  # columns of the estimated states
    theta = np.zeros(n)
    v = np.ones(n)
    if cfg.v_ref is not None:
        v[ref] = cfg.v_ref
    J0, _ = weighted_residual(case, z, theta, v, W)
    converged = False
    it = 0
    while it < cfg.max_iter:
        r = z - h_measure(case, (theta, v))
        H = h_jacobian(case, theta, v)[:, keep]
        sw = np.sqrt(W)
        # least squares on sqrt(W) H is the normal-equation step without squaring cond(H)
        dx, _, rank, _ = np.linalg.lstsq(sw[:, None] * H, sw * r, rcond=None)
        if rank < H.shape[1] and it > 0:
            raise UnobservableError("gain matrix is singular")
        x = np.concatenate([theta, v])
        x[keep] += dx
        theta, v = x[:n], x[n:]
        it += 1
        if np.max(np.abs(dx)) < cfg.tol:
            converged = True
            break
    J, r = weighted_residual(case, z, theta, v, W)
    if not converged:
        logger.warning("WLS did not converge in %d iterations (J=%.3e)", it, J)
    return EstimateResult(
        x_hat=StateVector(theta, v),
        J=J,
        r_norm=float(np.linalg.norm(r)),
        converged=converged,
        iterations=it,
        J_norm=J / cfg.scale(m),
        J_start=J0,
    )


def bdd_check(result, tau: float = 0.5) -> str:
    """Residual test: clean iff the normalised objective is strictly below ``tau``.

    Accepts an :class:`EstimateResult` or a bare objective value.
    """
    J = result.J_norm if isinstance(result, EstimateResult) else float(result)
    return CLEAN if J < tau else BAD_DATA


_DC_OPS: dict[int, tuple[MatrixBundle, np.ndarray]] = {}


def dc_estimate_operator(bundle: MatrixBundle) -> np.ndarray:
    """Linear map ``n x n`` with ``dc_estimate(P) == P @ op``."""
    cached = _DC_OPS.get(id(bundle))
    if cached is not None and cached[0] is bundle:
        return cached[1]
    H = bundle.H_dc
    if np.linalg.matrix_rank(H) < H.shape[1]:
        raise UnobservableError("DC measurement Jacobian is rank deficient")
    K = np.linalg.solve(H.T @ H, H.T)  # (n-1) x n
    op = np.zeros((bundle.n_bus, bundle.n_bus))
    op[:, bundle.nonref] = K.T
    op.setflags(write=False)
    _DC_OPS[id(bundle)] = (bundle, op)
    return op


def dc_estimate(bundle: MatrixBundle, P) -> np.ndarray:
    """Least-squares angles ``(H^T H)^-1 H^T P`` with the reference angle set to 0.

    ``P`` may carry leading batch dimensions.
    """
    return np.asarray(P, dtype=float) @ dc_estimate_operator(bundle)


def dc_residual(bundle: MatrixBundle, P) -> float:
    theta = dc_estimate(bundle, P)
    return float(np.linalg.norm(np.asarray(P) - bundle.H_dc @ theta[bundle.nonref]))
