"""False data injection attacks that push a line toward post-contingency overload.

For each epoch the attacker estimates the clean state, runs single-outage
screening on it and picks the line with the least headroom (``select_target_line``)
together with the outage that loads it most. It then ascends

    |f'_target(x_hat(z + a))| - rho * max(0, J(z + a) - tau)

with Adam over the permitted meters, rejecting any step that lowers the
objective and keeping the best iterate whose residual stays below ``tau``.

Estimators are duck-typed: ``case``, ``estimate(z) -> (theta, v)`` on a batch of
measurement rows and ``residual_weight`` (the factor turning squared residuals
into the normalized ``J``). If they also provide ``estimate_and_vjp`` the
gradient is exact, otherwise central finite differences are used.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass

import numpy as np

from .classic_estimation import WlsConfig, wls_estimate
from .contingency import compute_lodf, count_contingencies, n1_flows
from .errors import NoTargetError
from .grid_model import GridCase, MatrixBundle, build_matrices
from .powerflow import h_measure, h_vjp

logger = logging.getLogger(__name__)

DEFAULT_TARGET_METERS = (0, 1, 2, 3, 4)  # P injections at buses 1-5


@dataclass(frozen=True)
class AttackConfig:
    target_meters: tuple = DEFAULT_TARGET_METERS
    tau: float = 0.5
    f_m: float = 0.03
    learning_rate: float = 1e-2
    max_steps: int = 200
    magnitude_cap: float = 0.5
    seed: int = 0
    rho: float = 100.0
    contingency: str = "worst"  # or "all": re-pick the worst outage every step
    jitter: float = 0.0
    fd_step: float = 1e-4
    min_lr: float = 1e-8

    def __post_init__(self):
        meters = tuple(sorted({int(k) for k in self.target_meters}))
        if not meters:
            raise ValueError("target_meters must be non-empty")
        object.__setattr__(self, "target_meters", meters)
        if self.f_m < 0:
            raise ValueError("f_m must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.magnitude_cap < 0:
            raise ValueError("magnitude_cap must be non-negative")
        if self.contingency not in ("worst", "all"):
            raise ValueError("contingency must be 'worst' or 'all'")

    def to_dict(self):
        d = asdict(self)
        d["target_meters"] = list(self.target_meters)
        return d


@dataclass
class AttackResult:
    epoch: int
    status: str  # "ok", "no_target" or "clean_bdd_fail"
    a: np.ndarray
    c: np.ndarray
    J_clean: float
    J_attacked: float
    target_line: int | None = None
    outage_line: int | None = None
    f_limit: float = float("nan")
    f_prime_before: float = float("nan")
    f_prime_after: float = float("nan")
    stealthy: bool = False
    effective: bool = False
    n1_before: int = 0
    n2_before: int = 0
    n1_after: int = 0
    n2_after: int = 0
    steps: int = 0

    @property
    def attempted(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["a"] = [float(x) for x in self.a]
        d["c"] = [float(x) for x in self.c]
        return d

    @classmethod
    def from_dict(cls, d) -> "AttackResult":
        d = dict(d)
        d["a"] = np.array(d["a"], dtype=float)
        d["c"] = np.array(d["c"], dtype=float)
        return cls(**d)


def results_to_jsonl(results) -> str:
    return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in results)


def results_from_jsonl(text: str) -> list[AttackResult]:
    return [AttackResult.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]


def stealthy_injection(bundle: MatrixBundle, c) -> np.ndarray:
    """DC-stealthy attack ``a = H_dc c`` for a deviation ``c`` of the non-reference angles."""
    c = np.asarray(c, dtype=float)
    if c.shape[-1] != bundle.n_bus - 1:
        raise ValueError(f"c must have {bundle.n_bus - 1} entries")
    return c @ bundle.H_dc.T


def worst_outage_flows(table, flows):
    """Per line, the largest post-outage |flow| over all non-islanding single outages.

    Returns ``(worst_abs, worst_outage)`` with outage positions; batched over rows.
    """
    post = np.abs(n1_flows(table, flows))  # [..., j, i]
    L = post.shape[-1]
    post = np.where(np.eye(L, dtype=bool), -np.inf, post)
    post = np.where(np.isnan(post), -np.inf, post)
    j_star = np.argmax(post, axis=-2)
    return np.take_along_axis(post, j_star[..., None, :], axis=-2)[..., 0, :], j_star


def select_target_line(flows_under_contingency, limits, f_m) -> int:
    """Position of the feasible line with the least headroom ``limit - |f'|``.

    A line is feasible when ``|f'| < limit - f_m``; ties go to the lowest position.
    """
    f = np.abs(np.asarray(flows_under_contingency, dtype=float))
    limits = np.asarray(limits, dtype=float)
    margin = limits - f
    feasible = f < limits - f_m
    if not feasible.any():
        raise NoTargetError("no line satisfies the safety margin")
    return int(np.argmin(np.where(feasible, margin, np.inf)))


class WlsEstimator:
    """Adapter exposing :func:`wls_estimate` through the estimator interface."""

    def __init__(self, case: GridCase, cfg: WlsConfig = WlsConfig()):
        self.case = case
        self.cfg = cfg
        m = 2 * case.n_bus
        self.residual_weight = cfg.weights(m) / cfg.scale(m)

    def estimate(self, z):
        z = np.atleast_2d(z)
        out = [wls_estimate(self.case, row, self.cfg).x_hat for row in z]
        return np.array([s.theta for s in out]), np.array([s.v for s in out])


class _Problem:
    """Objective evaluation for a batch of epochs with fixed targets."""

    def __init__(self, estimator, cfg: AttackConfig, bundle, table, target, outage):
        self.est = estimator
        self.case = estimator.case
        self.cfg = cfg
        self.bundle = bundle
        self.table = table
        self.target = target
        self.outage = outage
        self.flow_map = (bundle.Y @ bundle.M.T)  # L x n
        self.weight = np.asarray(estimator.residual_weight, dtype=float)
        self.support = np.array(cfg.target_meters)

    def _outage(self, theta):
        if self.cfg.contingency == "worst":
            return self.outage
        flows = theta @ self.flow_map.T
        _, j_star = worst_outage_flows(self.table, flows)
        return j_star[np.arange(len(flows)), self.target]

    def flows_prime(self, theta):
        flows = theta @ self.flow_map.T
        rows = np.arange(len(theta))
        j = self._outage(theta)
        lam = self.table.lodf[self.target, j]
        return flows[rows, self.target] + lam * flows[rows, j], j, lam

    def residual(self, z, theta, v):
        r = z - h_measure(self.case, (theta, v))
        return np.sum(self.weight * r ** 2, axis=-1), r

    def evaluate(self, z, need_grad=True):
        """Returns dict with objective pieces and (optionally) the gradient on the support."""
        vjp = None
        if need_grad and hasattr(self.est, "estimate_and_vjp"):
            theta, v, vjp = self.est.estimate_and_vjp(z)
        else:
            theta, v = self.est.estimate(z)
        fp, j, lam = self.flows_prime(theta)
        J, r = self.residual(z, theta, v)
        over = J > self.cfg.tau
        obj = np.abs(fp) - self.cfg.rho * np.maximum(0.0, J - self.cfg.tau)
        out = {"obj": obj, "fp": fp, "J": J, "theta": theta, "v": v}
        if not need_grad:
            return out
        if vjp is None:
            out["grad"] = self._fd_grad(z)
            return out
        sgn = np.sign(fp)
        g_theta = sgn[:, None] * (self.flow_map[self.target] + lam[:, None] * self.flow_map[j])
        pen = self.cfg.rho * over  # d obj / d J
        gr = -pen[:, None] * (-2.0 * self.weight * r)  # gradient flowing into h(x_hat)
        gt_h, gv_h = h_vjp(self.case, theta, v, gr)
        g_z = vjp(g_theta + gt_h, gv_h)
        g_z = g_z - pen[:, None] * (2.0 * self.weight * r)
        out["grad"] = g_z[:, self.support]
        return out

    def _fd_grad(self, z):
        h = self.cfg.fd_step
        g = np.zeros((len(z), len(self.support)))
        for k, meter in enumerate(self.support):
            zp = z.copy()
            zm = z.copy()
            zp[:, meter] += h
            zm[:, meter] -= h
            g[:, k] = (self.evaluate(zp, False)["obj"] - self.evaluate(zm, False)["obj"]) / (2 * h)
        return g


def attack_batch(estimator, z, epochs, cfg: AttackConfig, *, bundle=None, table=None,
                 limits=None, history=None) -> list[AttackResult]:
    """Synthesize attacks for a batch of epochs against one estimator.

    ``z`` is ``(B, m)`` clean measurements; ``estimator`` must be bound to the
    same rows (see :meth:`gridsec.chimera.ChimeraModel.bind`). If ``history`` is
    a list, the objective of every attacked row after each step is appended to it
    as ``(epochs, values)``.
    """
    case = estimator.case
    z = np.atleast_2d(np.asarray(z, dtype=float))
    B, m = z.shape
    epochs = [int(e) for e in np.atleast_1d(epochs)]
    if len(epochs) != B:
        raise ValueError("one epoch index per measurement row is required")
    if max(cfg.target_meters) >= m:
        raise ValueError("target meter index out of range")
    bundle = bundle or build_matrices(case)
    table = table or compute_lodf(bundle)
    limits = case.f_limit if limits is None else np.asarray(limits, dtype=float)
    theta0, v0 = estimator.estimate(z)
    weight = np.asarray(estimator.residual_weight, dtype=float)
    J0 = np.sum(weight * (z - h_measure(case, (theta0, v0))) ** 2, axis=-1)
    flows0 = theta0 @ (bundle.Y @ bundle.M.T).T
    worst, j_star = worst_outage_flows(table, flows0)
    n1_0, n2_0 = count_contingencies(bundle, flows0, limits, table=table)

    results: list[AttackResult | None] = [None] * B
    targets = np.zeros(B, dtype=int)
    active = np.zeros(B, dtype=bool)
    zero_a = np.zeros(m)
    zero_c = np.zeros(2 * case.n_bus - 1)
    for b in range(B):
        base = dict(epoch=epochs[b], a=zero_a.copy(), c=zero_c.copy(), J_clean=float(J0[b]),
                    J_attacked=float(J0[b]), n1_before=int(n1_0[b]), n2_before=int(n2_0[b]),
                    n1_after=int(n1_0[b]), n2_after=int(n2_0[b]))
        if not J0[b] < cfg.tau:
            results[b] = AttackResult(status="clean_bdd_fail", **base)
            continue
        try:
            targets[b] = select_target_line(worst[b], limits, cfg.f_m)
        except NoTargetError:
            logger.info("epoch %d: no feasible target line, attack skipped", epochs[b])
            results[b] = AttackResult(status="no_target", **base)
            continue
        active[b] = True
    rows = np.flatnonzero(active)
    if rows.size:
        _optimize(estimator, z, rows, targets, j_star, cfg, bundle, table, limits, epochs,
                  theta0, v0, J0, n1_0, n2_0, results, history)
    return results


class _RowEstimator:
    """Restrict a bound estimator to a subset of its rows."""

    def __init__(self, est, rows):
        self.est = est
        self.rows = rows
        self.case = est.case
        self.residual_weight = est.residual_weight
        self._all = None
        if hasattr(est, "estimate_and_vjp"):
            self.estimate_and_vjp = self._estimate_and_vjp

    def _full(self, z_sub):
        if self._all is None:
            raise RuntimeError("row estimator used before set_base")
        z = self._all.copy()
        z[self.rows] = z_sub
        return z

    def set_base(self, z_all):
        self._all = z_all

    def estimate(self, z_sub):
        theta, v = self.est.estimate(self._full(z_sub))
        return theta[self.rows], v[self.rows]

    def _estimate_and_vjp(self, z_sub):
        theta, v, vjp = self.est.estimate_and_vjp(self._full(z_sub))

        def sub_vjp(g_theta, g_v):
            gt = np.zeros_like(theta)
            gv = np.zeros_like(v)
            gt[self.rows] = g_theta
            gv[self.rows] = g_v
            return vjp(gt, gv)[self.rows]

        return theta[self.rows], v[self.rows], sub_vjp


def _optimize(estimator, z, rows, targets, j_star, cfg, bundle, table, limits, epochs,
              theta0, v0, J0, n1_0, n2_0, results, history):
    case = estimator.case
    est = _RowEstimator(estimator, rows)
    est.set_base(z)
    tgt = targets[rows]
    outage = j_star[rows, tgt]
    prob = _Problem(est, cfg, bundle, table, tgt, outage)
    support = prob.support
    zc = z[rows]
    R, k = len(rows), len(support)

    a = np.zeros((R, k))
    if cfg.jitter > 0:
        for r, b in enumerate(rows):
            rng = np.random.default_rng([cfg.seed, epochs[b]])
            a[r] = rng.uniform(-cfg.jitter, cfg.jitter, k)
    a = np.clip(a, -cfg.magnitude_cap, cfg.magnitude_cap)

    def za(a_):
        out = zc.copy()
        out[:, support] += a_
        return out

    cur = prob.evaluate(za(a))
    fp_before = prob.flows_prime(theta0[rows])[0]
    lim = limits[tgt]
    best_a = np.zeros((R, k))
    best_f = np.abs(fp_before)
    stealth0 = cur["J"] < cfg.tau
    best_a[stealth0] = a[stealth0]
    best_f = np.where(stealth0, np.abs(cur["fp"]), best_f)
    m1 = np.zeros((R, k))
    m2 = np.zeros((R, k))
    t = np.zeros(R)
    lr = np.full(R, cfg.learning_rate)
    done = (best_f > lim) | (cfg.magnitude_cap == 0)
    steps = np.zeros(R, dtype=int)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for _ in range(cfg.max_steps):
        live = ~done
        if not live.any():
            break
        g = cur["grad"]
        m1n = b1 * m1 + (1 - b1) * g
        m2n = b2 * m2 + (1 - b2) * g * g
        tn = t + 1
        mhat = m1n / (1 - b1 ** tn)[:, None]
        vhat = m2n / (1 - b2 ** tn)[:, None]
        prop = np.clip(a + lr[:, None] * mhat / (np.sqrt(vhat) + eps), -cfg.magnitude_cap, cfg.magnitude_cap)
        prop[done] = a[done]
        new = prob.evaluate(za(prop))
        accept = live & (new["obj"] >= cur["obj"])
        reject = live & ~accept
        lr[reject] *= 0.5
        a[accept] = prop[accept]
        m1[accept], m2[accept], t[accept] = m1n[accept], m2n[accept], tn[accept]
        for key in cur:
            cur[key][accept] = new[key][accept]
        steps[live] += 1
        if history is not None:
            history.append(([epochs[b] for b in rows], cur["obj"].copy()))
        better = accept & (new["J"] < cfg.tau) & (np.abs(new["fp"]) > best_f)
        best_a[better] = prop[better]
        best_f[better] = np.abs(new["fp"][better])
        done |= (best_f > lim) | (lr < cfg.min_lr)

    final = prob.evaluate(za(best_a), need_grad=False)
    flows_a = final["theta"] @ (bundle.Y @ bundle.M.T).T
    n1_a, n2_a = count_contingencies(bundle, flows_a, limits, table=table)
    ref = case.ref
    for r, b in enumerate(rows):
        a_full = np.zeros(z.shape[1])
        a_full[support] = best_a[r]
        c = np.concatenate([np.delete(final["theta"][r] - theta0[b], ref), final["v"][r] - v0[b]])
        n1b, n2b = int(n1_0[b]), int(n2_0[b])
        n1a, n2a = int(n1_a[r]), int(n2_a[r])
        results[b] = AttackResult(
            epoch=epochs[b], status="ok", a=a_full, c=c, J_clean=float(J0[b]),
            J_attacked=float(final["J"][r]), target_line=int(case.branch_ids[tgt[r]]),
            outage_line=int(case.branch_ids[outage[r]]), f_limit=float(lim[r]),
            f_prime_before=float(fp_before[r]), f_prime_after=float(final["fp"][r]),
            stealthy=bool(final["J"][r] < cfg.tau), effective=(n1a != n1b) or (n2a != n2b),
            n1_before=n1b, n2_before=n2b, n1_after=n1a, n2_after=n2a, steps=int(steps[r]),
        )


def optimize_attack(case: GridCase, z, estimator, cfg: AttackConfig = AttackConfig(), epoch: int = 0):
    """Single-epoch attack; raises :class:`NoTargetError` if no line is feasible."""
    if estimator.case is not case and estimator.case.to_dict() != case.to_dict():
        raise ValueError("estimator was built for a different case")
    res = attack_batch(estimator, np.asarray(z, dtype=float)[None, :], [epoch], cfg)[0]
    if res.status == "no_target":
        raise NoTargetError(f"epoch {epoch}: no line satisfies the safety margin")
    return res


def run_campaign(model, z_all, epochs, cfg: AttackConfig = AttackConfig(), batch: int = 256):
    """Attack every epoch in ``epochs`` against a trained model (see ``chimera``)."""
    epochs = np.asarray(epochs)
    bundle = model.bundle
    table = compute_lodf(bundle)
    results = []
    for s in range(0, len(epochs), batch):
        idx = epochs[s:s + batch]
        bound = model.bind(z_all, idx)
        results.extend(attack_batch(bound, np.asarray(z_all)[idx], idx, cfg, bundle=bundle, table=table))
    return results
