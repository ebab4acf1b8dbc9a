"""N-1 / N-2 screening with line outage distribution factors.

Single outages use the classic factor ``lodf[i, j] = A[i, j] / (1 - A[j, j])``
where ``A`` maps a unit from->to transfer across line ``j`` onto every line.
Double outages solve the 2x2 system for the two equivalent transfers. A brute
force DC re-solve with the lines removed is kept alongside as the oracle and
as the fallback for degenerate pairs.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .grid_model import MatrixBundle, is_connected

ISLANDING_TOL = 1e-9


@dataclass(frozen=True)
class LodfTable:
    lodf: np.ndarray
    islanding: np.ndarray  # bool per outaged line
    transfer: np.ndarray  # A, L x L


@dataclass
class Violation:
    outage: tuple[int, ...]
    line: int | None
    flow: float
    limit: float
    reason: str = "overload"


@dataclass
class ContingencyReport:
    epoch: int
    n1_count: int
    n2_count: int
    violations: list[Violation] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "n1": self.n1_count,
            "n2": self.n2_count,
            "violations": [
                {"outage": list(v.outage), "line": v.line, "flow": v.flow,
                 "limit": v.limit, "reason": v.reason}
                for v in self.violations
            ],
        }


def reports_to_json(reports) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=1)


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "N1", "N2"])
    for r in reports:
        w.writerow([r.epoch, r.n1_count, r.n2_count])
    return buf.getvalue()


def _bus_to_flow(bundle: MatrixBundle) -> np.ndarray:
    """L x n map from balanced bus injections to branch flows (reference column zero)."""
    n = bundle.n_bus
    X = np.zeros((n, n))
    nonref = bundle.nonref
    X[np.ix_(nonref, nonref)] = np.linalg.inv(bundle.B_red)
    return bundle.Y @ bundle.M.T @ X


def compute_lodf(bundle: MatrixBundle) -> LodfTable:
    ptdf = _bus_to_flow(bundle)
    A = ptdf @ bundle.M  # flow on i per unit transfer from_j -> to_j
    denom = 1.0 - np.diag(A)
    islanding = np.abs(denom) < ISLANDING_TOL
    safe = np.where(islanding, 1.0, denom)
    lodf = A / safe[None, :]
    lodf[:, islanding] = np.nan
    np.fill_diagonal(lodf, -1.0)
    return LodfTable(lodf=lodf, islanding=islanding, transfer=A)


def post_outage_flow(f_i, f_j, lambda_ij):
    """Flow on line ``i`` after line ``j`` trips."""
    return lambda_ij * f_j + f_i


def n1_flows(table: LodfTable, flows) -> np.ndarray:
    """Post-outage flows ``out[..., j, i]`` on line ``i`` when line ``j`` is out.

    The outaged line itself gets zero flow; islanding columns are NaN.
    """
    flows = np.asarray(flows, dtype=float)
    lam = table.lodf.T  # [j, i]
    return flows[..., None, :] + lam * flows[..., :, None]


@dataclass(frozen=True)
class PairFactors:
    pairs: np.ndarray  # P x 2
    gain: np.ndarray  # P x L x 2, flow change per pre-outage flow on the pair
    islanding: np.ndarray  # P bool
    degenerate: np.ndarray  # P bool, connected pairs whose 2x2 system is singular


_PAIR_CACHE: dict[int, tuple[MatrixBundle, PairFactors]] = {}


def pair_factors(bundle: MatrixBundle, table: LodfTable | None = None) -> PairFactors:
    cached = _PAIR_CACHE.get(id(bundle))
    if cached is not None and cached[0] is bundle:
        return cached[1]
    table = table or compute_lodf(bundle)
    A = table.transfer
    L = bundle.n_branch
    pairs = np.array(list(combinations(range(L), 2)))
    gain = np.zeros((len(pairs), L, 2))
    islanding = np.zeros(len(pairs), dtype=bool)
    degenerate = np.zeros(len(pairs), dtype=bool)
    from_idx, to_idx = _endpoints(bundle)
    for p, (j, k) in enumerate(pairs):
        keep = np.ones(L, dtype=bool)
        keep[[j, k]] = False
        if table.islanding[j] or table.islanding[k] or not is_connected(
            bundle.n_bus, from_idx[keep], to_idx[keep]
        ):
            islanding[p] = True
            continue
        S = np.eye(2) - A[np.ix_([j, k], [j, k])]
        if abs(np.linalg.det(S)) < ISLANDING_TOL:
            degenerate[p] = True
            continue
        gain[p] = A[:, [j, k]] @ np.linalg.inv(S)
    result = PairFactors(pairs=pairs, gain=gain, islanding=islanding, degenerate=degenerate)
    _PAIR_CACHE[id(bundle)] = (bundle, result)
    return result


def _endpoints(bundle):
    return np.argmax(bundle.M > 0, axis=0), np.argmax(bundle.M < 0, axis=0)


def n2_flows(pf: PairFactors, flows, bundle: MatrixBundle | None = None) -> np.ndarray:
    """Post-outage flows ``out[..., p, i]`` for every line pair ``p``.

    Degenerate pairs need ``bundle`` so they can be re-solved directly.
    """
    flows = np.asarray(flows, dtype=float)
    fp = flows[..., pf.pairs]  # (..., P, 2)
    delta = np.einsum("pls,...ps->...pl", pf.gain, fp)
    out = flows[..., None, :] + delta
    idx = np.arange(len(pf.pairs))
    out[..., idx, pf.pairs[:, 0]] = 0.0
    out[..., idx, pf.pairs[:, 1]] = 0.0
    out[..., pf.islanding, :] = np.nan
    if pf.degenerate.any():
        if bundle is None:
            raise ValueError("degenerate outage pairs require the matrix bundle")
        flat = flows.reshape(-1, flows.shape[-1])
        res = out.reshape(-1, *out.shape[-2:])
        for p in np.flatnonzero(pf.degenerate):
            for e, f in enumerate(flat):
                res[e, p] = dc_resolve_flows(bundle, bundle.M @ f, tuple(pf.pairs[p]))
    return out


def dc_resolve_flows(bundle: MatrixBundle, injections, removed) -> np.ndarray:
    """Oracle: rebuild the network without ``removed`` lines and re-solve DC flows.

    Returns NaN flows when the removal islands the network.
    """
    L = bundle.n_branch
    keep = np.ones(L, dtype=bool)
    keep[list(removed)] = False
    M = bundle.M[:, keep]
    b = np.diag(bundle.Y)[keep]
    from_idx, to_idx = _endpoints(bundle)
    from_idx, to_idx = from_idx[keep], to_idx[keep]
    out = np.full(L, np.nan)
    if not is_connected(bundle.n_bus, from_idx, to_idx):
        return out
    B = M @ np.diag(b) @ M.T
    nonref = bundle.nonref
    theta = np.zeros(bundle.n_bus)
    theta[nonref] = np.linalg.solve(B[np.ix_(nonref, nonref)], np.asarray(injections)[nonref])
    out[:] = 0.0
    out[keep] = b * (M.T @ theta)
    return out


def _overloaded(post, limits):
    with np.errstate(invalid="ignore"):
        return np.abs(post) > limits


def count_contingencies(bundle, flows, limits, *, table=None, count_islanding=True):
    """Vectorised N-1 and N-2 counts for flows of shape ``(..., L)``."""
    table = table or compute_lodf(bundle)
    pf = pair_factors(bundle, table)
    limits = np.asarray(limits, dtype=float)
    post1 = n1_flows(table, flows)
    bad1 = _overloaded(post1, limits).any(axis=-1)
    bad1 = np.where(table.islanding, count_islanding, bad1)
    post2 = n2_flows(pf, flows, bundle)
    bad2 = _overloaded(post2, limits).any(axis=-1)
    bad2 = np.where(pf.islanding, count_islanding, bad2)
    return bad1.sum(axis=-1), bad2.sum(axis=-1)


def screen_contingencies(bundle, flows, limits, order=(1, 2), *, epoch=0,
                         count_islanding=True, table=None) -> ContingencyReport:
    """Screen all single and/or double line outages for one operating point."""
    flows = np.asarray(flows, dtype=float)
    limits = np.asarray(limits, dtype=float)
    if flows.shape != limits.shape or flows.ndim != 1:
        raise ValueError("flows and limits must both have length L")
    order = (order,) if isinstance(order, int) else tuple(order)
    table = table or compute_lodf(bundle)
    violations: list[Violation] = []
    n1 = n2 = 0
    if 1 in order:
        post = n1_flows(table, flows)
        for j in range(bundle.n_branch):
            if table.islanding[j]:
                if count_islanding:
                    n1 += 1
                    violations.append(Violation((j,), None, float("nan"), float("nan"), "islanding"))
                continue
            over = np.flatnonzero(np.abs(post[j]) > limits)
            if over.size:
                n1 += 1
                violations.extend(Violation((j,), int(i), float(post[j, i]), float(limits[i])) for i in over)
    if 2 in order:
        pf = pair_factors(bundle, table)
        post = n2_flows(pf, flows, bundle)
        for p, pair in enumerate(pf.pairs):
            outage = (int(pair[0]), int(pair[1]))
            if pf.islanding[p]:
                if count_islanding:
                    n2 += 1
                    violations.append(Violation(outage, None, float("nan"), float("nan"), "islanding"))
                continue
            over = np.flatnonzero(np.abs(post[p]) > limits)
            if over.size:
                n2 += 1
                violations.extend(Violation(outage, int(i), float(post[p, i]), float(limits[i])) for i in over)
    return ContingencyReport(epoch=epoch, n1_count=n1, n2_count=n2, violations=violations)


def screen_by_resolve(bundle, flows, limits, order=(1, 2), *, count_islanding=True):
    """Brute-force counterpart of :func:`screen_contingencies` (slow, for checking)."""
    flows = np.asarray(flows, dtype=float)
    limits = np.asarray(limits, dtype=float)
    inj = bundle.M @ flows
    L = bundle.n_branch
    order = (order,) if isinstance(order, int) else tuple(order)
    result = {}
    for k in order:
        for outage in combinations(range(L), k):
            post = dc_resolve_flows(bundle, inj, outage)
            if np.isnan(post).all():
                result[outage] = "islanding" if count_islanding else None
                continue
            over = tuple(int(i) for i in np.flatnonzero(np.abs(post) > limits))
            result[outage] = over if over else None
    return {k: v for k, v in result.items() if v is not None}
