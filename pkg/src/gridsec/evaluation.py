"""Accuracy metrics, contingency errors and attack-campaign scoring."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from .errors import UndefinedMetricError

logger = logging.getLogger(__name__)

ZERO_GUARD = 1e-9


def mape(x, y, *, guard: float = ZERO_GUARD, return_excluded: bool = False):
    """Mean absolute percentage error of ``y`` against reference ``x``.

    Entries with ``|x| < guard`` are left out (the reference angle, for one);
    all axes are averaged jointly. The result is a fraction, not a percentage.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("reference values must be finite")
    keep = np.abs(x) >= guard
    excluded = int(keep.size - keep.sum())
    if not keep.any():
        raise UndefinedMetricError("every entry is below the zero guard")
    if excluded:
        logger.debug("mape: %d near-zero reference entries excluded", excluded)
    value = float(np.mean(np.abs((y[keep] - x[keep]) / x[keep])))
    return (value, excluded) if return_excluded else value


def state_mapes(theta_ref, v_ref, theta, v, *, ref: Optional[int] = None) -> dict:
    """MAPE of angles, magnitudes and both together (joint over epochs and states).

    With ``ref`` set, the reference bus column is dropped from both angle and
    magnitude arrays so only estimated states are scored.
    """
    if ref is not None:
        theta_ref, v_ref, theta, v = (np.delete(np.asarray(a, dtype=float), ref, axis=-1)
                                      for a in (theta_ref, v_ref, theta, v))
    th_val, th_ex = mape(theta_ref, theta, return_excluded=True)
    v_val = mape(v_ref, v)
    tot = mape(np.concatenate([theta_ref, v_ref], axis=-1), np.concatenate([theta, v], axis=-1))
    return {"theta": th_val, "v": v_val, "total": tot, "excluded": th_ex}


def _counts(report):
    """Accept ``(n1, n2)`` arrays, or a sequence of contingency reports."""
    if isinstance(report, tuple) and len(report) == 2:
        n1, n2 = report
        return None, np.asarray(n1, dtype=int), np.asarray(n2, dtype=int)
    epochs = np.array([r.epoch for r in report])
    return epochs, np.array([r.n1_count for r in report]), np.array([r.n2_count for r in report])


def contingency_errors(report_est, report_truth):
    """Per-epoch ``eps1 = |N1_hat - N1|`` and ``eps2 = |N2_hat - N2|``."""
    e_est, n1h, n2h = _counts(report_est)
    e_tru, n1, n2 = _counts(report_truth)
    if n1h.shape != n1.shape or n2h.shape != n2.shape:
        raise ValueError("estimated and true reports cover different epoch ranges")
    if e_est is not None and e_tru is not None and not np.array_equal(e_est, e_tru):
        raise ValueError("estimated and true reports cover different epoch ranges")
    return np.abs(n1h - n1), np.abs(n2h - n2)


@dataclass
class MetricRow:
    """One model's row of the results table; attack columns stay NaN without a campaign.

    Wall-clock figures are deliberately absent so tables are reproducible byte for byte.
    """

    model: str
    epochs: int = 0
    mape_v: float = float("nan")
    mape_theta: float = float("nan")
    mape_total: float = float("nan")
    eps1: float = float("nan")
    eps2: float = float("nan")
    frac_eps1_zero: float = float("nan")
    frac_eps2_zero: float = float("nan")
    attacked: int = 0
    stealthy_fraction: float = float("nan")
    mean_abs_a: float = float("nan")
    mape_v_a: float = float("nan")
    mape_theta_a: float = float("nan")
    mape_total_a: float = float("nan")
    eps1_a: float = float("nan")
    eps2_a: float = float("nan")
    frac_eps2a_zero: float = float("nan")
    frac_eps2a_lt5: float = float("nan")
    frac_eps1a_nonzero: float = float("nan")
    success_fraction: float = float("nan")

    def merge(self, other: "MetricRow") -> "MetricRow":
        """Fill this row's NaN / zero fields from ``other``."""
        for f in fields(self):
            mine = getattr(self, f.name)
            if isinstance(mine, float) and np.isnan(mine) or (f.name == "attacked" and mine == 0):
                setattr(self, f.name, getattr(other, f.name))
        return self


def attack_free_metrics(model: str, truth, estimates, n_true, n_est, *,
                        ref: Optional[int] = None) -> MetricRow:
    """``truth``/``estimates`` are ``(theta, v)`` arrays; ``n_*`` are ``(n1, n2)`` arrays."""
    m = state_mapes(truth[0], truth[1], estimates[0], estimates[1], ref=ref)
    e1, e2 = contingency_errors(tuple(n_est), tuple(n_true))
    return MetricRow(
        model=model, epochs=len(e1), mape_v=m["v"], mape_theta=m["theta"], mape_total=m["total"],
        eps1=float(e1.mean()), eps2=float(e2.mean()),
        frac_eps1_zero=float(np.mean(e1 == 0)), frac_eps2_zero=float(np.mean(e2 == 0)),
    )


def attack_errors(results):
    """Per attempted attack, ``(eps1_a, eps2_a)`` from the before/after counts."""
    att = [r for r in results if r.attempted]
    e1 = np.array([abs(r.n1_after - r.n1_before) for r in att], dtype=int)
    e2 = np.array([abs(r.n2_after - r.n2_before) for r in att], dtype=int)
    return e1, e2


def score_attack_campaign(results, estimates_clean, estimates_attacked, model: str = "",
                          ref: Optional[int] = None) -> MetricRow:
    """Score attempted attacks; estimates are ``(theta, v)`` aligned with ``results``."""
    results = list(results)
    th0, v0 = (np.asarray(a) for a in estimates_clean)
    th1, v1 = (np.asarray(a) for a in estimates_attacked)
    if not (len(results) == len(th0) == len(th1)):
        raise ValueError("campaign and estimate sets are not aligned (missing epochs)")
    mask = np.array([r.attempted for r in results], dtype=bool)
    row = MetricRow(model=model, epochs=len(results), attacked=int(mask.sum()))
    if not mask.any():
        return row
    att = [r for r in results if r.attempted]
    m = state_mapes(th0[mask], v0[mask], th1[mask], v1[mask], ref=ref)
    e1, e2 = attack_errors(att)
    support = np.array([np.abs(r.a[r.a != 0]).mean() if np.any(r.a) else 0.0 for r in att])
    row.stealthy_fraction = float(np.mean([r.stealthy for r in att]))
    row.mean_abs_a = float(support.mean())
    row.mape_v_a, row.mape_theta_a, row.mape_total_a = m["v"], m["theta"], m["total"]
    row.eps1_a, row.eps2_a = float(e1.mean()), float(e2.mean())
    row.frac_eps2a_zero = float(np.mean(e2 == 0))
    row.frac_eps2a_lt5 = float(np.mean(e2 < 5))
    row.frac_eps1a_nonzero = float(np.mean(e1 != 0))
    row.success_fraction = float(np.mean((e1 != 0) | (e2 != 0)))
    return row


def attacked_estimates(results, estimates_clean, ref: int):
    """Rebuild attacked estimates from the clean ones and each result's ``c``."""
    th0, v0 = (np.array(a, dtype=float) for a in estimates_clean)
    n = th0.shape[-1]
    th1, v1 = th0.copy(), v0.copy()
    for k, r in enumerate(results):
        th1[k] += np.insert(r.c[: n - 1], ref, 0.0)
        v1[k] += r.c[n - 1:]
    return th1, v1


def histogram(values, max_bin: Optional[int] = None):
    """Integer histogram ``(bins, counts)`` from 0 to ``max_bin`` inclusive."""
    values = np.asarray(values, dtype=int)
    top = int(values.max()) if values.size else 0
    top = max(top, max_bin or 0)
    counts = np.bincount(values, minlength=top + 1) if values.size else np.zeros(top + 1, dtype=int)
    return np.arange(top + 1), counts


def histograms_to_csv(data: dict) -> str:
    """``data`` maps model -> {metric name: integer values}; one row per (model, metric, bin)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "metric", "bin", "count"])
    for model in data:
        for metric, values in data[model].items():
            bins, counts = histogram(values)
            for b, c in zip(bins, counts):
                w.writerow([model, metric, int(b), int(c)])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return "nan" if np.isnan(v) else repr(v)
    return str(v)


def metric_table_csv(rows) -> str:
    names = [f.name for f in fields(MetricRow)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for r in rows:
        w.writerow([_fmt(getattr(r, k)) for k in names])
    return buf.getvalue()


def metric_table_json(rows) -> str:
    def clean(d):
        return {k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in d.items()}

    return json.dumps([clean(asdict(r)) for r in rows], indent=1, sort_keys=True) + "\n"
