import json

import numpy as np
import pytest

from gridsec.contingency import (
    compute_lodf,
    count_contingencies,
    dc_resolve_flows,
    n1_flows,
    n2_flows,
    pair_factors,
    post_outage_flow,
    reports_to_csv,
    reports_to_json,
    screen_by_resolve,
    screen_contingencies,
)
from gridsec.powerflow import dc_line_flows, solve_ac_power_flow


def _violation_sets(report):
    out = {}
    for v in report.violations:
        out.setdefault(v.outage, set())
        if v.reason == "islanding":
            out[v.outage] = "islanding"
        else:
            out[v.outage].add(v.line)
    return {k: (v if v == "islanding" else tuple(sorted(v))) for k, v in out.items()}


def test_toy_lodf_matches_resolve(toy_bundle):
    table = compute_lodf(toy_bundle)
    f = dc_line_flows(toy_bundle, [0, 0.1, 0])
    post = dc_resolve_flows(toy_bundle, toy_bundle.M @ f, (2,))
    # line 1-2 after losing 2-3
    assert abs(post_outage_flow(f[0], f[2], table.lodf[0, 2]) - post[0]) < 1e-9
    np.testing.assert_allclose(n1_flows(table, f)[2], post, atol=1e-9)


def test_lodf_diagonal_and_spur(bundle14, case14):
    table = compute_lodf(bundle14)
    assert np.all(np.diag(table.lodf) == -1)
    # branch 14 (7-8) is the only line into bus 8
    spur = int(np.flatnonzero(case14.branch_ids == 14)[0])
    assert table.islanding[spur]
    assert table.islanding.sum() == 1
    assert np.all(np.isnan(np.delete(table.lodf[:, spur], spur)))


def test_post_outage_flow_trivia():
    assert post_outage_flow(0.7, 0.3, 0.0) == 0.7
    assert post_outage_flow(0.7, 0.0, 0.9) == 0.7
    assert post_outage_flow(0.5, 0.2, -0.5) == pytest.approx(0.4)


def _random_flows(case, bundle, rng):
    scale = rng.uniform(0.5, 1.6, case.n_bus)
    x = solve_ac_power_flow(case, case.p_load * scale, case.q_load * scale)
    return dc_line_flows(bundle, x.theta)


def test_factor_flows_match_resolve(case14, bundle14, rng):
    table = compute_lodf(bundle14)
    pf = pair_factors(bundle14, table)
    assert len(pf.pairs) == 190
    for _ in range(3):
        f = _random_flows(case14, bundle14, rng)
        inj = bundle14.M @ f
        p1 = n1_flows(table, f)
        for j in range(20):
            ref = dc_resolve_flows(bundle14, inj, (j,))
            if table.islanding[j]:
                assert np.isnan(ref).all()
                continue
            np.testing.assert_allclose(p1[j], ref, rtol=1e-8, atol=1e-10)
        p2 = n2_flows(pf, f, bundle14)
        for p, pair in enumerate(pf.pairs):
            ref = dc_resolve_flows(bundle14, inj, tuple(pair))
            if pf.islanding[p]:
                assert np.isnan(ref).all()
                continue
            np.testing.assert_allclose(p2[p], ref, rtol=1e-8, atol=1e-10)


def test_screen_matches_oracle(case14, bundle14, rng):
    for _ in range(3):
        f = _random_flows(case14, bundle14, rng)
        rep = screen_contingencies(bundle14, f, case14.f_limit)
        oracle = screen_by_resolve(bundle14, f, case14.f_limit)
        assert _violation_sets(rep) == oracle
        n1, n2 = count_contingencies(bundle14, f, case14.f_limit)
        assert (n1, n2) == (rep.n1_count, rep.n2_count)
        assert 0 <= rep.n1_count <= 20 and 0 <= rep.n2_count <= 190


def test_infinite_limits_count_only_islanding(case14, bundle14, rng):
    f = _random_flows(case14, bundle14, rng)
    inf = np.full(20, np.inf)
    table = compute_lodf(bundle14)
    pf = pair_factors(bundle14, table)
    rep = screen_contingencies(bundle14, f, inf)
    assert rep.n1_count == table.islanding.sum() == 1
    assert rep.n2_count == pf.islanding.sum()
    assert all(v.reason == "islanding" for v in rep.violations)
    rep0 = screen_contingencies(bundle14, np.zeros(20), case14.f_limit)
    assert all(v.reason == "islanding" for v in rep0.violations)
    rep_ex = screen_contingencies(bundle14, f, inf, count_islanding=False)
    assert rep_ex.n1_count == 0 and rep_ex.n2_count == 0


def test_base_case_counts_match_resolve(case14, bundle14):
    x = solve_ac_power_flow(case14, case14.p_load, case14.q_load)
    f = dc_line_flows(bundle14, x.theta)
    rep = screen_contingencies(bundle14, f, case14.f_limit, order=1)
    oracle = screen_by_resolve(bundle14, f, case14.f_limit, order=1)
    assert rep.n1_count == len(oracle)
    # nonzero and below saturation at the base operating point
    assert 1 < rep.n1_count < 20


def test_scaling_limits_up_never_increases_counts(case14, bundle14, rng):
    f = _random_flows(case14, bundle14, rng)
    prev = count_contingencies(bundle14, f, case14.f_limit)
    for s in (1.1, 1.3, 2.0, 5.0):
        cur = count_contingencies(bundle14, f, case14.f_limit * s)
        assert cur[0] <= prev[0] and cur[1] <= prev[1]
        prev = cur


def test_batched_counts(case14, bundle14, rng):
    F = np.stack([_random_flows(case14, bundle14, rng) for _ in range(4)])
    n1, n2 = count_contingencies(bundle14, F, case14.f_limit)
    for k in range(4):
        assert (n1[k], n2[k]) == count_contingencies(bundle14, F[k], case14.f_limit)


def test_report_serialisation(case14, bundle14):
    f = np.zeros(20)
    reps = [screen_contingencies(bundle14, f, case14.f_limit, epoch=e) for e in range(2)]
    doc = json.loads(reports_to_json(reps))
    assert doc[1]["epoch"] == 1
    lines = reports_to_csv(reps).splitlines()
    assert lines[0] == "epoch,N1,N2" and len(lines) == 3
