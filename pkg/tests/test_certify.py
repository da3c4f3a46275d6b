import json
import math

import numpy as np
import pytest
from toys import line_problem
from test_moments import dirac_moments, trajectory_vector

from windowrisk import Polynomial, Risk
from windowrisk.certify import (
    CertificateReport, CertifyOptions, DualCertificate, MassCheck, certificate_inequalities,
    check_mass_invariants, dual_certificate_check, extract_optimizers, monotonicity, rank_ratio,
    reconstruct_certificate, slack_polynomials, solve_bound, support_samples, validate, y_minus_mass_limit,
)
from windowrisk.moments import build_mean_relaxation
from windowrisk.montecarlo import MonteCarloOptions


@pytest.fixture(scope="module")
def line_mean():
    return solve_bound(line_problem(drift="-x", sigma="0.2", horizon=3.0, window=1.0), 2)


@pytest.fixture(scope="module")
def line_es():
    return solve_bound(line_problem(drift="-x", sigma="0.2", horizon=3.0, window=1.0, risk=Risk.es(0.3)), 2)


def test_y_minus_limit_example():
    assert y_minus_mass_limit(5.0, 1.5) == pytest.approx(5.0625)


def test_y_minus_limit_dominates_natural_mass():
    for T in np.linspace(0.5, 10, 20):
        for h in np.linspace(0.05, T, 7):
            assert y_minus_mass_limit(T, h) >= T - h - 1e-12


@pytest.mark.parametrize("fixture", ["line_mean", "line_es"])
def test_mass_invariants_hold_on_solved_instances(fixture, request):
    r = request.getfixturevalue(fixture)
    checks = check_mass_invariants(r.relaxation, r.solution.y)
    assert len(checks) == (6 if fixture == "line_es" else 4)
    assert all(c.passed for c in checks), checks


def test_corrupted_mass_fails_first_check(line_mean):
    y = line_mean.solution.y.copy()
    y[line_mean.relaxation.slice("y0").start] = 0.9
    checks = check_mass_invariants(line_mean.relaxation, y)
    assert checks[0].name == "y0 mass" and not checks[0].passed
    assert all(c.passed for c in checks[1:])


def test_mass_check_interval():
    assert MassCheck("m", 1.0, 1.0, 1.0).passed
    assert not MassCheck("m", 1.1, 0.0, 1.0).passed


def test_dirac_recovery_is_exact():
    pr = line_problem(drift="0", center=0.3, radius=0.05, horizon=2.0, window=0.5)
    rel = build_mean_relaxation(pr, 3)
    sc = rel.scaling
    s_user, x_user = 1.6, 0.32
    s, x = s_user / sc.time_scale, float(sc.state_to_internal([x_user])[0])
    y = trajectory_vector(rel, lambda t: np.array([x]), s, [x])
    rec = extract_optimizers(rel, y)
    assert rec.rank_ratios["y0"] < 1e-9 and rec.rank_ratios["ytau"] < 1e-9
    assert rec.t_star == pytest.approx(s_user, abs=1e-9)
    assert rec.x0_star == pytest.approx([x_user], abs=1e-9)
    assert rec.xp_star == pytest.approx([x_user], abs=1e-9)


def test_recovery_declines_on_mixtures():
    pr = line_problem(drift="0", center=0.3, radius=0.05, horizon=2.0, window=0.5)
    rel = build_mean_relaxation(pr, 2)
    y0 = 0.5 * dirac_moments(rel.bases["y0"], [1.0, 0.2]) + 0.5 * dirac_moments(rel.bases["y0"], [1.0, -0.2])
    y = np.zeros(rel.nvars)
    y[rel.slice("y0")] = y0
    y[rel.slice("ytau")] = y0
    rec = extract_optimizers(rel, y)
    assert rec.x0_star is None and rec.t_star is None and rec.xp_star is None
    assert rec.rank_ratios["y0"] > 1e-3


def test_rank_ratio():
    assert rank_ratio(np.diag([1.0, 0.0])) == 0.0
    assert rank_ratio(np.diag([2.0, 1.0])) == pytest.approx(0.5)
    assert rank_ratio(np.array([[1.0]])) == 0.0


def test_constant_certificate_has_zero_violation():
    # xdot = 0, p = x on [-1, 1]: v = 0, gamma = 0, xi = max p / h is a valid certificate
    pr = line_problem(drift="0", box=(-1.0, 1.0), center=0.3, radius=0.05, horizon=2.0, window=0.5)
    rel = build_mean_relaxation(pr, 2, scale=False)
    stx = ("s", "t", "x")
    h = rel.internal.window
    cert = DualCertificate(Polynomial.constant(stx, 0.0), 0.0, 1.0 / h)
    ineq = certificate_inequalities(rel, cert)
    pts = support_samples(rel, 2000, seed=1)
    worst = {tag: float(np.min(p.evaluate(pts[tag]))) for tag, p in ineq.items()}
    assert worst["y0"] == 0.0 and worst["ytau"] == 0.0 and worst["y-"] == 0.0
    assert 0.0 <= worst["y+"] < 1e-2
    # the certified value gamma + h xi equals max_X p
    assert cert.gamma + h * cert.xi == pytest.approx(1.0)


@pytest.mark.parametrize("fixture", ["line_mean", "line_es"])
def test_dual_certificate_passes_and_negation_fails(fixture, request):
    r = request.getfixturevalue(fixture)
    ok = dual_certificate_check(r.relaxation, r.solution)
    assert ok.available and ok.passed, ok.worst
    bad = dual_certificate_check(r.relaxation, r.solution, negate_v=True)
    assert not bad.passed
    assert min(bad.worst[t] for t in ("y0", "ytau", "y-", "y+")) < -1e-3


@pytest.mark.parametrize("fixture", ["line_mean", "line_es"])
def test_explicit_inequalities_match_generic_slack(fixture, request):
    r = request.getfixturevalue(fixture)
    lam = r.solution.eq_duals
    explicit = certificate_inequalities(r.relaxation, reconstruct_certificate(r.relaxation, lam))
    generic = slack_polynomials(r.relaxation, lam)
    assert set(explicit) == set(generic)
    for tag in explicit:
        diff = explicit[tag] - generic[tag]
        assert max([abs(c) for c in diff.terms.values()] + [0.0]) < 1e-9, tag


def test_certificate_value_matches_dual_bound(line_mean):
    cert = reconstruct_certificate(line_mean.relaxation, line_mean.solution.eq_duals)
    h = line_mean.relaxation.internal.window
    internal = cert.gamma + h * cert.xi
    assert line_mean.relaxation.value_to_user(internal) == pytest.approx(line_mean.dual_bound, rel=1e-6)


def test_dual_check_without_multipliers(line_mean):
    import dataclasses

    sol = dataclasses.replace(line_mean.solution, eq_duals=None)
    chk = dual_certificate_check(line_mean.relaxation, sol)
    assert not chk.available and not chk.passed and "multipliers" in chk.message


def test_es_dominates_mean(line_mean, line_es):
    assert line_es.bound >= line_mean.bound - 1e-5


def test_es_near_full_level_equals_mean(line_mean):
    r = solve_bound(line_problem(drift="-x", sigma="0.2", horizon=3.0, window=1.0, risk=Risk.es(1 - 1e-9)), 2)
    assert r.bound == pytest.approx(line_mean.bound, abs=1e-3)


def _report(k, bound, status="Optimal", suspect=False, emp=float("nan")):
    return CertificateReport(k, status, bound, bound, 0.0, 0.0, [MassCheck("y0 mass", 1, 0, 2)], {}, True, None,
                             empirical_sup=emp, suspect=suspect)


def test_monotonicity_skips_suspect_and_failed():
    reps = [_report(1, 1.0), _report(2, 0.8), _report(3, 0.9, suspect=True), _report(4, 0.85),
            _report(5, 2.0, status="NumericalFailure")]
    assert monotonicity(reps, 1e-5) == [(2, 4, 0.8, 0.85)]
    assert monotonicity(reps[:3], 1e-5) == []


def test_verdicts():
    assert _report(1, 1.0, emp=0.5).verdict == "pass"
    assert _report(1, 1.0, emp=1.005).verdict == "pass"
    assert _report(1, 1.0, emp=1.5).verdict == "fail"
    assert _report(1, 1.0).verdict == "inconclusive"
    assert _report(1, math.nan, status="Infeasible").verdict == "failed"


def test_validate_line_problem():
    pr = line_problem(drift="-x", sigma="0.2", horizon=3.0, window=1.0)
    rep = validate(pr, [1, 2], MonteCarloOptions(count=200, dt=0.01, seed=0))
    assert [r.k for r in rep.reports] == [1, 2]
    assert rep.monotone and rep.passed
    assert rep.reports[0].bound >= rep.reports[1].bound - 1e-5
    for r in rep.reports:
        assert r.verdict == "pass" and r.bound >= rep.empirical_sup
        assert all(m.passed for m in r.mass_checks)
    d = json.loads(rep.to_json())
    assert d["passed"] is True and d["reports"][1]["verdict"] == "pass"
    text = rep.to_text()
    assert "overall: pass" in text and "monotone in k: yes" in text


def test_validate_flags_escaping_paths():
    pr = line_problem(drift="1", box=(-1.0, 0.52), center=0.5, radius=0.01, horizon=3.0, window=1.0)
    rep = validate(pr, [1], MonteCarloOptions(count=50, dt=0.01, seed=0))
    assert rep.sampling["early_stop_fraction"] == 1.0
    assert any("misspecified" in w for w in rep.warnings)


def test_validate_parallel_matches_serial():
    pr = line_problem(drift="-x", horizon=2.0, window=0.5)
    mc = MonteCarloOptions(count=20, dt=0.01, seed=0)
    a = validate(pr, [1, 2], mc)
    b = validate(pr, [1, 2], mc, workers=2)
    assert [r.bound for r in a.reports] == pytest.approx([r.bound for r in b.reports], rel=1e-9)


def test_relaxation_error_is_reported_per_order():
    pr = line_problem()
    rep = validate(pr, [0, 1], MonteCarloOptions(count=10, dt=0.01, seed=0), CertifyOptions())
    assert rep.reports[0].status == "RelaxationError" and rep.reports[0].verdict == "failed"
    assert rep.reports[1].solved
