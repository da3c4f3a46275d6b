import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from toys import TX, X, line_problem

from windowrisk import Dynamics, Polynomial, Risk, RiskProblem, SemialgebraicSet, load_problem, parse
from windowrisk.moments import (
    MomentBasis, RelaxationError, block_size_formula, build_es_relaxation, build_mean_relaxation,
    liouville_constraints, localizing_block, riesz, scale_problem, temporal_polynomials,
)
from windowrisk.polynomials import monomials


def dirac_moments(basis, point):
    point = np.asarray(point, float)
    return np.array([np.prod(point ** np.array(a)) for a in basis.exponents])


def atom_moments(basis, points, weights):
    E = np.array(basis.exponents)
    return np.asarray(weights) @ np.prod(np.asarray(points)[:, None, :] ** E[None], axis=2)


def gauss(a, b, n=40):
    z, w = np.polynomial.legendre.leggauss(n)
    return (a + b) / 2 + (b - a) / 2 * z, (b - a) / 2 * w


def trajectory_vector(rel, path, s, x0):
    """Pseudo-moments of the occupation measures of ``x(t) = path(t)`` stopped at ``s``."""
    h = rel.internal.window
    y = np.zeros(rel.nvars)
    y[rel.slice("y0")] = dirac_moments(rel.bases["y0"], [s, *x0])
    y[rel.slice("ytau")] = dirac_moments(rel.bases["ytau"], [s, *path(s)])
    for tag, (a, b) in (("y+", (s - h, s)), ("y-", (0.0, s - h))):
        if b > a:
            t, w = gauss(a, b)
            pts = np.column_stack([np.full_like(t, s), t, np.array([path(ti) for ti in t])])
            y[rel.slice(tag)] = atom_moments(rel.bases[tag], pts, w)
    return y


def test_basis_size_and_indexing():
    b = MomentBasis(("s", "x", "y"), 4)
    assert b.size == math.comb(3 + 4, 4) == block_size_formula(3, 4)
    assert all(b.exponents[b.index_of[a]] == a for a in b.exponents)
    assert len(set(b.index_of.values())) == b.size


def test_riesz_examples():
    b = MomentBasis(X, 4)
    assert riesz(b, Polynomial.constant(X, 1.0)) == {0: 1.0}
    assert riesz(b, parse("3*x^2 - 2", X)) == {2: 3.0, 0: -2.0}
    with pytest.raises(RelaxationError):
        riesz(b, parse("x^5", X))


def test_riesz_on_dirac_evaluates_polynomial():
    rng = np.random.default_rng(3)
    b = MomentBasis(X, 4)
    y = 0.5 ** np.arange(5)
    for _ in range(10):
        q = Polynomial(X, {(j,): rng.normal() for j in range(5)})
        val = sum(c * y[i] for i, c in riesz(b, q).items())
        assert np.isclose(val, q.evaluate([0.5]), atol=1e-14)


def test_localizing_examples():
    b = MomentBasis(X, 2)
    y = 0.5 ** np.arange(3)
    g = localizing_block(b, parse("1 - x^2", X), 1)
    assert g.size == 1 and g.entry(0, 0) == {0: 1.0, 2: -1.0}
    assert np.isclose(g.evaluate(y)[0, 0], 0.75)
    M = localizing_block(b, Polynomial.constant(X, 1.0), 1).evaluate(y)
    assert np.allclose(M, [[1, 0.5], [0.5, 0.25]])
    ev = np.linalg.eigvalsh(M)
    assert ev[0] > -1e-14 and ev[0] < 1e-12


def test_uniform_moments_give_positive_definite_matrices():
    b = MomentBasis(X, 4)
    # uniform probability measure on [-1, 1]
    y = np.array([1 / (j + 1) if j % 2 == 0 else 0.0 for j in range(5)])
    assert np.linalg.eigvalsh(localizing_block(b, Polynomial.constant(X, 1.0), 2).evaluate(y))[0] > 1e-3
    assert np.linalg.eigvalsh(localizing_block(b, parse("1 - x^2", X), 2).evaluate(y))[0] > 1e-3


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=6, max_size=6), st.integers(1, 2))
def test_localizing_entries_are_shifted_guard(coefs, k):
    vars_ = ("a", "b")
    g = Polynomial(vars_, dict(zip(monomials(2, 2), map(float, coefs))))
    if g.degree() == 0 and g.is_zero():
        return
    b = MomentBasis(vars_, 2 * k)
    blk = localizing_block(b, g, k)
    y = np.random.default_rng(sum(coefs) + 18).normal(size=b.size)
    M = blk.evaluate(y)
    assert np.allclose(M, M.T)
    for i, al in enumerate(blk.row_exponents):
        for j, be in enumerate(blk.row_exponents):
            ref = sum(c * y[b.index_of[tuple(p + q + r for p, q, r in zip(al, be, gam))]] for gam, c in g.terms.items())
            assert np.isclose(M[i, j], ref)


def test_temporal_polynomials():
    pr = line_problem(horizon=5.0, window=1.5)
    g_h, g_plus, g_minus = temporal_polynomials(pr)
    assert g_h.evaluate([3.0, 0.0]) == pytest.approx(3.0)
    for s in (1.5, 2.7, 5.0):
        assert g_plus.evaluate([s, s]) == pytest.approx(0.0, abs=1e-12)
        assert g_plus.evaluate([s, s - 1.5]) == pytest.approx(0.0, abs=1e-12)
    dyn = Dynamics.discrete(X, [parse("0.5*x", TX)], 0.25)
    disc = RiskProblem(pr.state_set, pr.initial_set, 5.0, 1.0, pr.cost, dyn)
    gm = temporal_polynomials(disc)[2]
    assert gm.evaluate([3.0, 0.0]) == 0.0 and gm.evaluate([3.0, 1.75]) == pytest.approx(0.0, abs=1e-12)


def test_liouville_first_rows():
    rows, bases = liouville_constraints(line_problem(), 2)
    assert len(rows) == len(monomials(3, 4))
    first = rows[0][0]
    assert first == {("ytau", 0): 1.0, ("y0", 0): -1.0}
    # v = t: tau moment of s minus the total occupation mass
    t_row = rows[2][0]
    assert t_row == {("ytau", bases["ytau"].index_of[(1, 0)]): 1.0, ("y+", 0): -1.0, ("y-", 0): -1.0}


@pytest.mark.parametrize("scale", [False, True])
def test_constant_trajectory_closed_form(scale):
    pr = line_problem(drift="0", center=0.3, radius=0.05, horizon=2.0, window=0.5)
    rel = build_mean_relaxation(pr, 3, scale=scale)
    P = rel.internal
    s, h = 0.8 * P.horizon, P.window
    c = float(rel.scaling.state_to_internal([0.3])[0]) if scale else 0.3
    y = np.zeros(rel.nvars)

    def seg(tag, a, b):
        out = []
        for e in rel.bases[tag].exponents:
            pa, pb, pc = e
            out.append(s**pa * c**pc * (b ** (pb + 1) - a ** (pb + 1)) / (pb + 1))
        y[rel.slice(tag)] = out

    y[rel.slice("y0")] = [s**a * c**j for a, j in rel.bases["y0"].exponents]
    y[rel.slice("ytau")] = y[rel.slice("y0")]
    seg("y+", s - h, s)
    seg("y-", 0.0, s - h)
    liou = [(f, b) for f, b, lab in rel.equalities if lab.startswith("liou")]
    worst = max(abs(sum(cf * y[i] for i, cf in f.items()) - b) for f, b in liou)
    assert worst < 1e-10
    res = rel.program.residuals(y)
    assert res["primal_equality"] < 1e-10
    assert res["min_eigenvalue"] > -1e-10


def test_linear_trajectory_quadrature():
    pr = line_problem(drift="1", box=(-1.0, 4.0), center=0.0, horizon=3.0, window=1.0)
    rel = build_mean_relaxation(pr, 2, scale=False)
    y = trajectory_vector(rel, lambda t: np.array([t]), 2.5, [0.0])
    res = rel.program.residuals(y)
    assert res["primal_equality"] < 1e-9
    assert res["min_eigenvalue"] > -1e-9


def test_degenerate_window_equals_horizon_is_feasible():
    pr = line_problem(drift="-x", center=0.5, radius=0.01, horizon=2.0, window=2.0)
    rel = build_mean_relaxation(pr, 1)
    P, sc = rel.internal, rel.scaling

    def path(t):  # exact solution in internal coordinates
        return sc.state_to_internal([0.5 * math.exp(-t * sc.time_scale)])

    y = trajectory_vector(rel, path, P.horizon, sc.state_to_internal([0.5]))
    res = rel.program.residuals(y)
    assert res["primal_equality"] < 1e-8
    assert res["min_eigenvalue"] > -1e-8


def test_discrete_trajectory_is_feasible():
    dyn = Dynamics.discrete(X, [parse("0.5*x + 0.1", TX)], 0.25)
    pr = RiskProblem(SemialgebraicSet.box(X, [(-1, 1)]), SemialgebraicSet.ball(X, [0.6], 0.1), 2.0, 0.5,
                     parse("x", X), dyn)
    rel = build_mean_relaxation(pr, 2, scale=False)
    dt, s, h = 0.25, 1.5, 0.5
    xs = [0.6]
    for _ in range(8):
        xs.append(0.5 * xs[-1] + 0.1)
    grid = np.arange(0, 9) * dt
    y = np.zeros(rel.nvars)
    y[rel.slice("y0")] = dirac_moments(rel.bases["y0"], [s, xs[0]])
    y[rel.slice("ytau")] = dirac_moments(rel.bases["ytau"], [s, xs[6]])
    for tag, sel in (("y+", (grid >= s - h - 1e-12) & (grid < s - 1e-12)), ("y-", grid < s - h - 1e-12)):
        pts = np.column_stack([np.full(sel.sum(), s), grid[sel], np.array(xs[:9])[sel]])
        y[rel.slice(tag)] = atom_moments(rel.bases[tag], pts, np.full(sel.sum(), dt))
    res = rel.program.residuals(y)
    assert res["primal_equality"] < 1e-10
    assert res["min_eigenvalue"] > -1e-10


def test_relaxation_structure():
    pr = load_problem("oscillator")
    rel = build_mean_relaxation(pr, 2)
    prog = rel.program
    labels = [lab for _, _, lab in rel.equalities]
    assert "mass:y0" in labels and "mass:y+" in labels
    assert labels.count("liou:0,0,0,0") == 1
    for blk in prog.blocks:
        assert blk.size >= 1
        assert np.array_equal(blk.slot_index, blk.slot_index.T)
    for form, _, _ in rel.equalities:
        assert all(0 <= i < rel.nvars for i in form)
    assert rel.meta["k_tilde"] >= 2


def test_es_relaxation_rows():
    pr = load_problem("oscillator").with_risk(Risk.es(0.15))
    rel = build_es_relaxation(pr, 2)
    assert rel.meta["delta"] == rel.meta["k_tilde"]
    es0 = next(f for f, _, lab in rel.equalities if lab == "es:0")
    o = rel.offsets
    assert es0[o["ynu"]] == -0.15 and es0[o["ynuhat"]] == -1.0
    with pytest.raises(RelaxationError):
        build_es_relaxation(pr, 2, epsilon=1.0)


def test_scaling_maps_back():
    pr = load_problem("oscillator")
    internal, sc = scale_problem(pr)
    assert internal.horizon == 1.0
    assert internal.window == pytest.approx(0.3)
    box = internal.state_set.bounding_box()
    assert np.allclose(box, [(-1, 1), (-1, 1)])
    x = np.array([2.0, -1.0])
    assert np.allclose(sc.state_to_user(sc.state_to_internal(x)), x)
    # cost in internal units ranges over [-1, 1]
    vals = internal.cost.evaluate(np.array([[0, -1], [0, 1]]))
    assert np.allclose(sorted(vals), [-1, 1])


def test_order_zero_rejected():
    with pytest.raises(RelaxationError):
        build_mean_relaxation(line_problem(), 0)
