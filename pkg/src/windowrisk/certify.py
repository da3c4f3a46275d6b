"""Post-solve certification of windowed risk bounds.

The checks here are independent of the solver that produced a solution:
mass invariants read straight off the pseudo-moments, near rank-one
recovery of the maximizing initial state and window, a spot check of the
polynomial inequalities implied by the dual multipliers, and a comparison
against sampled trajectories.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .conic import ConicError, ConicSolution, SolverOptions, Status, solve
from .model import AugmentedGenerator, RiskProblem, SemialgebraicSet
from .moments import Q, S, T, MomentRelaxation, RelaxationError, build_relaxation
from .montecarlo import MonteCarloOptions, empirical_statistic, simulate
from .polynomials import Polynomial


@dataclass
class CertifyOptions:
    """Tolerances used when judging a solved relaxation.

    ``residual_tol`` is the solver merit (worst of relative gap and scaled
    infeasibilities) above which a bound counts as numerically suspect once
    multiplied by ``suspect_factor``.
    """

    feas_tol: float = 1e-6
    gap_tol: float = 1e-5
    residual_tol: float = 1e-5
    suspect_factor: float = 10.0
    dual_tol: float = 1e-5
    dominance_tol: float = 0.01
    rank_threshold: float = 1e-3
    dual_samples: int = 2000
    seed: int = 0


# ---------------------------------------------------------------------------
# Solving
# ---------------------------------------------------------------------------


@dataclass
class BoundResult:
    """A solved relaxation together with its user-unit bound."""

    k: int
    relaxation: MomentRelaxation
    solution: ConicSolution
    seconds: float

    @property
    def bound(self) -> float:
        if not self.solution.ok:
            return float("nan")
        return self.relaxation.value_to_user(self.solution.value)

    @property
    def dual_bound(self) -> float:
        if not self.solution.ok:
            return float("nan")
        return self.relaxation.value_to_user(self.solution.dual_value)


def solve_bound(problem: RiskProblem, k: int, options: SolverOptions | None = None) -> BoundResult:
    """Build and solve the degree-``k`` relaxation with the embedded solver."""
    t0 = time.perf_counter()
    rel = build_relaxation(problem, k)
    sol = solve(rel.program, options or SolverOptions())
    return BoundResult(k, rel, sol, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# Mass invariants
# ---------------------------------------------------------------------------


@dataclass
class MassCheck:
    name: str
    value: float
    low: float
    high: float

    @property
    def passed(self) -> bool:
        return bool(self.low <= self.value <= self.high)


def y_minus_mass_limit(horizon: float, window: float) -> float:
    """Upper limit ``(1 + T + h)^2 / 4 - T h - h`` on the mass of ``y-``."""
    return (1 + horizon + window) ** 2 / 4 - horizon * window - window


def check_mass_invariants(relaxation: MomentRelaxation, y, feas_tol: float = 1e-6) -> list[MassCheck]:
    """Zeroth moments of every measure against their implied values (scaled units)."""
    y = np.asarray(y, float)
    P = relaxation.internal
    Th, h = P.horizon, P.window

    def mass(tag):
        return float(relaxation.moments(y, tag)[0])

    checks = [
        MassCheck("y0 mass", mass("y0"), 1 - feas_tol, 1 + feas_tol),
        MassCheck("y+ mass", mass("y+"), h - feas_tol, h + feas_tol),
        MassCheck("ytau mass", mass("ytau"), 1 - feas_tol, 1 + feas_tol),
        MassCheck("y- mass", mass("y-"), -feas_tol, y_minus_mass_limit(Th, h) + feas_tol),
    ]
    if "ynu" in relaxation.bases:
        eps = relaxation.meta["epsilon"]
        checks.append(MassCheck("ynu mass", mass("ynu"), 1 - feas_tol, 1 + feas_tol))
        checks.append(MassCheck("ynuhat mass", mass("ynuhat"), 1 - eps - feas_tol, 1 - eps + feas_tol))
    return checks


# ---------------------------------------------------------------------------
# Optimizer recovery
# ---------------------------------------------------------------------------


@dataclass
class RecoveredOptimizers:
    """Maximizers read from near rank-one moment matrices (user units)."""

    x0_star: list[float] | None
    t_star: float | None
    xp_star: list[float] | None
    rank_ratios: dict[str, float]


def rank_ratio(M: np.ndarray) -> float:
    """Second-largest over largest eigenvalue of a symmetric matrix."""
    ev = np.linalg.eigvalsh(0.5 * (M + M.T))
    if ev.size < 2:
        return 0.0
    top = ev[-1]
    return float(ev[-2] / top) if top > 0 else float("inf")


def _plain_block(relaxation, tag):
    for spec in relaxation.psd_blocks:
        if spec.measure_tag == tag and spec.guard.degree() == 0:
            return spec
    raise RelaxationError(f"no moment matrix for {tag}")


def extract_optimizers(relaxation: MomentRelaxation, y, threshold: float = 1e-3) -> RecoveredOptimizers:
    """Read ``x0*``, ``t*`` (from ``y0``) and ``xp*`` (from ``ytau``) when near rank one.

    The window end time ``t*`` is the ``s`` coordinate of ``y0``.
    """
    y = np.asarray(y, float)
    sc = relaxation.scaling
    ratios, points = {}, {}
    for tag in ("y0", "ytau"):
        m = relaxation.moments(y, tag)
        basis = relaxation.bases[tag]
        M = _plain_block(relaxation, tag).evaluate(m)
        mass = m[0]
        ratios[tag] = rank_ratio(M / mass) if mass > 0 else float("inf")
        if ratios[tag] < threshold:
            nv = len(basis.variables)
            first = [m[basis.index_of[tuple(int(i == j) for i in range(nv))]] / mass for j in range(nv)]
            points[tag] = (first[0] * sc.time_scale, sc.state_to_user(first[1:]).tolist())
    x0 = points.get("y0")
    xp = points.get("ytau")
    return RecoveredOptimizers(x0[1] if x0 else None, x0[0] if x0 else None, xp[1] if xp else None, ratios)


# ---------------------------------------------------------------------------
# Dual certificate
# ---------------------------------------------------------------------------


@dataclass
class DualCertificate:
    """Polynomial objects rebuilt from the equality multipliers (internal units)."""

    v: Polynomial
    gamma: float
    xi: float
    w: Polynomial | None = None
    beta: float | None = None


def reconstruct_certificate(relaxation: MomentRelaxation, eq_duals) -> DualCertificate:
    """``v`` from the Liouville multipliers, scalars from the mass rows, ``w`` from the ES rows."""
    P = relaxation.internal
    stx = (S, T) + P.states
    lam = np.asarray(eq_duals, float)
    vt, wt = {}, {}
    scal = {}
    for (_, _, label), val in zip(relaxation.equalities, lam):
        kind, _, idx = label.partition(":")
        if kind == "liou":
            vt[tuple(int(a) for a in idx.split(","))] = float(val)
        elif kind == "es":
            wt[(int(idx),)] = float(val)
        else:
            scal[label] = float(val)
    cert = DualCertificate(Polynomial(stx, vt), scal.get("mass:y0", 0.0), scal.get("mass:y+", 0.0))
    if "ynu" in relaxation.bases:
        cert.w = Polynomial((Q,), wt)
        cert.beta = scal.get("mass:ynu", 0.0)
    return cert


def certificate_inequalities(relaxation: MomentRelaxation, cert: DualCertificate) -> dict[str, Polynomial]:
    """Inequality left-hand sides that must be nonnegative on each support.

    Keys name the measure whose support applies.  ``y0`` and ``ytau`` are
    over ``(s, x)``, the occupation entries over ``(s, t, x)`` and the ES
    entries over ``q``.
    """
    P = relaxation.internal
    sx = (S,) + P.states
    stx = (S, T) + P.states
    v = cert.v
    Lv = AugmentedGenerator(P.dynamics, stx)(v)
    s = Polynomial.variable(sx, S)
    v_tau = v.embed(sx + (T,)).substitute(T, s.embed(sx + (T,))).embed(sx)
    v_zero = v.embed(sx + (T,)).substitute(T, Polynomial.constant(sx + (T,), 0.0)).embed(sx)
    h = P.window
    p = P.cost.embed(stx)
    out = {
        "y0": Polynomial.constant(sx, cert.gamma) - v_zero,
        "ytau": v_tau,
        "y-": -Lv,
    }
    if cert.w is None:
        out["y+"] = Polynomial.constant(stx, cert.xi) - Lv - p.scale(1.0 / h)
    else:
        eps = relaxation.meta["epsilon"]
        wp = Polynomial.constant(stx, 0.0)
        pl = Polynomial.constant(stx, 1.0)
        for ell in range(cert.w.degree() + 1):
            wp = wp + pl.scale(cert.w.coefficient((ell,)))
            pl = pl * p
        q = Polynomial.variable((Q,), Q)
        out["y+"] = Polynomial.constant(stx, cert.xi) - Lv + wp.scale(1.0 / h)
        out["ynu"] = Polynomial.constant((Q,), cert.beta) - cert.w.scale(eps) - q
        out["ynuhat"] = -cert.w
    return out


def slack_polynomials(relaxation: MomentRelaxation, eq_duals) -> dict[str, Polynomial]:
    """Per-measure polynomials with coefficients ``A^T lam - c`` (the generic dual slack)."""
    prog = relaxation.program
    lam = np.asarray(eq_duals, float)
    g = prog.A.T @ lam - prog.c
    out = {}
    for tag, basis in relaxation.bases.items():
        coefs = g[relaxation.slice(tag)]
        out[tag] = Polynomial(basis.variables, {e: float(c) for e, c in zip(basis.exponents, coefs) if c != 0})
    return out


def _sample_set(st: SemialgebraicSet, rng, n: int) -> np.ndarray:
    box = np.array(st.bounding_box(), float)
    got, need = [], n
    for _ in range(1000):
        X = box[:, 0] + (box[:, 1] - box[:, 0]) * rng.random((max(4 * need, 64), box.shape[0]))
        X = X[st.contains(X)]
        got.append(X[:need])
        need -= len(got[-1])
        if need <= 0:
            return np.concatenate(got)
    raise RelaxationError("could not sample the set for the certificate check")


def support_samples(relaxation: MomentRelaxation, n: int, seed: int = 0) -> dict[str, np.ndarray]:
    """Random points on the support of each measure, in internal coordinates."""
    P = relaxation.internal
    rng = np.random.default_rng(seed)
    Th, h = P.horizon, P.window
    lag = h + (P.dynamics.dt if P.dynamics.kind == "discrete" else 0.0)
    s = h + (Th - h) * rng.random(n)
    out = {
        "y0": np.column_stack([s, _sample_set(P.initial_set, rng, n)]),
        "ytau": np.column_stack([s, _sample_set(P.state_set, rng, n)]),
    }
    tp = s - h * rng.random(n)
    out["y+"] = np.column_stack([s, tp, _sample_set(P.state_set, rng, n)])
    tm = np.clip(s - lag, 0.0, None) * rng.random(n)
    out["y-"] = np.column_stack([s, tm, _sample_set(P.state_set, rng, n)])
    if "ynu" in relaxation.bases:
        lo, hi = relaxation.meta["p_range"]
        qs = (lo + (hi - lo) * rng.random(n))[:, None]
        out["ynu"] = out["ynuhat"] = qs
    return out


@dataclass
class DualCheck:
    available: bool
    worst: dict[str, float] = field(default_factory=dict)
    scale: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-5
    message: str = ""

    @property
    def passed(self) -> bool:
        return self.available and all(self.worst[k] >= -self.tol * self.scale[k] for k in self.worst)


def dual_certificate_check(relaxation: MomentRelaxation, solution: ConicSolution, samples: int = 2000,
                           seed: int = 0, tol: float = 1e-5, negate_v: bool = False) -> DualCheck:
    """Worst slack of the dual inequality system over random support points.

    ``negate_v`` flips the auxiliary function, which should produce
    violations on any nontrivial instance.
    """
    lam = solution.eq_duals
    if lam is None or len(lam) != len(relaxation.equalities) or not np.any(lam):
        return DualCheck(False, tol=tol, message="no equality multipliers available")
    cert = reconstruct_certificate(relaxation, lam)
    if negate_v:
        cert.v = -cert.v
    ineq = certificate_inequalities(relaxation, cert)
    pts = support_samples(relaxation, samples, seed)
    worst, scale = {}, {}
    for tag, poly in ineq.items():
        worst[tag] = float(np.min(poly.evaluate(pts[tag])))
        scale[tag] = 1.0 + sum(abs(c) for c in poly.terms.values())
    return DualCheck(True, worst, scale, tol)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass
class CertificateReport:
    """Certification outcome for one relaxation order."""

    k: int
    status: str
    bound: float
    dual_bound: float
    merit: float
    seconds: float
    mass_checks: list[MassCheck]
    dual_violations: dict[str, float]
    dual_check_passed: bool | None
    recovered: RecoveredOptimizers | None
    empirical_sup: float = float("nan")
    suspect: bool = False
    notes: list[str] = field(default_factory=list)
    dominance_tol: float = 0.01

    @property
    def solved(self) -> bool:
        return self.status in (Status.OPTIMAL.value, Status.NEAR_OPTIMAL.value)

    @property
    def dominates(self) -> bool | None:
        """Whether ``bound + tol >= empirical sup`` (None when no sample statistic exists)."""
        if not self.solved or not math.isfinite(self.empirical_sup):
            return None
        return bool(self.bound + self.dominance_tol >= self.empirical_sup)

    @property
    def verdict(self) -> str:
        if not self.solved:
            return "failed"
        if not all(m.passed for m in self.mass_checks) or self.dominates is False:
            return "fail"
        if self.dominates is None:
            return "inconclusive"
        return "pass"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mass_checks"] = [dict(asdict(m), passed=m.passed) for m in self.mass_checks]
        d["dominates"] = self.dominates
        d["verdict"] = self.verdict
        return d


def certify_solution(result: BoundResult, options: CertifyOptions | None = None) -> CertificateReport:
    """All solver-independent checks on one solved relaxation."""
    opt = options or CertifyOptions()
    sol, rel = result.solution, result.relaxation
    merit = float(sol.residuals.get("merit", float("nan")))
    if not sol.ok:
        return CertificateReport(result.k, str(sol.status), float("nan"), float("nan"), merit, result.seconds,
                                 [], {}, None, None, notes=[sol.message], dominance_tol=opt.dominance_tol)
    mass = check_mass_invariants(rel, sol.y, opt.feas_tol)
    dual = dual_certificate_check(rel, sol, opt.dual_samples, opt.seed, opt.dual_tol)
    rec = extract_optimizers(rel, sol.y, opt.rank_threshold)
    notes = []
    suspect = bool(not math.isfinite(merit) or merit > opt.suspect_factor * opt.residual_tol)
    if suspect:
        notes.append(f"solver merit {merit:.1e} exceeds {opt.suspect_factor:g}x tolerance")
    if not dual.available:
        notes.append(dual.message)
    return CertificateReport(result.k, str(sol.status), result.bound, result.dual_bound, merit, result.seconds,
                             mass, dual.worst, dual.passed if dual.available else None, rec, suspect=suspect,
                             notes=notes, dominance_tol=opt.dominance_tol)


def _solve_and_certify(args):
    problem, k, solver_options, options = args
    try:
        result = solve_bound(problem, k, solver_options)
    except (RelaxationError, ConicError) as exc:
        return CertificateReport(k, type(exc).__name__, float("nan"), float("nan"), float("nan"), 0.0,
                                 [], {}, None, None, notes=[str(exc)], dominance_tol=options.dominance_tol)
    return certify_solution(result, options)


@dataclass
class ValidationReport:
    """Reports for a range of orders plus sampling and monotonicity summaries."""

    problem: str
    risk: str
    epsilon: float | None
    reports: list[CertificateReport]
    empirical_sup: float
    sampling: dict
    monotone: bool
    monotonicity_violations: list[tuple[int, int, float, float]]
    warnings: list[str]

    @property
    def passed(self) -> bool:
        """No non-suspect solved bound fails, and the hierarchy is monotone."""
        return self.monotone and not any(r.verdict == "fail" and not r.suspect for r in self.reports)

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "reports"}
        d["reports"] = [r.to_dict() for r in self.reports]
        d["passed"] = self.passed
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_jsonable)

    def to_text(self) -> str:
        risk = self.risk if self.epsilon is None else f"{self.risk} (epsilon={self.epsilon:g})"
        lines = [f"problem {self.problem}, risk {risk}",
                 f"empirical sup {self.empirical_sup:.6g} from {self.sampling.get('count')} paths "
                 f"(seed {self.sampling.get('seed')}, dt {self.sampling.get('dt')})",
                 f"{'k':>3} {'status':<16} {'bound':>10} {'merit':>9} {'mass':>5} {'dual':>5} "
                 f"{'verdict':<12} notes"]
        for r in self.reports:
            mass = "ok" if r.mass_checks and all(m.passed for m in r.mass_checks) else "-" if not r.mass_checks else "FAIL"
            dual = {None: "-", True: "ok", False: "FAIL"}[r.dual_check_passed]
            flag = r.verdict + ("*" if r.suspect else "")
            lines.append(f"{r.k:>3} {r.status:<16} {r.bound:>10.6g} {r.merit:>9.1e} {mass:>5} {dual:>5} "
                         f"{flag:<12} {'; '.join(r.notes)}")
        lines.append("monotone in k: " + ("yes" if self.monotone else "no"))
        for w in self.warnings:
            lines.append("warning: " + w)
        lines.append("overall: " + ("pass" if self.passed else "fail"))
        return "\n".join(lines) + "\n"


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def monotonicity(reports: list[CertificateReport], gap_tol: float) -> list[tuple[int, int, float, float]]:
    """Consecutive non-suspect solved bounds that increase by more than ``gap_tol``."""
    good = sorted((r for r in reports if r.solved and not r.suspect), key=lambda r: r.k)
    return [(a.k, b.k, a.bound, b.bound) for a, b in zip(good, good[1:]) if b.bound > a.bound + gap_tol]


def validate(problem: RiskProblem, k_list, mc_options: MonteCarloOptions | None = None,
             options: CertifyOptions | None = None, solver_options: SolverOptions | None = None,
             workers: int = 1) -> ValidationReport:
    """Solve each order in ``k_list``, sample trajectories and assemble the report."""
    opt = options or CertifyOptions()
    mc = mc_options or MonteCarloOptions()
    ks = sorted(set(int(k) for k in k_list))
    tasks = [(problem, k, solver_options, opt) for k in ks]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_solve_and_certify, tasks))
    else:
        reports = [_solve_and_certify(t) for t in tasks]
    reports.sort(key=lambda r: r.k)

    batch = simulate(problem, mc.count, mc.dt, mc.seed)
    stat = empirical_statistic(problem, batch)
    emp = stat.sup
    warnings = []
    early = float(np.mean(batch.stop_index < batch.times.size))
    m = int(round(problem.window / batch.dt))
    with_window = float(np.mean(batch.stop_index > m))
    if early > 0:
        warnings.append(f"{early:.1%} of paths left the state set before the horizon")
    if with_window < 0.5:
        warnings.append(f"only {with_window:.1%} of paths stay in the state set for a full window; "
                        "the state set or initial set is likely misspecified")
    for r in reports:
        r.empirical_sup = emp
        if r.solved and math.isfinite(emp) and r.bound < emp:
            r.notes.append("bound lies below the empirical sup")
    viol = monotonicity(reports, opt.gap_tol)
    sampling = {"count": mc.count, "dt": batch.dt, "seed": mc.seed, "early_stop_fraction": early,
                "full_window_fraction": with_window, "reduction": stat.reduction,
                "argsup": stat.argsup}
    return ValidationReport(problem.name, problem.risk.kind, problem.risk.epsilon, reports, emp, sampling,
                            not viol, viol, warnings)
