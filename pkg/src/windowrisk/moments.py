"""Moment relaxations of the windowed mean and ES occupation-measure programs.

Measures and their pseudo-moment vectors, in the fixed global order:

===========  ===================  ===========================================
tag          variables            role
===========  ===================  ===========================================
``y0``       ``(s, *x)``          initial measure (s = chosen stopping time)
``ytau``     ``(s, *x)``          terminal measure pushed through t = s
``y+``       ``(s, t, *x)``       occupation measure inside the window
``y-``       ``(s, t, *x)``       occupation measure before the window
``ynu``      ``(q,)``             ES evaluation measure
``ynuhat``   ``(q,)``             ES slack measure
===========  ===================  ===========================================

Relaxations are assembled on an affinely rescaled copy of the problem (time
in ``[0, 1]``, states in ``[-1, 1]`` boxes, cost in ``[-1, 1]``); reported
values are mapped back through :class:`Scaling`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from math import comb

import numpy as np
import scipy.sparse as sp

from .model import (AugmentedGenerator, Dynamics, ModelError, NoiseMoments, Risk, RiskProblem,
                    SemialgebraicSet, cost_range, dynamics_degree, validate_problem)
from .polynomials import Polynomial, monomials

S, T, Q = "s", "t", "q"
TAGS = ("y0", "ytau", "y+", "y-", "ynu", "ynuhat")


class RelaxationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Bases, Riesz functionals, localizing matrices
# ---------------------------------------------------------------------------


class MomentBasis:
    """Graded-lex indexing of all monomials of degree <= ``degree``."""

    def __init__(self, variables, degree: int):
        self.variables = tuple(variables)
        self.degree = int(degree)
        self.exponents = monomials(len(self.variables), self.degree)
        self.index_of = {a: i for i, a in enumerate(self.exponents)}

    def __len__(self):
        return len(self.exponents)

    @property
    def size(self) -> int:
        return len(self.exponents)

    def __repr__(self):
        return f"MomentBasis({self.variables}, degree={self.degree}, size={self.size})"


def riesz(basis: MomentBasis, q: Polynomial) -> dict[int, float]:
    """Coefficients of ``L_y(q)`` as a linear form in the moment vector."""
    q = q.embed(basis.variables) if q.variables != basis.variables else q
    if q.degree() > basis.degree:
        raise RelaxationError(f"degree {q.degree()} exceeds basis degree {basis.degree}")
    return {basis.index_of[a]: c for a, c in q.terms.items()}


@dataclass
class PsdBlockSpec:
    """A moment or localizing matrix ``M(g y)`` written over slots.

    Entry ``(i, j)`` equals slot ``slot_index[i, j]``, and slot ``d`` is the
    form ``sum_c g_c y_{d + c}`` (``slot_forms[d]``, keyed by basis id).
    """

    measure_tag: str
    guard: Polynomial
    order: int
    row_exponents: list
    slot_index: np.ndarray
    slot_forms: list
    label: str = ""

    @property
    def size(self) -> int:
        return len(self.row_exponents)

    def entry(self, i: int, j: int) -> dict[int, float]:
        return self.slot_forms[self.slot_index[i, j]]

    @property
    def entries(self) -> dict[tuple[int, int], dict[int, float]]:
        n = self.size
        return {(i, j): self.entry(i, j) for i in range(n) for j in range(n)}

    def evaluate(self, y) -> np.ndarray:
        """Numeric matrix for the measure's own moment vector ``y``."""
        y = np.asarray(y, float)
        vals = np.array([sum(c * y[k] for k, c in form.items()) for form in self.slot_forms])
        return vals[self.slot_index]


def localizing_block(basis: MomentBasis, guard: Polynomial, k: int, tag: str = "", label: str = "") -> PsdBlockSpec:
    """``M_k(g y)`` with rows indexed by monomials of degree <= ``k - ceil(deg g / 2)``."""
    g = guard.embed(basis.variables) if guard.variables != basis.variables else guard
    khat = k - math.ceil(g.degree() / 2)
    if khat < 0:
        raise RelaxationError(f"guard of degree {g.degree()} does not fit order {k}")
    if 2 * khat + g.degree() > basis.degree:
        raise RelaxationError(f"basis degree {basis.degree} too small for order {k} with guard degree {g.degree()}")
    nv = len(basis.variables)
    rows = monomials(nv, khat)
    slots = monomials(nv, 2 * khat)
    slot_id = {a: i for i, a in enumerate(slots)}
    idx = np.empty((len(rows), len(rows)), dtype=np.int64)
    for i, a in enumerate(rows):
        for j, b in enumerate(rows):
            idx[i, j] = slot_id[tuple(x + y for x, y in zip(a, b))]
    gterms = list(g.items())
    forms = []
    for d in slots:
        form = {}
        for c_exp, c in gterms:
            key = basis.index_of[tuple(x + y for x, y in zip(d, c_exp))]
            form[key] = form.get(key, 0.0) + c
        forms.append(form)
    return PsdBlockSpec(tag, g, k, rows, idx, forms, label)


# ---------------------------------------------------------------------------
# Scaling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Scaling:
    """Affine map between user coordinates and the internal unit coordinates.

    ``t_user = time_scale * t_int``, ``x_user = center + radius * x_int`` and
    ``value_user = value_offset + value_scale * value_int``.
    """

    time_scale: float
    center: tuple[float, ...]
    radius: tuple[float, ...]
    value_offset: float = 0.0
    value_scale: float = 1.0

    @classmethod
    def identity(cls, n: int) -> "Scaling":
        return cls(1.0, (0.0,) * n, (1.0,) * n)

    def state_to_user(self, x):
        return np.asarray(self.center) + np.asarray(self.radius) * np.asarray(x)

    def state_to_internal(self, x):
        return (np.asarray(x) - np.asarray(self.center)) / np.asarray(self.radius)

    def value_to_user(self, v: float) -> float:
        return self.value_offset + self.value_scale * v

    def as_dict(self) -> dict:
        return {"time_scale": self.time_scale, "center": list(self.center), "radius": list(self.radius),
                "value_offset": self.value_offset, "value_scale": self.value_scale}


def _normalized(g: Polynomial) -> Polynomial:
    m = max((abs(c) for c in g.terms.values()), default=0.0)
    return g.scale(1.0 / m) if m > 0 else g


def scale_problem(problem: RiskProblem) -> tuple[RiskProblem, Scaling]:
    """Equivalent problem over unit time and state boxes, plus the map back."""
    box = problem.state_set.bounding_box()
    if box is None:
        raise RelaxationError("state set needs box bounds or a ball radius for scaling")
    center = tuple((a + b) / 2 for a, b in box)
    radius = tuple((b - a) / 2 if b > a else 1.0 for a, b in box)
    Tsc = problem.horizon
    states = problem.states
    xs = {x: Polynomial.variable(states, x) * r + c for x, c, r in zip(states, center, radius)}

    def remap_state_poly(q: Polynomial) -> Polynomial:
        return q.substitute_all(xs)

    def remap_set(st: SemialgebraicSet) -> SemialgebraicSet:
        cons = [_normalized(remap_state_poly(g)) for g in st.relaxation_constraints()]
        bounds = None
        bb = st.bounding_box()
        if bb is not None:
            bounds = tuple(((lo - c) / r, (hi - c) / r) for (lo, hi), c, r in zip(bb, center, radius))
        return SemialgebraicSet(states, tuple(cons), None, bounds)

    pmin, pmax = cost_range(problem)
    voff = (pmin + pmax) / 2
    vsc = (pmax - pmin) / 2 if pmax > pmin else 1.0
    cost = (remap_state_poly(problem.cost) - voff).scale(1.0 / vsc)

    dyn = problem.dynamics
    base = dyn.base_variables
    subs = {x: Polynomial.variable(base, x) * r + c for x, c, r in zip(states, center, radius)}
    subs[T] = Polynomial.variable(base, T) * Tsc
    if dyn.kind == "continuous":
        drift = [f.substitute_all(subs).scale(Tsc / r) for f, r in zip(dyn.drift, radius)]
        diff = [[g.substitute_all(subs).scale(math.sqrt(Tsc) / r) for g in row]
                for row, r in zip(dyn.diffusion, radius)]
        sdyn = Dynamics.sde(states, drift, diff)
    else:
        update = [(f.substitute_all(subs) - c).scale(1.0 / r) for f, c, r in zip(dyn.update, center, radius)]
        sdyn = Dynamics.discrete(states, update, dyn.dt / Tsc, dyn.noise, dyn.noise_names)
    scaled = RiskProblem(remap_set(problem.state_set), remap_set(problem.initial_set), 1.0,
                         problem.window / Tsc, cost, sdyn, problem.risk, problem.name)
    return scaled, Scaling(Tsc, center, radius, voff, vsc)


# ---------------------------------------------------------------------------
# Temporal supports and Liouville rows
# ---------------------------------------------------------------------------


def temporal_polynomials(problem: RiskProblem) -> tuple[Polynomial, Polynomial, Polynomial]:
    """``(g_h, g_plus, g_minus)`` over ``(s, t)`` describing ``[h, T]`` and the two windows."""
    v = (S, T)
    s, t = Polynomial.variable(v, S), Polynomial.variable(v, T)
    Th, h = problem.horizon, problem.window
    g_h = (Th - s) * (s - h)
    g_plus = (s - t) * (t - s + h)
    if problem.dynamics.kind == "discrete":
        g_minus = (s - t - h - problem.dynamics.dt) * t
    else:
        g_minus = (s - t - h) * t
    return g_h, g_plus, g_minus


def liouville_rows(problem: RiskProblem, k: int, bases: dict[str, MomentBasis], generator=None):
    """One row per test monomial ``s^a t^b x^c`` of degree <= 2k.

    Yields ``(alpha, {tag: {basis_id: coef}})``, encoding
    ``L_ytau(s^(a+b) x^c) - [b=0] L_y0(s^a x^c) - L_(y+ + y-)(Lhat(s^a t^b x^c)) = 0``.
    """
    states = problem.states
    full = (S, T) + states
    gen = generator or AugmentedGenerator(problem.dynamics, full)
    bt, b0, bp, bm = bases["ytau"], bases["y0"], bases["y+"], bases["y-"]
    for alpha in monomials(len(full), 2 * k):
        a, b, c = alpha[0], alpha[1], alpha[2:]
        row = {"ytau": {bt.index_of[(a + b,) + c]: 1.0}}
        if b == 0:
            row["y0"] = {b0.index_of[(a,) + c]: -1.0}
        img = gen.monomial(alpha)
        if img.degree() > bp.degree:
            raise RelaxationError(f"generator image degree {img.degree()} exceeds occupation basis degree {bp.degree}")
        occ = {bp.index_of[e]: -coef for e, coef in img.terms.items()}
        if occ:
            row["y+"] = occ
            row["y-"] = {bm.index_of[e]: cf for e, cf in ((e, -coef) for e, coef in img.terms.items())}
        yield alpha, row


def liouville_constraints(problem: RiskProblem, k: int):
    """List of ``(form, rhs)``; forms map ``(tag, basis_id)`` to coefficients."""
    ktil = dynamics_degree(problem.dynamics, k)
    bases = _state_bases(problem, k, ktil)
    out = []
    for _, row in liouville_rows(problem, k, bases):
        form = {(tag, i): c for tag, f in row.items() for i, c in f.items()}
        out.append((form, 0.0))
    return out, bases


def _state_bases(problem, k, ktil):
    sx = (S,) + problem.states
    stx = (S, T) + problem.states
    return {
        "y0": MomentBasis(sx, 2 * k),
        "ytau": MomentBasis(sx, 2 * k),
        "y+": MomentBasis(stx, 2 * ktil),
        "y-": MomentBasis(stx, 2 * ktil),
    }


# ---------------------------------------------------------------------------
# Relaxations
# ---------------------------------------------------------------------------


@dataclass
class MomentRelaxation:
    """Finite moment program ``max c.y`` subject to equalities and PSD blocks.

    Forms are dictionaries over the global pseudo-moment vector, which
    concatenates the measures in :data:`TAGS` order.
    """

    problem: RiskProblem
    internal: RiskProblem
    scaling: Scaling
    bases: dict[str, MomentBasis]
    offsets: dict[str, int]
    objective: dict[int, float]
    equalities: list[tuple[dict[int, float], float, str]]
    psd_blocks: list[PsdBlockSpec]
    meta: dict = field(default_factory=dict)

    @property
    def nvars(self) -> int:
        last = [t for t in TAGS if t in self.bases][-1]
        return self.offsets[last] + self.bases[last].size

    def slice(self, tag: str) -> slice:
        o = self.offsets[tag]
        return slice(o, o + self.bases[tag].size)

    def moments(self, y, tag: str) -> np.ndarray:
        return np.asarray(y)[self.slice(tag)]

    def variable_labels(self) -> list[str]:
        labels = []
        for tag in TAGS:
            if tag in self.bases:
                labels += [f"{tag}:{','.join(map(str, a))}" for a in self.bases[tag].exponents]
        return labels

    @cached_property
    def program(self):
        """The relaxation as a :class:`~windowrisk.conic.ConicProgram`."""
        from .conic import ConicProgram, PsdBlock

        n = self.nvars
        c = np.zeros(n)
        for i, v in self.objective.items():
            c[i] += v
        rows, cols, vals, b, eq_labels = [], [], [], [], []
        for r, (form, rhs, label) in enumerate(self.equalities):
            for i, v in sorted(form.items()):
                rows.append(r)
                cols.append(i)
                vals.append(v)
            b.append(rhs)
            eq_labels.append(label)
        A = sp.csr_matrix((vals, (rows, cols)), shape=(len(self.equalities), n))
        A.sum_duplicates()
        blocks = []
        for spec in self.psd_blocks:
            off = self.offsets[spec.measure_tag]
            r_, c_, v_ = [], [], []
            for d, form in enumerate(spec.slot_forms):
                for i, v in sorted(form.items()):
                    r_.append(d)
                    c_.append(off + i)
                    v_.append(v)
            Smap = sp.csr_matrix((v_, (r_, c_)), shape=(len(spec.slot_forms), n))
            blocks.append(PsdBlock(spec.slot_index.copy(), Smap, np.zeros(len(spec.slot_forms)), spec.label))
        meta = dict(self.meta)
        meta["scaling"] = self.scaling.as_dict()
        meta["equality_labels"] = eq_labels
        return ConicProgram(c, A, np.asarray(b, float), blocks, labels=self.variable_labels(), meta=meta)

    def value_to_user(self, internal_value: float) -> float:
        return self.scaling.value_to_user(internal_value)


def _build_common(problem: RiskProblem, k: int, scale: bool):
    if k < 1:
        raise RelaxationError("relaxation order k must be >= 1")
    errors = [d for d in validate_problem(problem, k_max=k) if d.level == "error"]
    if errors:
        raise RelaxationError("problem failed validation: " + "; ".join(str(e) for e in errors))
    internal, scaling = scale_problem(problem) if scale else (problem, Scaling.identity(problem.n))
    gen_tx = AugmentedGenerator(internal.dynamics, (T,) + internal.states)
    ktil = dynamics_degree(internal.dynamics, k, gen_tx)
    bases = _state_bases(internal, k, ktil)
    g_h, g_plus, g_minus = temporal_polynomials(internal)
    sx = (S,) + internal.states
    stx = (S, T) + internal.states
    Xc = internal.state_set.relaxation_constraints()
    X0c = internal.initial_set.relaxation_constraints()

    blocks: list[PsdBlockSpec] = []

    def add(tag, guard, order, label):
        blocks.append(localizing_block(bases[tag], guard, order, tag, label))

    for tag, order, vars_, set_cons, set_name in (
        ("y0", k, sx, X0c, "X0"),
        ("ytau", k, sx, Xc, "X"),
        ("y+", ktil, stx, Xc, "X"),
        ("y-", ktil, stx, Xc, "X"),
    ):
        add(tag, Polynomial.constant(vars_, 1.0), order, f"M({tag})")
        add(tag, _gh_over(g_h, vars_), order, f"M(g_h {tag})")
        if tag == "y+":
            add(tag, g_plus.embed(vars_), order, "M(g_plus y+)")
        if tag == "y-":
            add(tag, g_minus.embed(vars_), order, "M(g_minus y-)")
        for i, g in enumerate(set_cons):
            if math.ceil(g.degree() / 2) <= order:
                add(tag, g.embed(vars_), order, f"M({set_name}[{i}] {tag})")
    return internal, scaling, ktil, bases, blocks, gen_tx


def _gh_over(g_h: Polynomial, variables) -> Polynomial:
    # g_h depends on s only; drop t when the target basis has no t
    only_s = Polynomial((S,), {(a[0],): c for a, c in g_h.terms.items()})
    return only_s.embed(variables)


def _finish(problem, internal, scaling, bases, blocks, rows, objective_parts, meta) -> MomentRelaxation:
    offsets = {}
    off = 0
    for tag in TAGS:
        if tag in bases:
            offsets[tag] = off
            off += bases[tag].size
    equalities = []
    for form, rhs, label in rows:
        g = {}
        for (tag, i), c in form.items():
            key = offsets[tag] + i
            g[key] = g.get(key, 0.0) + c
        g = {i: c for i, c in g.items() if c != 0.0}
        equalities.append((g, rhs, label))
    objective = {}
    for (tag, i), c in objective_parts.items():
        objective[offsets[tag] + i] = objective.get(offsets[tag] + i, 0.0) + c
    return MomentRelaxation(problem, internal, scaling, bases, offsets, objective, equalities, blocks, meta)


def _mean_rows(internal, k, bases, ktil):
    gen = AugmentedGenerator(internal.dynamics, (S, T) + internal.states)
    rows = []
    for alpha, row in liouville_rows(internal, k, bases, gen):
        form = {(tag, i): c for tag, f in row.items() for i, c in f.items()}
        rows.append((form, 0.0, "liou:" + ",".join(map(str, alpha))))
    zero_sx = (0,) * (1 + internal.n)
    zero_stx = (0,) * (2 + internal.n)
    rows.append(({("y0", bases["y0"].index_of[zero_sx]): 1.0}, 1.0, "mass:y0"))
    rows.append(({("y+", bases["y+"].index_of[zero_stx]): 1.0}, internal.window, "mass:y+"))
    return rows


def build_mean_relaxation(problem: RiskProblem, k: int, scale: bool = True) -> MomentRelaxation:
    """Degree-``k`` moment relaxation of the windowed-mean program."""
    problem = problem.with_risk(Risk.mean()) if problem.risk.kind != "mean" else problem
    internal, scaling, ktil, bases, blocks, _ = _build_common(problem, k, scale)
    rows = _mean_rows(internal, k, bases, ktil)
    h = internal.window
    objective = {("y+", i): c / h for i, c in riesz(bases["y+"], internal.cost.embed((S, T) + internal.states)).items()}
    meta = {"k": k, "k_tilde": ktil, "delta": None, "risk": "mean", "problem": problem.fingerprint}
    return _finish(problem, internal, scaling, bases, blocks, rows, objective, meta)


def build_es_relaxation(problem: RiskProblem, k: int, epsilon: float | None = None, scale: bool = True) -> MomentRelaxation:
    """Degree-``k`` moment relaxation of the windowed Expected-Shortfall program."""
    eps = epsilon if epsilon is not None else problem.risk.epsilon
    if eps is None or not 0 < eps < 1:
        raise RelaxationError(f"ES level must lie in (0, 1), got {eps}")
    problem = problem.with_risk(Risk.es(eps))
    internal, scaling, ktil, bases, blocks, _ = _build_common(problem, k, scale)
    dp = max(internal.cost.degree(), 1)
    delta = ktil // dp
    if delta < 1:
        raise RelaxationError(f"ES degree floor(k_tilde / deg p) = {delta} < 1; raise k")
    bases["ynu"] = MomentBasis((Q,), 2 * delta)
    bases["ynuhat"] = MomentBasis((Q,), 2 * delta)
    pmin, pmax = cost_range(internal)
    q = Polynomial.variable((Q,), Q)
    g_p = (q - pmin) * (pmax - q)
    for tag in ("ynu", "ynuhat"):
        blocks.append(localizing_block(bases[tag], Polynomial.constant((Q,), 1.0), delta, tag, f"M({tag})"))
        blocks.append(localizing_block(bases[tag], g_p, delta, tag, f"M(g_p {tag})"))
    rows = _mean_rows(internal, k, bases, ktil)
    h = internal.window
    stx = (S, T) + internal.states
    p = internal.cost.embed(stx)
    pl = Polynomial.constant(stx, 1.0)
    for ell in range(2 * delta + 1):
        form = {}
        for i, c in riesz(bases["y+"], pl).items():
            form[("y+", i)] = c / h
        form[("ynu", bases["ynu"].index_of[(ell,)])] = -eps
        form[("ynuhat", bases["ynuhat"].index_of[(ell,)])] = -1.0
        rows.append((form, 0.0, f"es:{ell}"))
        pl = pl * p
    rows.append(({("ynu", 0): 1.0}, 1.0, "mass:ynu"))
    objective = {("ynu", bases["ynu"].index_of[(1,)]): 1.0}
    meta = {"k": k, "k_tilde": ktil, "delta": delta, "risk": "es", "epsilon": eps, "p_range": (pmin, pmax),
            "problem": problem.fingerprint}
    return _finish(problem, internal, scaling, bases, blocks, rows, objective, meta)


def build_relaxation(problem: RiskProblem, k: int, scale: bool = True) -> MomentRelaxation:
    if problem.risk.kind == "es":
        return build_es_relaxation(problem, k, scale=scale)
    return build_mean_relaxation(problem, k, scale=scale)


def block_size_formula(nvars: int, order: int) -> int:
    """Size of a degree-``order`` moment matrix in ``nvars`` variables."""
    return comb(nvars + order, order)
