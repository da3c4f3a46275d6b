"""Stochastic process models, their generators, and the risk problem instance.

Variable naming is fixed package-wide: the stopping-time coordinate is ``s``,
time is ``t``, and state names follow.  Test functions for the augmented
generator live over ``("s", "t", *states)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .polynomials import Polynomial, PolynomialError, monomials

S, T = "s", "t"


class ModelError(ValueError):
    pass


class InsufficientMomentsError(ModelError):
    pass


# ---------------------------------------------------------------------------
# Sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SemialgebraicSet:
    """``{x : g_i(x) >= 0}`` with optional box bounds and an origin ball radius.

    ``bounds`` is a list of ``(lo, hi)`` per variable that the set is known to
    lie inside; it is what sampling and interval arithmetic use.  When
    ``ball_radius`` is set, ``R^2 - |x|^2 >= 0`` is appended by
    :meth:`relaxation_constraints`.
    """

    variables: tuple[str, ...]
    constraints: tuple[Polynomial, ...] = ()
    ball_radius: float | None = None
    bounds: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "constraints", tuple(self.constraints))
        if self.bounds is not None:
            object.__setattr__(self, "bounds", tuple((float(a), float(b)) for a, b in self.bounds))
            if len(self.bounds) != len(self.variables):
                raise ModelError("bounds must give one (lo, hi) pair per variable")
            if any(lo > hi for lo, hi in self.bounds):
                raise ModelError("box bounds must satisfy lo <= hi")
        for g in self.constraints:
            if g.variables != self.variables:
                raise ModelError(f"constraint {g} is not over {self.variables}")
        if self.ball_radius is not None and self.ball_radius <= 0:
            raise ModelError("ball_radius must be positive")

    @classmethod
    def box(cls, variables: Sequence[str], bounds: Sequence[tuple[float, float]], extra=()) -> "SemialgebraicSet":
        variables = tuple(variables)
        cons = []
        for name, (lo, hi) in zip(variables, bounds):
            x = Polynomial.variable(variables, name)
            cons.append((x - lo) * (hi - x))
        return cls(variables, tuple(cons) + tuple(extra), None, tuple(bounds))

    @classmethod
    def ball(cls, variables: Sequence[str], center: Sequence[float], radius: float, extra=()) -> "SemialgebraicSet":
        variables = tuple(variables)
        g = Polynomial.constant(variables, radius**2)
        for name, c in zip(variables, center):
            g = g - (Polynomial.variable(variables, name) - c) ** 2
        bounds = tuple((c - radius, c + radius) for c in center)
        return cls(variables, (g,) + tuple(extra), None, bounds)

    def bounding_box(self) -> tuple[tuple[float, float], ...] | None:
        boxes = []
        if self.bounds is not None:
            boxes.append(self.bounds)
        if self.ball_radius is not None:
            r = self.ball_radius
            boxes.append(tuple((-r, r) for _ in self.variables))
        if not boxes:
            return None
        lo = np.max([[b[0] for b in box] for box in boxes], axis=0)
        hi = np.min([[b[1] for b in box] for box in boxes], axis=0)
        return tuple((float(a), float(b)) for a, b in zip(lo, hi))

    def relaxation_constraints(self) -> tuple[Polynomial, ...]:
        cons = list(self.constraints)
        if self.ball_radius is not None:
            g = Polynomial.constant(self.variables, self.ball_radius**2)
            for name in self.variables:
                g = g - Polynomial.variable(self.variables, name) ** 2
            cons.append(g)
        return tuple(cons)

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        """Boolean mask over a stack of points ``(..., n)``."""
        x = np.asarray(points, dtype=float)
        ok = np.ones(x.shape[:-1], dtype=bool)
        for g in self.relaxation_constraints():
            ok &= np.asarray(g.evaluate(x)) >= -tol
        return ok


# ---------------------------------------------------------------------------
# Noise
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseLaw:
    """Sampling law for a scalar discrete-time parameter.

    kind ``"finite"``: ``support`` and ``probabilities``; ``"uniform"``:
    ``low``/``high``; ``"gaussian"``: ``mean``/``std``.
    """

    kind: str
    params: tuple[tuple[str, object], ...]

    @classmethod
    def finite(cls, support, probabilities):
        p = np.asarray(probabilities, float)
        if np.any(p < 0) or not math.isclose(p.sum(), 1.0, abs_tol=1e-12):
            raise ModelError("finite law probabilities must be nonnegative and sum to 1")
        return cls("finite", (("support", tuple(map(float, support))), ("probabilities", tuple(map(float, p)))))

    @classmethod
    def uniform(cls, low, high):
        if not high > low:
            raise ModelError("uniform law needs high > low")
        return cls("uniform", (("low", float(low)), ("high", float(high))))

    @classmethod
    def gaussian(cls, mean, std):
        if std < 0:
            raise ModelError("gaussian std must be nonnegative")
        return cls("gaussian", (("mean", float(mean)), ("std", float(std))))

    def __getitem__(self, key):
        return dict(self.params)[key]

    def moment(self, j: int) -> float:
        if self.kind == "finite":
            return float(np.dot(self["probabilities"], np.asarray(self["support"]) ** j))
        if self.kind == "uniform":
            a, b = self["low"], self["high"]
            return (b ** (j + 1) - a ** (j + 1)) / ((j + 1) * (b - a))
        if self.kind == "gaussian":
            mu, sd = self["mean"], self["std"]
            m = [1.0, mu]
            for i in range(2, j + 1):
                m.append(mu * m[i - 1] + (i - 1) * sd**2 * m[i - 2])
            return m[j]
        raise ModelError(f"unknown noise law {self.kind!r}")

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.kind == "finite":
            return rng.choice(np.asarray(self["support"]), size=size, p=np.asarray(self["probabilities"]))
        if self.kind == "uniform":
            return rng.uniform(self["low"], self["high"], size=size)
        return rng.normal(self["mean"], self["std"], size=size)


@dataclass(frozen=True)
class NoiseMoments:
    """Moments ``E[lam^j]`` for ``j = 0..D`` of a scalar noise parameter.

    With a ``law`` attached, moments beyond ``D`` are computed from the law on
    demand; without one, asking for them raises
    :class:`InsufficientMomentsError`.
    """

    moments: tuple[float, ...]
    law: NoiseLaw | None = None

    def __post_init__(self):
        object.__setattr__(self, "moments", tuple(float(m) for m in self.moments))
        if not self.moments or not math.isclose(self.moments[0], 1.0, abs_tol=1e-12):
            raise ModelError("noise moments must start with m0 = 1")
        if not self.hankel_psd():
            raise ModelError("noise moments do not form a valid moment sequence (Hankel matrix not PSD)")
        if self.law is not None:
            for j, m in enumerate(self.moments):
                ref = self.law.moment(j)
                if abs(ref - m) > 1e-9 * max(1.0, abs(ref)):
                    raise ModelError(f"noise moment m{j}={m} disagrees with {self.law.kind} law value {ref}")

    @classmethod
    def from_law(cls, law: NoiseLaw, degree: int) -> "NoiseMoments":
        return cls(tuple(law.moment(j) for j in range(degree + 1)), law)

    @property
    def max_degree(self) -> int:
        return len(self.moments) - 1

    def get(self, j: int) -> float:
        if j <= self.max_degree:
            return self.moments[j]
        if self.law is not None:
            return self.law.moment(j)
        raise InsufficientMomentsError(f"noise moment of order {j} requested but only {self.max_degree} given")

    def hankel_psd(self, tol: float = 1e-10) -> bool:
        d = self.max_degree // 2
        H = np.array([[self.moments[i + j] for j in range(d + 1)] for i in range(d + 1)])
        scale = max(1.0, np.abs(H).max())
        return bool(np.linalg.eigvalsh(H).min() >= -tol * scale)


# ---------------------------------------------------------------------------
# Dynamics and generators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dynamics:
    """Continuous SDE ``dx = f dt + g dW`` or discrete map ``x+ = f(t, x, lam)``.

    Continuous polynomials are over ``("t", *states)``; discrete updates are
    over ``("t", *states, *noise_names)``.  ``diffusion`` is an ``n x w``
    nested tuple (``w`` Wiener channels), possibly empty.
    """

    kind: str
    states: tuple[str, ...]
    drift: tuple[Polynomial, ...] = ()
    diffusion: tuple[tuple[Polynomial, ...], ...] = ()
    update: tuple[Polynomial, ...] = ()
    noise: tuple[NoiseMoments, ...] = ()
    noise_names: tuple[str, ...] = ()
    dt: float | None = None

    def __post_init__(self):
        if self.kind not in ("continuous", "discrete"):
            raise ModelError(f"unknown dynamics kind {self.kind!r}")
        n = len(self.states)
        if self.kind == "continuous":
            if len(self.drift) != n:
                raise ModelError(f"drift has {len(self.drift)} components for {n} states")
            for row in self.diffusion:
                if len(row) != len(self.diffusion[0]):
                    raise ModelError("diffusion rows must have equal length")
            if self.diffusion and len(self.diffusion) != n:
                raise ModelError(f"diffusion has {len(self.diffusion)} rows for {n} states")
            for q in self.drift + tuple(g for row in self.diffusion for g in row):
                if q.variables != self.base_variables:
                    raise ModelError(f"dynamics polynomial {q} is not over {self.base_variables}")
        else:
            if len(self.update) != n:
                raise ModelError(f"update has {len(self.update)} components for {n} states")
            if len(self.noise) != len(self.noise_names):
                raise ModelError("one NoiseMoments entry is needed per noise variable")
            if self.dt is None or self.dt <= 0:
                raise ModelError("discrete dynamics need a positive dt")
            for q in self.update:
                if q.variables != self.base_variables:
                    raise ModelError(f"update polynomial {q} is not over {self.base_variables}")

    @classmethod
    def sde(cls, states, drift, diffusion=()):
        return cls("continuous", tuple(states), tuple(drift), tuple(tuple(r) for r in diffusion))

    @classmethod
    def discrete(cls, states, update, dt, noise=(), noise_names=()):
        return cls("discrete", tuple(states), update=tuple(update), noise=tuple(noise),
                   noise_names=tuple(noise_names), dt=float(dt))

    @property
    def base_variables(self) -> tuple[str, ...]:
        if self.kind == "continuous":
            return (T,) + self.states
        return (T,) + self.states + self.noise_names

    @property
    def n(self) -> int:
        return len(self.states)

    @property
    def channels(self) -> int:
        return len(self.diffusion[0]) if self.diffusion else 0

    def is_deterministic(self) -> bool:
        if self.kind == "continuous":
            return all(g.is_zero() for row in self.diffusion for g in row)
        for q in self.update:
            for name in self.noise_names:
                if q.degree_in(name) > 0:
                    return False
        return True

    def max_noise_degree(self) -> int:
        if self.kind != "discrete":
            return 0
        return max((q.degree_in(name) for q in self.update for name in self.noise_names), default=0)


class AugmentedGenerator:
    """Applies the generator to polynomials over ``vars = (s?, t, *states)``.

    The stopping-time coordinate ``s`` is optional and is treated as a
    constant.  Images of monomials are cached.
    """

    def __init__(self, dyn: Dynamics, variables: Sequence[str]):
        self.dyn = dyn
        self.vars = tuple(variables)
        if T not in self.vars or any(x not in self.vars for x in dyn.states):
            raise ModelError(f"variables {self.vars} must contain t and all states")
        extra = set(self.vars) - {S, T, *dyn.states}
        if extra:
            raise ModelError(f"unexpected variables {sorted(extra)}")
        self._cache: dict[tuple, Polynomial] = {}
        if dyn.kind == "continuous":
            self._drift = [f.embed(self.vars) for f in dyn.drift]
            # diffusion covariance g g^T
            self._cov = {}
            w = dyn.channels
            for i in range(dyn.n):
                for j in range(dyn.n):
                    acc = Polynomial(self.vars)
                    for c in range(w):
                        acc = acc + dyn.diffusion[i][c].embed(self.vars) * dyn.diffusion[j][c].embed(self.vars)
                    if not acc.is_zero():
                        self._cov[i, j] = acc
        else:
            self._ext = self.vars + dyn.noise_names
            self._update = [f.embed(self._ext) for f in dyn.update]
            self._tshift = Polynomial.variable(self._ext, T) + dyn.dt
            self._powcache: dict[tuple[int, int], Polynomial] = {}

    def __call__(self, v: Polynomial) -> Polynomial:
        if v.variables != self.vars:
            raise ModelError(f"test function must be over {self.vars}, got {v.variables}")
        out: dict = {}
        for alpha, c in v.terms.items():
            for beta, d in self.monomial(alpha).terms.items():
                out[beta] = out.get(beta, 0.0) + c * d
        return Polynomial(self.vars, out)

    def monomial(self, alpha) -> Polynomial:
        alpha = tuple(alpha)
        img = self._cache.get(alpha)
        if img is None:
            img = self._continuous(alpha) if self.dyn.kind == "continuous" else self._discrete(alpha)
            self._cache[alpha] = img
        return img

    def _continuous(self, alpha) -> Polynomial:
        v = Polynomial.monomial(self.vars, alpha)
        out = v.partial(T)
        for i, name in enumerate(self.dyn.states):
            if alpha[self.vars.index(name)]:
                out = out + self._drift[i] * v.partial(name)
        for (i, j), cij in self._cov.items():
            xi, xj = self.dyn.states[i], self.dyn.states[j]
            if i == j:
                d2 = v.partial(xi, 2)
            else:
                d2 = v.partial(xi).partial(xj)
            if not d2.is_zero():
                out = out + (cij * d2).scale(0.5)
        return out

    def _discrete(self, alpha) -> Polynomial:
        dyn = self.dyn
        ext = self._ext
        term = Polynomial.constant(ext, 1.0)
        rest = [0] * len(ext)
        for pos, name in enumerate(self.vars):
            e = alpha[pos]
            if e == 0:
                continue
            if name == T:
                term = term * self._pow(-1, e)
            elif name in dyn.states:
                term = term * self._pow(dyn.states.index(name), e)
            else:
                rest[pos] = e
        term = term * Polynomial.monomial(ext, tuple(rest))
        # E over independent noise components, lam_j^e -> m_j[e]
        nv = len(self.vars)
        out: dict = {}
        for beta, c in term.terms.items():
            w = c
            for j, nm in enumerate(dyn.noise):
                e = beta[nv + j]
                if e:
                    w *= nm.get(e)
            key = beta[:nv]
            out[key] = out.get(key, 0.0) + w
        expected = Polynomial(self.vars, out)
        v = Polynomial.monomial(self.vars, alpha)
        return (expected - v).scale(1.0 / dyn.dt)

    def _pow(self, i: int, e: int) -> Polynomial:
        key = (i, e)
        if key not in self._powcache:
            base = self._tshift if i < 0 else self._update[i]
            self._powcache[key] = base**e
        return self._powcache[key]


def apply_generator(dyn: Dynamics, v: Polynomial) -> Polynomial:
    """Generator image of ``v`` over ``("t", *states)``."""
    return AugmentedGenerator(dyn, (T,) + dyn.states)(v)


def apply_augmented_generator(dyn: Dynamics, v: Polynomial) -> Polynomial:
    """Generator image of ``v`` over ``("s", "t", *states)`` with ``s`` held constant."""
    return AugmentedGenerator(dyn, (S, T) + dyn.states)(v)


def dynamics_degree(dyn: Dynamics, k: int, generator: AugmentedGenerator | None = None) -> int:
    """Smallest half-degree covering generator images of degree-``2k`` test functions.

    ``s`` is constant under the generator, so scanning monomials in
    ``(t, x)`` is enough.
    """
    if k < 1:
        raise ModelError("relaxation order k must be >= 1")
    gen = generator
    if gen is None or S in gen.vars:
        gen = AugmentedGenerator(dyn, (T,) + dyn.states)
    top = 0
    for alpha in monomials(len(gen.vars), 2 * k):
        top = max(top, gen.monomial(alpha).degree())
    return max(k, math.ceil(top / 2))


# ---------------------------------------------------------------------------
# Risk problem
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Risk:
    kind: str = "mean"
    epsilon: float | None = None

    @classmethod
    def mean(cls):
        return cls("mean")

    @classmethod
    def es(cls, epsilon: float):
        return cls("es", float(epsilon))

    def __str__(self):
        return "mean" if self.kind == "mean" else f"es(eps={self.epsilon:g})"


@dataclass(frozen=True)
class RiskProblem:
    """Time-windowed risk instance: sup over stopping time and initial state."""

    state_set: SemialgebraicSet
    initial_set: SemialgebraicSet
    horizon: float
    window: float
    cost: Polynomial
    dynamics: Dynamics
    risk: Risk = field(default_factory=Risk)
    name: str = ""

    @property
    def states(self) -> tuple[str, ...]:
        return self.dynamics.states

    @property
    def n(self) -> int:
        return self.dynamics.n

    def with_risk(self, risk: Risk) -> "RiskProblem":
        return RiskProblem(self.state_set, self.initial_set, self.horizon, self.window,
                           self.cost, self.dynamics, risk, self.name)

    @cached_property
    def fingerprint(self) -> str:
        import hashlib

        parts = [self.name, repr(self.horizon), repr(self.window), self.cost.render(), str(self.risk),
                 self.dynamics.kind, repr(self.dynamics.dt), ",".join(self.states)]
        for st in (self.state_set, self.initial_set):
            parts += [g.render() for g in st.constraints] + [repr(st.ball_radius), repr(st.bounds)]
        dyn = self.dynamics
        parts += [q.render() for q in dyn.drift + dyn.update]
        parts += [g.render() for row in dyn.diffusion for g in row]
        parts += [repr(nm.moments) for nm in dyn.noise]
        return hashlib.sha256("\x1f".join(parts).encode()).hexdigest()[:16]


def interval_range(poly: Polynomial, box: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """Outer enclosure of ``poly`` over an axis-aligned box by interval arithmetic."""
    lo_total = hi_total = 0.0
    for alpha, c in poly.terms.items():
        lo, hi = 1.0, 1.0
        for e, (a, b) in zip(alpha, box):
            if e == 0:
                continue
            if e % 2 == 0 and a < 0 < b:
                pl, ph = 0.0, max(a**e, b**e)
            else:
                pl, ph = sorted((a**e, b**e))
            cands = (lo * pl, lo * ph, hi * pl, hi * ph)
            lo, hi = min(cands), max(cands)
        lo, hi = sorted((c * lo, c * hi))
        lo_total += lo
        hi_total += hi
    return lo_total, hi_total


def cost_range(problem: RiskProblem) -> tuple[float, float]:
    """Conservative ``(p_min, p_max)`` of the cost over the state set."""
    box = problem.state_set.bounding_box()
    if box is None:
        raise ModelError("state set has neither box bounds nor a ball radius; cost range is unbounded")
    return interval_range(problem.cost, box)


@dataclass(frozen=True)
class Diagnostic:
    level: str  # "error" | "warning"
    code: str
    message: str

    def __str__(self):
        return f"{self.level}[{self.code}]: {self.message}"


def validate_problem(problem: RiskProblem, k_max: int | None = None) -> list[Diagnostic]:
    """Check every machine-checkable assumption; never raises."""
    out: list[Diagnostic] = []

    def err(code, msg):
        out.append(Diagnostic("error", code, msg))

    def warn(code, msg):
        out.append(Diagnostic("warning", code, msg))

    T_, h = problem.horizon, problem.window
    if not h > 0:
        err("window", "window must be positive")
    if not T_ > 0:
        err("horizon", "horizon T must be positive")
    if h > T_:
        err("window", f"window h={h} exceeds horizon T={T_}")
    for label, st in (("state set X", problem.state_set), ("initial set X0", problem.initial_set)):
        if st.bounding_box() is None:
            err("A1", f"{label} has no box bounds or ball radius; compactness (A1/A9) cannot be ensured")
        if st.variables != problem.states:
            err("variables", f"{label} is over {st.variables}, expected {problem.states}")
    if problem.cost.variables != problem.states:
        err("A7", f"cost must be a polynomial in the state variables {problem.states} only")
    dyn = problem.dynamics
    if dyn.kind == "discrete":
        for label, val in (("horizon", T_), ("window", h)):
            q = val / dyn.dt
            if abs(q - round(q)) > 1e-9 * max(1.0, q):
                err("grid", f"{label} {val} is not an integer multiple of dt={dyn.dt}")
        for name, nm in zip(dyn.noise_names, dyn.noise):
            if not nm.hankel_psd():
                err("noise", f"noise moments of {name} are not a valid moment sequence")
        if k_max is not None and dyn.noise:
            need = dyn.max_noise_degree() * 2 * k_max
            for name, nm in zip(dyn.noise_names, dyn.noise):
                if nm.law is None and nm.max_degree < need:
                    err("noise", f"noise {name} has moments up to {nm.max_degree}, relaxation order {k_max} needs {need}")
    if problem.risk.kind == "es":
        eps = problem.risk.epsilon
        if eps is None or not 0 < eps < 1:
            err("epsilon", f"ES level must lie in (0, 1), got {eps}")
    elif problem.risk.kind != "mean":
        err("risk", f"unknown risk kind {problem.risk.kind!r}")
    x0box, xbox = problem.initial_set.bounding_box(), problem.state_set.bounding_box()
    if x0box and xbox and any(a0 < a - 1e-12 or b0 > b + 1e-12 for (a0, b0), (a, b) in zip(x0box, xbox)):
        warn("X0", "bounding box of X0 is not contained in that of X")
    return out


__all__ = [
    "AugmentedGenerator", "Diagnostic", "Dynamics", "InsufficientMomentsError", "ModelError", "NoiseLaw",
    "NoiseMoments", "Risk", "RiskProblem", "SemialgebraicSet", "apply_augmented_generator", "apply_generator",
    "cost_range", "dynamics_degree", "interval_range", "validate_problem", "PolynomialError",
]
