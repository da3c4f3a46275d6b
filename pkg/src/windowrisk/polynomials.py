"""Sparse multivariate polynomials over named variables.

A :class:`Polynomial` is a map from exponent tuples to float coefficients,
tied to an ordered tuple of variable names.  Zero coefficients are never
stored.  Monomials are ordered graded-lexicographically everywhere in the
package (see :func:`grlex_key`), which fixes the layout of moment vectors.
"""

from __future__ import annotations

import math
import re
from itertools import combinations_with_replacement
from types import MappingProxyType
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

Exponent = tuple[int, ...]

_IDENT = re.compile(r"[a-zA-Z][a-zA-Z0-9_]*")
_NUMBER = re.compile(r"(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?")


class PolynomialError(ValueError):
    """Raised for malformed polynomial text or incompatible operands."""

    def __init__(self, message: str, position: int | None = None):
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)
        self.position = position


def grlex_key(alpha: Exponent) -> tuple:
    """Sort key for graded-lex order: total degree first, then x1 powers descending."""
    return (sum(alpha), tuple(-a for a in alpha))


def monomials(nvars: int, degree: int) -> list[Exponent]:
    """All exponents of total degree <= ``degree`` in graded-lex order."""
    out = []
    for d in range(degree + 1):
        block = []
        for combo in combinations_with_replacement(range(nvars), d):
            alpha = [0] * nvars
            for i in combo:
                alpha[i] += 1
            block.append(tuple(alpha))
        block.sort(key=grlex_key)
        out.extend(block)
    return out


class Polynomial:
    """Immutable sparse polynomial with float coefficients.

    Parameters
    ----------
    variables : sequence of str
        Ordered ambient variable names.
    terms : mapping, optional
        ``{exponent_tuple: coefficient}``; zero entries are dropped.
    """

    __slots__ = ("_vars", "_terms", "_hash")

    def __init__(self, variables: Sequence[str], terms: Mapping[Exponent, float] | None = None):
        self._vars = tuple(variables)
        n = len(self._vars)
        clean = {}
        for alpha, c in (terms or {}).items():
            alpha = tuple(int(a) for a in alpha)
            if len(alpha) != n:
                raise PolynomialError(f"exponent {alpha} does not match {n} variables")
            if any(a < 0 for a in alpha):
                raise PolynomialError(f"negative exponent {alpha}")
            c = float(c)
            if c != 0.0:
                clean[alpha] = clean.get(alpha, 0.0) + c
        self._terms = {a: c for a, c in clean.items() if c != 0.0}
        self._hash = None

    # -- construction helpers -------------------------------------------------

    @classmethod
    def constant(cls, variables: Sequence[str], value: float) -> "Polynomial":
        return cls(variables, {(0,) * len(variables): value})

    @classmethod
    def variable(cls, variables: Sequence[str], name: str) -> "Polynomial":
        variables = tuple(variables)
        if name not in variables:
            raise PolynomialError(f"unknown variable {name!r}")
        alpha = [0] * len(variables)
        alpha[variables.index(name)] = 1
        return cls(variables, {tuple(alpha): 1.0})

    @classmethod
    def monomial(cls, variables: Sequence[str], alpha: Exponent, coef: float = 1.0) -> "Polynomial":
        return cls(variables, {tuple(alpha): coef})

    # -- basic accessors ------------------------------------------------------

    @property
    def variables(self) -> tuple[str, ...]:
        return self._vars

    @property
    def terms(self) -> Mapping[Exponent, float]:
        return MappingProxyType(self._terms)

    @property
    def nvars(self) -> int:
        return len(self._vars)

    def degree(self) -> int:
        """Total degree; the zero polynomial has degree 0."""
        return max((sum(a) for a in self._terms), default=0)

    def degree_in(self, name: str) -> int:
        i = self._index(name)
        return max((a[i] for a in self._terms), default=0)

    def is_zero(self) -> bool:
        return not self._terms

    def coefficient(self, alpha: Exponent) -> float:
        return self._terms.get(tuple(alpha), 0.0)

    def items(self) -> Iterator[tuple[Exponent, float]]:
        """Terms in graded-lex order."""
        for alpha in sorted(self._terms, key=grlex_key):
            yield alpha, self._terms[alpha]

    def free_of(self, names: Iterable[str]) -> bool:
        idx = [self._index(n) for n in names]
        return all(a[i] == 0 for a in self._terms for i in idx)

    def _index(self, name: str) -> int:
        try:
            return self._vars.index(name)
        except ValueError:
            raise PolynomialError(f"unknown variable {name!r}") from None

    def _check(self, other: "Polynomial") -> None:
        if self._vars != other._vars:
            raise PolynomialError(f"variable sets differ: {self._vars} vs {other._vars}")

    def _coerce(self, other) -> "Polynomial":
        if isinstance(other, Polynomial):
            self._check(other)
            return other
        if isinstance(other, (int, float, np.floating, np.integer)):
            return Polynomial.constant(self._vars, float(other))
        return NotImplemented

    # -- ring operations ------------------------------------------------------

    def __add__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        out = dict(self._terms)
        for a, c in other._terms.items():
            out[a] = out.get(a, 0.0) + c
        return Polynomial(self._vars, out)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial(self._vars, {a: -c for a, c in self._terms.items()})

    def __sub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            return self.scale(float(other))
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        out: dict[Exponent, float] = {}
        for a, ca in self._terms.items():
            for b, cb in other._terms.items():
                k = tuple(x + y for x, y in zip(a, b))
                out[k] = out.get(k, 0.0) + ca * cb
        return Polynomial(self._vars, out)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            return self.scale(1.0 / float(other))
        return NotImplemented

    def scale(self, factor: float) -> "Polynomial":
        return Polynomial(self._vars, {a: factor * c for a, c in self._terms.items()})

    def __pow__(self, exponent: int):
        if not isinstance(exponent, (int, np.integer)) or exponent < 0:
            raise PolynomialError("power must be a nonnegative integer")
        result = Polynomial.constant(self._vars, 1.0)
        base = self
        e = int(exponent)
        while e:
            if e & 1:
                result = result * base
            e >>= 1
            if e:
                base = base * base
        return result

    def __eq__(self, other):
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self._vars == other._vars and self._terms == other._terms

    def __hash__(self):
        if self._hash is None:
            self._hash = hash((self._vars, frozenset(self._terms.items())))
        return self._hash

    def allclose(self, other: "Polynomial", rtol: float = 1e-12, atol: float = 1e-12) -> bool:
        self._check(other)
        keys = set(self._terms) | set(other._terms)
        return all(
            math.isclose(self.coefficient(k), other.coefficient(k), rel_tol=rtol, abs_tol=atol)
            for k in keys
        )

    # -- calculus and composition --------------------------------------------

    def partial(self, name: str, order: int = 1) -> "Polynomial":
        """Formal partial derivative with respect to ``name``, ``order`` times."""
        if order < 0:
            raise PolynomialError("derivative order must be >= 0")
        i = self._index(name)
        out = {}
        for a, c in self._terms.items():
            if a[i] < order:
                continue
            factor = math.prod(range(a[i] - order + 1, a[i] + 1))
            b = list(a)
            b[i] -= order
            out[tuple(b)] = c * factor
        return Polynomial(self._vars, out)

    def evaluate(self, point) -> float | np.ndarray:
        """Evaluate at one point (length ``nvars``) or a stack of points (``(..., nvars)``)."""
        x = np.asarray(point, dtype=float)
        if x.shape[-1:] != (self.nvars,):
            raise PolynomialError(f"point dimension {x.shape} does not match {self.nvars} variables")
        if not self._terms:
            return 0.0 if x.ndim == 1 else np.zeros(x.shape[:-1])
        exps = np.array(list(self._terms.keys()), dtype=int)
        coefs = np.array(list(self._terms.values()))
        vals = np.prod(x[..., None, :] ** exps, axis=-1)
        out = vals @ coefs
        return float(out) if x.ndim == 1 else out

    __call__ = evaluate

    def substitute(self, name: str, replacement: "Polynomial") -> "Polynomial":
        """Replace variable ``name`` by ``replacement`` (same ambient variables)."""
        self._check(replacement)
        i = self._index(name)
        powers = {0: Polynomial.constant(self._vars, 1.0)}
        out = Polynomial(self._vars)
        for a, c in self._terms.items():
            e = a[i]
            if e not in powers:
                powers[e] = replacement ** e
            rest = list(a)
            rest[i] = 0
            out = out + Polynomial.monomial(self._vars, tuple(rest), c) * powers[e]
        return out

    def substitute_all(self, replacements: Mapping[str, "Polynomial"]) -> "Polynomial":
        """Simultaneous substitution; unlisted variables are left as they are."""
        idx = {self._index(k): v for k, v in replacements.items()}
        for v in idx.values():
            self._check(v)
        cache: dict[tuple[int, int], Polynomial] = {}
        out = Polynomial(self._vars)
        for a, c in self._terms.items():
            rest = list(a)
            term = Polynomial.constant(self._vars, c)
            for i, rep in idx.items():
                if a[i]:
                    key = (i, a[i])
                    if key not in cache:
                        cache[key] = rep ** a[i]
                    term = term * cache[key]
                    rest[i] = 0
            out = out + term * Polynomial.monomial(self._vars, tuple(rest))
        return out

    def embed(self, variables: Sequence[str]) -> "Polynomial":
        """Re-express over a larger (or reordered) variable tuple."""
        variables = tuple(variables)
        pos = []
        for name in self._vars:
            if name not in variables:
                if any(a[self._vars.index(name)] for a in self._terms):
                    raise PolynomialError(f"variable {name!r} missing from target set")
                pos.append(None)
            else:
                pos.append(variables.index(name))
        out = {}
        for a, c in self._terms.items():
            b = [0] * len(variables)
            for e, p in zip(a, pos):
                if p is not None:
                    b[p] += e
            out[tuple(b)] = c
        return Polynomial(variables, out)

    # -- text -----------------------------------------------------------------

    def render(self) -> str:
        """Text form that :func:`parse` maps back to an identical polynomial."""
        if not self._terms:
            return "0"
        parts = []
        for alpha, c in sorted(self._terms.items(), key=lambda kv: grlex_key(kv[0]), reverse=True):
            factors = []
            for name, e in zip(self._vars, alpha):
                if e == 1:
                    factors.append(name)
                elif e > 1:
                    factors.append(f"{name}^{e}")
            mag = abs(c)
            if factors and mag == 1.0:
                body = "*".join(factors)
            else:
                body = "*".join([repr(mag)] + factors)
            sign = "-" if c < 0 else "+"
            parts.append((sign, body))
        first_sign, first = parts[0]
        text = ("-" if first_sign == "-" else "") + first
        for sign, body in parts[1:]:
            text += f" {sign} {body}"
        return text

    def __str__(self):
        return self.render()

    def __repr__(self):
        return f"Polynomial({self._vars}, {self.render()!r})"


def parse(text: str, variables: Sequence[str]) -> Polynomial:
    """Parse polynomial text over ``variables``.

    Grammar: ``expr := term (('+'|'-') term)*``, ``term := factor ('*'? factor)*``,
    ``factor := (number | name | '(' expr ')') ('^' integer)?``.  A leading sign
    is allowed on any term.
    """
    return _Parser(text, tuple(variables)).run()


class _Parser:
    def __init__(self, text: str, variables: tuple[str, ...]):
        self.text = text
        self.vars = variables
        self.pos = 0

    def run(self) -> Polynomial:
        self._skip()
        if self.pos == len(self.text):
            raise PolynomialError("empty expression", 0)
        out = self.expr()
        self._skip()
        if self.pos != len(self.text):
            raise PolynomialError(f"unexpected {self.text[self.pos]!r}", self.pos)
        return out

    def _skip(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def _peek(self) -> str:
        self._skip()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expr(self) -> Polynomial:
        total = Polynomial(self.vars)
        sign = 1.0
        ch = self._peek()
        if ch in "+-":
            sign = -1.0 if ch == "-" else 1.0
            self.pos += 1
        total = total + self.term().scale(sign)
        while True:
            ch = self._peek()
            if ch not in ("+", "-") or ch == "":
                return total
            self.pos += 1
            total = total + self.term().scale(-1.0 if ch == "-" else 1.0)

    def term(self) -> Polynomial:
        out = self.factor()
        while True:
            ch = self._peek()
            if ch == "*":
                self.pos += 1
                out = out * self.factor()
            elif ch == "/":
                self.pos += 1
                start = self.pos
                den = self.factor()
                if den.degree() > 0 or den.is_zero():
                    raise PolynomialError("can only divide by a nonzero constant", start)
                out = out.scale(1.0 / den.coefficient((0,) * len(self.vars)))
            elif ch and (ch.isalnum() or ch in "(."):
                out = out * self.factor()
            else:
                return out

    def factor(self) -> Polynomial:
        ch = self._peek()
        start = self.pos
        if ch == "(":
            self.pos += 1
            inner = self.expr()
            if self._peek() != ")":
                raise PolynomialError("expected ')'", self.pos)
            self.pos += 1
            base = inner
        elif ch and (ch.isdigit() or ch == "."):
            m = _NUMBER.match(self.text, self.pos)
            if not m:
                raise PolynomialError("malformed number", start)
            self.pos = m.end()
            base = Polynomial.constant(self.vars, float(m.group(0)))
        elif ch and ch.isalpha():
            m = _IDENT.match(self.text, self.pos)
            name = m.group(0)
            if name not in self.vars:
                raise PolynomialError(f"unknown variable {name!r}", start)
            self.pos = m.end()
            base = Polynomial.variable(self.vars, name)
        else:
            raise PolynomialError(f"unexpected {ch!r}" if ch else "unexpected end of input", self.pos)
        if self._peek() == "^":
            self.pos += 1
            self._skip()
            m = re.compile(r"\d+").match(self.text, self.pos)
            if not m:
                raise PolynomialError("expected integer exponent", self.pos)
            self.pos = m.end()
            base = base ** int(m.group(0))
        return base
