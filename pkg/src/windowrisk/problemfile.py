"""YAML problem files.

Schema (keys not listed are rejected)::

    name: oscillator
    states: [x1, x2]
    state_set:                   # X
      box: [[-0.5, 2.5], [-2, 1.5]]
      constraints: ["..."]       # optional extra g(x) >= 0
      ball_radius: 3.0           # optional, adds R^2 - |x|^2 >= 0
    initial_set:                 # X0, same keys, or:
      ball: {center: [0, 0.7], radius: 0.1}
    dynamics:
      kind: continuous           # or discrete
      drift: ["...", "..."]      # polynomials in t and states
      diffusion: [["0.1"], ["0"]]   # n rows x w columns, optional
      # discrete only:
      dt: 0.25
      update: ["lam*x1"]         # polynomials in t, states, noise names
      noise:
        - name: lam
          law: {kind: finite, support: [0.5, 1.0], probabilities: [0.5, 0.5]}
          moments: [1, 0.75, 0.625]   # optional when a law is given
    horizon: 5
    window: 1.5
    cost: x2
    risk: {kind: es, epsilon: 0.15}   # or {kind: mean}

Errors are raised as :class:`ProblemFileError` carrying a 1-based line number.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import yaml

from .model import Dynamics, ModelError, NoiseLaw, NoiseMoments, Risk, RiskProblem, SemialgebraicSet
from .polynomials import PolynomialError, parse

BUNDLED = ("twist", "oscillator", "stochastic_oscillator")


class ProblemFileError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = ""):
        where = f"{source}:" if source else ""
        prefix = f"{where}line {line}: " if line is not None else where
        super().__init__(prefix + message)
        self.line = line


class _Reader:
    def __init__(self, source: str):
        self.source = source

    def fail(self, node, msg):
        line = node.start_mark.line + 1 if node is not None else None
        raise ProblemFileError(msg, line, self.source)

    def mapping(self, node, allowed, required=()):
        if not isinstance(node, yaml.MappingNode):
            self.fail(node, "expected a mapping")
        out = {}
        for knode, vnode in node.value:
            key = knode.value
            if key not in allowed:
                self.fail(knode, f"unknown key {key!r}")
            if key in out:
                self.fail(knode, f"duplicate key {key!r}")
            out[key] = vnode
        for key in required:
            if key not in out:
                self.fail(node, f"missing required key {key!r}")
        return out

    def seq(self, node):
        if not isinstance(node, yaml.SequenceNode):
            self.fail(node, "expected a list")
        return list(node.value)

    def scalar(self, node):
        if not isinstance(node, yaml.ScalarNode):
            self.fail(node, "expected a scalar")
        return node.value

    def number(self, node):
        text = self.scalar(node)
        try:
            return float(text)
        except ValueError:
            self.fail(node, f"expected a number, got {text!r}")

    def poly(self, node, variables):
        text = self.scalar(node)
        try:
            return parse(text, variables)
        except PolynomialError as exc:
            self.fail(node, f"bad polynomial {text!r}: {exc}")


def load_problem(path) -> RiskProblem:
    """Load a problem file, or a bundled instance by name (``twist``, ...)."""
    text, source = _read(path)
    return loads_problem(text, source)


def _read(path):
    p = Path(path)
    if p.exists():
        return p.read_text(), str(p)
    name = str(path)
    if name in BUNDLED:
        res = resources.files("windowrisk") / "data" / f"{name}.yaml"
        return res.read_text(), f"<bundled {name}>"
    raise ProblemFileError(f"no such problem file or bundled instance: {path}")


def loads_problem(text: str, source: str = "<string>") -> RiskProblem:
    r = _Reader(source)
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ProblemFileError(str(exc).splitlines()[0], mark.line + 1 if mark else None, source) from None
    if root is None:
        raise ProblemFileError("empty problem file", None, source)
    top = r.mapping(root, {"name", "states", "state_set", "initial_set", "dynamics", "horizon", "window",
                           "cost", "risk"},
                    required=("states", "state_set", "initial_set", "dynamics", "horizon", "window", "cost"))
    states = tuple(r.scalar(n) for n in r.seq(top["states"]))
    if not states or len(set(states)) != len(states) or {"s", "t"} & set(states):
        r.fail(top["states"], "states must be distinct names other than 's' and 't'")
    X = _set(r, top["state_set"], states)
    X0 = _set(r, top["initial_set"], states)
    dyn = _dynamics(r, top["dynamics"], states)
    risk = Risk.mean()
    if "risk" in top:
        rk = r.mapping(top["risk"], {"kind", "epsilon"}, required=("kind",))
        kind = r.scalar(rk["kind"])
        if kind == "mean":
            risk = Risk.mean()
        elif kind == "es":
            if "epsilon" not in rk:
                r.fail(top["risk"], "ES risk needs epsilon")
            risk = Risk.es(r.number(rk["epsilon"]))
        else:
            r.fail(rk["kind"], f"unknown risk kind {kind!r}")
    return RiskProblem(
        state_set=X,
        initial_set=X0,
        horizon=r.number(top["horizon"]),
        window=r.number(top["window"]),
        cost=r.poly(top["cost"], states),
        dynamics=dyn,
        risk=risk,
        name=r.scalar(top["name"]) if "name" in top else "",
    )


def _set(r: _Reader, node, states) -> SemialgebraicSet:
    m = r.mapping(node, {"box", "ball", "constraints", "ball_radius"})
    extra = tuple(r.poly(c, states) for c in r.seq(m["constraints"])) if "constraints" in m else ()
    radius = r.number(m["ball_radius"]) if "ball_radius" in m else None
    try:
        if "box" in m and "ball" in m:
            r.fail(node, "give either box or ball, not both")
        if "box" in m:
            rows = r.seq(m["box"])
            if len(rows) != len(states):
                r.fail(m["box"], f"box needs {len(states)} [lo, hi] pairs")
            bounds = []
            for row in rows:
                pair = r.seq(row)
                if len(pair) != 2:
                    r.fail(row, "box entries are [lo, hi] pairs")
                bounds.append((r.number(pair[0]), r.number(pair[1])))
            st = SemialgebraicSet.box(states, bounds, extra)
        elif "ball" in m:
            b = r.mapping(m["ball"], {"center", "radius"}, required=("center", "radius"))
            center = [r.number(c) for c in r.seq(b["center"])]
            if len(center) != len(states):
                r.fail(b["center"], f"ball center needs {len(states)} coordinates")
            st = SemialgebraicSet.ball(states, center, r.number(b["radius"]), extra)
        else:
            st = SemialgebraicSet(states, extra)
        if radius is not None:
            st = SemialgebraicSet(states, st.constraints, radius, st.bounds)
        return st
    except ModelError as exc:
        r.fail(node, str(exc))


def _dynamics(r: _Reader, node, states) -> Dynamics:
    m = r.mapping(node, {"kind", "drift", "diffusion", "dt", "update", "noise"}, required=("kind",))
    kind = r.scalar(m["kind"])
    try:
        if kind == "continuous":
            tv = ("t",) + states
            if "drift" not in m:
                r.fail(node, "continuous dynamics need drift")
            drift = [r.poly(q, tv) for q in r.seq(m["drift"])]
            if len(drift) != len(states):
                r.fail(m["drift"], f"drift needs {len(states)} components")
            diff = []
            if "diffusion" in m:
                rows = r.seq(m["diffusion"])
                if len(rows) != len(states):
                    r.fail(m["diffusion"], f"diffusion needs {len(states)} rows")
                diff = [[r.poly(q, tv) for q in r.seq(row)] for row in rows]
            return Dynamics.sde(states, drift, diff)
        if kind == "discrete":
            if "dt" not in m or "update" not in m:
                r.fail(node, "discrete dynamics need dt and update")
            names, noise = [], []
            for item in r.seq(m["noise"]) if "noise" in m else []:
                nm = r.mapping(item, {"name", "law", "moments"}, required=("name",))
                names.append(r.scalar(nm["name"]))
                law = _law(r, nm["law"]) if "law" in nm else None
                if "moments" in nm:
                    moms = [r.number(v) for v in r.seq(nm["moments"])]
                    try:
                        noise.append(NoiseMoments(tuple(moms), law))
                    except ModelError as exc:
                        r.fail(nm["moments"], str(exc))
                elif law is not None:
                    noise.append(NoiseMoments.from_law(law, 2))
                else:
                    r.fail(item, "noise entries need moments or a law")
            tv = ("t",) + states + tuple(names)
            update = [r.poly(q, tv) for q in r.seq(m["update"])]
            if len(update) != len(states):
                r.fail(m["update"], f"update needs {len(states)} components")
            return Dynamics.discrete(states, update, r.number(m["dt"]), noise, names)
        r.fail(m["kind"], f"unknown dynamics kind {kind!r}")
    except ModelError as exc:
        r.fail(node, str(exc))


def _law(r: _Reader, node) -> NoiseLaw:
    m = r.mapping(node, {"kind", "support", "probabilities", "low", "high", "mean", "std"}, required=("kind",))
    kind = r.scalar(m["kind"])
    try:
        if kind == "finite":
            return NoiseLaw.finite([r.number(v) for v in r.seq(m["support"])],
                                   [r.number(v) for v in r.seq(m["probabilities"])])
        if kind == "uniform":
            return NoiseLaw.uniform(r.number(m["low"]), r.number(m["high"]))
        if kind == "gaussian":
            return NoiseLaw.gaussian(r.number(m["mean"]), r.number(m["std"]))
    except KeyError as exc:
        r.fail(node, f"{kind} law is missing {exc.args[0]!r}")
    except ModelError as exc:
        r.fail(node, str(exc))
    r.fail(m["kind"], f"unknown noise law {kind!r}")
