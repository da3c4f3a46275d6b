"""Trajectory sampling and empirical time-windowed statistics.

Paths start uniformly in ``X0`` (rejection sampling in its bounding box) and
follow Euler-Maruyama (continuous time) or the exact update (discrete time)
until they leave ``X`` or reach ``T``.  Each path has its own counter-based
random stream keyed by ``(seed, path index)``, so a path does not depend on
how many others are drawn.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .model import RiskProblem
from .polynomials import Polynomial


class SamplingError(ValueError):
    pass


@dataclass
class TrajectoryBatch:
    """Sampled paths on a common time grid.

    ``states[i, j]`` is path ``i`` at ``times[j]``; entries from
    ``stop_index[i]`` on are NaN.  ``stop_index[i]`` counts the leading
    states inside ``X`` (``len(times)`` when the path reached ``T``).
    """

    dt: float
    times: np.ndarray
    states: np.ndarray
    stop_index: np.ndarray
    seed: int
    state_names: tuple[str, ...]
    kind: str = "continuous"

    @property
    def count(self) -> int:
        return self.states.shape[0]

    @property
    def paths(self) -> list[dict]:
        return [{"states": self.states[i, : self.stop_index[i]], "stop_index": int(self.stop_index[i])}
                for i in range(self.count)]

    @property
    def initial_states(self) -> np.ndarray:
        return self.states[:, 0]

    def survival_fraction(self, t: float) -> float:
        """Fraction of paths still inside ``X`` at time ``t``."""
        j = int(round(t / self.dt))
        return float(np.mean(self.stop_index > j))

    def to_csv(self, path=None, p: Polynomial | None = None) -> str:
        """Per-path traces as CSV (``path, index, t, states..., [p]``)."""
        buf = io.StringIO()
        buf.write(f"# seed={self.seed} count={self.count} dt={self.dt!r} kind={self.kind}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["path", "index", "t", *self.state_names] + (["p"] if p is not None else []))
        for i in range(self.count):
            s = self.stop_index[i]
            X = self.states[i, :s]
            pv = p.evaluate(X) if p is not None and s else None
            for j in range(s):
                row = [i, j, repr(float(self.times[j]))] + [repr(float(v)) for v in X[j]]
                if pv is not None:
                    row.append(repr(float(pv[j])))
                w.writerow(row)
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def path_rng(seed: int, index: int) -> np.random.Generator:
    """Independent Philox stream for one path."""
    key = (int(seed) & (2**64 - 1)) | (int(index) << 64)
    return np.random.Generator(np.random.Philox(key=key))


def _sample_initial(problem: RiskProblem, rng: np.random.Generator, budget: int) -> np.ndarray:
    box = problem.initial_set.bounding_box()
    if box is None:
        raise SamplingError("initial set needs box bounds or a ball radius to be sampled")
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    for _ in range(budget):
        x = lo + (hi - lo) * rng.random(lo.size)
        if problem.initial_set.contains(x):
            return x
    raise SamplingError(f"rejection sampling of the initial set failed after {budget} attempts")


def simulate(problem: RiskProblem, count: int, dt: float | None = None, seed: int = 0,
             budget: int = 10000) -> TrajectoryBatch:
    """Sample ``count`` paths of ``problem`` with step ``dt`` (``Delta t`` for maps)."""
    if count < 1:
        raise SamplingError("count must be positive")
    dyn = problem.dynamics
    if dyn.kind == "discrete":
        dt = dyn.dt
    if dt is None or dt <= 0:
        raise SamplingError("dt must be positive")
    nsteps = int(round(problem.horizon / dt))
    if abs(nsteps * dt - problem.horizon) > 1e-9 * max(1.0, problem.horizon):
        raise SamplingError(f"horizon {problem.horizon} is not a multiple of dt {dt}")
    n = problem.n
    times = np.arange(nsteps + 1) * dt
    x0 = np.empty((count, n))
    if dyn.kind == "continuous":
        w = dyn.channels
        noise = np.zeros((count, nsteps, w))
    else:
        laws = []
        for name, nm in zip(dyn.noise_names, dyn.noise):
            if nm.law is None:
                raise SamplingError(f"noise {name!r} has moments but no sampling law")
            laws.append(nm.law)
        noise = np.zeros((count, nsteps, len(laws)))
    for i in range(count):
        rng = path_rng(seed, i)
        x0[i] = _sample_initial(problem, rng, budget)
        if dyn.kind == "continuous":
            if w and not dyn.is_deterministic():
                noise[i] = rng.standard_normal((nsteps, w))
        else:
            for j, law in enumerate(laws):
                noise[i, :, j] = law.sample(rng, nsteps)

    states = np.full((count, nsteps + 1, n), np.nan)
    stop = np.full(count, nsteps + 1, dtype=np.int64)
    X = problem.state_set
    x = x0.copy()
    alive = X.contains(x)
    stop[~alive] = 0
    states[alive, 0] = x[alive]
    sq = np.sqrt(dt)
    drift = dyn.drift
    diff = dyn.diffusion
    for j in range(nsteps):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        xa = x[idx]
        tx = np.column_stack([np.full(idx.size, times[j]), xa])
        if dyn.kind == "continuous":
            new = xa + dt * np.column_stack([np.broadcast_to(f.evaluate(tx), idx.size) for f in drift])
            if not dyn.is_deterministic():
                xi = noise[idx, j]
                for r in range(n):
                    for c in range(dyn.channels):
                        g = diff[r][c]
                        if not g.is_zero():
                            new[:, r] += np.broadcast_to(g.evaluate(tx), idx.size) * sq * xi[:, c]
        else:
            txl = np.column_stack([tx, noise[idx, j]]) if noise.shape[2] else tx
            new = np.column_stack([np.broadcast_to(f.evaluate(txl), idx.size) for f in dyn.update])
        ok = X.contains(new) & np.all(np.isfinite(new), axis=1)
        x[idx] = new
        states[idx[ok], j + 1] = new[ok]
        gone = idx[~ok]
        stop[gone] = j + 1
        alive[gone] = False
    return TrajectoryBatch(dt, times, states, stop, int(seed), problem.states, dyn.kind)


# ---------------------------------------------------------------------------
# Windowed statistics
# ---------------------------------------------------------------------------


@dataclass
class WindowStatSeries:
    """A statistic of the windowed time average, indexed by window end time."""

    times: np.ndarray
    values: np.ndarray
    kind: str
    reduction: str
    epsilon: float | None = None
    per_path: np.ndarray | None = field(default=None, repr=False)

    @property
    def sup(self) -> float:
        """Largest finite value (NaN when no window is valid)."""
        v = self.values[np.isfinite(self.values)]
        return float(v.max()) if v.size else float("nan")

    @property
    def argsup(self) -> float:
        v = np.where(np.isfinite(self.values), self.values, -np.inf)
        return float(self.times[int(np.argmax(v))]) if np.isfinite(v).any() else float("nan")

    def to_csv(self, path=None, header: dict | None = None) -> str:
        buf = io.StringIO()
        meta = {"kind": self.kind, "reduction": self.reduction}
        if self.epsilon is not None:
            meta["epsilon"] = self.epsilon
        meta.update(header or {})
        buf.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "value"])
        for t, v in zip(self.times, self.values):
            w.writerow([repr(float(t)), repr(float(v)) if np.isfinite(v) else "nan"])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def _window_setup(batch: TrajectoryBatch, h: float):
    m = int(round(h / batch.dt))
    if m < 1 or abs(m * batch.dt - h) > 1e-9 * max(1.0, h):
        raise SamplingError(f"window {h} is not a positive multiple of dt {batch.dt}")
    L = batch.times.size
    if m > L - 1:
        raise SamplingError(f"window {h} is longer than the horizon {batch.times[-1]}")
    ends = np.arange(m, L)
    # a window ending at index e is usable when states 0..e all lie in X
    valid = ends[None, :] <= batch.stop_index[:, None] - 1
    return m, ends, valid


def _p_values(batch: TrajectoryBatch, p: Polynomial) -> np.ndarray:
    if p.variables != batch.state_names:
        p = p.embed(batch.state_names)
    return np.asarray(p.evaluate(batch.states))


def windowed_averages(batch: TrajectoryBatch, p: Polynomial, h: float):
    """Per-path windowed averages ``(count, n_windows)`` (NaN when invalid) and end times."""
    m, ends, valid = _window_setup(batch, h)
    P = np.nan_to_num(_p_values(batch, p))
    dt = batch.dt
    if batch.kind == "continuous":
        incr = dt * (P[:, 1:] + P[:, :-1]) / 2
    else:
        incr = dt * P[:, :-1]
    C = np.concatenate([np.zeros((P.shape[0], 1)), np.cumsum(incr, axis=1)], axis=1)
    W = (C[:, ends] - C[:, ends - m]) / h
    W[~valid] = np.nan
    return batch.times[ends], W


def _reduce(W, reduction):
    with np.errstate(all="ignore"):
        ok = np.isfinite(W)
        cnt = ok.sum(axis=0)
        if reduction == "mean":
            out = np.where(ok, W, 0.0).sum(axis=0) / np.maximum(cnt, 1)
        elif reduction == "max":
            out = np.where(ok, W, -np.inf).max(axis=0)
        else:
            raise ValueError(f"unknown reduction {reduction!r}")
    return np.where(cnt > 0, out, np.nan)


def windowed_mean_series(batch: TrajectoryBatch, p: Polynomial, h: float, reduction: str = "max") -> WindowStatSeries:
    """Windowed time average of ``p`` reduced across paths (``"mean"`` or ``"max"``)."""
    times, W = windowed_averages(batch, p, h)
    return WindowStatSeries(times, _reduce(W, reduction), "mean", reduction, None, W)


def expected_shortfall(values, weights, epsilon: float) -> float:
    """Average of the top ``epsilon`` weighted mass (sorted-tail formula).

    Equals ``min_l l + E[(V - l)_+] / epsilon`` for a discrete distribution.
    """
    v = np.asarray(values, float).ravel()
    w = np.asarray(weights, float).ravel()
    if v.size == 0:
        raise SamplingError("expected shortfall of an empty sample")
    if not 0 < epsilon <= 1:
        raise SamplingError("epsilon must lie in (0, 1]")
    if np.any(w < 0) or w.sum() <= 0:
        raise SamplingError("weights must be nonnegative and not all zero")
    w = w / w.sum()
    order = np.argsort(-v, kind="stable")
    v, w = v[order], w[order]
    before = np.concatenate([[0.0], np.cumsum(w)[:-1]])
    take = np.clip(epsilon - before, 0.0, w)
    return float(take @ v / epsilon)


def _window_samples(batch, P, m, e):
    """Values and time weights of the samples inside the window ending at ``e``."""
    if batch.kind == "continuous":
        w = np.ones(m + 1)
        w[0] = w[-1] = 0.5
        return P[..., e - m: e + 1], w
    return P[..., e - m: e], np.ones(m)


def windowed_es_series(batch: TrajectoryBatch, p: Polynomial, h: float, epsilon: float,
                       reduction: str = "max") -> WindowStatSeries:
    """Windowed ES of ``p`` over time-weighted samples.

    ``reduction="max"`` or ``"mean"`` first computes the ES along each path
    and then reduces across paths; ``"pooled"`` forms one distribution per
    window from all valid paths (each path carrying equal mass).
    """
    if not 0 < epsilon <= 1:
        raise SamplingError("epsilon must lie in (0, 1]")
    m, ends, valid = _window_setup(batch, h)
    P = _p_values(batch, p)
    times = batch.times[ends]
    if reduction == "pooled":
        vals = np.full(ends.size, np.nan)
        for k, e in enumerate(ends):
            rows = np.flatnonzero(valid[:, k])
            if rows.size:
                v, w = _window_samples(batch, P[rows], m, e)
                vals[k] = expected_shortfall(v, np.broadcast_to(w, v.shape), epsilon)
        return WindowStatSeries(times, vals, "es", reduction, epsilon, None)
    E = np.full((batch.count, ends.size), np.nan)
    for i in range(batch.count):
        ks = np.flatnonzero(valid[i])
        if not ks.size:
            continue
        e0 = ends[ks]
        if batch.kind == "continuous":
            idx = e0[:, None] + np.arange(-m, 1)[None, :]
            w = np.ones(m + 1)
            w[0] = w[-1] = 0.5
        else:
            idx = e0[:, None] + np.arange(-m, 0)[None, :]
            w = np.ones(m)
        V = P[i][idx]
        E[i, ks] = _es_rows(V, w / w.sum(), epsilon)
    return WindowStatSeries(times, _reduce(E, reduction), "es", reduction, epsilon, E)


def _es_rows(V, w, epsilon):
    """Row-wise sorted-tail ES for a matrix of samples sharing weights ``w``."""
    order = np.argsort(-V, axis=1, kind="stable")
    Vs = np.take_along_axis(V, order, axis=1)
    Ws = w[order]
    before = np.cumsum(Ws, axis=1) - Ws
    take = np.clip(epsilon - before, 0.0, Ws)
    return (take * Vs).sum(axis=1) / epsilon


class EmpiricalCDF:
    """Right-continuous weighted empirical distribution function."""

    def __init__(self, samples, weights=None):
        v = np.asarray(samples, float).ravel()
        if v.size == 0:
            raise SamplingError("empirical CDF of an empty sample")
        w = np.ones_like(v) if weights is None else np.asarray(weights, float).ravel()
        if w.shape != v.shape or np.any(w < 0) or w.sum() <= 0:
            raise SamplingError("weights must be nonnegative, match the samples and not all be zero")
        order = np.argsort(v, kind="stable")
        self.support, inv = np.unique(v[order], return_inverse=True)
        mass = np.bincount(inv, weights=w[order]) / w.sum()
        self.levels = np.minimum(np.cumsum(mass), 1.0)

    def __call__(self, q):
        idx = np.searchsorted(self.support, np.asarray(q, float), side="right") - 1
        return np.where(idx >= 0, self.levels[np.maximum(idx, 0)], 0.0)

    def quantile(self, level: float) -> float:
        """Smallest support point whose CDF reaches ``level``."""
        if not 0 <= level <= 1:
            raise SamplingError("level must lie in [0, 1]")
        i = int(np.searchsorted(self.levels, level - 1e-12, side="left"))
        return float(self.support[min(i, self.support.size - 1)])


def empirical_cdf(samples, weights=None) -> EmpiricalCDF:
    return EmpiricalCDF(samples, weights)


@dataclass
class MonteCarloOptions:
    count: int = 1000
    dt: float = 5e-3
    seed: int = 0


def empirical_statistic(problem: RiskProblem, batch: TrajectoryBatch) -> WindowStatSeries:
    """Sampled counterpart of the bounded quantity.

    Deterministic paths are compared individually (the maximum over paths).
    For stochastic paths the bound concerns an expectation over noise, so
    the mean is taken across paths and ES pools the paths' samples.
    """
    stochastic = not problem.dynamics.is_deterministic()
    if problem.risk.kind == "es":
        red = "pooled" if stochastic else "max"
        return windowed_es_series(batch, problem.cost, problem.window, problem.risk.epsilon, red)
    return windowed_mean_series(batch, problem.cost, problem.window, "mean" if stochastic else "max")
