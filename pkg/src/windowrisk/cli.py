"""Command-line front end: ``windowrisk {bound,sample,validate}``.

Exit codes
----------
0  success
2  usage error (bad flags)
3  problem file could not be parsed
4  invalid configuration or problem (e.g. ``k < 1``, ES level out of range)
5  solver failure (a relaxation was not solved)
6  I/O failure (missing input, unwritable output)
7  a check failed (mass invariant or bound below the sampled statistic)

Set ``WINDOWRISK_THREADS`` to cap the BLAS thread count.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PARSE = 3
EXIT_INVALID = 4
EXIT_SOLVER = 5
EXIT_IO = 6
EXIT_CHECK = 7


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    command: str
    problem: str
    k_values: list[int] = field(default_factory=lambda: [1])
    risk: str | None = None
    epsilon: float | None = None
    solver: str = "embedded"
    paths: int = 1000
    dt: float = 5e-3
    seed: int = 0
    out: Path = Path("out")
    tol: float | None = None
    workers: int = 1


def parse_k_range(text: str) -> list[int]:
    """``"3"`` or ``"A..B"`` to a list of orders."""
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            lo, hi = int(a), int(b)
        else:
            lo = hi = int(text)
    except ValueError:
        raise CliError(EXIT_INVALID, f"--k expects an integer or A..B, got {text!r}") from None
    if lo < 1 or hi < lo:
        raise CliError(EXIT_INVALID, f"--k range must satisfy 1 <= A <= B, got {text!r}")
    return list(range(lo, hi + 1))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="windowrisk", description="Bounds on time-windowed risk of polynomial dynamics.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (("bound", "solve the relaxation hierarchy"),
                        ("sample", "simulate paths and emit windowed statistics"),
                        ("validate", "solve, sample and compare")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--problem", required=True, help="problem file or bundled name (twist, oscillator, ...)")
        p.add_argument("--risk", choices=["mean", "es"], help="override the risk measure of the problem file")
        p.add_argument("--epsilon", type=float, help="ES tail level in (0, 1)")
        p.add_argument("--out", default="out", help="output directory")
        if name != "sample":
            p.add_argument("--k", default="1", help="relaxation order or range A..B")
            p.add_argument("--tol", type=float, help="solver gap and feasibility tolerance")
        if name == "bound":
            p.add_argument("--solver", choices=["embedded", "export-only"], default="embedded")
        if name != "bound":
            p.add_argument("--paths", type=int, default=1000)
            p.add_argument("--dt", type=float, default=5e-3)
            p.add_argument("--seed", type=int, default=0)
        if name == "validate":
            p.add_argument("--workers", type=int, default=1, help="orders solved in parallel")
    return ap


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    cfg = RunConfig(ns.command, ns.problem, risk=ns.risk, epsilon=ns.epsilon, out=Path(ns.out))
    if hasattr(ns, "k"):
        cfg.k_values = parse_k_range(ns.k)
        cfg.tol = ns.tol
    for name in ("solver", "paths", "dt", "seed", "workers"):
        if hasattr(ns, name):
            setattr(cfg, name, getattr(ns, name))
    if cfg.epsilon is not None and not 0 < cfg.epsilon < 1:
        raise CliError(EXIT_INVALID, f"--epsilon must lie in (0, 1), got {cfg.epsilon}")
    if cfg.risk == "es" and cfg.epsilon is None:
        raise CliError(EXIT_INVALID, "--risk es needs --epsilon")
    if cfg.paths < 1:
        raise CliError(EXIT_INVALID, "--paths must be positive")
    if not cfg.dt > 0:
        raise CliError(EXIT_INVALID, "--dt must be positive")
    if cfg.tol is not None and not cfg.tol > 0:
        raise CliError(EXIT_INVALID, "--tol must be positive")
    if cfg.workers < 1:
        raise CliError(EXIT_INVALID, "--workers must be positive")
    return cfg


def _load(cfg: RunConfig):
    from .model import Risk
    from .problemfile import BUNDLED, ProblemFileError, load_problem

    if cfg.problem not in BUNDLED and not Path(cfg.problem).exists():
        raise CliError(EXIT_IO, f"no such problem file or bundled instance: {cfg.problem}")
    try:
        problem = load_problem(cfg.problem)
    except ProblemFileError as exc:
        raise CliError(EXIT_PARSE, str(exc)) from None
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc)) from None
    if cfg.risk == "mean":
        problem = problem.with_risk(Risk.mean())
    elif cfg.risk == "es" or cfg.epsilon is not None:
        problem = problem.with_risk(Risk.es(cfg.epsilon))
    return problem


def _outdir(cfg: RunConfig) -> Path:
    try:
        cfg.out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create output directory {cfg.out}: {exc}") from None
    return cfg.out


def _write(path: Path, text: str):
    try:
        path.write_text(text)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {path}: {exc}") from None


def _solver_options(cfg: RunConfig):
    from .conic import SolverOptions

    return SolverOptions() if cfg.tol is None else SolverOptions(gap_tol=cfg.tol, feas_tol=cfg.tol)


def _stem(problem) -> str:
    risk = "mean" if problem.risk.kind == "mean" else f"es{problem.risk.epsilon:g}"
    return f"{problem.name or 'problem'}_{risk}"


def cmd_bound(cfg: RunConfig) -> int:
    from .certify import certify_solution, solve_bound
    from .conic import ConicError, export_sdpa
    from .moments import RelaxationError, build_relaxation

    problem = _load(cfg)
    out = _outdir(cfg)
    stem = _stem(problem)
    if cfg.solver == "export-only":
        for k in cfg.k_values:
            try:
                rel = build_relaxation(problem, k)
            except RelaxationError as exc:
                raise CliError(EXIT_INVALID, str(exc)) from None
            path = out / f"{stem}_k{k}.dat-s"
            try:
                export_sdpa(rel.program, path)
            except OSError as exc:
                raise CliError(EXIT_IO, f"cannot write {path}: {exc}") from None
            print(f"k={k}: wrote {path}")
        return EXIT_OK

    rows, code = [], EXIT_OK
    lines = [f"{'k':>3} {'status':<16} {'bound':>12} {'dual bound':>12} {'mass':>5} {'seconds':>8}"]
    print(lines[0], flush=True)
    for k in cfg.k_values:
        try:
            result = solve_bound(problem, k, _solver_options(cfg))
        except RelaxationError as exc:
            raise CliError(EXIT_INVALID, str(exc)) from None
        except ConicError as exc:
            raise CliError(EXIT_SOLVER, str(exc)) from None
        rep = certify_solution(result)
        d = rep.to_dict()
        d.pop("empirical_sup", None)
        d.pop("dominates", None)
        d.pop("verdict", None)
        d["message"] = result.solution.message
        rows.append(d)
        mass_ok = bool(rep.mass_checks) and all(m.passed for m in rep.mass_checks)
        if not rep.solved:
            code = max(code, EXIT_SOLVER)
        elif not mass_ok:
            code = EXIT_CHECK if code == EXIT_OK else code
        lines.append(f"{k:>3} {rep.status:<16} {rep.bound:>12.6g} {rep.dual_bound:>12.6g} "
                     f"{'ok' if mass_ok else 'FAIL' if rep.mass_checks else '-':>5} {rep.seconds:>8.1f}")
        if rep.recovered is not None:
            r = rep.recovered
            lines.append(f"    rank ratios {', '.join(f'{t}={v:.1e}' for t, v in r.rank_ratios.items())}"
                         + (f"; x0*={_fmt(r.x0_star)} t*={r.t_star:.4f}" if r.x0_star is not None else "")
                         + (f"; xp*={_fmt(r.xp_star)}" if r.xp_star is not None else ""))
        print(lines[-1] if rep.recovered is None else "\n".join(lines[-2:]), flush=True)
    _write(out / f"{stem}_bounds.txt", "\n".join(lines) + "\n")
    _write(out / f"{stem}_bounds.json", json.dumps({"problem": problem.name, "risk": str(problem.risk),
                                                    "results": rows}, indent=2, sort_keys=True, default=_json))
    return code


def _fmt(v):
    return "(" + ", ".join(f"{x:.4f}" for x in v) + ")"


def _json(o):
    import numpy as np

    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o).__name__)


def cmd_sample(cfg: RunConfig) -> int:
    from .montecarlo import SamplingError, simulate, windowed_es_series, windowed_mean_series

    problem = _load(cfg)
    out = _outdir(cfg)
    name = problem.name or "problem"
    try:
        batch = simulate(problem, cfg.paths, cfg.dt, cfg.seed)
        series = {f"{name}_window_mean_{r}": windowed_mean_series(batch, problem.cost, problem.window, r)
                  for r in ("max", "mean")}
        if problem.risk.kind == "es":
            for r in ("max", "pooled"):
                series[f"{name}_window_es_{r}"] = windowed_es_series(batch, problem.cost, problem.window,
                                                                      problem.risk.epsilon, r)
    except SamplingError as exc:
        raise CliError(EXIT_INVALID, str(exc)) from None
    _write(out / f"{name}_traces.csv", batch.to_csv(p=problem.cost))
    header = {"problem": name, "paths": cfg.paths, "dt": batch.dt, "seed": cfg.seed, "window": problem.window}
    for stem, s in series.items():
        _write(out / f"{stem}.csv", s.to_csv(header=header))
        print(f"{stem}: sup {s.sup:.6g} at t={s.argsup:.4g}")
    early = float((batch.stop_index < batch.times.size).mean())
    print(f"paths leaving the state set before T: {early:.1%}")
    return EXIT_OK


def cmd_validate(cfg: RunConfig) -> int:
    from .certify import validate
    from .montecarlo import MonteCarloOptions, SamplingError

    problem = _load(cfg)
    out = _outdir(cfg)
    try:
        rep = validate(problem, cfg.k_values, MonteCarloOptions(cfg.paths, cfg.dt, cfg.seed),
                       solver_options=_solver_options(cfg), workers=cfg.workers)
    except SamplingError as exc:
        raise CliError(EXIT_INVALID, str(exc)) from None
    stem = _stem(problem)
    text = rep.to_text()
    _write(out / f"{stem}_validate.txt", text)
    _write(out / f"{stem}_validate.json", rep.to_json())
    sys.stdout.write(text)
    if any(not r.solved for r in rep.reports):
        return EXIT_SOLVER if rep.passed else EXIT_CHECK
    return EXIT_OK if rep.passed else EXIT_CHECK


COMMANDS = {"bound": cmd_bound, "sample": cmd_sample, "validate": cmd_validate}


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        cfg = config_from_args(ns)
        return COMMANDS[cfg.command](cfg)
    except CliError as exc:
        print(f"windowrisk: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
