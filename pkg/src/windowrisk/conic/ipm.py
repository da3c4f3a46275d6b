"""Primal-dual interior-point solver for slot-structured SDPs.

Primal (moment side)::

    maximize  c.y   s.t.  A y = b,  Z_j = F0_j + sum_i y_i F_ij  PSD

Dual (SOS side)::

    minimize  b.lam + sum_j <F0_j, X_j>   s.t.  A' lam - sum_j F_j*(X_j) = c,  X_j PSD

The duality gap of a feasible pair is ``sum_j <X_j, Z_j>``.  Steps use the
HKM direction with a Mehrotra predictor-corrector and an infeasible start.
The Schur matrix ``M_ik = <F_i, X F_k Z^-1>`` is block diagonal over groups
of variables that share PSD blocks, so each group is factored separately
and the equalities are handled through ``A M^-1 A'``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .program import ConicError, ConicProgram, ConicSolution, Status, evaluate_solution

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverOptions:
    gap_tol: float = 1e-7
    feas_tol: float = 1e-7
    near_tol: float = 1e-3
    max_iter: int = 100
    step_fraction: float = 0.9
    max_block_size: int = 260
    max_vars: int = 20000
    init_scale: float = 1.0
    stall_window: int = 10
    verbose: bool = False


# ---------------------------------------------------------------------------
# Presolve
# ---------------------------------------------------------------------------


def independent_rows(A: sp.spmatrix, b: np.ndarray, tol: float = 1e-10):
    """Indices of a maximal independent row set of ``A`` and a consistency flag.

    Uses column-pivoted QR of ``A'``.  Dropped rows are consistent when their
    right-hand side matches the same combination of the kept rows.
    """
    m = A.shape[0]
    if m == 0:
        return np.arange(0), True, 0.0
    dense = A.toarray()
    _, R, piv = sla.qr(dense.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > tol * max(diag[0], 1.0))) if diag.size else 0
    keep = np.sort(piv[:rank])
    drop = np.setdiff1d(np.arange(m), keep)
    if drop.size == 0:
        return keep, True, 0.0
    W, *_ = np.linalg.lstsq(dense[keep].T, dense[drop].T, rcond=None)
    mismatch = float(np.max(np.abs(W.T @ b[keep] - b[drop])))
    scale = 1.0 + float(np.max(np.abs(b))) if b.size else 1.0
    return keep, mismatch <= 1e-8 * scale, mismatch


# ---------------------------------------------------------------------------
# Internal structures
# ---------------------------------------------------------------------------


class _Block:
    def __init__(self, blk, group_vars):
        self.label = blk.label
        self.n = blk.size
        self.nslots = blk.nslots
        self.flat = blk.slot_index.ravel()
        self.S = blk.S
        self.z0 = blk.z0
        col_of = {v: i for i, v in enumerate(group_vars)}
        S = blk.S.tocoo()
        self.S_loc = sp.csr_matrix((S.data, (S.row, [col_of[c] for c in S.col])),
                                   shape=(blk.nslots, len(group_vars)))
        order = np.argsort(self.flat, kind="stable")
        counts = np.bincount(self.flat, minlength=self.nslots)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        self.slot_rows, self.slot_cols = [], []
        for q in range(self.nslots):
            pos = order[bounds[q]:bounds[q + 1]]
            self.slot_rows.append(pos // self.n)
            self.slot_cols.append(pos % self.n)

    def matrix(self, y):
        return (self.S @ y + self.z0)[self.flat].reshape(self.n, self.n)

    def adjoint(self, X):
        xs = np.bincount(self.flat, weights=X.ravel(), minlength=self.nslots)
        return self.S.T @ xs

    def schur_slots(self, X, Zi):
        """``Ms[p, q] = sum_{(a,b) in p, (c,d) in q} X[a,c] Zi[d,b]``."""
        ns = self.nslots
        Ms = np.empty((ns, ns))
        for q in range(ns):
            W = X[:, self.slot_rows[q]] @ Zi[self.slot_cols[q], :]
            Ms[:, q] = np.bincount(self.flat, weights=W.ravel(), minlength=ns)
        return 0.5 * (Ms + Ms.T)


class _Group:
    def __init__(self, variables, blocks):
        self.vars = np.asarray(variables)
        self.blocks = blocks
        self.chol = None

    def factor(self, Xs, Zis):
        ng = len(self.vars)
        M = np.zeros((ng, ng))
        for b in self.blocks:
            Ms = b.schur_slots(Xs[b.index], Zis[b.index])
            T1 = b.S_loc.T @ Ms
            M += (b.S_loc.T @ T1.T).T
        M = 0.5 * (M + M.T)
        self.M = M
        reg = 0.0
        scale = max(float(np.max(np.diag(M))), 1e-300)
        for attempt in range(8):
            try:
                self.chol = sla.cho_factor(M + reg * scale * np.eye(ng), lower=True, check_finite=False)
                return reg
            except np.linalg.LinAlgError:
                reg = 1e-14 if reg == 0.0 else reg * 100
        raise np.linalg.LinAlgError("Schur block not positive definite")

    def matvec(self, v):
        return self.M @ v

    def solve(self, r):
        return sla.cho_solve(self.chol, r, check_finite=False)

    def half_solve(self, R):
        # L^{-1} R with M = L L'
        return sla.solve_triangular(self.chol[0], R, lower=True, check_finite=False)


def _groups(prog: ConicProgram):
    n = prog.nvars
    parent = np.arange(n)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    block_vars = []
    for blk in prog.blocks:
        vs = blk.variables()
        block_vars.append(vs)
        if vs.size:
            r0 = find(vs[0])
            for v in vs[1:]:
                rv = find(v)
                if rv != r0:
                    parent[rv] = r0
    roots = np.array([find(i) for i in range(n)])
    covered = np.zeros(n, bool)
    for vs in block_vars:
        covered[vs] = True
    if not covered.all():
        free = np.flatnonzero(~covered)
        raise ConicError(f"variables {free[:10].tolist()} appear in no PSD block; free variables are unsupported")
    groups = {}
    for i, r in enumerate(roots):
        groups.setdefault(r, []).append(i)
    members = {}
    for j, (blk, vs) in enumerate(zip(prog.blocks, block_vars)):
        r = roots[vs[0]] if vs.size else None
        members.setdefault(r, []).append(j)
    out = []
    for r in sorted(groups, key=lambda r: groups[r][0]):
        vars_ = groups[r]
        blocks = []
        for j in members.get(r, []):
            ib = _Block(prog.blocks[j], vars_)
            ib.index = j
            blocks.append(ib)
        out.append(_Group(vars_, blocks))
    # constant blocks (no variables) still take part in the iteration
    const_blocks = []
    for j in members.get(None, []):
        ib = _Block(prog.blocks[j], [])
        ib.index = j
        const_blocks.append(ib)
    return out, const_blocks


def _max_step(P, dP):
    """Largest ``a`` with ``P + a dP`` PSD (``inf`` if unbounded)."""
    try:
        L = np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        return 0.0
    Li = sla.solve_triangular(L, np.eye(L.shape[0]), lower=True, check_finite=False)
    lmin = np.linalg.eigvalsh(Li @ dP @ Li.T)[0]
    return np.inf if lmin >= 0 else -1.0 / lmin


def _interior_update(Ps, dPs, a, tries=6):
    """``P + a dP`` with ``a`` shrunk until every block factors as PD."""
    for _ in range(tries):
        out = []
        for P, dP in zip(Ps, dPs):
            Q = P + a * dP
            Q = 0.5 * (Q + Q.T)
            try:
                np.linalg.cholesky(Q)
            except np.linalg.LinAlgError:
                break
            out.append(Q)
        else:
            return out, a
        a *= 0.5
    return None, 0.0


def _inv_psd(P):
    c = sla.cho_factor(P, lower=True, check_finite=False)
    Pi = sla.cho_solve(c, np.eye(P.shape[0]), check_finite=False)
    return 0.5 * (Pi + Pi.T)


def _robust_cholesky(P):
    """Cholesky factor of ``P``, adding a growing diagonal shift if needed."""
    scale = max(float(np.max(np.abs(np.diag(P)))), 1e-300)
    reg = 0.0
    for _ in range(10):
        try:
            return sla.cho_factor(P + reg * scale * np.eye(P.shape[0]), lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            reg = 1e-15 if reg == 0.0 else reg * 100
    raise np.linalg.LinAlgError("matrix is not positive definite even after regularization")


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------


def solve(prog: ConicProgram, opts: SolverOptions | None = None) -> ConicSolution:
    """Solve ``prog`` and return primal moments, duals and residuals."""
    opts = opts or SolverOptions()
    if prog.blocks and max(prog.block_sizes) > opts.max_block_size:
        raise ConicError(f"PSD block of size {max(prog.block_sizes)} exceeds the embedded solver limit "
                         f"{opts.max_block_size}; export the program (--solver export-only) for an external solver")
    if prog.nvars > opts.max_vars:
        raise ConicError(f"{prog.nvars} variables exceed the embedded solver limit {opts.max_vars}; "
                         "export the program (--solver export-only) for an external solver")
    t0 = time.perf_counter()
    keep, consistent, mismatch = independent_rows(prog.A, prog.b)
    if not consistent:
        return _failure(prog, Status.INFEASIBLE, f"equalities are inconsistent (mismatch {mismatch:.2e})")
    dropped = prog.neq - keep.size
    if dropped:
        log.info("presolve removed %d dependent equality rows", dropped)
    A = prog.A[keep].tocsc()
    b = prog.b[keep]
    Ad = A.toarray()
    groups, const_blocks = _groups(prog)
    blocks = sorted([blk for g in groups for blk in g.blocks] + const_blocks, key=lambda b: b.index)
    c = prog.c
    n, m = prog.nvars, b.size
    N = sum(blk.n for blk in blocks)
    xi = opts.init_scale
    y = np.zeros(n)
    lam = np.zeros(m)
    Xs = [xi * np.eye(blk.n) for blk in blocks]
    Zs = [xi * np.eye(blk.n) for blk in blocks]
    normb = 1.0 + (np.max(np.abs(b)) if m else 0.0)
    normc = 1.0 + np.max(np.abs(c)) if n else 1.0
    normF0 = 1.0 + max((np.max(np.abs(blk.z0)) if blk.z0.size else 0.0) for blk in blocks) if blocks else 1.0

    trace = []
    best = None
    status, message = Status.NUMERICAL_FAILURE, "iteration limit reached"
    it = 0
    for it in range(opts.max_iter + 1):
        rp = b - A @ y if m else np.zeros(0)
        RZ = [blk.matrix(y) - Z for blk, Z in zip(blocks, Zs)]
        rd = c - (A.T @ lam if m else 0.0)
        for blk, X in zip(blocks, Xs):
            rd = rd + blk.adjoint(X)
        pobj = float(c @ y)
        dobj = float(b @ lam) + sum(float(blk.z0 @ np.bincount(blk.flat, X.ravel(), minlength=blk.nslots))
                                    for blk, X in zip(blocks, Xs))
        xz = sum(float(np.sum(X * Z)) for X, Z in zip(Xs, Zs))
        mu = xz / N if N else 0.0
        denom = 1.0 + abs(pobj) + abs(dobj)
        rel_gap = max(abs(dobj - pobj), max(xz, 0.0)) / denom
        pinf = max(np.max(np.abs(rp)) / normb if m else 0.0,
                   max((np.max(np.abs(R)) for R in RZ), default=0.0) / normF0)
        dinf = np.max(np.abs(rd)) / normc if n else 0.0
        merit = max(rel_gap, pinf, dinf)
        entry = {"iter": it, "pobj": pobj, "dobj": dobj, "gap": rel_gap, "pinf": pinf, "dinf": dinf, "mu": mu}
        trace.append(entry)
        if opts.verbose:
            log.info("it %3d pobj %+.8e dobj %+.8e gap %.1e pinf %.1e dinf %.1e", it, pobj, dobj, rel_gap, pinf, dinf)
        if best is None or merit < best[0]:
            best = (merit, y.copy(), lam.copy(), [X.copy() for X in Xs], entry)
        if rel_gap <= opts.gap_tol and pinf <= opts.feas_tol and dinf <= opts.feas_tol:
            status, message = Status.OPTIMAL, "converged"
            break
        # normalized ray tests: a diverging objective whose residual stays tiny
        # relative to it is an infeasibility (or unboundedness) certificate
        if dobj < -1e6 * (1 + abs(pobj)) and dinf * normc <= 1e-8 * abs(dobj):
            status, message = Status.INFEASIBLE, "dual ray found: dual objective diverges to -inf (primal infeasible)"
            break
        if pobj > 1e6 * (1 + abs(dobj)) and pinf * normb <= 1e-8 * abs(pobj):
            status, message = Status.UNBOUNDED, "primal ray found: objective diverges to +inf"
            break
        if it == opts.max_iter:
            break
        diverging = max(abs(pobj), abs(dobj)) > 1e2 * (1 + min(abs(pobj), abs(dobj)))
        if not diverging and it >= opts.stall_window and best[0] > 0.5 * min(
                max(e["gap"], e["pinf"], e["dinf"]) for e in trace[:-opts.stall_window]):
            message = f"no progress over the last {opts.stall_window} iterations"
            break

        try:
            Zis = [_inv_psd(Z) for Z in Zs]
            reg = max((g.factor(Xs, Zis) for g in groups), default=0.0)
            # Schur complement over the equality constraints
            if m:
                SC = np.zeros((m, m))
                for g in groups:
                    V = g.half_solve(Ad[:, g.vars].T)
                    SC += V.T @ V
                sc_fac = _robust_cholesky(0.5 * (SC + SC.T))
        except np.linalg.LinAlgError as exc:
            message = f"factorization failed at iteration {it}: {exc}"
            break

        def minv(r):
            out = np.empty(n)
            for g in groups:
                out[g.vars] = g.solve(r[g.vars])
            return out

        def kkt(r1, r2):
            # M dy + A' dlam = r1,  A dy = r2
            u = minv(r1)
            if not m:
                return u, np.zeros(0)
            dlam = sla.cho_solve(sc_fac, A @ u - r2, check_finite=False)
            return minv(r1 - A.T @ dlam), dlam

        def mmul(v):
            out = np.empty(n)
            for g in groups:
                out[g.vars] = g.matvec(v[g.vars])
            return out

        def direction(G):
            rhs = rd.copy()
            for blk, Gj in zip(blocks, G):
                rhs += blk.adjoint(Gj)
            dy, dlam = kkt(rhs, rp)
            scale = 1.0 + np.max(np.abs(rhs))
            for _ in range(3):
                e1 = rhs - mmul(dy) - (A.T @ dlam if m else 0.0)
                e2 = rp - A @ dy if m else np.zeros(0)
                if max(np.max(np.abs(e1)), np.max(np.abs(e2), initial=0.0)) <= 1e-14 * scale:
                    break
                ey, el = kkt(e1, e2)
                dy, dlam = dy + ey, dlam + el
            dZ = [R + blk.matrix(dy) - blk.matrix(np.zeros(n)) for blk, R in zip(blocks, RZ)]
            dX = []
            for X, Zi, Gj, dZj, R in zip(Xs, Zis, G, dZ, RZ):
                D = Gj - X @ (dZj - R) @ Zi
                dX.append(0.5 * (D + D.T))
            return dy, dlam, dX, dZ

        def steps(dX, dZ, frac):
            ap = min([1.0] + [frac * _max_step(Z, d) for Z, d in zip(Zs, dZ)])
            ad = min([1.0] + [frac * _max_step(X, d) for X, d in zip(Xs, dX)])
            return ap, ad

        G_aff = [-X - X @ R @ Zi for X, R, Zi in zip(Xs, RZ, Zis)]
        dy_a, dl_a, dX_a, dZ_a = direction(G_aff)
        ap, ad = steps(dX_a, dZ_a, 1.0)
        mu_aff = sum(float(np.sum((X + ad * dX) * (Z + ap * dZ))) for X, dX, Z, dZ in zip(Xs, dX_a, Zs, dZ_a)) / N
        sigma = float(np.clip((max(mu_aff, 0.0) / mu) ** 3, 0.0, 1.0)) if mu > 0 else 0.0
        G = [sigma * mu * Zi - X - X @ R @ Zi - dXa @ dZa @ Zi
             for X, R, Zi, dXa, dZa in zip(Xs, RZ, Zis, dX_a, dZ_a)]
        dy, dl, dX, dZ = direction(G)
        frac = opts.step_fraction
        ap, ad = steps(dX, dZ, frac)
        entry.update(sigma=sigma, ap=ap, ad=ad, reg=reg)
        if max(ap, ad) < 1e-10:
            message = f"step length collapsed at iteration {it}"
            break
        Zs_new, ap = _interior_update(Zs, dZ, ap)
        Xs_new, ad = _interior_update(Xs, dX, ad)
        if Zs_new is None or Xs_new is None:
            message = f"iterate lost positive definiteness at iteration {it}"
            break
        y = y + ap * dy
        Zs = Zs_new
        if m:
            lam = lam + ad * dl
        Xs = Xs_new

    final = trace[-1] if trace else None
    if status is Status.NUMERICAL_FAILURE and best is not None:
        y, lam, Xs, final = best[1], best[2], best[3], best[4]
        if best[0] <= opts.near_tol:
            status = Status.NEAR_OPTIMAL
            message += f"; best iterate within near tolerance ({best[0]:.1e})"
    full_lam = np.zeros(prog.neq)
    full_lam[keep] = lam
    X_out = [None] * len(prog.blocks)
    for blk, X in zip(blocks, Xs):
        X_out[blk.index] = X
    res = evaluate_solution(prog, y, full_lam, X_out)
    res.update(dropped_rows=int(dropped), seconds=time.perf_counter() - t0,
               relative_gap=final["gap"] if final else np.nan,
               merit=max(final["gap"], final["pinf"], final["dinf"]) if final else np.nan)
    return ConicSolution(y=y, value=float(c @ y), status=status, residuals=res, eq_duals=full_lam,
                         block_duals=X_out, dual_value=res["dual_value"], iterations=it, trace=trace,
                         message=message)


def _failure(prog, status, message):
    y = np.zeros(prog.nvars)
    return ConicSolution(y=y, value=float("nan"), status=status, residuals={}, eq_duals=np.zeros(prog.neq),
                         block_duals=[np.zeros((b.size, b.size)) for b in prog.blocks], message=message)
