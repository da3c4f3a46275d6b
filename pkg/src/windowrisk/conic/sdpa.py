"""SDPA sparse (``.dat-s``) export/import and CSDP-style solution files.

SDPA solves ``minimize c'x  s.t.  sum_i x_i F_i - F_0 PSD``.  A program
``maximize c.y  s.t.  F0 + sum_i y_i F_i PSD,  A y = b`` is written with
``c_sdpa = -c`` and ``F_0,sdpa = -F0``.  Equalities become a trailing
diagonal block of size ``2p``: entries ``1..p`` hold ``A y - b >= 0`` and
entries ``p+1..2p`` hold ``b - A y >= 0``.

Solution files follow the CSDP layout: the first line is ``y``, then
``1 blk i j v`` lines give the slack matrix ``Z(y)`` and ``2 blk i j v``
lines give the dual matrix ``X``.  The equality multipliers are recovered
as ``lam = X_minus - X_plus`` from the diagonal block.
"""

from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .program import ConicError, ConicProgram, ConicSolution, PsdBlock, Status, evaluate_solution


class SdpaError(ConicError):
    pass


def _fmt(v: float) -> str:
    return "%.17g" % v


def sdpa_entries(prog: ConicProgram):
    """Sorted ``(matno, blockno, i, j, value)`` records (1-based, ``i <= j``)."""
    recs = []
    for bno, blk in enumerate(prog.blocks, start=1):
        n = blk.size
        iu, ju = np.triu_indices(n)
        slots = blk.slot_index[iu, ju]
        S = blk.S.tocsr()
        for pos in range(iu.size):
            q = slots[pos]
            lo, hi = S.indptr[q], S.indptr[q + 1]
            for var, val in zip(S.indices[lo:hi], S.data[lo:hi]):
                if val != 0.0:
                    recs.append((int(var) + 1, bno, int(iu[pos]) + 1, int(ju[pos]) + 1, float(val)))
            z = blk.z0[q]
            if z != 0.0:
                recs.append((0, bno, int(iu[pos]) + 1, int(ju[pos]) + 1, -float(z)))
    p = prog.neq
    if p:
        bno = len(prog.blocks) + 1
        A = prog.A.tocsr()
        for r in range(p):
            lo, hi = A.indptr[r], A.indptr[r + 1]
            for var, val in zip(A.indices[lo:hi], A.data[lo:hi]):
                if val != 0.0:
                    recs.append((int(var) + 1, bno, r + 1, r + 1, float(val)))
                    recs.append((int(var) + 1, bno, p + r + 1, p + r + 1, -float(val)))
            if prog.b[r] != 0.0:
                recs.append((0, bno, r + 1, r + 1, float(prog.b[r])))
                recs.append((0, bno, p + r + 1, p + r + 1, -float(prog.b[r])))
    recs.sort(key=lambda t: t[:4])
    return recs


def export_sdpa(prog: ConicProgram, path, sidecar: bool = True) -> Path:
    """Write ``prog`` as SDPA sparse text (and a ``.json`` sidecar)."""
    path = Path(path)
    m = prog.nvars
    sizes = [str(b.size) for b in prog.blocks]
    if prog.neq:
        sizes.append(str(-2 * prog.neq))
    lines = [
        f'"windowrisk conic program {prog.fingerprint()}: maximize c.y, written as minimize (-c).x',
        f'"PSD blocks 1..{len(prog.blocks)} hold F0 + sum y_i F_i >= 0 (matrix 0 stores -F0)',
    ]
    if prog.neq:
        p = prog.neq
        lines.append(f'"block {len(prog.blocks) + 1} is diagonal of size {2 * p}: entries 1..{p} are '
                     f'A y - b >= 0 and entries {p + 1}..{2 * p} are b - A y >= 0 (equalities A y = b)')
    else:
        lines.append('"no equality constraints')
    lines.append(str(m))
    lines.append(str(len(sizes)))
    lines.append(" ".join(sizes))
    lines.append(" ".join(_fmt(-v) if v != 0.0 else "0" for v in prog.c))
    for mat, blk, i, j, v in sdpa_entries(prog):
        lines.append(f"{mat} {blk} {i} {j} {_fmt(v)}")
    path.write_text("\n".join(lines) + "\n")
    if sidecar:
        meta = {
            "fingerprint": prog.fingerprint(),
            "nvars": m,
            "neq": prog.neq,
            "block_sizes": prog.block_sizes,
            "block_labels": [b.label for b in prog.blocks],
            "labels": prog.labels,
            "meta": _jsonable(prog.meta),
        }
        sidecar_path(path).write_text(json.dumps(meta, indent=1))
    return path


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def _data_lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in '"*':
            continue
        yield lineno, line.replace(",", " ").replace("{", " ").replace("}", " ").replace("(", " ").replace(")", " ")


def import_sdpa(path) -> ConicProgram:
    """Read an SDPA sparse file written by :func:`export_sdpa`.

    PSD entries sharing the same coefficient signature become one slot, so
    moment structure is recovered.  A trailing diagonal block laid out as
    paired inequalities is turned back into equalities.
    """
    path = Path(path)
    lines = list(_data_lines(path.read_text()))
    try:
        m = int(lines[0][1].split()[0])
        nb = int(lines[1][1].split()[0])
        sizes = [int(float(t)) for t in lines[2][1].split()[:nb]]
        c_sdpa = [float(t) for t in lines[3][1].split()[:m]]
    except (IndexError, ValueError) as exc:
        raise SdpaError(f"{path}: malformed SDPA header ({exc})") from None
    if len(sizes) != nb or len(c_sdpa) != m:
        raise SdpaError(f"{path}: header declares {nb} blocks / {m} variables but lists {len(sizes)} / {len(c_sdpa)}")
    entries = defaultdict(dict)  # (blk, i, j) -> {matno: value}
    for lineno, line in lines[4:]:
        parts = line.split()
        if len(parts) < 5:
            raise SdpaError(f"{path}:{lineno}: expected 'matno block i j value'")
        try:
            mat, blk, i, j = (int(t) for t in parts[:4])
            val = float(parts[4])
        except ValueError:
            raise SdpaError(f"{path}:{lineno}: bad entry {line!r}") from None
        if not (0 <= mat <= m and 1 <= blk <= nb):
            raise SdpaError(f"{path}:{lineno}: index out of range")
        n = abs(sizes[blk - 1])
        if not (1 <= i <= n and 1 <= j <= n):
            raise SdpaError(f"{path}:{lineno}: position ({i}, {j}) outside block of size {n}")
        if i > j:
            i, j = j, i
        d = entries[blk, i, j]
        d[mat] = d.get(mat, 0.0) + val
    c = np.array([-v if v != 0.0 else 0.0 for v in c_sdpa])

    eq_block = nb if nb and sizes[-1] < 0 else None
    A = sp.csr_matrix((0, m))
    b = np.zeros(0)
    if eq_block is not None:
        A, b = _equalities(entries, eq_block, -sizes[-1], m, path)
    blocks = []
    for bno in range(1, nb + 1):
        if bno == eq_block:
            continue
        size = sizes[bno - 1]
        if size < 0:
            raise SdpaError(f"{path}: only the last block may be diagonal")
        blocks.append(_psd_block(entries, bno, size, m))
    return ConicProgram(c, A, b, blocks)


def _equalities(entries, bno, size, m, path):
    if size % 2:
        raise SdpaError(f"{path}: equality block has odd size {size}")
    p = size // 2
    rows, cols, vals = [], [], []
    b = np.zeros(p)
    for (blk, i, j), d in entries.items():
        if blk != bno:
            continue
        if i != j:
            raise SdpaError(f"{path}: off-diagonal entry in diagonal block {bno}")
        if i <= p:
            for mat, v in d.items():
                if mat == 0:
                    b[i - 1] = v
                else:
                    rows.append(i - 1)
                    cols.append(mat - 1)
                    vals.append(v)
    for r in range(p):
        plus = entries.get((bno, r + 1, r + 1), {})
        minus = entries.get((bno, p + r + 1, p + r + 1), {})
        if set(plus) != set(minus) or any(minus[k] != -plus[k] for k in plus):
            raise SdpaError(f"{path}: diagonal block rows {r + 1} and {p + r + 1} are not a paired equality")
    A = sp.csr_matrix((vals, (rows, cols)), shape=(p, m))
    return A, b


def _psd_block(entries, bno, size, m):
    sig_to_slot = {}
    forms = []
    slot_index = np.empty((size, size), dtype=np.int64)
    for i in range(1, size + 1):
        for j in range(i, size + 1):
            d = entries.get((bno, i, j), {})
            sig = tuple(sorted((k, v) for k, v in d.items() if v != 0.0))
            q = sig_to_slot.get(sig)
            if q is None:
                q = sig_to_slot[sig] = len(forms)
                forms.append(sig)
            slot_index[i - 1, j - 1] = slot_index[j - 1, i - 1] = q
    rows, cols, vals = [], [], []
    z0 = np.zeros(len(forms))
    for q, sig in enumerate(forms):
        for mat, v in sig:
            if mat == 0:
                z0[q] = -v
            else:
                rows.append(q)
                cols.append(mat - 1)
                vals.append(v)
    S = sp.csr_matrix((vals, (rows, cols)), shape=(len(forms), m))
    return PsdBlock(slot_index, S, z0, f"block{bno}")


def same_program(p1: ConicProgram, p2: ConicProgram) -> bool:
    """Exact equality of program data, independent of slot numbering."""
    if p1.nvars != p2.nvars or p1.neq != p2.neq or p1.block_sizes != p2.block_sizes:
        return False
    if not (np.array_equal(p1.c, p2.c) and np.array_equal(p1.b, p2.b)):
        return False
    if (p1.A != p2.A).nnz:
        return False
    return sdpa_entries(p1) == sdpa_entries(p2)


# ---------------------------------------------------------------------------
# Solutions
# ---------------------------------------------------------------------------


def export_sdpa_solution(prog: ConicProgram, sol: ConicSolution, path) -> Path:
    """Write ``sol`` in the CSDP solution layout for the exported ``prog``."""
    path = Path(path)
    lines = [" ".join(_fmt(v) for v in sol.y)]
    nb = len(prog.blocks)
    Zs = [blk.matrix(sol.y) for blk in prog.blocks]
    for mat, mats in ((1, Zs), (2, sol.block_duals)):
        for bno, M in enumerate(mats, start=1):
            iu, ju = np.triu_indices(M.shape[0])
            for i, j in zip(iu, ju):
                if M[i, j] != 0.0:
                    lines.append(f"{mat} {bno} {i + 1} {j + 1} {_fmt(M[i, j])}")
        if prog.neq:
            p = prog.neq
            if mat == 1:
                r = prog.A @ sol.y - prog.b
                diag = np.concatenate([r, -r])
            else:
                lam = np.asarray(sol.eq_duals)
                diag = np.concatenate([np.maximum(-lam, 0.0), np.maximum(lam, 0.0)])
            for i, v in enumerate(diag):
                if v != 0.0:
                    lines.append(f"{mat} {nb + 1} {i + 1} {i + 1} {_fmt(v)}")
    path.write_text("\n".join(lines) + "\n")
    return path


def import_sdpa_solution(path, prog: ConicProgram, sidecar=None, feas_tol: float = 1e-7,
                         gap_tol: float = 1e-7, near_tol: float = 1e-2) -> ConicSolution:
    """Map an external solution back onto ``prog`` and recompute its residuals.

    ``sidecar`` (path or parsed dict) is checked against the program
    fingerprint when given.
    """
    path = Path(path)
    if sidecar is not None:
        meta = json.loads(Path(sidecar).read_text()) if not isinstance(sidecar, dict) else sidecar
        if meta.get("fingerprint") != prog.fingerprint():
            raise SdpaError(f"{path}: solution sidecar fingerprint {meta.get('fingerprint')} does not match "
                            f"program {prog.fingerprint()}")
    text = path.read_text()
    lines = [(n, l) for n, l in _data_lines(text)]
    if not lines:
        raise SdpaError(f"{path}: empty solution file")
    try:
        y = np.array([float(t) for t in lines[0][1].split()])
    except ValueError:
        raise SdpaError(f"{path}:{lines[0][0]}: bad y vector") from None
    if y.size != prog.nvars:
        raise SdpaError(f"{path}: y has {y.size} entries, program has {prog.nvars} variables")
    nb = len(prog.blocks)
    Xs = [np.zeros((b.size, b.size)) for b in prog.blocks]
    eqdiag = np.zeros(2 * prog.neq)
    for lineno, line in lines[1:]:
        parts = line.split()
        try:
            mat, bno, i, j = (int(t) for t in parts[:4])
            v = float(parts[4])
        except (ValueError, IndexError):
            raise SdpaError(f"{path}:{lineno}: bad entry {line!r}") from None
        if mat != 2:
            continue
        if 1 <= bno <= nb:
            n = prog.blocks[bno - 1].size
            if not (1 <= i <= n and 1 <= j <= n):
                raise SdpaError(f"{path}:{lineno}: position outside block {bno}")
            Xs[bno - 1][i - 1, j - 1] = Xs[bno - 1][j - 1, i - 1] = v
        elif bno == nb + 1 and prog.neq and i == j and 1 <= i <= 2 * prog.neq:
            eqdiag[i - 1] = v
        else:
            raise SdpaError(f"{path}:{lineno}: block {bno} does not exist in the program")
    p = prog.neq
    lam = eqdiag[p:] - eqdiag[:p]
    res = evaluate_solution(prog, y, lam, Xs)
    status = classify(prog, res, feas_tol, gap_tol, near_tol)
    return ConicSolution(y=y, value=float(prog.c @ y), status=status, residuals=res, eq_duals=lam,
                         block_duals=Xs, dual_value=res["dual_value"], message=f"imported from {path.name}")


def classify(prog: ConicProgram, res: dict, feas_tol: float, gap_tol: float, near_tol: float) -> Status:
    """Threshold recomputed residuals into a status."""
    normb = 1.0 + (float(np.max(np.abs(prog.b))) if prog.neq else 0.0)
    normc = 1.0 + (float(np.max(np.abs(prog.c))) if prog.nvars else 0.0)
    pv, dv = res["primal_value"], res["dual_value"]
    worst = max(
        res["primal_equality"] / normb,
        max(-res["min_eigenvalue"], 0.0),
        res["dual_equality"] / normc,
        max(-res["dual_min_eigenvalue"], 0.0),
    )
    gap = abs(dv - pv) / (1.0 + abs(pv) + abs(dv))
    if worst <= feas_tol and gap <= gap_tol:
        return Status.OPTIMAL
    if worst <= near_tol and gap <= near_tol:
        return Status.NEAR_OPTIMAL
    return Status.NUMERICAL_FAILURE
