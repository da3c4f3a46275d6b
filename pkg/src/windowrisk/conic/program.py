"""Slot-structured conic programs and their solutions."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class ConicError(ValueError):
    pass


@dataclass
class PsdBlock:
    """Affine matrix ``Z(y) = z(y)[slot_index]`` with ``z(y) = S @ y + z0``.

    Entries sharing a slot are equal, which is how Hankel-like moment
    structure is stored without repeating coefficient matrices.
    """

    slot_index: np.ndarray
    S: sp.csr_matrix
    z0: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.slot_index = np.asarray(self.slot_index, dtype=np.int64)
        n = self.slot_index.shape[0]
        if self.slot_index.shape != (n, n) or n < 1:
            raise ConicError(f"block {self.label!r}: slot_index must be square and non-empty")
        if not np.array_equal(self.slot_index, self.slot_index.T):
            raise ConicError(f"block {self.label!r}: slot_index must be symmetric")
        self.S = sp.csr_matrix(self.S)
        self.z0 = np.asarray(self.z0, float)
        nslots = self.S.shape[0]
        if self.z0.shape != (nslots,) or self.slot_index.min() < 0 or self.slot_index.max() >= nslots:
            raise ConicError(f"block {self.label!r}: slot data inconsistent")

    @property
    def size(self) -> int:
        return self.slot_index.shape[0]

    @property
    def nslots(self) -> int:
        return self.S.shape[0]

    def matrix(self, y) -> np.ndarray:
        return (self.S @ np.asarray(y, float) + self.z0)[self.slot_index]

    def adjoint(self, X) -> np.ndarray:
        """Gradient of ``<X, Z(y)>`` with respect to ``y``."""
        xs = np.bincount(self.slot_index.ravel(), weights=np.asarray(X).ravel(), minlength=self.nslots)
        return self.S.T @ xs

    def offset_inner(self, X) -> float:
        xs = np.bincount(self.slot_index.ravel(), weights=np.asarray(X).ravel(), minlength=self.nslots)
        return float(xs @ self.z0)

    def coefficient_matrix(self, var: int) -> np.ndarray:
        """Dense ``F_var`` (zero matrix when ``var`` is absent from the block)."""
        col = self.S[:, var].toarray().ravel()
        return col[self.slot_index]

    def constant_matrix(self) -> np.ndarray:
        return self.z0[self.slot_index]

    def variables(self) -> np.ndarray:
        return np.unique(self.S.indices)


@dataclass
class ConicProgram:
    """``maximize c.y`` subject to ``A y = b`` and ``Z_j(y) >= 0`` (PSD)."""

    c: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    blocks: list[PsdBlock]
    labels: list[str] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.c = np.asarray(self.c, float)
        n = self.c.shape[0]
        self.A = sp.csr_matrix(self.A) if self.A is not None else sp.csr_matrix((0, n))
        self.b = np.asarray(self.b, float).reshape(-1)
        if self.A.shape != (self.b.shape[0], n):
            raise ConicError(f"A has shape {self.A.shape}, expected ({self.b.shape[0]}, {n})")
        for blk in self.blocks:
            if blk.S.shape[1] != n:
                raise ConicError(f"block {blk.label!r} refers to {blk.S.shape[1]} variables, expected {n}")
        if self.labels is not None and len(self.labels) != n:
            raise ConicError("labels must match the number of variables")

    @property
    def nvars(self) -> int:
        return self.c.shape[0]

    @property
    def neq(self) -> int:
        return self.b.shape[0]

    @property
    def block_sizes(self) -> list[int]:
        return [b.size for b in self.blocks]

    def objective(self, y) -> float:
        return float(self.c @ y)

    def fingerprint(self) -> str:
        """Hash of the numeric program data (stable across runs)."""
        h = hashlib.sha256()
        A = self.A.tocoo()
        order = np.lexsort((A.col, A.row))
        for arr in (self.c, self.b, A.row[order], A.col[order], A.data[order]):
            h.update(np.ascontiguousarray(arr).tobytes())
        for blk in self.blocks:
            S = blk.S.tocoo()
            o = np.lexsort((S.col, S.row))
            for arr in (blk.slot_index, S.row[o], S.col[o], S.data[o], blk.z0):
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]

    def residuals(self, y) -> dict:
        y = np.asarray(y, float)
        eq = float(np.max(np.abs(self.A @ y - self.b))) if self.neq else 0.0
        mins = [float(np.linalg.eigvalsh(blk.matrix(y))[0]) for blk in self.blocks]
        return {"primal_equality": eq, "min_eigenvalue": min(mins) if mins else 0.0, "block_min_eigenvalues": mins}

    def permuted(self, row_perm=None, block_perm=None) -> "ConicProgram":
        """Same program with equality rows and/or blocks reordered."""
        A, b, blocks = self.A, self.b, list(self.blocks)
        if row_perm is not None:
            A, b = A[row_perm], b[row_perm]
        if block_perm is not None:
            blocks = [blocks[i] for i in block_perm]
        return ConicProgram(self.c, A, b, blocks, self.labels, dict(self.meta))


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    NEAR_OPTIMAL = "NearOptimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    NUMERICAL_FAILURE = "NumericalFailure"

    def __str__(self):
        return self.value


@dataclass
class ConicSolution:
    """Primal moments, dual multipliers and quality measures of a solve.

    ``value`` is the primal objective ``c.y``; ``dual_value`` is the dual
    objective, which upper-bounds the optimum whenever the dual point is
    feasible.
    """

    y: np.ndarray
    value: float
    status: Status
    residuals: dict
    eq_duals: np.ndarray
    block_duals: list[np.ndarray]
    dual_value: float = float("nan")
    iterations: int = 0
    trace: list[dict] = field(default_factory=list)
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status in (Status.OPTIMAL, Status.NEAR_OPTIMAL)


def evaluate_solution(prog: ConicProgram, y, eq_duals, block_duals) -> dict:
    """Residuals recomputed from scratch for a candidate primal/dual pair."""
    y = np.asarray(y, float)
    lam = np.asarray(eq_duals, float)
    res = prog.residuals(y)
    grad = prog.A.T @ lam if prog.neq else np.zeros(prog.nvars)
    dual_obj = float(prog.b @ lam) if prog.neq else 0.0
    gap_inner = 0.0
    dmin = []
    for blk, X in zip(prog.blocks, block_duals):
        grad = grad - blk.adjoint(X)
        dual_obj += blk.offset_inner(X)
        gap_inner += float(np.sum(X * blk.matrix(y)))
        dmin.append(float(np.linalg.eigvalsh(X)[0]))
    pval = prog.objective(y)
    res.update(
        dual_equality=float(np.max(np.abs(grad - prog.c))) if prog.nvars else 0.0,
        dual_min_eigenvalue=min(dmin) if dmin else 0.0,
        primal_value=pval,
        dual_value=dual_obj,
        gap=dual_obj - pval,
        complementarity=gap_inner,
    )
    return res
