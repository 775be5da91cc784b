"""Dense least-squares machinery.

Every solve in the package goes through this module. Systems are factorized
once with a Householder QR and the resulting left inverse is applied to each
right-hand side separately (a stacked matrix-vector product), so the result
for one right-hand side never depends on how many others were solved with it.
That is what makes batched, per-row and multi-worker paths agree bit for bit.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import InsufficientData, RankDeficient, ShapeMismatch

DEFAULT_RANK_TOL = 1e-10

# Row blocks handed to worker threads. Fixed, so the partition never depends on
# the worker count.
ROW_BLOCK = 256


def ensure_matrix(a, name="matrix"):
    """Return ``a`` as a C-contiguous float64 2-D array with finite entries."""
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def rowwise_matmul(x, m):
    """``x @ m`` computed one row at a time.

    Each output row is a single matrix-vector product, so its bits depend only
    on that input row and ``m``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        return np.zeros((0, m.shape[1]))
    return np.matmul(x[:, None, :], m)[:, 0, :]


def map_row_blocks(fn, x, workers=1):
    """Apply ``fn`` to fixed-size row blocks of ``x`` and stack the results.

    ``fn`` must return an array (or tuple of arrays) with one row per input row.
    """
    n = x.shape[0]
    if workers <= 1 or n <= ROW_BLOCK:
        return fn(x)
    starts = range(0, n, ROW_BLOCK)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda s: fn(x[s:s + ROW_BLOCK]), starts))
    if isinstance(parts[0], tuple):
        return tuple(np.concatenate(p, axis=0) for p in zip(*parts))
    return np.concatenate(parts, axis=0)


def column_rank_ok(a, tol=DEFAULT_RANK_TOL):
    """True iff ``a`` has full column rank under a relative pivot test.

    Uses column-pivoted QR: the smallest diagonal magnitude of R must exceed
    ``tol`` times the largest one.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        return False
    m, n = a.shape
    if n == 0:
        return True
    if m < n or not np.all(np.isfinite(a)):
        return False
    r, _ = sla.qr(a, mode="r", pivoting=True)
    d = np.abs(np.diag(r))
    if d[0] == 0.0:
        return False
    return bool(d[-1] > tol * d[0])


@dataclass(frozen=True)
class SolveReport:
    """Least-squares solution (n x k) and the residual norm of each column."""

    solution: np.ndarray
    residual_norms: np.ndarray


class LeastSquares:
    """A factorized full-column-rank system ``A x = b``.

    Build once, then solve for any number of right-hand sides. ``operator``
    holds the left inverse ``R^-1 Q^T`` (equal to the Moore-Penrose
    pseudoinverse for full column rank ``A``).
    """

    def __init__(self, a, tol=DEFAULT_RANK_TOL):
        a = ensure_matrix(a, "A")
        m, n = a.shape
        if m < n:
            raise RankDeficient(f"system has {m} equations for {n} unknowns")
        if not column_rank_ok(a, tol):
            raise RankDeficient(f"{m}x{n} matrix fails the column rank check (tol={tol:g})")
        q, r = np.linalg.qr(a, mode="reduced")
        self.a = a
        self.operator = sla.solve_triangular(r, q.T, lower=False)
        self._a_t = np.ascontiguousarray(a.T)
        self._op_t = np.ascontiguousarray(self.operator.T)

    @property
    def shape(self):
        return self.a.shape

    def solve_rows(self, t, workers=1):
        """Solve for right-hand sides stored as the rows of ``t`` (k x m).

        Returns ``(x, norms)`` with ``x`` of shape (k x n), one solution per row.
        """
        t = np.asarray(t, dtype=np.float64)
        if t.ndim != 2 or t.shape[1] != self.a.shape[0]:
            raise ShapeMismatch(
                f"right-hand sides have shape {t.shape}, expected (*, {self.a.shape[0]})"
            )

        def solve_block(block):
            x = rowwise_matmul(block, self._op_t)
            r = rowwise_matmul(x, self._a_t) - block
            return x, np.sqrt(np.einsum("ij,ij->i", r, r))

        return map_row_blocks(solve_block, t, workers)

    def solve(self, b, workers=1):
        b = ensure_matrix(b, "B")
        if b.shape[0] != self.a.shape[0]:
            raise ShapeMismatch(f"A has {self.a.shape[0]} rows but B has {b.shape[0]}")
        x, norms = self.solve_rows(b.T, workers)
        return SolveReport(np.ascontiguousarray(x.T), norms)


def least_squares(a, b, tol=DEFAULT_RANK_TOL, workers=1):
    """Least-squares solution of ``A X = B`` for an m x n, full-column-rank ``A``."""
    a = ensure_matrix(a, "A")
    b = ensure_matrix(b, "B")
    if a.shape[0] != b.shape[0]:
        raise ShapeMismatch(f"A has {a.shape[0]} rows but B has {b.shape[0]}")
    return LeastSquares(a, tol).solve(b, workers)


def pseudoinverse(a, tol=DEFAULT_RANK_TOL):
    """Moore-Penrose pseudoinverse of a tall, full-column-rank matrix."""
    return LeastSquares(a, tol).operator.copy()


class StreamingLeastSquares:
    """Least squares over a tall system fed in row blocks.

    Keeps only the triangular factor of the augmented matrix ``[A | B]``. The
    top-left block is R of ``A``, the top-right block is ``Q^T B`` and the
    norm of each bottom-right column is the residual norm of that right-hand
    side, so neither ``A`` nor ``Q`` is ever held in memory.
    """

    def __init__(self, n_unknowns, n_rhs):
        self.n = int(n_unknowns)
        self.k = int(n_rhs)
        self.rows = 0
        self._r = np.zeros((0, self.n + self.k))

    def update(self, a_block, b_block):
        a_block = np.asarray(a_block, dtype=np.float64)
        b_block = np.asarray(b_block, dtype=np.float64)
        if a_block.ndim != 2 or a_block.shape[1] != self.n:
            raise ShapeMismatch(f"block has shape {a_block.shape}, expected (*, {self.n})")
        if b_block.shape != (a_block.shape[0], self.k):
            raise ShapeMismatch(
                f"rhs block has shape {b_block.shape}, expected ({a_block.shape[0]}, {self.k})"
            )
        if a_block.shape[0] == 0:
            return
        stacked = np.vstack([self._r, np.hstack([a_block, b_block])])
        (r,) = sla.qr(stacked, mode="r")
        self._r = r[: self.n + self.k]
        self.rows += a_block.shape[0]

    def finish(self, tol=DEFAULT_RANK_TOL):
        if self.rows < self.n:
            raise InsufficientData(f"{self.rows} equations for {self.n} unknowns")
        r_a = self._r[: self.n, : self.n]
        if not column_rank_ok(r_a, tol):
            raise RankDeficient(f"streamed {self.rows}x{self.n} system fails the column rank check")
        c = self._r[: self.n, self.n:]
        x = sla.solve_triangular(r_a, c, lower=False)
        tail = self._r[self.n:, self.n:]
        return SolveReport(x, np.sqrt(np.einsum("ij,ij->j", tail, tail)))
