"""Feedforward layer: forward pass, latent solve and weight solve."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientData, RankDeficient, ShapeMismatch
from .linalg import (
    DEFAULT_RANK_TOL,
    LeastSquares,
    column_rank_ok,
    ensure_matrix,
    rowwise_matmul,
    map_row_blocks,
)

MAX_INIT_DRAWS = 100


@dataclass(frozen=True)
class FFSpec:
    """Shape descriptor of a feedforward layer (no weights)."""

    in_dim: int
    out_dim: int

    kind = "ff"


@dataclass
class FeedforwardLayer:
    """Maps ``in_dim`` inputs to ``out_dim`` outputs.

    ``weights`` is ``out_dim x (in_dim + 1)``; the last column is the bias,
    i.e. the weight of a constant input coordinate fixed at 1.
    """

    weights: np.ndarray

    kind = "ff"

    def __post_init__(self):
        self.weights = ensure_matrix(self.weights, "weights")
        if self.weights.shape[1] < 1:
            raise ShapeMismatch("weights need at least the bias column")

    @property
    def in_dim(self):
        return self.weights.shape[1] - 1

    @property
    def out_dim(self):
        return self.weights.shape[0]

    @property
    def spec(self):
        return FFSpec(self.in_dim, self.out_dim)

    @property
    def linear(self):
        return self.weights[:, :-1]

    @property
    def bias(self):
        return self.weights[:, -1]

    def equations_per_datapoint(self):
        return self.out_dim

    def forward_linear(self, h_prev, workers=1):
        h_prev = _check_cols(h_prev, self.in_dim, "layer input")
        lin_t = np.ascontiguousarray(self.linear.T)
        return map_row_blocks(lambda blk: rowwise_matmul(blk, lin_t) + self.bias, h_prev, workers)

    def forward(self, act, h_prev, workers=1):
        return act.apply(self.forward_linear(h_prev, workers))

    def linear_targets(self, act, h_target):
        h_target = _check_cols(h_target, self.out_dim, "targets")
        return act.invert(h_target) - self.bias

    def factorize(self, tol=DEFAULT_RANK_TOL):
        if self.in_dim > self.out_dim:
            raise RankDeficient(f"layer {self.in_dim}->{self.out_dim} is underdetermined")
        return LeastSquares(self.linear, tol)

    def solve_latents(self, act, h_target, tol=DEFAULT_RANK_TOL, workers=1, system=None):
        return ff_solve_latents(self, act, h_target, tol=tol, workers=workers, system=system)

    def linear_residuals(self, act, h_prev, h_target, workers=1):
        h_target = _check_cols(h_target, self.out_dim, "targets")
        r = self.forward_linear(h_prev, workers) - act.invert(h_target)
        return np.sqrt(np.einsum("ij,ij->i", r, r))


def _check_cols(x, cols, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cols:
        raise ShapeMismatch(f"{name} has shape {x.shape}, expected (N, {cols})")
    return x


def init_ff_layer(in_dim, out_dim, rng, orthogonal=False, tol=DEFAULT_RANK_TOL):
    """Gaussian weights with scale 1/sqrt(in_dim), redrawn until full column rank."""
    if in_dim > out_dim:
        raise RankDeficient(f"layer {in_dim}->{out_dim} is not an inverse funnel")
    scale = 1.0 / np.sqrt(max(in_dim, 1))
    for _ in range(MAX_INIT_DRAWS):
        w = rng.standard_normal((out_dim, in_dim + 1)) * scale
        if orthogonal and in_dim > 0:
            q, r = np.linalg.qr(w[:, :-1])
            w[:, :-1] = q * np.sign(np.diag(r))
        if column_rank_ok(w[:, :-1], tol):
            return FeedforwardLayer(w)
    raise RankDeficient(f"could not draw a full-rank {out_dim}x{in_dim} weight matrix")


def ff_forward(layer, act, h_prev, workers=1):
    """``act(W h + b)`` for every row of ``h_prev``."""
    return layer.forward(act, h_prev, workers)


def ff_solve_latents(layer, act, h_target, tol=DEFAULT_RANK_TOL, workers=1, system=None):
    """Least-squares inputs for the given outputs, one datapoint per row.

    Solves ``W h = act^-1(target) - b`` for every row. Returns the solved
    latents (N x in_dim) and the residual norm of each datapoint's system.
    ``system`` may carry a prebuilt factorization of ``W``.
    """
    rhs = layer.linear_targets(act, h_target)
    if system is None:
        system = layer.factorize(tol)
    return system.solve_rows(rhs, workers)


def ff_solve_weights(h_prev, act, h_target, tol=DEFAULT_RANK_TOL, workers=1):
    """Least-squares weights (with bias) mapping ``h_prev`` to ``h_target``.

    Each output row of the weight matrix is an independent system with N
    equations and ``in_dim + 1`` unknowns; all rows share one factorization.
    """
    h_prev = ensure_matrix(h_prev, "inputs")
    h_target = ensure_matrix(h_target, "targets")
    n, d = h_prev.shape
    if h_target.shape[0] != n:
        raise ShapeMismatch(f"{n} inputs but {h_target.shape[0]} targets")
    if n < d + 1:
        raise InsufficientData(f"{n} datapoints cannot determine {d + 1} weights per row")
    design = np.hstack([h_prev, np.ones((n, 1))])
    system = LeastSquares(design, tol)
    rows, _ = system.solve_rows(np.ascontiguousarray(act.invert(h_target).T), workers)
    return FeedforwardLayer(rows)
