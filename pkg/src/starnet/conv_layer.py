"""Conv-unpool layer.

A stride-1 *full* convolution (zero padding of ``k - 1`` on every side, so an
``H x W`` input yields ``(H + k - 1) x (W + k - 1)`` outputs) followed by a
pixel-shuffle that turns each group of ``u*u`` channels into ``u x u`` spatial
blocks. The convolution is written as a correlation: output ``(j, p, q)`` is
the dot product of kernel row ``j`` with the padded input window whose
top-left corner is ``(p, q)``. Kernels carry no bias.

Response maps are plain arrays shaped ``(C, H, W)`` (or ``(N, C, H, W)`` for
batches); flattening is channel-major then row-major.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DeterminednessViolation, InsufficientData, RankDeficient, ShapeMismatch
from .linalg import (
    DEFAULT_RANK_TOL,
    LeastSquares,
    StreamingLeastSquares,
    column_rank_ok,
    ensure_matrix,
    map_row_blocks,
)

MAX_INIT_DRAWS = 100
# Images per block fed to the streaming weight solver.
STREAM_IMAGES = 16


def unpool(x, u):
    """Pixel-shuffle: ``(..., C*u*u, H, W) -> (..., C, H*u, W*u)``.

    Channel ``c*u*u + i*u + j`` at pixel ``(p, q)`` lands at ``(c, p*u + i, q*u + j)``.
    """
    x = np.asarray(x)
    if x.ndim < 3:
        raise ShapeMismatch(f"response map must have at least 3 dims, got {x.shape}")
    *lead, m, h, w = x.shape
    if u < 1 or m % (u * u):
        raise ShapeMismatch(f"{m} channels cannot be unpooled by {u}x{u}")
    c = m // (u * u)
    y = x.reshape(*lead, c, u, u, h, w)
    nl = len(lead)
    axes = list(range(nl)) + [nl, nl + 3, nl + 1, nl + 4, nl + 2]
    return y.transpose(axes).reshape(*lead, c, h * u, w * u)


def pool(x, u):
    """Exact inverse of :func:`unpool`: ``(..., C, H*u, W*u) -> (..., C*u*u, H, W)``."""
    x = np.asarray(x)
    if x.ndim < 3:
        raise ShapeMismatch(f"response map must have at least 3 dims, got {x.shape}")
    *lead, c, hu, wu = x.shape
    if u < 1 or hu % u or wu % u:
        raise ShapeMismatch(f"spatial size {hu}x{wu} is not divisible by {u}")
    h, w = hu // u, wu // u
    y = x.reshape(*lead, c, h, u, w, u)
    nl = len(lead)
    axes = list(range(nl)) + [nl, nl + 2, nl + 4, nl + 1, nl + 3]
    return y.transpose(axes).reshape(*lead, c * u * u, h, w)


def extract_patches(x, k, mode="full"):
    """im2col for full convolution.

    ``x`` is ``(C, H, W)`` or ``(N, C, H, W)``. Returns ``(P, C*k*k)`` (or
    ``(N, P, C*k*k)``) with ``P = (H + k - 1) * (W + k - 1)`` rows in raster
    order of output positions. Taps outside the input read as zero.
    """
    if mode != "full":
        raise ValueError(f"only full convolution is supported, got mode={mode!r}")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ShapeMismatch(f"expected (C, H, W) or (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    pad = k - 1
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(padded, (k, k), axis=(2, 3))  # n, c, Ho, Wo, k, k
    ho, wo = h + pad, w + pad
    patches = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * k * k)
    return patches[0] if single else patches


@dataclass(frozen=True)
class ConvSpec:
    """Shape descriptor of a conv-unpool layer (no weights)."""

    in_channels: int
    in_height: int
    in_width: int
    kernel_size: int
    pre_shuffle_channels: int
    unpool: int = 2

    kind = "conv"

    @property
    def conv_height(self):
        return self.in_height + self.kernel_size - 1

    @property
    def conv_width(self):
        return self.in_width + self.kernel_size - 1

    @property
    def out_channels(self):
        return self.pre_shuffle_channels // (self.unpool ** 2)

    @property
    def out_height(self):
        return self.conv_height * self.unpool

    @property
    def out_width(self):
        return self.conv_width * self.unpool

    @property
    def in_shape(self):
        return (self.in_channels, self.in_height, self.in_width)

    @property
    def out_shape(self):
        return (self.out_channels, self.out_height, self.out_width)

    @property
    def in_dim(self):
        return self.in_channels * self.in_height * self.in_width

    @property
    def out_dim(self):
        return self.pre_shuffle_channels * self.conv_height * self.conv_width

    @property
    def kernel_params(self):
        return self.in_channels * self.kernel_size ** 2

    @property
    def patches_per_image(self):
        return self.conv_height * self.conv_width


class ConvUnpoolLayer:
    """Conv-unpool layer with ``kernels`` of shape ``m x (c_in * k * k)``."""

    kind = "conv"

    def __init__(self, spec, kernels):
        self.spec = spec
        self.kernels = ensure_matrix(kernels, "kernels")
        u2 = spec.unpool ** 2
        if spec.pre_shuffle_channels % u2:
            raise ShapeMismatch(
                f"{spec.pre_shuffle_channels} pre-shuffle channels not divisible by {u2}"
            )
        expected = (spec.pre_shuffle_channels, spec.kernel_params)
        if self.kernels.shape != expected:
            raise ShapeMismatch(f"kernels have shape {self.kernels.shape}, expected {expected}")

    def __repr__(self):
        return f"ConvUnpoolLayer({self.spec})"

    def __getattr__(self, name):
        # descriptor properties (in_dim, out_shape, ...) come from the layer descriptor
        if name == "spec":
            raise AttributeError(name)
        return getattr(self.spec, name)

    def equations_per_datapoint(self):
        return self.spec.out_dim

    def conv_full(self, x):
        """Pre-shuffle full convolution of ``(C, H, W)`` or ``(N, C, H, W)`` maps."""
        s = self.spec
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.shape[1:] != s.in_shape:
            raise ShapeMismatch(f"input maps have shape {x.shape[1:]}, expected {s.in_shape}")
        patches = extract_patches(x, s.kernel_size)
        out = np.matmul(patches, self.kernels.T)  # n, P, m
        out = out.transpose(0, 2, 1).reshape(-1, s.pre_shuffle_channels, s.conv_height, s.conv_width)
        return out[0] if single else out

    def forward_linear(self, h_prev, workers=1):
        s = self.spec
        h_prev = _flat(h_prev, s.in_dim, "layer input")

        def block(b):
            y = unpool(self.conv_full(b.reshape(-1, *s.in_shape)), s.unpool)
            return y.reshape(b.shape[0], -1)

        return map_row_blocks(block, h_prev, workers)

    def forward(self, act, h_prev, workers=1):
        return act.apply(self.forward_linear(h_prev, workers))

    def linear_targets(self, act, h_target):
        """Pooled, inverse-activated targets, flattened to match the operator rows."""
        s = self.spec
        h_target = _flat(h_target, int(np.prod(s.out_shape)), "targets")
        maps = act.invert(h_target).reshape(-1, *s.out_shape)
        return pool(maps, s.unpool).reshape(h_target.shape[0], -1)

    def factorize(self, tol=DEFAULT_RANK_TOL):
        s = self.spec
        if s.out_dim < s.in_dim:
            raise DeterminednessViolation(
                f"{s.out_dim} equations per datapoint for {s.in_dim} unknown latents"
            )
        return LeastSquares(build_conv_operator(self), tol)

    def solve_latents(self, act, h_target, tol=DEFAULT_RANK_TOL, workers=1, system=None):
        if system is None:
            system = self.factorize(tol)
        return system.solve_rows(self.linear_targets(act, h_target), workers)

    def linear_residuals(self, act, h_prev, h_target, workers=1):
        r = self.forward_linear(h_prev, workers) - act.invert(
            _flat(h_target, int(np.prod(self.spec.out_shape)), "targets")
        )
        return np.sqrt(np.einsum("ij,ij->i", r, r))


def _flat(x, cols, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        x = x.reshape(x.shape[0], -1) if x.ndim > 2 else x
    if x.ndim != 2 or x.shape[1] != cols:
        raise ShapeMismatch(f"{name} has shape {x.shape}, expected (N, {cols})")
    return x


def build_conv_operator(layer):
    """Explicit matrix ``A`` with ``flatten(conv_full(X)) = A @ flatten(X)``.

    Rows follow the pre-shuffle output ``(j, p, q)``, columns the input
    ``(c, y, x)``, both channel-major. Input pixel ``(y, x)`` sits at padded
    position ``(y + k - 1, x + k - 1)`` and meets kernel tap
    ``(y + k - 1 - p, x + k - 1 - q)`` of output ``(p, q)``.
    """
    s = layer.spec
    k = s.kernel_size
    c_in, h, w = s.in_shape
    m, ho, wo = s.pre_shuffle_channels, s.conv_height, s.conv_width
    kern = layer.kernels.reshape(m, c_in, k, k)
    a = np.zeros((m, ho, wo, c_in, h, w))
    ys, xs = np.arange(h), np.arange(w)
    for dy in range(k):
        for dx in range(k):
            # output (p, q) = (y + k - 1 - dy, x + k - 1 - dx)
            ps, qs = ys + k - 1 - dy, xs + k - 1 - dx
            # separated advanced indices put the (h, w) dims first
            a[:, ps[:, None], qs[None, :], :, ys[:, None], xs[None, :]] = kern[None, None, :, :, dy, dx]
    return a.reshape(m * ho * wo, c_in * h * w)


def init_conv_layer(spec, rng, tol=DEFAULT_RANK_TOL):
    """Gaussian kernels with scale 1/sqrt(c_in*k*k), redrawn until the operator has full column rank."""
    scale = 1.0 / np.sqrt(spec.kernel_params)
    for _ in range(MAX_INIT_DRAWS):
        layer = ConvUnpoolLayer(spec, rng.standard_normal((spec.pre_shuffle_channels, spec.kernel_params)) * scale)
        if spec.out_dim < spec.in_dim or column_rank_ok(build_conv_operator(layer), tol):
            return layer
    raise RankDeficient(f"could not draw kernels with a full-rank operator for {spec}")


def conv_forward(layer, act, x):
    """``act(unpool(conv_full(x)))`` on ``(C, H, W)`` or ``(N, C, H, W)`` maps."""
    return act.apply(unpool(layer.conv_full(x), layer.spec.unpool))


def conv_solve_latents(layer, act, y_target, tol=DEFAULT_RANK_TOL, workers=1):
    """Least-squares input maps for target output maps.

    Returns ``(maps, residual_norms)`` with maps shaped like the layer input.
    """
    y = np.asarray(y_target, dtype=np.float64)
    single = y.ndim == 3
    if single:
        y = y[None]
    if y.shape[1:] != layer.spec.out_shape:
        raise ShapeMismatch(f"targets have shape {y.shape[1:]}, expected {layer.spec.out_shape}")
    x, norms = layer.solve_latents(act, y.reshape(y.shape[0], -1), tol=tol, workers=workers)
    x = x.reshape(-1, *layer.spec.in_shape)
    return (x[0], norms[0]) if single else (x, norms)


def sample_indices(n, sample_size, rng):
    """Sorted uniform sample of datapoint indices without replacement (all if ``sample_size`` covers ``n``)."""
    if sample_size is None or sample_size >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=sample_size, replace=False))


def _stream_solve(spec, inputs, lin_targets, idx, tol):
    solver = StreamingLeastSquares(spec.kernel_params, spec.pre_shuffle_channels)
    m, p = spec.pre_shuffle_channels, spec.patches_per_image
    for s in range(0, len(idx), STREAM_IMAGES):
        sel = idx[s:s + STREAM_IMAGES]
        patches = extract_patches(inputs[sel].reshape(-1, *spec.in_shape), spec.kernel_size)
        rhs = lin_targets[sel].reshape(-1, m, p).transpose(0, 2, 1)
        solver.update(patches.reshape(-1, spec.kernel_params), rhs.reshape(-1, m))
    return solver.finish(tol).solution.T


def conv_solve_weights(spec, inputs, act, targets, sample_size=None, chunks=1, rng=None,
                       tol=DEFAULT_RANK_TOL, workers=1):
    """Least-squares kernels for a conv-unpool layer.

    ``inputs`` and ``targets`` are flat (N x dim) or map-shaped batches. A
    uniform sample of ``sample_size`` datapoints (all of them when ``None``)
    contributes every one of its patches. With ``chunks > 1`` the sample is
    split into contiguous chunks, each chunk is solved on its own, and the
    elementwise mean of the chunk solutions is returned.
    """
    inputs = _flat(np.asarray(inputs, dtype=np.float64).reshape(len(inputs), -1), spec.in_dim, "inputs")
    targets = np.asarray(targets, dtype=np.float64).reshape(len(targets), -1)
    if targets.shape[0] != inputs.shape[0]:
        raise ShapeMismatch(f"{inputs.shape[0]} inputs but {targets.shape[0]} targets")
    if rng is None:
        rng = np.random.default_rng(0)
    idx = sample_indices(inputs.shape[0], sample_size, rng)
    parts = [p for p in np.array_split(idx, max(1, int(chunks))) if len(p)]
    for p in parts:
        if len(p) * spec.patches_per_image < spec.kernel_params:
            raise InsufficientData(
                f"{len(p) * spec.patches_per_image} equations for {spec.kernel_params} kernel weights"
            )
    shell = ConvUnpoolLayer(spec, np.zeros((spec.pre_shuffle_channels, spec.kernel_params)))
    lin = shell.linear_targets(act, targets)
    if workers > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool_:
            sols = list(pool_.map(lambda p: _stream_solve(spec, inputs, lin, p, tol), parts))
    else:
        sols = [_stream_solve(spec, inputs, lin, p, tol) for p in parts]
    kernels = sols[0].copy()
    for s in sols[1:]:
        kernels += s
    if len(sols) > 1:
        kernels /= len(sols)
    return ConvUnpoolLayer(spec, kernels)
