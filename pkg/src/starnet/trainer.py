"""Layerwise coordinate-descent training, inference and reconstruction.

Layers are indexed 1..K with layer K adjacent to the data. Layer ``i`` maps
the level ``i-1`` latents to level ``i``; level K is the data itself. Training
starts at layer K with the data as targets, alternates latent solves (SL) and
weight solves (SW) until the summed squared linear residual plateaus, then
hands the solved latents down as the targets of layer K-1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .activation import DEFAULT_SLOPE, Activation
from .conv_layer import ConvSpec, ConvUnpoolLayer, conv_solve_weights, init_conv_layer
from .errors import ArchitectureError, ShapeMismatch
from .ff_layer import FFSpec, ff_solve_weights, init_ff_layer
from .linalg import DEFAULT_RANK_TOL

SL = "SL"
SW = "SW"
INIT = "init"
FINAL = "final"

# A layer whose epoch residual falls below this fraction of the target energy
# is treated as solved exactly.
EXACT_FLOOR = 1e-20


@dataclass(frozen=True)
class Violation:
    kind: str
    layer: int | None
    message: str

    def __str__(self):
        where = f"layer {self.layer}" if self.layer is not None else "architecture"
        return f"{self.kind} at {where}: {self.message}"


@dataclass
class Architecture:
    """Ordered layer descriptors (index 0 is layer 1) and the activation slope."""

    layers: list
    slope: float = DEFAULT_SLOPE

    @classmethod
    def feedforward(cls, dims, slope=DEFAULT_SLOPE):
        """``dims = [d_0, d_1, ..., d_K]``: latent width first, data width last."""
        dims = [int(d) for d in dims]
        return cls([FFSpec(a, b) for a, b in zip(dims[:-1], dims[1:])], slope)

    @property
    def depth(self):
        return len(self.layers)

    @property
    def latent_dim(self):
        return self.layers[0].in_dim if self.layers else 0

    @property
    def data_dim(self):
        return _out_size(self.layers[-1]) if self.layers else 0

    @property
    def activation(self):
        return Activation(self.slope)


def _out_size(spec):
    """Number of values a layer emits per datapoint (after unpooling for conv)."""
    if isinstance(spec, ConvSpec):
        return int(np.prod(spec.out_shape))
    return spec.out_dim


def validate_architecture(arch, n, data_dim=None, sample_size=None):
    """Every violated solvability condition, with the offending layer (1-based).

    An empty list means the architecture can be trained on ``n`` datapoints.
    """
    out = []
    if not arch.layers:
        return [Violation("EmptyArchitecture", None, "no layers")]
    if arch.slope <= 0.0:
        out.append(Violation("NonInvertibleActivation", None, "negative slope must be > 0"))
    for i, spec in enumerate(arch.layers, start=1):
        if i > 1 and arch.layers[i - 2] is not None:
            prev_out = _out_size(arch.layers[i - 2])
            if prev_out != spec.in_dim:
                out.append(Violation(
                    "ChainMismatch", i, f"layer {i - 1} emits {prev_out} values, layer {i} expects {spec.in_dim}"))
        if isinstance(spec, ConvSpec):
            out.extend(_conv_violations(i, spec, n, sample_size))
            continue
        if spec.in_dim < 1 or spec.out_dim < 1:
            out.append(Violation("EmptyLayer", i, f"dimensions {spec.in_dim}->{spec.out_dim}"))
            continue
        if spec.in_dim > spec.out_dim:
            out.append(Violation(
                "InverseFunnelViolation", i,
                f"d_{i - 1}={spec.in_dim} > d_{i}={spec.out_dim}; latent system is underdetermined"))
        elif spec.in_dim == spec.out_dim:
            out.append(Violation(
                "DegenerateSquareLayer", i,
                f"d_{i - 1}=d_{i}={spec.in_dim}; the layer collapses to an identity projection"))
        if spec.in_dim >= n:
            out.append(Violation(
                "DatasetTooSmall", i,
                f"{n} datapoints cannot determine {spec.in_dim + 1} weights per row (need d_{i - 1} < N)"))
    if data_dim is not None and _out_size(arch.layers[-1]) != data_dim:
        out.append(Violation(
            "DataShapeMismatch", arch.depth,
            f"last layer emits {_out_size(arch.layers[-1])} values, data has {data_dim}"))
    return out


def _conv_violations(i, s, n, sample_size):
    out = []
    u2 = s.unpool ** 2
    if min(s.in_channels, s.in_height, s.in_width, s.kernel_size, s.pre_shuffle_channels, s.unpool) < 1:
        return [Violation("EmptyLayer", i, f"non-positive size in {s}")]
    if s.pre_shuffle_channels % u2:
        out.append(Violation(
            "UnpoolDivisibility", i, f"{s.pre_shuffle_channels} channels not divisible by {u2}"))
        return out
    if s.out_channels > s.in_channels * u2:
        out.append(Violation(
            "ChannelConditionViolation", i,
            f"c_i={s.out_channels} > c_(i-1)*u^2={s.in_channels * u2}"))
    if s.out_dim < s.in_dim:
        out.append(Violation(
            "DeterminednessViolation", i,
            f"{s.out_dim} equations per image for {s.in_dim} latent unknowns"))
    images = n if sample_size is None else min(n, sample_size)
    if images * s.patches_per_image < s.kernel_params:
        out.append(Violation(
            "DatasetTooSmall", i,
            f"{images * s.patches_per_image} patch equations for {s.kernel_params} kernel weights"))
    return out


@dataclass
class TrainConfig:
    max_epochs: int = 10
    plateau_rel_tol: float = 1e-3
    sample_size: int | None = None
    chunks: int = 1
    seed: int = 0
    first_step: str = SL
    workers: int = 1
    rank_tol: float = DEFAULT_RANK_TOL
    orthogonal_init: bool = False

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not self.plateau_rel_tol > 0:
            raise ValueError("plateau_rel_tol must be > 0")
        self.first_step = self.first_step.upper()
        if self.first_step not in (SL, SW):
            raise ValueError(f"first_step must be SL or SW, got {self.first_step!r}")
        if self.chunks < 1:
            raise ValueError("chunks must be >= 1")


@dataclass(frozen=True)
class StepRecord:
    layer: int
    epoch: int
    phase: str
    linear_residual: float
    elastic_loss: float


@dataclass
class History:
    records: list = field(default_factory=list)
    plateau_epoch: dict = field(default_factory=dict)

    def extend(self, other):
        self.records.extend(other.records)
        self.plateau_epoch.update(other.plateau_epoch)

    def for_layer(self, layer):
        return [r for r in self.records if r.layer == layer]

    def epoch_residuals(self, layer):
        """Linear residual at the end of each epoch, indexed from epoch 1."""
        last = {}
        for r in self.for_layer(layer):
            if r.phase in (SL, SW):
                last[r.epoch] = r.linear_residual
        return [last[e] for e in sorted(last)]


@dataclass
class Model:
    slope: float
    layers: list

    @property
    def activation(self):
        return Activation(self.slope)

    @property
    def architecture(self):
        return Architecture([layer.spec for layer in self.layers], self.slope)

    @property
    def depth(self):
        return len(self.layers)


@dataclass
class LatentTable:
    """``levels[l]`` holds the N x d_l latents feeding layer ``l + 1``.

    ``residuals[l]`` is the per-datapoint residual norm of the system that
    produced ``levels[l]`` (empty when not recorded).
    """

    levels: list
    residuals: list = field(default_factory=list)

    @property
    def n(self):
        return self.levels[0].shape[0] if self.levels else 0


def elastic_loss(x_hat, x):
    """Mean over datapoints of L1 + L2 norm of the reconstruction error."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_hat.shape != x.shape:
        raise ShapeMismatch(f"reconstruction {x_hat.shape} vs data {x.shape}")
    if x.shape[0] == 0:
        return 0.0
    err = (x_hat - x).reshape(x.shape[0], -1)
    return float(np.mean(np.abs(err).sum(axis=1) + np.sqrt(np.einsum("ij,ij->i", err, err))))


def init_layer(spec, rng, cfg):
    if isinstance(spec, ConvSpec):
        return init_conv_layer(spec, rng, cfg.rank_tol)
    return init_ff_layer(spec.in_dim, spec.out_dim, rng, orthogonal=cfg.orthogonal_init, tol=cfg.rank_tol)


def solve_weights(layer, act, h_prev, targets, cfg, rng):
    if isinstance(layer, ConvUnpoolLayer):
        return conv_solve_weights(
            layer.spec, h_prev, act, targets, sample_size=cfg.sample_size, chunks=cfg.chunks,
            rng=rng, tol=cfg.rank_tol, workers=cfg.workers)
    return ff_solve_weights(h_prev, act, targets, tol=cfg.rank_tol, workers=cfg.workers)


def _forward_chain(layers, act, h, workers):
    for layer in layers:
        h = layer.forward(act, h, workers)
    return h


def train_layer(layer, act, targets, cfg, rng=None, layer_index=1, upper=(), data=None, on_step=None):
    """Coordinate descent on one layer.

    ``layer`` is either a descriptor (weights are drawn from ``rng``) or an
    initialized layer. ``upper`` lists already-trained layers between this one
    and the data; with ``data`` given, elastic losses are measured in data
    space through them, otherwise against ``targets``.

    Returns ``(layer, latents, history)``. The latents are always the SL
    solution for the returned weights.
    """
    targets = np.asarray(targets, dtype=np.float64)
    n = targets.shape[0]
    seeds = (rng if rng is not None else np.random.default_rng(cfg.seed)).spawn(3)
    w_rng, h_rng, s_rng = seeds
    if isinstance(layer, (FFSpec, ConvSpec)):
        layer = init_layer(layer, w_rng, cfg)
    if data is None:
        data, upper = targets, ()
    energy = float(np.einsum("ij,ij->", *(2 * [layer.linear_targets(act, targets)]))) if n else 0.0
    hist = History()

    def record(epoch, phase, h):
        res = layer.linear_residuals(act, h, targets, cfg.workers)
        recon = _forward_chain(upper, act, layer.forward(act, h, cfg.workers), cfg.workers)
        rec = StepRecord(layer_index, epoch, phase, float(np.dot(res, res)), elastic_loss(recon, data))
        hist.records.append(rec)
        if on_step is not None:
            on_step(rec, recon, layer)
        return rec.linear_residual

    # SL-first runs only use these for the "init" report; SW-first runs start from them.
    h = h_rng.standard_normal((n, layer.in_dim))
    record(0, INIT, h)

    order = (SL, SW) if cfg.first_step == SL else (SW, SL)
    prev = None
    last_phase = None
    for epoch in range(1, cfg.max_epochs + 1):
        for phase in order:
            if phase == SL:
                h, _ = layer.solve_latents(act, targets, tol=cfg.rank_tol, workers=cfg.workers)
            else:
                layer = solve_weights(layer, act, h, targets, cfg, s_rng)
            cur = record(epoch, phase, h)
            last_phase = phase
        if prev is not None and (prev <= EXACT_FLOOR * energy or prev - cur <= cfg.plateau_rel_tol * prev):
            hist.plateau_epoch[layer_index] = epoch
            break
        prev = cur
    else:
        hist.plateau_epoch[layer_index] = None
    if last_phase == SW:
        h, _ = layer.solve_latents(act, targets, tol=cfg.rank_tol, workers=cfg.workers)
        record(epoch, FINAL, h)
    return layer, h, hist


def train(arch, x, cfg=None, on_step=None):
    """Train every layer from K down to 1. Returns ``(model, latents, history)``."""
    cfg = cfg or TrainConfig()
    x = np.asarray(x, dtype=np.float64)
    x = x.reshape(x.shape[0], int(np.prod(x.shape[1:])))
    violations = validate_architecture(arch, x.shape[0], data_dim=x.shape[1], sample_size=cfg.sample_size)
    if violations:
        raise ArchitectureError(violations)
    act = arch.activation
    layer_rngs = np.random.default_rng(cfg.seed).spawn(arch.depth)
    trained = [None] * arch.depth
    levels = [None] * arch.depth
    history = History()
    targets = x
    for i in range(arch.depth - 1, -1, -1):
        layer, h, hist = train_layer(
            arch.layers[i], act, targets, cfg, rng=layer_rngs[i], layer_index=i + 1,
            upper=trained[i + 1:], data=x, on_step=on_step)
        trained[i], levels[i] = layer, h
        history.extend(hist)
        targets = h
    model = Model(arch.slope, trained)
    return model, LatentTable(levels), history


def infer_latents(model, x, tol=DEFAULT_RANK_TOL, workers=1):
    """Latent-only recursion from layer K down to 1; weights are never touched."""
    act = model.activation
    h = np.asarray(x, dtype=np.float64)
    h = h.reshape(h.shape[0], int(np.prod(h.shape[1:])))
    levels = [None] * model.depth
    residuals = [None] * model.depth
    for i in range(model.depth - 1, -1, -1):
        h, norms = model.layers[i].solve_latents(act, h, tol=tol, workers=workers)
        levels[i], residuals[i] = h, norms
    return LatentTable(levels, residuals)


def reconstruct(model, latents, level=0, workers=1):
    """Forward pass from the given level (0 = first-layer input, K = data) to the data."""
    if not 0 <= level <= model.depth:
        raise ValueError(f"level must lie in [0, {model.depth}], got {level}")
    h = np.asarray(latents, dtype=np.float64)
    return _forward_chain(model.layers[level:], model.activation, h, workers)
