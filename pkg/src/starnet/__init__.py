"""Gradient-free training of inverse-funnel decoders by alternating linear solves."""

from .activation import Activation, act_apply, act_invert
from .conv_layer import (
    ConvSpec,
    ConvUnpoolLayer,
    build_conv_operator,
    conv_forward,
    conv_solve_latents,
    conv_solve_weights,
    extract_patches,
    pool,
    unpool,
)
from .diagnostics import ResidualReport, flag_outliers, residual_report
from .ff_layer import FeedforwardLayer, FFSpec, ff_forward, ff_solve_latents, ff_solve_weights
from .linalg import SolveReport, column_rank_ok, least_squares, pseudoinverse
from .trainer import (
    Architecture,
    History,
    LatentTable,
    Model,
    TrainConfig,
    Violation,
    elastic_loss,
    infer_latents,
    reconstruct,
    train,
    train_layer,
    validate_architecture,
)

__version__ = "0.1.0"
