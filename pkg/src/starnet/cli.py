"""Command-line entry point: ``starnet {train,infer,reconstruct,validate,diagnose}``.

Settings come from built-in defaults, then an optional ``--config`` file of
``key = value`` lines (keys are flag names, dashes or underscores), then
command-line flags, with later sources winning.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import data_io
from .activation import DEFAULT_SLOPE
from .conv_layer import ConvSpec
from .diagnostics import flag_outliers, residual_report, write_report_csv
from .errors import (
    ArchitectureError,
    ConfigError,
    DeterminednessViolation,
    FormatError,
    InsufficientData,
    NonInvertibleActivation,
    RankDeficient,
    ShapeMismatch,
    StarNetError,
)
from .ff_layer import FFSpec
from .trainer import Architecture, TrainConfig, infer_latents, reconstruct, train, validate_architecture

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_INVALID_ARCH = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5

DEFAULTS = {
    "dataset_kind": "auto",
    "limit": None,
    "slope": DEFAULT_SLOPE,
    "epochs": 10,
    "plateau_tol": 1e-3,
    "sample_size": None,
    "chunks": 1,
    "seed": 0,
    "workers": 1,
    "out": ".",
    "progress_images": False,
    "first_step": "sl",
    "level": 0,
    "z": 3.0,
    "cols": 8,
    "grid_count": 32,
}

CASTS = {
    "limit": int, "slope": float, "epochs": int, "plateau_tol": float, "sample_size": int,
    "chunks": int, "seed": int, "workers": int, "level": int, "layer": int, "z": float,
    "cols": int, "n": int, "grid_count": int,
}


def parse_arch(text, slope=DEFAULT_SLOPE):
    """Parse an architecture string.

    ``"128,256,784"`` is a feedforward chain (latent width first).
    ``"conv:4x8x8:k7:m4:u2"`` is a conv-unpool layer with 4 input channels of
    8x8, 7x7 kernels, 4 pre-shuffle channels and 2x2 unpooling. Segments are
    joined with ``;`` and may be mixed.
    """
    layers = []
    for seg in (s.strip() for s in str(text).split(";")):
        if not seg:
            continue
        if seg.startswith("conv:"):
            parts = seg.split(":")[1:]
            try:
                c, h, w = (int(v) for v in parts[0].lower().split("x"))
                opts = {p[0]: int(p[1:]) for p in parts[1:]}
                layers.append(ConvSpec(c, h, w, opts["k"], opts["m"], opts.get("u", 2)))
            except (ValueError, KeyError, IndexError) as exc:
                raise ConfigError(f"bad conv layer spec {seg!r}: expected conv:CxHxW:kK:mM[:uU]") from exc
        else:
            try:
                dims = [int(v) for v in seg.split(",")]
            except ValueError as exc:
                raise ConfigError(f"bad feedforward spec {seg!r}: expected comma-separated widths") from exc
            if len(dims) < 2:
                raise ConfigError(f"feedforward spec {seg!r} needs at least two widths")
            layers.extend(FFSpec(a, b) for a, b in zip(dims[:-1], dims[1:]))
    if not layers:
        raise ConfigError("architecture is empty")
    return Architecture(layers, slope)


def read_config(path):
    cfg = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for no, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{no}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        cfg[key.replace("-", "_")] = value
    return cfg


def _coerce(key, value):
    if value is None:
        return None
    if key == "progress_images":
        if isinstance(value, bool):
            return value
        return str(value).lower() in ("1", "true", "yes", "on")
    if key in CASTS:
        try:
            return CASTS[key](value)
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {value!r}") from exc
    return value


def _settings(args):
    merged = dict(DEFAULTS)
    if getattr(args, "config", None):
        merged.update(read_config(args.config))
    merged.update({k: v for k, v in vars(args).items() if v is not None and k not in ("command", "config")})
    return {k: _coerce(k, v) for k, v in merged.items()}


def _load_dataset(s):
    path = s.get("dataset")
    if not path:
        raise ConfigError("--dataset is required")
    kind = _dataset_kind(s, path)
    batch = data_io.load_cifar10(path) if kind == "cifar10" else data_io.load_idx(path)
    if s.get("limit"):
        batch = batch.subset(s["limit"])
    return batch


def _dataset_kind(s, path):
    kind = s.get("dataset_kind", "auto")
    if kind == "auto":
        kind = "cifar10" if str(path).endswith(".bin") else "idx"
    if kind not in ("idx", "cifar10"):
        raise ConfigError(f"unknown dataset kind {kind!r}")
    return kind


def _dataset_header(s):
    path = s["dataset"]
    if _dataset_kind(s, path) == "cifar10":
        n, shape = data_io.cifar10_header(path)
    else:
        n, shape = data_io.idx_header(path)
    if s.get("limit"):
        n = min(n, s["limit"])
    return n, shape


def _train_config(s):
    return TrainConfig(
        max_epochs=s["epochs"], plateau_rel_tol=s["plateau_tol"], sample_size=s["sample_size"],
        chunks=s["chunks"], seed=s["seed"], first_step=s["first_step"], workers=s["workers"])


def _image_shape(s, dim):
    if s.get("image_shape"):
        try:
            shape = tuple(int(v) for v in str(s["image_shape"]).lower().split("x"))
        except ValueError as exc:
            raise ConfigError(f"bad --image-shape {s['image_shape']!r}") from exc
        if len(shape) != 3 or math.prod(shape) != dim:
            raise ConfigError(f"--image-shape {s['image_shape']} does not hold {dim} values")
        return shape
    if dim == 3 * 32 * 32:
        return (3, 32, 32)
    side = math.isqrt(dim)
    if side * side == dim:
        return (1, side, side)
    raise ConfigError(f"cannot infer an image shape for {dim} values; pass --image-shape")


def _grid(s, matrix, shape, path):
    count = min(s["grid_count"], matrix.shape[0])
    if count:
        data_io.write_image_grid(data_io.unflatten(matrix[:count], shape), s["cols"], path)


def cmd_train(s):
    arch = parse_arch(_require(s, "arch"), s["slope"])
    cfg = _train_config(s)
    _require(s, "dataset")
    n, header_shape = _dataset_header(s)
    violations = validate_architecture(arch, n, data_dim=math.prod(header_shape), sample_size=cfg.sample_size)
    if violations:
        raise ArchitectureError(violations)
    batch = _load_dataset(s)
    x = data_io.flatten(batch)
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    shape = batch.image_shape
    ext = "pgm" if shape[0] == 1 else "ppm"

    on_step = None
    if s["progress_images"] and shape[0] in (1, 3):
        def on_step(rec, recon, _layer):
            _grid(s, recon, shape, out / f"progress_L{rec.layer}_E{rec.epoch}_{rec.phase}.{ext}")

    model, latents, history = train(arch, x, cfg, on_step=on_step)
    data_io.save_model(model, out / "model.star")
    data_io.write_metrics_csv(history, out / "metrics.csv")
    data_io.write_latents_csv(latents.levels[0], out / "latents.csv")
    if shape[0] in (1, 3):
        _grid(s, x, shape, out / f"targets.{ext}")
        _grid(s, reconstruct(model, latents.levels[0], 0, cfg.workers), shape, out / f"reconstruction.{ext}")
    for layer, epoch in sorted(history.plateau_epoch.items()):
        state = f"plateau at epoch {epoch}" if epoch else f"no plateau within {cfg.max_epochs} epochs"
        print(f"layer {layer}: {state}")
    print(f"wrote {out / 'model.star'}")
    return EXIT_OK


def cmd_infer(s):
    model = data_io.load_model(_require(s, "model"))
    level = s["level"]
    if not 0 <= level < model.depth:
        raise ConfigError(f"--level must lie in [0, {model.depth - 1}]")
    x = data_io.flatten(_load_dataset(s))
    table = infer_latents(model, x, workers=s["workers"])
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    data_io.write_latents_csv(table.levels[level], out / "latents.csv")
    np.save(out / "latents.npy", table.levels[level])
    print(f"wrote {table.n} latent vectors of width {table.levels[level].shape[1]} to {out / 'latents.csv'}")
    return EXIT_OK


def cmd_reconstruct(s):
    model = data_io.load_model(_require(s, "model"))
    level = s["level"]
    if s.get("latents"):
        h = data_io.read_latents_csv(s["latents"])
        shape = None
    else:
        batch = _load_dataset(s)
        shape = batch.image_shape
        table = infer_latents(model, data_io.flatten(batch), workers=s["workers"])
        h = table.levels[level] if level < model.depth else data_io.flatten(batch)
    x_hat = reconstruct(model, h, level, s["workers"])
    shape = shape or _image_shape(s, x_hat.shape[1])
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / ("reconstruction.pgm" if shape[0] == 1 else "reconstruction.ppm")
    _grid(s, x_hat, shape, path)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_validate(s):
    arch = parse_arch(_require(s, "arch"), s["slope"])
    data_dim = None
    if s.get("dataset"):
        n, shape = _dataset_header(s)
        data_dim = math.prod(shape)
    elif s.get("n") is not None:
        n = s["n"]
    else:
        raise ConfigError("validate needs --dataset or --n")
    violations = validate_architecture(arch, n, data_dim=data_dim, sample_size=s["sample_size"])
    print(f"N = {n}" + (f", data dim = {data_dim}" if data_dim is not None else ""))
    print(f"{'layer':>5}  {'type':<5} {'shape':<28} status")
    for i, spec in enumerate(arch.layers, 1):
        own = [v.kind for v in violations if v.layer == i]
        print(f"{i:>5}  {spec.kind:<5} {_describe(spec):<28} {', '.join(own) if own else 'ok'}")
    for v in violations:
        print(f"VIOLATION {v}")
    if violations:
        raise ArchitectureError(violations)
    print("all solvability conditions hold")
    return EXIT_OK


def _describe(spec):
    if isinstance(spec, ConvSpec):
        c, h, w = spec.in_shape
        oc, oh, ow = spec.out_shape
        return f"{c}x{h}x{w} -> {oc}x{oh}x{ow} (k={spec.kernel_size})"
    return f"{spec.in_dim} -> {spec.out_dim}"


def cmd_diagnose(s):
    model = data_io.load_model(_require(s, "model"))
    x = data_io.flatten(_load_dataset(s))
    layer_no = s.get("layer") or model.depth
    if not 1 <= layer_no <= model.depth:
        raise ConfigError(f"--layer must lie in [1, {model.depth}]")
    table = infer_latents(model, x, workers=s["workers"])
    targets = x if layer_no == model.depth else table.levels[layer_no]
    layer = model.layers[layer_no - 1]
    report = residual_report(layer, model.activation, table.levels[layer_no - 1], targets,
                             layer_index=layer_no, workers=s["workers"])
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv(report, out / "residuals.csv", z=s["z"])
    flagged = flag_outliers(report, s["z"]) if len(report) >= 2 else []
    print(f"layer {layer_no}: mean residual {report.norms.mean():.6g}, {len(flagged)} flagged (z={s['z']})")
    return EXIT_OK


def _require(s, key):
    if not s.get(key):
        raise ConfigError(f"--{key.replace('_', '-')} is required")
    return s[key]


COMMANDS = {
    "train": cmd_train,
    "infer": cmd_infer,
    "reconstruct": cmd_reconstruct,
    "validate": cmd_validate,
    "diagnose": cmd_diagnose,
}


def build_parser():
    p = argparse.ArgumentParser(prog="starnet", description="Gradient-free decoder training by linear solves.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, argument_default=None)
        sp.add_argument("--config")
        sp.add_argument("--dataset")
        sp.add_argument("--dataset-kind", choices=["auto", "idx", "cifar10"])
        sp.add_argument("--limit", type=int, help="use only the first N datapoints")
        sp.add_argument("--arch")
        sp.add_argument("--slope", type=float)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--plateau-tol", type=float)
        sp.add_argument("--sample-size", type=int)
        sp.add_argument("--chunks", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--out")
        sp.add_argument("--progress-images", action="store_const", const=True)
        sp.add_argument("--first-step", choices=["sl", "sw", "SL", "SW"])
        sp.add_argument("--model")
        sp.add_argument("--latents")
        sp.add_argument("--level", type=int)
        sp.add_argument("--layer", type=int)
        sp.add_argument("--z", type=float)
        sp.add_argument("--n", type=int, help="dataset size for validate without a dataset")
        sp.add_argument("--image-shape")
        sp.add_argument("--cols", type=int)
        sp.add_argument("--grid-count", type=int)
    return p


def _exit_code(exc):
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, ArchitectureError):
        return EXIT_INVALID_ARCH
    if isinstance(exc, (FormatError, OSError)):
        return EXIT_DATA
    if isinstance(exc, (RankDeficient, InsufficientData, ShapeMismatch,
                        DeterminednessViolation, NonInvertibleActivation)):
        return EXIT_NUMERIC
    return EXIT_ERROR


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        s = _settings(args)
        return COMMANDS[args.command](s)
    except (StarNetError, OSError, ValueError) as exc:
        kind = type(exc).__name__
        if isinstance(exc, ArchitectureError) and exc.violations:
            kind = exc.violations[0].kind
        msg = " ".join(str(exc).split())
        print(f"error: {kind}: {msg}", file=sys.stderr)
        return _exit_code(exc)


run = main


if __name__ == "__main__":
    sys.exit(main())
