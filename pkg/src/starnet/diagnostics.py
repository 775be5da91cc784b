"""Per-datapoint residuals of a layer's latent system and z-score outlier flags."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


@dataclass
class ResidualReport:
    layer_index: int | None
    norms: np.ndarray
    equation_counts: np.ndarray

    def __post_init__(self):
        self.norms = np.asarray(self.norms, dtype=np.float64)
        self.equation_counts = np.asarray(self.equation_counts, dtype=np.int64)
        if self.norms.ndim != 1 or self.norms.shape != self.equation_counts.shape:
            raise ValueError("norms and equation_counts must be 1-D of equal length")
        if np.any(self.norms < 0):
            raise ValueError("residual norms must be non-negative")

    def __len__(self):
        return self.norms.shape[0]


def residual_report(layer, act, latents, targets, layer_index=None, workers=1):
    """Norm of ``W h - act^-1(target)`` for every datapoint (bias included for feedforward layers)."""
    norms = layer.linear_residuals(act, latents, targets, workers)
    counts = np.full(norms.shape[0], layer.equations_per_datapoint(), dtype=np.int64)
    return ResidualReport(layer_index, norms, counts)


def flag_outliers(report, z=3.0):
    """Indices whose residual norm exceeds ``mean + z * std`` (population std)."""
    norms = report.norms
    if norms.shape[0] < 2:
        raise ValueError("need at least two datapoints to flag outliers")
    threshold = norms.mean() + z * norms.std()
    return np.flatnonzero(norms > threshold)


def write_report_csv(report, path, z=3.0):
    """Write ``index,residual_norm,flagged`` rows."""
    flagged = np.zeros(len(report), dtype=bool)
    if len(report) >= 2:
        flagged[flag_outliers(report, z)] = True
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "residual_norm", "flagged"])
        for i, (v, fl) in enumerate(zip(report.norms, flagged)):
            w.writerow([i, repr(float(v)), int(fl)])
    return flagged
