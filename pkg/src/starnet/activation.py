"""Leaky ReLU and its exact inverse."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonInvertibleActivation

DEFAULT_SLOPE = 0.5


@dataclass(frozen=True)
class Activation:
    """Leaky ReLU with the given negative-branch slope.

    A slope of zero (plain ReLU) is representable so that it can be rejected
    at inversion time with a useful error; slopes above 1 or below 0 are not.
    """

    negative_slope: float = DEFAULT_SLOPE

    def __post_init__(self):
        s = float(self.negative_slope)
        if not 0.0 <= s <= 1.0:
            raise ValueError(f"negative_slope must lie in (0, 1], got {s}")
        object.__setattr__(self, "negative_slope", s)

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.where(x >= 0.0, x, self.negative_slope * x)

    def invert(self, y):
        if self.negative_slope == 0.0:
            raise NonInvertibleActivation("ReLU (slope 0) has no inverse on the negative half-line")
        y = np.asarray(y, dtype=np.float64)
        return np.where(y >= 0.0, y, y / self.negative_slope)


def act_apply(act, x):
    return act.apply(x)


def act_invert(act, y):
    return act.invert(y)
