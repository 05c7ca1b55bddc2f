"""Finite solver grid, snapping maps and piecewise-linear value surfaces.

The x-axis is tied to the premium: nodes sit at x_n = n * p * delta so the
premium drift traverses exactly one cell per time step.  The intensity axis
is uniform from the baseline upwards.  Surfaces extend beyond the last x
node with slope one (everything above the grid is paid out immediately).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np

from .model import StateSpec

__all__ = [
    "GridSpec",
    "ValueSurface",
    "sigma_up",
    "rho_down",
    "compute_x_bar",
    "eval_surface",
]

# relative guard against float noise when snapping near-exact grid hits
_SNAP_EPS = 1e-9


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid in (surplus, intensity).

    x nodes are n * x_step for n = 0..n1 with x_step = premium * delta;
    intensity nodes are lambda_floor + m * Delta for m = 0..m1.  ``x_bar``
    records the truncation bound the x-range was checked against (may be
    NaN when not computed).
    """

    delta: float
    x_step: float
    Delta: float
    n1: int
    m1: int
    lambda_floor: float
    x_bar: float = math.nan

    def __post_init__(self) -> None:
        if self.delta <= 0 or self.x_step <= 0 or self.Delta <= 0:
            raise ValueError("delta, x_step and Delta must be positive")
        if self.n1 < 1 or self.m1 < 0:
            raise ValueError("need n1 >= 1 and m1 >= 0")

    @classmethod
    def for_state(
        cls,
        spec: StateSpec,
        x_max: float,
        n1: int,
        lambda_max: float,
        m1: int,
        x_bar: float = math.nan,
    ) -> "GridSpec":
        """Grid covering [0, x_max] x [lambda_floor, lambda_max].

        delta is derived from the state's premium so that x_step = p * delta
        holds exactly.
        """
        if x_max <= 0:
            raise ValueError("x_max must be positive")
        if m1 > 0 and lambda_max <= spec.lambda_floor:
            raise ValueError("lambda_max must exceed lambda_floor when m1 > 0")
        x_step = x_max / n1
        Delta = (lambda_max - spec.lambda_floor) / m1 if m1 > 0 else 1.0
        return cls(
            delta=x_step / spec.premium,
            x_step=x_step,
            Delta=Delta,
            n1=n1,
            m1=m1,
            lambda_floor=spec.lambda_floor,
            x_bar=x_bar,
        )

    @cached_property
    def x_nodes(self) -> np.ndarray:
        xs = np.arange(self.n1 + 1) * self.x_step
        xs.setflags(write=False)
        return xs

    @cached_property
    def lam_nodes(self) -> np.ndarray:
        ls = self.lambda_floor + np.arange(self.m1 + 1) * self.Delta
        ls.setflags(write=False)
        return ls

    @property
    def x_max(self) -> float:
        return self.n1 * self.x_step

    @property
    def lambda_max(self) -> float:
        return self.lambda_floor + self.m1 * self.Delta

    @property
    def shape(self) -> tuple:
        return (self.n1 + 1, self.m1 + 1)


def sigma_up(grid: GridSpec, lam: float) -> int:
    """Index of the closest grid intensity at or above ``lam``, capped at m1.

    Values below the floor clamp to index 0; this happens legitimately when
    a surface from a regime with a higher floor is queried during chaining.
    """
    r = (lam - grid.lambda_floor) / grid.Delta
    idx = math.ceil(r - _SNAP_EPS * max(1.0, abs(r)))
    return min(max(idx, 0), grid.m1)


def rho_down(grid: GridSpec, x: float) -> Optional[int]:
    """Index of the closest grid surplus at or below ``x``; None marks ruin.

    Negative x means the post-claim surplus is below zero, which is ruin --
    a regular outcome, not an error.
    """
    if x < 0:
        return None
    r = x / grid.x_step
    idx = math.floor(r + _SNAP_EPS * max(1.0, r))
    return min(idx, grid.n1)


def compute_x_bar(spec: StateSpec, g: Optional["ValueSurface"] = None) -> float:
    """Surplus level above which paying out the excess is provably optimal.

    Returns max{(p + xi * (g(x_hat, floor) - x_hat)) / q, x_hat} where x_hat
    is the start of g's linear tail; for a terminal regime (xi = 0) this is
    simply p / q.  g is read at the regime's own baseline intensity: the
    exit surface is non-increasing in the intensity, so the baseline gives
    the largest, i.e. uniform, bound.
    """
    p, q, xi = spec.premium, spec.discount, spec.switch_rate
    if xi == 0:
        return p / q
    if g is None:
        raise ValueError("x_bar with a positive switch_rate requires the exit surface")
    x_hat = g.grid.x_max
    g_val = g.value_at(x_hat, sigma_up(g.grid, spec.lambda_floor))
    return max((p + xi * (g_val - x_hat)) / q, x_hat)


@dataclass(frozen=True)
class ValueSurface:
    """Values on the grid, linearly interpolated in x with a slope-1 tail.

    The intensity coordinate is always a grid index (callers snap with
    ``sigma_up`` first).  The array is frozen on construction; surfaces are
    safe to share across threads.
    """

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self) -> None:
        vals = np.ascontiguousarray(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            raise ValueError(f"values shape {vals.shape} != grid shape {self.grid.shape}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def identity(cls, grid: GridSpec) -> "ValueSurface":
        """The pay-everything-now surface: value(n, m) = x_n."""
        vals = np.repeat(grid.x_nodes[:, None], grid.m1 + 1, axis=1)
        return cls(grid=grid, values=vals)

    def value_at(self, x, m: int):
        """Surface value at surplus ``x`` (scalar or array) and lambda index m."""
        col = self.values[:, m]
        x = np.asarray(x, dtype=float)
        if np.any(x < -1e-12):
            raise ValueError("surface queried at negative surplus")
        x = np.maximum(x, 0.0)
        inside = np.interp(x, self.grid.x_nodes, col)
        out = np.where(x > self.grid.x_max, col[-1] + (x - self.grid.x_max), inside)
        return float(out) if out.ndim == 0 else out

    def value_at_lambda(self, x, lam: float):
        """Like ``value_at`` but snapping a raw intensity onto this grid."""
        return self.value_at(x, sigma_up(self.grid, lam))


def eval_surface(s: ValueSurface, x, m: int):
    """Module-level alias of :meth:`ValueSurface.value_at`."""
    return s.value_at(x, m)
