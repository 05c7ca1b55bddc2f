"""Claim/jump size distributions, regime parameter sets and premium calibration.

All quantities use consistent units: surplus and claim sizes in money,
intensities in 1/time, and the discount/decay rates in 1/time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

ArrayLike = Union[float, np.ndarray]

__all__ = [
    "Distribution",
    "Exponential",
    "Erlang",
    "Deterministic",
    "TruncatedExponential",
    "StateSpec",
    "TippingProblem",
    "lambda_av",
    "premium_rate",
]


class Distribution:
    """Base class for the nonnegative size distributions used by the solver.

    Subclasses provide closed-form ``cdf``, ``mean`` and ``partial_mean``;
    no sampling or numerical integration happens here.  The cdf is
    right-continuous with cdf(x) = 0 for x < 0, so ``cdf(b) - cdf(a)``
    equals P(a < X <= b) including any atom at b.
    """

    def cdf(self, x: ArrayLike) -> ArrayLike:
        raise NotImplementedError

    def mean(self) -> float:
        raise NotImplementedError

    def partial_mean(self, a: ArrayLike, b: ArrayLike) -> ArrayLike:
        """E[X * 1{a < X <= b}], exact per variant.

        Accepts scalars or broadcastable arrays; a <= b is required
        elementwise.  ``partial_mean(0, inf)`` equals ``mean()`` (atoms at 0
        contribute nothing to either side).
        """
        raise NotImplementedError

    def atoms(self) -> Tuple[Tuple[float, float], ...]:
        """Point masses as (location, mass) pairs, empty for continuous laws."""
        return ()

    def engine_code(self) -> Tuple[int, float, float]:
        """(kind, p1, p2) triple consumed by the jitted path sampler."""
        raise NotImplementedError


def _as_array(x: ArrayLike) -> np.ndarray:
    return np.asarray(x, dtype=float)


@dataclass(frozen=True)
class Exponential(Distribution):
    """Exponential law with the given rate (mean = 1/rate)."""

    rate: float

    def __post_init__(self) -> None:
        if self.rate <= 0:
            raise ValueError("Exponential rate must be positive")

    def cdf(self, x: ArrayLike) -> ArrayLike:
        x = _as_array(x)
        return np.where(x < 0, 0.0, -np.expm1(-self.rate * np.maximum(x, 0.0)))

    def mean(self) -> float:
        return 1.0 / self.rate

    def partial_mean(self, a: ArrayLike, b: ArrayLike) -> ArrayLike:
        # integral of x r e^{-rx}: antiderivative -(x + 1/r) e^{-rx};
        # clip the argument so the inf * 0 limit evaluates to its value 0
        r = self.rate
        a = np.minimum(np.maximum(_as_array(a), 0.0), 750.0 / r)
        b = np.minimum(np.maximum(_as_array(b), 0.0), 750.0 / r)
        g = lambda t: (t + 1.0 / r) * np.exp(-r * t)
        return g(a) - g(b)

    def engine_code(self) -> Tuple[int, float, float]:
        return (0, self.rate, 0.0)


@dataclass(frozen=True)
class Erlang(Distribution):
    """Erlang law: sum of ``shape`` i.i.d. exponentials with the given rate."""

    shape: int
    rate: float

    def __post_init__(self) -> None:
        if self.shape < 1 or int(self.shape) != self.shape:
            raise ValueError("Erlang shape must be an integer >= 1")
        if self.rate <= 0:
            raise ValueError("Erlang rate must be positive")

    @staticmethod
    def _cdf(k: int, r: float, x: np.ndarray) -> np.ndarray:
        # finite Poisson sum: F(x) = 1 - e^{-rx} sum_{j<k} (rx)^j / j!;
        # beyond rx ~ 700 the survival underflows to 0 anyway, so clip to
        # keep inf arguments from producing 0 * inf
        x = np.maximum(x, 0.0)
        rx = np.minimum(r * x, 700.0)
        acc = np.zeros_like(rx)
        term = np.ones_like(rx)
        for j in range(k):
            if j > 0:
                term = term * rx / j
            acc = acc + term
        return 1.0 - np.exp(-rx) * acc

    def cdf(self, x: ArrayLike) -> ArrayLike:
        x = _as_array(x)
        return np.where(x < 0, 0.0, self._cdf(self.shape, self.rate, x))

    def mean(self) -> float:
        return self.shape / self.rate

    def partial_mean(self, a: ArrayLike, b: ArrayLike) -> ArrayLike:
        # x * f_k(x) = (k/r) * f_{k+1}(x), so the partial first moment is a
        # cdf increment of the order-(k+1) Erlang.
        a = np.maximum(_as_array(a), 0.0)
        b = np.maximum(_as_array(b), 0.0)
        k, r = self.shape, self.rate
        return (k / r) * (self._cdf(k + 1, r, b) - self._cdf(k + 1, r, a))

    def engine_code(self) -> Tuple[int, float, float]:
        return (1, float(self.shape), self.rate)


@dataclass(frozen=True)
class Deterministic(Distribution):
    """Point mass at ``atom``."""

    atom: float

    def __post_init__(self) -> None:
        if self.atom < 0:
            raise ValueError("Deterministic atom must be nonnegative")

    def cdf(self, x: ArrayLike) -> ArrayLike:
        x = _as_array(x)
        return np.where(x >= self.atom, 1.0, 0.0)

    def mean(self) -> float:
        return self.atom

    def partial_mean(self, a: ArrayLike, b: ArrayLike) -> ArrayLike:
        a = _as_array(a)
        b = _as_array(b)
        return np.where((a < self.atom) & (self.atom <= b), self.atom, 0.0)

    def atoms(self) -> Tuple[Tuple[float, float], ...]:
        return ((self.atom, 1.0),)

    def engine_code(self) -> Tuple[int, float, float]:
        return (2, self.atom, 0.0)


@dataclass(frozen=True)
class TruncatedExponential(Distribution):
    """Exponential truncated at ``cap``: the tail mass sits as an atom at cap.

    cdf(x) = 1 - e^{-rate x} below the cap and 1 from the cap onwards, i.e.
    a continuous piece on (0, cap) plus a point mass e^{-rate cap} at cap.
    """

    rate: float
    cap: float

    def __post_init__(self) -> None:
        if self.rate <= 0:
            raise ValueError("TruncatedExponential rate must be positive")
        if self.cap <= 0:
            raise ValueError("TruncatedExponential cap must be positive")

    def cdf(self, x: ArrayLike) -> ArrayLike:
        x = _as_array(x)
        below = -np.expm1(-self.rate * np.maximum(x, 0.0))
        return np.where(x < 0, 0.0, np.where(x >= self.cap, 1.0, below))

    def mean(self) -> float:
        # integral of the survival function: (1 - e^{-rate cap}) / rate
        return -math.expm1(-self.rate * self.cap) / self.rate

    def partial_mean(self, a: ArrayLike, b: ArrayLike) -> ArrayLike:
        r, c = self.rate, self.cap
        a = np.clip(_as_array(a), 0.0, c)
        b = np.clip(_as_array(b), 0.0, c)
        g = lambda t: (t + 1.0 / r) * np.exp(-r * t)
        cont = g(a) - g(b)
        atom = np.where((_as_array(a) < c) & (c <= _as_array(b)), c * math.exp(-r * c), 0.0)
        return cont + atom

    def atoms(self) -> Tuple[Tuple[float, float], ...]:
        return ((self.cap, math.exp(-self.rate * self.cap)),)

    def engine_code(self) -> Tuple[int, float, float]:
        return (3, self.rate, self.cap)


@dataclass(frozen=True)
class StateSpec:
    """Full parameter set of one regime.

    Attributes:
        lambda_floor: baseline claim intensity the shot-noise decays towards.
        beta: arrival rate of catastrophes (upward intensity jumps).
        decay: exponential decay rate of the excess intensity.
        claim_dist: claim size law.
        jump_dist: intensity jump size law.
        discount: discount rate applied to dividend payouts.
        loading: proportional safety loading used to derive the premium.
        premium_override: exact premium, bypassing the loading formula.
        switch_rate: rate of leaving this regime (0 marks a terminal regime).
    """

    lambda_floor: float
    beta: float
    decay: float
    claim_dist: Distribution
    jump_dist: Distribution
    discount: float
    loading: Optional[float] = None
    premium_override: Optional[float] = None
    switch_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.lambda_floor <= 0:
            raise ValueError("lambda_floor must be positive")
        if self.decay <= 0:
            raise ValueError("decay must be positive")
        if self.discount <= 0:
            raise ValueError("discount must be positive")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.switch_rate < 0:
            raise ValueError("switch_rate must be nonnegative")
        if self.premium_override is None and self.loading is None:
            raise ValueError("either loading or premium_override is required")
        if self.loading is not None and self.loading <= 0:
            raise ValueError("loading must be positive")
        if self.premium_override is not None and self.premium_override <= 0:
            raise ValueError("premium_override must be positive")

    @property
    def premium(self) -> float:
        if self.premium_override is not None:
            return self.premium_override
        return premium_rate(self)


def lambda_av(spec: StateSpec) -> float:
    """Long-run average claim intensity: floor + beta * E[jump] / decay."""
    return spec.lambda_floor + spec.beta * spec.jump_dist.mean() / spec.decay


def premium_rate(spec: StateSpec) -> float:
    """Expected-value premium: (1 + loading) * E[claim] * lambda_av."""
    if spec.loading is None:
        raise ValueError("premium_rate requires a loading")
    return (1.0 + spec.loading) * spec.claim_dist.mean() * lambda_av(spec)


@dataclass(frozen=True)
class TippingProblem:
    """A chain of regimes ending in a terminal one.

    ``states`` is ordered from the initial regime down to the terminal
    regime (which must have switch_rate 0).  With k pre-terminal regimes
    sharing one switch rate xi, the total waiting time until the terminal
    regime is Erlang(k, xi).  ``state(m)`` returns the regime with m
    switches left, so ``state(0)`` is the terminal one.
    """

    states: Tuple[StateSpec, ...]

    def __post_init__(self) -> None:
        if not self.states:
            raise ValueError("at least one state is required")

    @property
    def k(self) -> int:
        return len(self.states) - 1

    def state(self, m: int) -> StateSpec:
        if not 0 <= m <= self.k:
            raise IndexError(f"state index {m} outside 0..{self.k}")
        return self.states[self.k - m]

    @property
    def floor_monotone(self) -> bool:
        """Whether lambda_floor never increases along the chain.

        The solver needs state(m).lambda_floor >= state(m-1).lambda_floor so
        the next surface is defined wherever the switch can land.  Kept as a
        recorded fact rather than a construction error: derived comparison
        problems (constant-intensity analogues) legitimately violate it and
        handle the mismatch by clamping onto the next surface's grid.
        """
        floors = [self.state(m).lambda_floor for m in range(self.k + 1)]
        return all(floors[m] >= floors[m - 1] for m in range(1, self.k + 1))

    def validate(self) -> None:
        """Raise ValueError on structural violations (used at config load)."""
        if self.state(0).switch_rate != 0:
            raise ValueError("terminal state must have switch_rate 0")
        if self.k >= 1:
            xis = {self.state(m).switch_rate for m in range(1, self.k + 1)}
            if len(xis) != 1:
                raise ValueError("pre-tipping states must share one switch_rate")
            if min(xis) <= 0:
                raise ValueError("pre-tipping switch_rate must be positive")
            premiums = {self.state(m).premium for m in range(1, self.k + 1)}
            if len(premiums) != 1:
                raise ValueError("pre-tipping states must share one premium")
        if not self.floor_monotone:
            raise ValueError(
                "baseline intensities must be non-increasing towards the "
                "terminal state: state(m).lambda_floor >= state(m-1).lambda_floor"
            )

    @classmethod
    def erlang(cls, pre: StateSpec, post: StateSpec, k: int) -> "TippingProblem":
        """Chain with k identical pre-tipping regimes ahead of the terminal one."""
        if k < 0:
            raise ValueError("k must be nonnegative")
        if k == 0:
            return cls(states=(post,))
        if pre.switch_rate <= 0:
            raise ValueError("pre-tipping state needs a positive switch_rate")
        return cls(states=(pre,) * k + (post,))
