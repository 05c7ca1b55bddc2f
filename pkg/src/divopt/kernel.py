"""Precomputed one-step transition tables for the grid Bellman operator.

For every intensity row the wait action faces four competing outcomes on
(0, delta]: the step runs out, a claim arrives, the intensity jumps, or the
regime switches.  Against the decayed intensity

    lam(t) = floor + e^{-d t} (lam_m - floor),
    Lam(t) = floor t + (lam_m - floor)(1 - e^{-d t}) / d,

the joint survival is S(t) = exp(-Lam(t) - (beta + xi) t) and the outcome
densities at t are lam(t) S(t), beta S(t) and xi S(t).  All time integrals
are Gauss-Legendre quadratures on panels split wherever an integrand is
non-smooth: where the decayed intensity crosses a grid row (the snapped
destination changes) and, for claim laws with point masses, where the
post-claim surplus crosses an x node.  Claim and jump size redistributions
are exact cdf increments, never sampled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .grid import GridSpec, ValueSurface, sigma_up
from .model import Distribution, StateSpec

__all__ = [
    "decayed_intensity",
    "cumulative_hazard",
    "claim_redistribution",
    "jump_redistribution",
    "build_kernel",
    "TransitionKernel",
]


def decayed_intensity(lam_floor: float, lam: float, d: float, t):
    """Intensity t after an observation at ``lam``, absent further jumps."""
    return lam_floor + np.exp(-d * np.asarray(t, dtype=float)) * (lam - lam_floor)


def cumulative_hazard(lam_floor: float, lam: float, d: float, t):
    """Integral of the decayed intensity over [0, t]."""
    t = np.asarray(t, dtype=float)
    return lam_floor * t - (lam - lam_floor) * np.expm1(-d * t) / d


def _claim_mass_matrix(grid: GridSpec, dist: Distribution, y: np.ndarray) -> np.ndarray:
    """Masses onto destination x nodes for pre-claim surpluses ``y``.

    Row i gives P(snapped post-claim surplus = x_j) for j = 0..n1; the
    missing mass 1 - F(y_i) is ruin.  Destination j collects claims with
    y - x_{j+1} < U <= y - x_j; the top node absorbs everything above it
    (the overhang is paid out as crumb, mirroring the slope-1 tail).
    """
    edges = np.concatenate([grid.x_nodes, [np.inf]])
    F = dist.cdf(y[:, None] - edges[None, :])
    return F[:, :-1] - F[:, 1:]


def _claim_crumbs(grid: GridSpec, dist: Distribution, y: np.ndarray, cm: np.ndarray) -> np.ndarray:
    """Expected snap-down dividend paid with a surviving claim at surplus y."""
    # sum_j (y - x_j) mass_j - E[U; U <= y], telescoped over destinations
    surviving = y * dist.cdf(y) - dist.partial_mean(-1.0, y)
    return surviving - cm @ grid.x_nodes


def claim_redistribution(
    grid: GridSpec, claim_dist: Distribution, y: float
) -> Tuple[np.ndarray, float, float]:
    """Exact claim outcome split at pre-claim surplus ``y``.

    Returns (mass vector over x indices, ruin mass, expected crumb dividend).
    The masses plus the ruin mass sum to one by cdf telescoping.
    """
    if y < 0:
        raise ValueError("pre-claim surplus must be nonnegative")
    ya = np.array([float(y)])
    cm = _claim_mass_matrix(grid, claim_dist, ya)
    crumb = _claim_crumbs(grid, claim_dist, ya, cm)
    ruin = 1.0 - float(claim_dist.cdf(y))
    return cm[0], ruin, float(crumb[0])


def _jump_mass_matrix(grid: GridSpec, dist: Distribution, lam_c: np.ndarray) -> np.ndarray:
    """Masses onto destination intensity rows after a jump from ``lam_c``.

    Destination j < m1 collects jumps with lam_{j-1} < lam_c + Y <= lam_j;
    the cap row m1 absorbs the whole upper tail.
    """
    lam_c = np.asarray(lam_c, dtype=float)
    if grid.m1 == 0:
        return np.ones((lam_c.size, 1))
    F = dist.cdf(grid.lam_nodes[None, :-1] - lam_c[:, None])
    out = np.empty((lam_c.size, grid.m1 + 1))
    out[:, 0] = F[:, 0]
    out[:, 1:-1] = F[:, 1:] - F[:, :-1]
    out[:, -1] = 1.0 - F[:, -1]
    return out


def jump_redistribution(grid: GridSpec, jump_dist: Distribution, lam_c: float) -> np.ndarray:
    """Mass vector over intensity rows for one jump from intensity ``lam_c``."""
    if lam_c < grid.lambda_floor - 1e-12:
        raise ValueError("jump source intensity below the grid floor")
    return _jump_mass_matrix(grid, jump_dist, np.array([float(lam_c)]))[0]


def _lambda_crossings(
    lam_floor: float, lam_from: float, d: float, delta: float, lam_targets: np.ndarray
) -> List[float]:
    """Times in (0, delta) at which the decay from ``lam_from`` hits targets."""
    out: List[float] = []
    excess = lam_from - lam_floor
    if excess <= 0:
        return out
    for lam_t in np.asarray(lam_targets, dtype=float):
        gap = lam_t - lam_floor
        if gap <= 0 or lam_t >= lam_from:
            continue
        t = math.log(excess / gap) / d
        if 1e-15 < t < delta * (1 - 1e-12):
            out.append(t)
    return out


def _panel_nodes(edges: List[float], quad_nodes: int) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes/weights on consecutive panels given by ``edges``."""
    base_x, base_w = np.polynomial.legendre.leggauss(quad_nodes)
    ts, ws = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        if b - a <= 1e-15:
            continue
        half = 0.5 * (b - a)
        ts.append(0.5 * (a + b) + half * base_x)
        ws.append(half * base_w)
    return np.concatenate(ts), np.concatenate(ws)


def _merge_edges(delta: float, *extra: List[float]) -> List[float]:
    pts = [0.0, delta]
    for block in extra:
        pts.extend(block)
    pts = sorted(p for p in pts if -1e-15 <= p <= delta * (1 + 1e-12))
    merged = [0.0]
    for p in pts[1:]:
        if p - merged[-1] > 1e-14 * max(1.0, delta):
            merged.append(p)
    merged[-1] = delta
    return merged


def _atom_crossings(
    grid: GridSpec, dist: Distribution, x_n: float, p: float, delta: float
) -> List[float]:
    """Times where the post-claim surplus of an atom claim crosses an x node."""
    out: List[float] = []
    for c, _mass in dist.atoms():
        v0 = x_n - c
        j_lo = math.floor(v0 / grid.x_step) - 1
        j_hi = math.floor((v0 + p * delta) / grid.x_step) + 1
        for j in range(max(j_lo, 0), min(j_hi, grid.n1) + 1):
            t = (j * grid.x_step + c - x_n) / p
            if 1e-15 < t < delta * (1 - 1e-12):
                out.append(t)
    return out


@dataclass
class TransitionKernel:
    """One-step tables for a (state, grid) pair, reused across all sweeps.

    ``claim_w[m]`` maps each destination intensity row md to a matrix W with
    W[n, j] = discounted expected mass moved from (n, m) to (j, md) by a
    surviving claim, already time-integrated.  ``jump_J[m, md]`` plays the
    same role for intensity jumps (surplus stays at n).  Everything here is
    independent of the iterated surface, so a sweep reduces to a handful of
    matrix products.
    """

    spec: StateSpec
    grid: GridSpec
    quad_nodes: int
    ne_factor: np.ndarray          # (m1+1,) survival * discount over a full step
    ne_dest: np.ndarray            # (m1+1,) intensity row after a full quiet step
    claim_w: List[Dict[int, np.ndarray]]
    crumb_const: np.ndarray        # (n1+1, m1+1), discounted expected crumbs
    jump_J: Optional[np.ndarray]   # (m1+1, m1+1) or None when beta == 0
    jump_div_const: np.ndarray     # (m1+1,) discounted dividends paid at jumps
    # undiscounted channel masses for conservation checks, all (m1+1,)
    end_prob: np.ndarray
    claim_prob: np.ndarray
    jump_prob: np.ndarray
    switch_prob: np.ndarray
    # base quadrature nodes per row, exposed for tests and diagnostics
    node_t: List[np.ndarray] = field(repr=False, default_factory=list)
    node_w: List[np.ndarray] = field(repr=False, default_factory=list)
    node_S: List[np.ndarray] = field(repr=False, default_factory=list)
    node_lam: List[np.ndarray] = field(repr=False, default_factory=list)
    node_md: List[np.ndarray] = field(repr=False, default_factory=list)

    @property
    def p(self) -> float:
        return self.spec.premium

    @property
    def q(self) -> float:
        return self.spec.discount

    @property
    def xi(self) -> float:
        return self.spec.switch_rate

    @property
    def delta(self) -> float:
        return self.grid.delta

    def mass_balance(self, m: int) -> Dict[str, float]:
        """Channel probabilities at row m; ``total`` should be 1."""
        total = float(
            self.end_prob[m] + self.claim_prob[m] + self.jump_prob[m] + self.switch_prob[m]
        )
        return {
            "no_event": float(self.end_prob[m]),
            "claim": float(self.claim_prob[m]),
            "jump": float(self.jump_prob[m]),
            "switch": float(self.switch_prob[m]),
            "total": total,
        }

    def _switch_node(self, g: ValueSurface, n: int, m: int, lam_cross: List[float]) -> float:
        spec, grid = self.spec, self.grid
        p, q, xi, beta = self.p, self.q, self.xi, spec.beta
        d, floor, delta = spec.decay, spec.lambda_floor, grid.delta
        lam_m = grid.lam_nodes[m]
        x_n = grid.x_nodes[n]
        j_lo = math.floor(x_n / g.grid.x_step)
        j_hi = math.floor((x_n + p * delta) / g.grid.x_step) + 1
        kinks = []
        for j in range(max(j_lo, 0), min(j_hi, g.grid.n1) + 1):
            t = (j * g.grid.x_step - x_n) / p
            if 1e-15 < t < delta * (1 - 1e-12):
                kinks.append(t)
        edges = _merge_edges(delta, lam_cross, kinks)
        t, w = _panel_nodes(edges, self.quad_nodes)
        lam_t = decayed_intensity(floor, lam_m, d, t)
        S = np.exp(-cumulative_hazard(floor, lam_m, d, t) - (beta + xi) * t)
        weight = w * np.exp(-q * t) * S * xi
        gx = x_n + p * t
        md_g = np.array([sigma_up(g.grid, lv) for lv in lam_t])
        vals = np.empty_like(t)
        for md in np.unique(md_g):
            sel = md_g == md
            vals[sel] = g.value_at(gx[sel], int(md))
        return float(weight @ vals)

    def switch_constants(self, g: Optional[ValueSurface]) -> np.ndarray:
        """Discounted expected exit value collected when the regime switches.

        Integrates xi S(t) e^{-qt} g(x_n + p t, lam(t)) over the step for
        every node, with quadrature panels split at the times the decayed
        intensity crosses g's intensity rows and the drifting surplus
        crosses g's x nodes (g is only piecewise linear there).  Zero
        matrix for a terminal regime.
        """
        out = np.zeros((self.grid.n1 + 1, self.grid.m1 + 1))
        if self.xi == 0:
            return out
        if g is None:
            raise ValueError("a switching kernel needs the exit surface g")
        spec, grid = self.spec, self.grid
        for m in range(grid.m1 + 1):
            lam_cross = _lambda_crossings(
                spec.lambda_floor, grid.lam_nodes[m], spec.decay, grid.delta, g.grid.lam_nodes
            )
            for n in range(grid.n1):
                out[n, m] = self._switch_node(g, n, m, lam_cross)
        return out

    def switch_constant_at(self, g: Optional[ValueSurface], n: int, m: int) -> float:
        """Single-node variant of :meth:`switch_constants`."""
        if self.xi == 0:
            return 0.0
        if g is None:
            raise ValueError("a switching kernel needs the exit surface g")
        lam_cross = _lambda_crossings(
            self.spec.lambda_floor,
            self.grid.lam_nodes[m],
            self.spec.decay,
            self.grid.delta,
            g.grid.lam_nodes,
        )
        return self._switch_node(g, n, m, lam_cross)


def build_kernel(spec: StateSpec, grid: GridSpec, quad_nodes: int = 16) -> TransitionKernel:
    """Precompute all surface-independent pieces of the wait operator.

    Deterministic given its inputs.  Fails when the grid's x step is not the
    premium drift over one time step, since the scheme moves the surplus by
    exactly one cell per quiet step.
    """
    if quad_nodes < 4:
        raise ValueError("quad_nodes must be at least 4")
    p, q = spec.premium, spec.discount
    if abs(grid.x_step - p * grid.delta) > 1e-9 * grid.x_step:
        raise ValueError(
            f"grid x_step {grid.x_step} != premium*delta {p * grid.delta}; "
            "rebuild the grid from this state's premium"
        )
    beta, xi, d, floor = spec.beta, spec.switch_rate, spec.decay, spec.lambda_floor
    delta = grid.delta
    n1, m1 = grid.n1, grid.m1
    xs = grid.x_nodes

    ne_factor = np.empty(m1 + 1)
    ne_dest = np.empty(m1 + 1, dtype=np.int64)
    claim_w: List[Dict[int, np.ndarray]] = []
    crumb_const = np.zeros((n1 + 1, m1 + 1))
    jump_J = np.zeros((m1 + 1, m1 + 1)) if beta > 0 else None
    jump_div_const = np.zeros(m1 + 1)
    end_prob = np.empty(m1 + 1)
    claim_prob = np.empty(m1 + 1)
    jump_prob = np.zeros(m1 + 1)
    switch_prob = np.zeros(m1 + 1)
    node_t, node_w, node_S, node_lam, node_md = [], [], [], [], []

    has_atoms = bool(spec.claim_dist.atoms())

    def snap_lam_idx(lams: np.ndarray) -> np.ndarray:
        r = (lams - floor) / grid.Delta
        return np.clip(np.ceil(r - 1e-9 * np.maximum(1.0, np.abs(r))), 0, m1).astype(np.int64)

    for m in range(m1 + 1):
        lam_m = grid.lam_nodes[m]
        lam_cross = _lambda_crossings(floor, lam_m, d, delta, grid.lam_nodes)
        base_edges = _merge_edges(delta, lam_cross)
        t_b, w_b = _panel_nodes(base_edges, quad_nodes)
        lam_b = decayed_intensity(floor, lam_m, d, t_b)
        S_b = np.exp(-cumulative_hazard(floor, lam_m, d, t_b) - (beta + xi) * t_b)
        md_b = snap_lam_idx(lam_b)
        disc_b = np.exp(-q * t_b)

        node_t.append(t_b)
        node_w.append(w_b)
        node_S.append(S_b)
        node_lam.append(lam_b)
        node_md.append(md_b)

        S_delta = float(
            np.exp(-cumulative_hazard(floor, lam_m, d, delta) - (beta + xi) * delta)
        )
        ne_factor[m] = S_delta * math.exp(-q * delta)
        ne_dest[m] = sigma_up(grid, float(decayed_intensity(floor, lam_m, d, delta)))

        end_prob[m] = S_delta
        claim_prob[m] = float(w_b @ (lam_b * S_b))
        if beta > 0:
            jump_prob[m] = beta * float(w_b @ S_b)
        if xi > 0:
            switch_prob[m] = xi * float(w_b @ S_b)

        if beta > 0:
            jm = _jump_mass_matrix(grid, spec.jump_dist, lam_b)
            qw = w_b * disc_b * S_b * beta
            jump_J[m, :] = qw @ jm
            jump_div_const[m] = float(qw @ t_b) * p

        w_by_dest: Dict[int, np.ndarray] = {}
        for n in range(n1):
            x_n = xs[n]
            if has_atoms:
                extra = _atom_crossings(grid, spec.claim_dist, x_n, p, delta)
                edges = _merge_edges(delta, lam_cross, extra)
                t_i, w_i = _panel_nodes(edges, quad_nodes)
                lam_i = decayed_intensity(floor, lam_m, d, t_i)
                S_i = np.exp(-cumulative_hazard(floor, lam_m, d, t_i) - (beta + xi) * t_i)
                md_i = snap_lam_idx(lam_i)
                disc_i = np.exp(-q * t_i)
            else:
                t_i, w_i, lam_i, S_i, md_i, disc_i = t_b, w_b, lam_b, S_b, md_b, disc_b
            y = x_n + p * t_i
            cm = _claim_mass_matrix(grid, spec.claim_dist, y)
            crumbs = _claim_crumbs(grid, spec.claim_dist, y, cm)
            qlam = w_i * disc_i * S_i * lam_i
            crumb_const[n, m] = float(qlam @ crumbs)
            for md in np.unique(md_i):
                sel = md_i == md
                block = w_by_dest.setdefault(int(md), np.zeros((n1, n1 + 1)))
                block[n, :] += qlam[sel] @ cm[sel, :]
        claim_w.append(w_by_dest)

    return TransitionKernel(
        spec=spec,
        grid=grid,
        quad_nodes=quad_nodes,
        ne_factor=ne_factor,
        ne_dest=ne_dest,
        claim_w=claim_w,
        crumb_const=crumb_const,
        jump_J=jump_J,
        jump_div_const=jump_div_const,
        end_prob=end_prob,
        claim_prob=claim_prob,
        jump_prob=jump_prob,
        switch_prob=switch_prob,
        node_t=node_t,
        node_w=node_w,
        node_S=node_S,
        node_lam=node_lam,
        node_md=node_md,
    )
