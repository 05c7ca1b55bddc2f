"""Bellman operators on the grid, fixed-point iteration and regime chaining.

Three local actions compete at every node: wait one step (collecting the
precomputed transition kernel's expectations), pay out one cell worth of
surplus immediately, or liquidate.  The nodewise maximum is iterated from
the liquidation surface upwards until the sup-norm change falls under the
tolerance; iterates are nondecreasing, which is verified at runtime.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .grid import GridSpec, ValueSurface
from .kernel import TransitionKernel, build_kernel
from .model import TippingProblem

__all__ = [
    "Action",
    "PolicyMap",
    "SolveReport",
    "RegionMap",
    "NonConvergenceError",
    "apply_t0",
    "apply_t1",
    "apply_tf",
    "bellman_sweep",
    "value_iteration",
    "solve_chain",
    "extract_regions",
    "default_tol",
]

log = logging.getLogger(__name__)


class Action(IntEnum):
    """Local actions; the integer codes are the on-disk region codes."""

    WAIT = 0        # no dividends until the step / next event
    PAY = 1         # pay one cell (p * delta) immediately
    LIQUIDATE = 2   # pay the whole surplus and stop


class NonConvergenceError(RuntimeError):
    """Value iteration hit max_iter with the residual above tolerance."""

    def __init__(self, residual: float, tol: float, iterations: int, state: Optional[int] = None):
        self.residual = residual
        self.tol = tol
        self.iterations = iterations
        self.state = state
        where = "" if state is None else f" (state {state})"
        super().__init__(
            f"no fixed point{where}: residual {residual:.3e} > tol {tol:.3e} "
            f"after {iterations} iterations"
        )


@dataclass(frozen=True)
class PolicyMap:
    """Chosen action per grid node.

    Paying is never assigned at n = 0 (nothing to pay from) and waiting is
    never assigned at the top x node (the wait operator is undefined there).
    """

    grid: GridSpec
    actions: np.ndarray

    def __post_init__(self) -> None:
        acts = np.ascontiguousarray(self.actions, dtype=np.int8)
        if acts.shape != self.grid.shape:
            raise ValueError("actions shape does not match the grid")
        if np.any(acts[0, :] == Action.PAY):
            raise ValueError("PAY is not applicable at zero surplus")
        if np.any(acts[-1, :] == Action.WAIT):
            raise ValueError("WAIT is not applicable at the top surplus node")
        acts.setflags(write=False)
        object.__setattr__(self, "actions", acts)


@dataclass
class SolveReport:
    """Fixed point, policy and convergence/shape diagnostics of one solve."""

    surface: ValueSurface
    policy: PolicyMap
    iterations: int
    residual: float
    tol: float
    converged: bool
    wall_time: float
    diagnostics: Dict[str, float] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)
    state: Optional[int] = None


@dataclass(frozen=True)
class RegionMap:
    """Action/no-action split of a policy, with per-row interval structure."""

    action: np.ndarray                 # bool (n1+1, m1+1); True = dividends paid
    row_intervals: Tuple[Tuple[Tuple[int, int], ...], ...]  # per m: (start, end) inclusive

    @property
    def intervals_per_row(self) -> np.ndarray:
        return np.array([len(r) for r in self.row_intervals])


def default_tol(kernel: TransitionKernel) -> float:
    """Sup-norm tolerance on the surface excess over the identity."""
    return 1e-9 * max(1.0, kernel.p / kernel.q)


def apply_t0(
    kernel: TransitionKernel,
    w: ValueSurface,
    g: Optional[ValueSurface],
    n: int,
    m: int,
    switch_const: Optional[np.ndarray] = None,
) -> float:
    """Wait-action value at node (n, m) under continuation surface ``w``.

    Sums the four channels: quiet step, surviving claim (snapped down with
    its crumb dividend), intensity jump (accrued premium paid out), and the
    regime switch collecting the exit surface.  Ruinous claims contribute
    nothing.  Inapplicable at the top x node.
    """
    grid = kernel.grid
    if n >= grid.n1:
        raise ValueError("wait action undefined at the top surplus node")
    vals = w.values
    out = kernel.crumb_const[n, m] + kernel.jump_div_const[m]
    out += kernel.ne_factor[m] * vals[n + 1, kernel.ne_dest[m]]
    if kernel.jump_J is not None:
        out += float(kernel.jump_J[m, :] @ vals[n, :])
    for md, W in kernel.claim_w[m].items():
        out += float(W[n, :] @ vals[:, md])
    if kernel.xi > 0:
        if switch_const is not None:
            out += switch_const[n, m]
        else:
            out += kernel.switch_constant_at(g, n, m)
    return float(out)


def apply_t1(w: ValueSurface, n: int, m: int) -> float:
    """Pay one cell now: w one node down plus the payout p * delta."""
    if n < 1:
        raise ValueError("pay action undefined at zero surplus")
    return float(w.values[n - 1, m] + w.grid.x_step)


def apply_tf(grid: GridSpec, n: int) -> float:
    """Liquidation value: the current surplus x_n, independent of intensity."""
    return float(grid.x_nodes[n])


def _t0_matrix(kernel: TransitionKernel, vals: np.ndarray, switch_const: np.ndarray) -> np.ndarray:
    """Wait-action values for all nodes; -inf on the inapplicable top row."""
    n1, m1 = kernel.grid.n1, kernel.grid.m1
    body = kernel.crumb_const[:n1, :] + kernel.jump_div_const[None, :] + switch_const[:n1, :]
    body = body + kernel.ne_factor[None, :] * vals[1:, :][:, kernel.ne_dest]
    if kernel.jump_J is not None:
        body = body + (vals @ kernel.jump_J.T)[:n1, :]
    for m in range(m1 + 1):
        col = body[:, m]
        for md, W in kernel.claim_w[m].items():
            col += W @ vals[:, md]
    T0 = np.full((n1 + 1, m1 + 1), -np.inf)
    T0[:n1, :] = body
    return T0


def _sweep_arrays(
    kernel: TransitionKernel, vals: np.ndarray, switch_const: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    grid = kernel.grid
    T0 = _t0_matrix(kernel, vals, switch_const)
    T1 = np.full(grid.shape, -np.inf)
    T1[1:, :] = vals[:-1, :] + grid.x_step
    TF = np.broadcast_to(grid.x_nodes[:, None], grid.shape)
    best_paying = np.maximum(T1, TF)
    new_vals = np.maximum(T0, best_paying)
    # tie-break order: WAIT, then PAY, then LIQUIDATE
    paying = np.where(T1 >= TF, np.int8(Action.PAY), np.int8(Action.LIQUIDATE))
    actions = np.where(T0 >= best_paying, np.int8(Action.WAIT), paying).astype(np.int8)
    return new_vals, actions


def bellman_sweep(
    kernel: TransitionKernel, w: ValueSurface, g: Optional[ValueSurface] = None
) -> Tuple[ValueSurface, PolicyMap]:
    """One application of the nodewise max over applicable actions."""
    switch_const = kernel.switch_constants(g)
    new_vals, actions = _sweep_arrays(kernel, w.values, switch_const)
    return ValueSurface(kernel.grid, new_vals), PolicyMap(kernel.grid, actions)


def _surface_diagnostics(
    kernel: TransitionKernel, vals: np.ndarray, tol: float, cap_tol: Optional[float]
) -> Tuple[Dict[str, float], List[str]]:
    grid = kernel.grid
    xs = grid.x_nodes[:, None]
    excess = vals - xs
    diag: Dict[str, float] = {}
    warnings: List[str] = []
    diag["min_excess"] = float(excess.min())
    diag["max_excess"] = float(excess.max())
    diag["min_forward_diff"] = float((vals[1:, :] - vals[:-1, :]).min())
    if grid.m1 > 0:
        diag["lambda_mono_excess"] = float((vals[:, 1:] - vals[:, :-1]).max())
    else:
        diag["lambda_mono_excess"] = 0.0
    diag["cap_excess"] = float(excess[:, -1].max())
    # the surface sits below the exact fixed point by up to one residual per
    # node, so shape checks carry a slack of a few tolerances
    tol_mono = 10.0 * tol
    diag["tol_mono"] = tol_mono
    if diag["min_excess"] < -tol_mono:
        warnings.append(f"surface dips below the identity by {-diag['min_excess']:.3e}")
    if diag["min_forward_diff"] < grid.x_step - tol_mono:
        warnings.append(
            f"forward difference {diag['min_forward_diff']:.6e} below the cell size {grid.x_step:.6e}"
        )
    if diag["lambda_mono_excess"] > tol_mono:
        warnings.append(
            f"intensity monotonicity violated by {diag['lambda_mono_excess']:.3e} (> {tol_mono:.1e})"
        )
    if cap_tol is not None and diag["cap_excess"] > cap_tol:
        warnings.append(
            f"value excess {diag['cap_excess']:.3e} at the intensity cap exceeds "
            f"{cap_tol:.3e}; consider enlarging the lambda range"
        )
    return diag, warnings


def value_iteration(
    kernel: TransitionKernel,
    g: Optional[ValueSurface] = None,
    tol: Optional[float] = None,
    max_iter: int = 200_000,
    cap_tol: Optional[float] = None,
) -> SolveReport:
    """Iterate the max-operator from the liquidation surface to its fixed point.

    Starts at w(n, m) = x_n and stops when the sup-norm change of one sweep
    drops below ``tol`` (default 1e-9 scaled by p/q).  Iterates must never
    decrease; the worst observed increment is reported in the diagnostics.

    Raises:
        NonConvergenceError: residual still above tol after ``max_iter``.
    """
    if tol is None:
        tol = default_tol(kernel)
    if tol <= 0:
        raise ValueError("tol must be positive")
    t_start = time.perf_counter()
    switch_const = kernel.switch_constants(g)
    vals = ValueSurface.identity(kernel.grid).values.copy()
    min_increment = np.inf
    residual = np.inf
    actions = None
    iterations = 0
    for iterations in range(1, max_iter + 1):
        new_vals, actions = _sweep_arrays(kernel, vals, switch_const)
        diff = new_vals - vals
        residual = float(np.abs(diff).max())
        min_increment = min(min_increment, float(diff.min()))
        vals = new_vals
        if residual < tol:
            break
    wall = time.perf_counter() - t_start
    if residual >= tol:
        raise NonConvergenceError(residual, tol, iterations)
    diag, warnings = _surface_diagnostics(kernel, vals, tol, cap_tol)
    diag["min_iterate_increment"] = min_increment
    scale = max(1.0, kernel.p / kernel.q)
    if min_increment < -1e-12 * scale:
        warnings.append(f"iterates decreased by up to {-min_increment:.3e}")
    for msg in warnings:
        log.warning(msg)
    return SolveReport(
        surface=ValueSurface(kernel.grid, vals),
        policy=PolicyMap(kernel.grid, actions),
        iterations=iterations,
        residual=residual,
        tol=tol,
        converged=True,
        wall_time=wall,
        diagnostics=diag,
        warnings=warnings,
    )


def solve_chain(
    problem: TippingProblem,
    grids: Sequence[GridSpec],
    tol: Optional[float] = None,
    quad_nodes: int = 16,
    max_iter: int = 200_000,
    cap_tol: Optional[float] = None,
) -> List[SolveReport]:
    """Solve the regime chain backwards from the terminal state.

    ``grids[m]`` is the grid for the state with m switches left.  The
    terminal state is solved first with no exit surface; each earlier state
    then uses the previous solution as its exit surface, interpolated on its
    own grid.  Returns reports ordered terminal-first.
    """
    if len(grids) != problem.k + 1:
        raise ValueError(f"need {problem.k + 1} grids, got {len(grids)}")
    reports: List[SolveReport] = []
    g: Optional[ValueSurface] = None
    for m in range(problem.k + 1):
        spec = problem.state(m)
        kernel = build_kernel(spec, grids[m], quad_nodes=quad_nodes)
        try:
            rep = value_iteration(kernel, g=g, tol=tol, max_iter=max_iter, cap_tol=cap_tol)
        except NonConvergenceError as err:
            raise NonConvergenceError(err.residual, err.tol, err.iterations, state=m) from err
        rep.state = m
        reports.append(rep)
        g = rep.surface
    return reports


def extract_regions(policy: PolicyMap) -> RegionMap:
    """Split the grid into paying and waiting nodes, row by row.

    A node is in the action region when PAY or LIQUIDATE was chosen.  For
    each intensity row the maximal runs of action nodes are returned, so a
    barrier policy shows exactly one interval per row and a two-band policy
    shows two.
    """
    action = np.asarray(policy.actions != Action.WAIT)
    rows = []
    for m in range(action.shape[1]):
        col = action[:, m]
        intervals = []
        start = None
        for n, flag in enumerate(col):
            if flag and start is None:
                start = n
            elif not flag and start is not None:
                intervals.append((start, n - 1))
                start = None
        if start is not None:
            intervals.append((start, len(col) - 1))
        rows.append(tuple(intervals))
    return RegionMap(action=action, row_intervals=tuple(rows))
