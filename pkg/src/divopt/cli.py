"""Experiment orchestration: config files, batch runs, artifacts, validation.

A run solves the regime chain of a config, writes value/region tables and
checkpoints, optionally adds the no-tipping and constant-intensity
comparison solves plus a Monte Carlo validation block, and records every
input hash, seed and tolerance in a manifest so any table can be
regenerated bit-identically.  The CLI verbs are thin wrappers around
:func:`run_experiment`.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .grid import GridSpec, ValueSurface, compute_x_bar, sigma_up
from .model import (
    Deterministic,
    Distribution,
    Erlang,
    Exponential,
    StateSpec,
    TippingProblem,
    TruncatedExponential,
    lambda_av,
)
from .simulate import PathConfig, evaluate_policy, worker_count
from .solver import Action, SolveReport, solve_chain

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1
_FLOAT_FMT = "%.17g"


class ConfigError(ValueError):
    """A config file failed to parse or violated a structural constraint."""


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------


def _num(text: str) -> float:
    """Parse a number, accepting exact fractions like ``101/700``."""
    text = text.strip()
    try:
        if "/" in text:
            return float(Fraction(text))
        return float(text)
    except (ValueError, ZeroDivisionError) as err:
        raise ConfigError(f"not a number: {text!r}") from err


_DIST_BUILDERS = {
    "exponential": (Exponential, {"rate"}),
    "erlang": (Erlang, {"shape", "rate"}),
    "deterministic": (Deterministic, {"atom"}),
    "truncated-exponential": (TruncatedExponential, {"rate", "cap"}),
}


def _dist(text: str) -> Distribution:
    """Parse e.g. ``exponential rate=10`` or ``erlang shape=2 rate=1``."""
    parts = text.split()
    if not parts:
        raise ConfigError("empty distribution")
    family = parts[0].lower()
    if family not in _DIST_BUILDERS:
        raise ConfigError(
            f"unknown distribution {family!r}; pick one of {sorted(_DIST_BUILDERS)}"
        )
    cls, wanted = _DIST_BUILDERS[family]
    kwargs = {}
    for item in parts[1:]:
        if "=" not in item:
            raise ConfigError(f"distribution parameter {item!r} is not key=value")
        key, _, val = item.partition("=")
        if key not in wanted:
            raise ConfigError(f"{family} does not take parameter {key!r}")
        kwargs[key] = int(_num(val)) if (family, key) == ("erlang", "shape") else _num(val)
    missing = wanted - kwargs.keys()
    if missing:
        raise ConfigError(f"{family} is missing {sorted(missing)}")
    return cls(**kwargs)


@dataclass(frozen=True)
class GridBlock:
    x_max: float
    x_points: int
    lambda_max: float
    lambda_points: int

    @property
    def n1(self) -> int:
        return self.x_points - 1

    @property
    def m1(self) -> int:
        return self.lambda_points - 1


@dataclass(frozen=True)
class MCBlock:
    seed: int
    paths: int
    probes: Tuple[Tuple[float, float], ...]  # (x, lambda) pairs
    horizon_scale: float  # horizon = horizon_scale / q
    slack: float          # frozen C in the |MC - Vhat| <= 3 SE + C (delta+Delta) bound


@dataclass
class ExperimentConfig:
    """Validated contents of one experiment config file."""

    name: str
    problem: TippingProblem
    grid: GridBlock
    quad_nodes: int = 16
    tol: Optional[float] = None
    max_iter: int = 200_000
    cap_tol: Optional[float] = None
    compare_cl: bool = False
    no_tipping: bool = False
    advantage: Optional[GridBlock] = None
    mc: Optional[MCBlock] = None
    source_text: str = ""

    def state_grids(self, block: Optional[GridBlock] = None) -> List[GridSpec]:
        block = block or self.grid
        return [
            GridSpec.for_state(
                self.problem.state(m), block.x_max, block.n1, block.lambda_max, block.m1
            )
            for m in range(self.problem.k + 1)
        ]


def bundled_config_path(name: str) -> Path:
    """Path of a config shipped with the package (e.g. ``example1``)."""
    base = resources.files("divopt") / "configs" / f"{name}.ini"
    if not base.is_file():
        raise ConfigError(f"no bundled config named {name!r}")
    return Path(str(base))


def _parse_state(cp: configparser.ConfigParser, section: str, switch_rate: float) -> StateSpec:
    def get(key: str, default: Optional[str] = None) -> Optional[str]:
        if cp.has_option(section, key):
            return cp.get(section, key)
        return default

    for key in ("lambda_floor", "beta", "decay", "claim", "jump", "discount"):
        if get(key) is None:
            raise ConfigError(f"[{section}] is missing {key!r}")
    loading = get("loading")
    premium = get("premium")
    if loading is None and premium is None:
        raise ConfigError(f"[{section}] needs loading or premium")
    try:
        return StateSpec(
            lambda_floor=_num(get("lambda_floor")),
            beta=_num(get("beta")),
            decay=_num(get("decay")),
            claim_dist=_dist(get("claim")),
            jump_dist=_dist(get("jump")),
            discount=_num(get("discount")),
            loading=None if loading is None else _num(loading),
            premium_override=None if premium is None else _num(premium),
            switch_rate=switch_rate,
        )
    except ValueError as err:
        raise ConfigError(f"[{section}]: {err}") from err


def _parse_grid_block(cp: configparser.ConfigParser, section: str, fallback: Optional[GridBlock]) -> GridBlock:
    def get(key: str, default: Optional[float]) -> float:
        if cp.has_option(section, key):
            return _num(cp.get(section, key))
        if default is None:
            raise ConfigError(f"[{section}] is missing {key!r}")
        return default

    fb = fallback
    return GridBlock(
        x_max=get("x_max", fb.x_max if fb else None),
        x_points=int(get("x_points", fb.x_points if fb else None)),
        lambda_max=get("lambda_max", fb.lambda_max if fb else None),
        lambda_points=int(get("lambda_points", fb.lambda_points if fb else None)),
    )


def load_config(path: str) -> ExperimentConfig:
    """Read and validate an experiment config (path or bundled name).

    Raises ConfigError with the offending line or the violated constraint;
    in particular a pre-tipping baseline intensity below the post-tipping
    one is rejected, since the backward chaining requires the floors to be
    non-increasing towards the terminal state.
    """
    p = Path(path)
    if not p.is_file() and "/" not in path and not path.endswith(".ini"):
        p = bundled_config_path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = p.read_text()
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text, source=str(p))
    except configparser.Error as err:
        raise ConfigError(f"parse error: {err}") from err
    if not cp.has_section("problem"):
        raise ConfigError("missing [problem] section")

    name = cp.get("problem", "name", fallback=p.stem)
    phases = cp.getint("problem", "phases", fallback=1)
    if phases < 0:
        raise ConfigError("phases must be nonnegative")
    switch_rate = _num(cp.get("problem", "switch_rate", fallback="0"))
    if phases > 0 and switch_rate <= 0:
        raise ConfigError("a positive switch_rate is required when phases > 0")

    if not cp.has_section("state.post"):
        raise ConfigError("missing [state.post] section")
    post = _parse_state(cp, "state.post", 0.0)
    if phases > 0:
        if not cp.has_section("state.pre"):
            raise ConfigError("missing [state.pre] section (phases > 0)")
        pre = _parse_state(cp, "state.pre", switch_rate)
        problem = TippingProblem.erlang(pre, post, phases)
    else:
        problem = TippingProblem(states=(post,))
    try:
        problem.validate()
    except ValueError as err:
        raise ConfigError(str(err)) from err

    if not cp.has_section("grid"):
        raise ConfigError("missing [grid] section")
    grid = _parse_grid_block(cp, "grid", None)
    if grid.x_points < 2 or grid.lambda_points < 1:
        raise ConfigError("grid needs x_points >= 2 and lambda_points >= 1")
    floor_top = problem.state(problem.k).lambda_floor
    if grid.lambda_points > 1 and grid.lambda_max <= floor_top:
        raise ConfigError("grid lambda_max must exceed the baseline intensity")

    cfg = ExperimentConfig(name=name, problem=problem, grid=grid, source_text=text)
    if cp.has_section("solver"):
        cfg.quad_nodes = cp.getint("solver", "quad_nodes", fallback=cfg.quad_nodes)
        cfg.max_iter = cp.getint("solver", "max_iter", fallback=cfg.max_iter)
        if cp.has_option("solver", "tol"):
            cfg.tol = _num(cp.get("solver", "tol"))
        if cp.has_option("solver", "cap_tol"):
            cfg.cap_tol = _num(cp.get("solver", "cap_tol"))
    if cp.has_section("compare"):
        cfg.compare_cl = cp.getboolean("compare", "cl", fallback=False)
        cfg.no_tipping = cp.getboolean("compare", "no_tipping", fallback=False)
    if cp.has_section("advantage"):
        cfg.advantage = _parse_grid_block(cp, "advantage", cfg.grid)
    if cp.has_section("mc"):
        probes = []
        for token in cp.get("mc", "probes", fallback="").split():
            if "@" not in token:
                raise ConfigError(f"probe {token!r} is not x@lambda")
            xs, _, ls = token.partition("@")
            probes.append((_num(xs), _num(ls)))
        cfg.mc = MCBlock(
            seed=cp.getint("mc", "seed", fallback=0),
            paths=cp.getint("mc", "paths", fallback=100_000),
            probes=tuple(probes),
            horizon_scale=_num(cp.get("mc", "horizon_scale", fallback="40")),
            slack=_num(cp.get("mc", "slack", fallback="1")),
        )
    return cfg


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Checkpoint:
    """A value surface together with the header echoed into its file."""

    surface: ValueSurface
    meta: Dict


def save_checkpoint(
    path, surface: ValueSurface, state: Optional[StateSpec] = None, solver_meta: Optional[Dict] = None
) -> None:
    """Write a surface as commented-header CSV that round-trips bit-exactly."""
    grid = surface.grid
    meta = {
        "schema": CHECKPOINT_SCHEMA,
        "grid": {
            "delta": grid.delta,
            "x_step": grid.x_step,
            "Delta": grid.Delta,
            "n1": grid.n1,
            "m1": grid.m1,
            "lambda_floor": grid.lambda_floor,
            "x_bar": None if math.isnan(grid.x_bar) else grid.x_bar,
        },
    }
    if state is not None:
        kind, p1, p2 = state.claim_dist.engine_code()
        jkind, jp1, jp2 = state.jump_dist.engine_code()
        meta["state"] = {
            "lambda_floor": state.lambda_floor,
            "beta": state.beta,
            "decay": state.decay,
            "discount": state.discount,
            "premium": state.premium,
            "switch_rate": state.switch_rate,
            "claim": [kind, p1, p2],
            "jump": [jkind, jp1, jp2],
        }
    if solver_meta is not None:
        meta["solver"] = solver_meta
    lines = [f"# divopt-checkpoint {json.dumps(meta, sort_keys=True)}"]
    for row in surface.values:
        lines.append(",".join(_FLOAT_FMT % v for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint; fails on schema or dimension mismatches."""
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("# divopt-checkpoint "):
        raise ValueError(f"{path}: not a divopt checkpoint")
    meta = json.loads(text[0][len("# divopt-checkpoint "):])
    if meta.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"{path}: unsupported checkpoint schema {meta.get('schema')}")
    gm = meta["grid"]
    grid = GridSpec(
        delta=gm["delta"],
        x_step=gm["x_step"],
        Delta=gm["Delta"],
        n1=gm["n1"],
        m1=gm["m1"],
        lambda_floor=gm["lambda_floor"],
        x_bar=math.nan if gm.get("x_bar") is None else gm["x_bar"],
    )
    rows = [line for line in text[1:] if line and not line.startswith("#")]
    if len(rows) != grid.n1 + 1:
        raise ValueError(f"{path}: expected {grid.n1 + 1} value rows, found {len(rows)}")
    values = np.array([[float(tok) for tok in line.split(",")] for line in rows])
    if values.shape != grid.shape:
        raise ValueError(f"{path}: value block shape {values.shape} != grid {grid.shape}")
    return Checkpoint(surface=ValueSurface(grid, values), meta=meta)


# ---------------------------------------------------------------------------
# artifact writers
# ---------------------------------------------------------------------------


def _write_matrix_csv(path: Path, grid: GridSpec, values: np.ndarray, fmt: str = _FLOAT_FMT) -> None:
    # rows are intensity levels, columns are surplus nodes
    lines = ["lambda\\x," + ",".join(_FLOAT_FMT % x for x in grid.x_nodes)]
    for m in range(grid.m1 + 1):
        lines.append(
            (_FLOAT_FMT % grid.lam_nodes[m]) + "," + ",".join(fmt % v for v in values[:, m])
        )
    path.write_text("\n".join(lines) + "\n")


def _write_table_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_FLOAT_FMT % v if isinstance(v, float) else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


_SVG_COLORS = {Action.WAIT: "#f0ede4", Action.PAY: "#3d5a80", Action.LIQUIDATE: "#293241"}


def _write_region_svg(path: Path, grid: GridSpec, actions: np.ndarray) -> None:
    """Pure rendering of the region codes, one rect per node."""
    cell = 8
    width, height = (grid.n1 + 1) * cell, (grid.m1 + 1) * cell
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">'
    ]
    for m in range(grid.m1 + 1):
        y = (grid.m1 - m) * cell  # intensity increases upwards
        for n in range(grid.n1 + 1):
            color = _SVG_COLORS[Action(actions[n, m])]
            parts.append(f'<rect x="{n * cell}" y="{y}" width="{cell}" height="{cell}" fill="{color}"/>')
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# derived comparison problems
# ---------------------------------------------------------------------------


def derive_cl_problem(problem: TippingProblem) -> TippingProblem:
    """Constant-intensity analogue: no catastrophes, floor pinned at the
    long-run average intensity, premiums kept identical per state.

    The floor ordering flips (the post-tipping average is larger), which is
    fine here: exit-surface lookups clamp onto the next state's grid,
    matching a model whose constant intensity is raised at the tipping
    point.
    """
    states = []
    for m in range(problem.k, -1, -1):
        s = problem.state(m)
        states.append(
            StateSpec(
                lambda_floor=lambda_av(s),
                beta=0.0,
                decay=s.decay,
                claim_dist=s.claim_dist,
                jump_dist=s.jump_dist,
                discount=s.discount,
                loading=s.loading,
                premium_override=s.premium,
                switch_rate=s.switch_rate,
            )
        )
    return TippingProblem(states=tuple(states))


def derive_nt_problem(problem: TippingProblem) -> TippingProblem:
    """The initial dynamics continued forever (no tipping point coming)."""
    top = problem.state(problem.k)
    nt = StateSpec(
        lambda_floor=top.lambda_floor,
        beta=top.beta,
        decay=top.decay,
        claim_dist=top.claim_dist,
        jump_dist=top.jump_dist,
        discount=top.discount,
        loading=top.loading,
        premium_override=top.premium,
        switch_rate=0.0,
    )
    return TippingProblem(states=(nt,))


def kink_score(xs: np.ndarray, values: np.ndarray, at: float, window_cells: float = 1.5) -> Tuple[float, float]:
    """How sharply the slope of ``values`` breaks near ``at``.

    Returns (score, location): the largest discrete slope change within
    ``window_cells`` of ``at`` divided by the largest one farther than
    twice that window, and where the in-window maximum sits.
    """
    step = xs[1] - xs[0]
    slopes = np.diff(values) / np.diff(xs)
    jumps = np.abs(np.diff(slopes))
    mid = xs[1:-1]
    inside = np.abs(mid - at) <= window_cells * step
    outside = np.abs(mid - at) > 2.0 * window_cells * step
    if not inside.any() or not outside.any():
        return 0.0, math.nan
    ref = max(float(jumps[outside].max()), 1e-300)
    i_local = int(np.argmax(np.where(inside, jumps, -1.0)))
    return float(jumps[i_local]) / ref, float(mid[i_local])


# ---------------------------------------------------------------------------
# experiment runner
# ---------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    manifest: Dict
    failures: List[str] = field(default_factory=list)
    reports: Dict[str, List[SolveReport]] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failures


def _solve_block(
    cfg: ExperimentConfig,
    problem: TippingProblem,
    grids: List[GridSpec],
    label: str,
    failures: List[str],
    check: bool,
) -> Tuple[List[SolveReport], List[Dict]]:
    reports = solve_chain(
        problem,
        grids,
        tol=cfg.tol,
        quad_nodes=cfg.quad_nodes,
        max_iter=cfg.max_iter,
        cap_tol=cfg.cap_tol,
    )
    stats = []
    for rep in reports:
        d = dict(rep.diagnostics)
        entry = {
            "run": label,
            "state": rep.state,
            "iterations": rep.iterations,
            "residual": rep.residual,
            "tol": rep.tol,
            "wall_time": rep.wall_time,
            "diagnostics": d,
            "warnings": list(rep.warnings),
        }
        stats.append(entry)
        status = "ok" if not rep.warnings else "warn"
        print(f"[solve] {label} state {rep.state}: {rep.iterations} iterations, "
              f"residual {rep.residual:.2e} [{status}]")
        if check:
            grid = rep.surface.grid
            slack = 10.0 * rep.tol
            checks = {
                "converged": rep.converged,
                "iterates_nondecreasing": d["min_iterate_increment"] >= -slack,
                "value_at_least_identity": d["min_excess"] >= -slack,
                "forward_diff_at_least_cell": d["min_forward_diff"] >= grid.x_step - slack,
                "lambda_monotone": d["lambda_mono_excess"] <= d["tol_mono"],
            }
            if cfg.cap_tol is not None and rep.surface.grid.m1 > 0:
                # single-row grids (constant-intensity comparisons) do not
                # approximate the large-intensity limit, so no cap check
                checks["cap_excess_within_tol"] = d["cap_excess"] <= cfg.cap_tol
            for cname, okay in checks.items():
                if not okay:
                    failures.append(f"{label} state {rep.state}: {cname}")
    return reports, stats


def run_experiment(
    cfg: ExperimentConfig,
    out_dir,
    check: bool = False,
    compare_cl: Optional[bool] = None,
    no_tipping: Optional[bool] = None,
    heatmaps: bool = False,
    mc_paths: Optional[int] = None,
    mc_seed: Optional[int] = None,
) -> ExperimentResult:
    """Solve, compare, validate and persist; returns the manifest + failures.

    Artifacts: per-state value/region/checkpoint CSVs, difference tables
    against the no-tipping solve, the constant-intensity comparison slice,
    the refined-grid advantage table, the MC validation table, optional SVG
    heatmaps and a manifest.json tying everything together.
    """
    t_start = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    failures: List[str] = []
    manifest: Dict = {
        "name": cfg.name,
        "divopt_version": __version__,
        "config_sha256": hashlib.sha256(cfg.source_text.encode()).hexdigest(),
        "workers": worker_count(),
        "solves": [],
        "checks": {},
        "artifacts": {},
    }
    do_cl = cfg.compare_cl if compare_cl is None else compare_cl
    do_nt = cfg.no_tipping if no_tipping is None else no_tipping

    problem = cfg.problem
    grids = cfg.state_grids()

    # truncation-bound sanity: the configured x range may be below the bound
    # (matching published setups); everything above the range is treated as
    # immediate payout via the slope-1 tail.
    x_bars = []
    all_reports: Dict[str, List[SolveReport]] = {}
    reports, stats = _solve_block(cfg, problem, grids, "main", failures, check)
    all_reports["main"] = reports
    manifest["solves"].extend(stats)
    for m in range(problem.k + 1):
        spec = problem.state(m)
        xb = compute_x_bar(spec, reports[m - 1].surface if m >= 1 else None)
        x_bars.append(xb)
        if grids[m].x_max < xb:
            log.info(
                "state %d: configured x range %.6g is below the payout bound %.6g",
                m, grids[m].x_max, xb,
            )
    manifest["x_bar"] = x_bars

    for m, rep in enumerate(reports):
        vals_path = out / f"state{m}_values.csv"
        regions_path = out / f"state{m}_regions.csv"
        ckpt_path = out / f"state{m}_checkpoint.csv"
        _write_matrix_csv(vals_path, rep.surface.grid, rep.surface.values)
        _write_matrix_csv(regions_path, rep.surface.grid, rep.policy.actions, fmt="%d")
        save_checkpoint(
            ckpt_path,
            rep.surface,
            state=problem.state(m),
            solver_meta={"iterations": rep.iterations, "residual": rep.residual, "tol": rep.tol},
        )
        if heatmaps:
            _write_region_svg(out / f"state{m}_regions.svg", rep.surface.grid, rep.policy.actions)

    top = problem.k
    lam_av_top = lambda_av(problem.state(top))
    scale = max(1.0, problem.state(top).premium / problem.state(top).discount)
    cmp_slack = 1e-6 * scale

    if do_nt:
        nt_problem = derive_nt_problem(problem)
        nt_reports, nt_stats = _solve_block(
            cfg, nt_problem, [grids[top]], "no_tipping", failures, check
        )
        all_reports["no_tipping"] = nt_reports
        manifest["solves"].extend(nt_stats)
        nt_vals = nt_reports[0].surface.values
        _write_matrix_csv(out / "nt_values.csv", grids[top], nt_vals)
        diffs = {}
        for m in range(1, top + 1):
            diff = reports[m].surface.values - nt_vals
            _write_matrix_csv(out / f"diff_state{m}_minus_nt.csv", grids[m], diff)
            diffs[m] = float(diff.min())
            print(f"[compare] V{m} - V_NT: min {diff.min():+.3e}, max {diff.max():+.3e}")
            if check and diff.min() < -cmp_slack:
                failures.append(f"no-tipping dominance: state {m} dips {diff.min():.3e}")
        manifest["checks"]["nt_min_gap"] = diffs

    if do_cl:
        cl_problem = derive_cl_problem(problem)
        cl_grids = [
            GridSpec.for_state(cl_problem.state(m), cfg.grid.x_max, cfg.grid.n1,
                               cl_problem.state(m).lambda_floor, 0)
            for m in range(top + 1)
        ]
        cl_reports, cl_stats = _solve_block(cfg, cl_problem, cl_grids, "classical", failures, check)
        all_reports["classical"] = cl_reports
        manifest["solves"].extend(cl_stats)

        # slice table at the long-run average intensity, all states
        ms_top = sigma_up(grids[top], lam_av_top)
        header = ["x"]
        cols = []
        for m in range(top, -1, -1):
            ms = sigma_up(grids[m], lam_av_top)
            header += [f"v_state{m}", f"cl_state{m}"]
            cols.append(reports[m].surface.values[:, ms])
            cols.append(cl_reports[m].surface.values[:, 0])
        xs = grids[top].x_nodes
        rows = [[float(xs[i])] + [float(c[i]) for c in cols] for i in range(len(xs))]
        _write_table_csv(out / "cl_slice.csv", header, rows)
        print(f"[compare] classical slice written at lambda row {ms_top} "
              f"(lambda={grids[top].lam_nodes[ms_top]:.6g})")

        kinks = {}
        for idx, name in enumerate(header[1:]):
            score, where = kink_score(xs, np.asarray(cols[idx]), 0.1)
            kinks[name] = {"score": score, "x": where}
        manifest["checks"]["cl_slice_kinks"] = kinks

        if cfg.advantage is not None:
            adv = cfg.advantage
            adv_grids = [
                GridSpec.for_state(problem.state(m), adv.x_max, adv.n1, adv.lambda_max, adv.m1)
                for m in range(top + 1)
            ]
            adv_reports, adv_stats = _solve_block(cfg, problem, adv_grids, "advantage", failures, check)
            all_reports["advantage"] = adv_reports
            manifest["solves"].extend(adv_stats)
            adv_cl_grids = [
                GridSpec.for_state(cl_problem.state(m), adv.x_max, adv.n1,
                                   cl_problem.state(m).lambda_floor, 0)
                for m in range(top + 1)
            ]
            adv_cl_reports, adv_cl_stats = _solve_block(
                cfg, cl_problem, adv_cl_grids, "advantage_classical", failures, check
            )
            all_reports["advantage_classical"] = adv_cl_reports
            manifest["solves"].extend(adv_cl_stats)
            ms = sigma_up(adv_grids[top], lam_av_top)
            v_shot = adv_reports[top].surface.values[:, ms]
            v_cl = adv_cl_reports[top].surface.values[:, 0]
            gap = v_shot - v_cl
            _write_table_csv(
                out / "advantage.csv",
                ["x", "v_shot", "v_classical", "gap"],
                [[float(adv_grids[top].x_nodes[i]), float(v_shot[i]), float(v_cl[i]), float(gap[i])]
                 for i in range(len(v_shot))],
            )
            manifest["checks"]["advantage_min_gap"] = float(gap.min())
            print(f"[compare] shot-noise advantage at lambda={adv_grids[top].lam_nodes[ms]:.6g}: "
                  f"min gap {gap.min():+.4e}")
            if check and gap.min() < -cmp_slack:
                failures.append(f"shot-noise advantage violated: min gap {gap.min():.3e}")

    if cfg.mc is not None and cfg.mc.probes:
        mc = cfg.mc
        paths = mc.paths if mc_paths is None else mc_paths
        seed = mc.seed if mc_seed is None else mc_seed
        q_top = problem.state(top).discount
        horizon = mc.horizon_scale / q_top
        mc_rows = []
        delta_sum = grids[top].delta + grids[top].Delta
        for i, (x_probe, lam_probe) in enumerate(mc.probes):
            n = int(round(x_probe / grids[top].x_step))
            n = min(max(n, 0), grids[top].n1)
            ms = sigma_up(grids[top], lam_probe)
            x0 = float(grids[top].x_nodes[n])
            lam0 = float(grids[top].lam_nodes[ms])
            cfg_path = PathConfig(
                problem=problem,
                grids=grids,
                policies=[r.policy for r in reports],
                x0=x0,
                lam0=lam0,
                paths=paths,
                seed=seed + i,
                horizon=horizon,
            )
            est = evaluate_policy(cfg_path)
            vhat = float(reports[top].surface.values[n, ms])
            bound = 3.0 * est.se + mc.slack * delta_sum
            ok = abs(est.mean - vhat) <= bound
            mc_rows.append([x0, lam0, vhat, est.mean, est.se, est.ruin_fraction,
                            est.tipped_fraction, bound, int(ok)])
            print(f"[mc] probe ({x0:.4g}, {lam0:.4g}): vhat={vhat:.6g} mc={est.mean:.6g} "
                  f"(se {est.se:.2g}) |diff|={abs(est.mean - vhat):.3g} bound={bound:.3g} "
                  f"{'ok' if ok else 'FAIL'}")
            if check and not ok:
                failures.append(
                    f"mc probe ({x0:.4g}, {lam0:.4g}): |{est.mean:.6g} - {vhat:.6g}| > {bound:.4g}"
                )
        _write_table_csv(
            out / "mc_validation.csv",
            ["x", "lambda", "vhat", "mc_mean", "mc_se", "ruin_fraction",
             "tipped_fraction", "bound", "ok"],
            mc_rows,
        )
        manifest["mc"] = {"paths": paths, "seed": seed, "horizon": horizon, "slack": mc.slack}

    for f in sorted(out.glob("*.csv")):
        manifest["artifacts"][f.name] = _sha256(f)
    manifest["wall_time"] = time.perf_counter() - t_start
    manifest["failures"] = failures
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    for failure in failures:
        print(f"[check] FAIL: {failure}")
    if check:
        print(f"[check] {'all blocks passed' if not failures else f'{len(failures)} block(s) failed'}")
    return ExperimentResult(manifest=manifest, failures=failures, reports=all_reports)


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


def _add_common(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", required=True, help="config file path or bundled name (example1..example4)")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--tol", type=float, default=None, help="override solver tolerance")
    sp.add_argument("--quad-nodes", type=int, default=None, help="override quadrature nodes per panel")
    sp.add_argument("--heatmaps", action="store_true", help="also write SVG region heatmaps")
    sp.add_argument("--paths", type=int, default=None, help="override Monte Carlo path count")
    sp.add_argument("--seed", type=int, default=None, help="override Monte Carlo seed")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="divopt",
        description="Optimal dividend solver for shot-noise intensities with a tipping point",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("solve", "solve the regime chain and write value/region artifacts"),
        ("simulate", "solve, then Monte Carlo validate the policies at the configured probes"),
        ("compare", "solve plus no-tipping and constant-intensity comparison runs"),
        ("check", "full run with every validation block; nonzero exit on failure"),
    ]:
        sp = sub.add_parser(name, help=help_text)
        _add_common(sp)
        if name == "solve":
            sp.add_argument("--compare-cl", action="store_true", help="add the constant-intensity comparison")
            sp.add_argument("--no-tipping", action="store_true", help="add the no-tipping comparison")
        if name == "solve" or name == "compare":
            sp.add_argument("--check", action="store_true", help="fail on any invariant violation")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    if args.tol is not None:
        cfg.tol = args.tol
    if args.quad_nodes is not None:
        cfg.quad_nodes = args.quad_nodes

    command = args.command
    kwargs = dict(
        heatmaps=args.heatmaps,
        mc_paths=args.paths,
        mc_seed=args.seed,
    )
    if command == "solve":
        result = run_experiment(
            cfg, args.out, check=args.check,
            compare_cl=args.compare_cl or None, no_tipping=args.no_tipping or None,
            **kwargs,
        )
        return 0 if (result.ok or not args.check) else 1
    if command == "simulate":
        run_experiment(cfg, args.out, check=False, compare_cl=False, no_tipping=False, **kwargs)
        return 0
    if command == "compare":
        result = run_experiment(cfg, args.out, check=args.check, compare_cl=True,
                                no_tipping=True, **kwargs)
        return 0 if (result.ok or not args.check) else 1
    # check: everything on, strict
    result = run_experiment(cfg, args.out, check=True, compare_cl=True, no_tipping=True, **kwargs)
    return 0 if result.ok else 1


if __name__ == "__main__":
    sys.exit(main())
