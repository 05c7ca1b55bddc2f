"""Acceptance suite: one test per criterion, each printing a pass/fail line.

The four bundled example configs are solved once in a session fixture
(including their comparison runs and Monte Carlo validation blocks); the
criteria then interrogate the solved surfaces, policies and artifacts.
Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines.
"""

from __future__ import annotations

import dataclasses
import math
import os
import time

import numpy as np
import pytest

from divopt import (
    apply_t0,
    build_kernel,
    cl_closed_form,
    extract_regions,
    one_step_oracle,
    premium_rate,
    sigma_up,
    value_iteration,
)
from divopt.cli import load_config, run_experiment
from divopt.grid import GridSpec

EXAMPLES = ("example1", "example2", "example3", "example4")


def report(num: int, ok: bool, message: str) -> None:
    print(f"[criterion {num:02d}] {'PASS' if ok else 'FAIL'} {message}")
    assert ok, f"criterion {num}: {message}"


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    """Solve all four examples once, comparisons and MC blocks included."""
    out = {}
    for name in EXAMPLES:
        cfg = load_config(name)
        directory = tmp_path_factory.mktemp(name)
        t0 = time.perf_counter()
        result = run_experiment(cfg, directory, check=True)
        print(f"[setup] {name}: solved in {time.perf_counter() - t0:.0f}s, "
              f"{len(result.failures)} check failure(s)")
        out[name] = (cfg, directory, result)
    return out


def _cmp_slack(cfg) -> float:
    top = cfg.problem.state(cfg.problem.k)
    return 1e-6 * max(1.0, top.premium / top.discount)


# ---------------------------------------------------------------------------


def test_criterion_01_premium_calibration():
    targets = {
        ("example1", 1): 101 / 700,
        ("example1", 0): 141 / 700,
        ("example2", 1): 749 / 30,
        ("example2", 0): 642 / 25,
        ("example3", 1): 101 / 700,
        ("example3", 0): 141 / 700,
        ("example4", 1): 101 * (math.e - 1) / (700 * math.e),
        ("example4", 0): 141 / 700,
    }
    worst = 0.0
    for (name, pre_flag), target in targets.items():
        cfg = load_config(name)
        m = cfg.problem.k if pre_flag else 0
        spec = dataclasses.replace(cfg.problem.state(m), premium_override=None)
        rel = abs(premium_rate(spec) - target) / target
        worst = max(worst, rel)
    report(1, worst <= 1e-12, f"premium calibration: worst relative error {worst:.2e}")


def test_criterion_02_kernel_matches_one_step_oracle(runs):
    worst_z = 0.0
    points = 0
    for name in EXAMPLES:
        cfg, _, result = runs[name]
        prob = cfg.problem
        top = prob.k
        grids = cfg.state_grids()
        reports = result.reports["main"]
        w = reports[top].surface
        g = reports[top - 1].surface if top >= 1 else None
        kern = build_kernel(prob.state(top), grids[top], quad_nodes=cfg.quad_nodes)
        sw = kern.switch_constants(g)
        rng = np.random.default_rng(hash(name) % 2**32)
        for _ in range(50):
            n = int(rng.integers(0, grids[top].n1))
            m = int(rng.integers(0, grids[top].m1 + 1))
            est = one_step_oracle(
                prob.state(top), grids[top], n, m, w, g,
                samples=1_000_000, seed=int(rng.integers(0, 2**31)),
            )
            ref = apply_t0(kern, w, g, n, m, switch_const=sw)
            worst_z = max(worst_z, abs(ref - est.mean) / est.se)
            points += 1
    report(2, worst_z <= 4.0, f"one-step oracle agreement at {points} nodes: worst |z| {worst_z:.2f}")


def test_criterion_03_classical_oracle_convergence():
    cfg = load_config("example1")
    post = dataclasses.replace(cfg.problem.state(0), lambda_floor=47 / 28)
    rate = post.claim_dist.rate

    def rel_error(n1: int) -> float:
        grid = GridSpec.for_state(post, 0.4, n1, post.lambda_floor, 0)
        rep = value_iteration(build_kernel(post, grid))
        ref = cl_closed_form(grid.x_nodes, post.lambda_floor, post.premium, post.discount, rate)
        return float(np.abs(rep.surface.values[:, 0] - ref).max() / np.abs(ref).max())

    coarse = rel_error(59)       # the published 60-point surplus grid
    fine = rel_error(118)        # one halving of the time step
    ok = coarse <= 0.02 and fine < coarse
    report(3, ok, f"closed-form match: rel sup error {coarse:.4%} at 60 points, {fine:.4%} refined")


def test_criterion_04_solve_invariants_every_run(runs):
    checked = 0
    problems = []
    for name in EXAMPLES:
        cfg, _, result = runs[name]
        for label, reports in result.reports.items():
            for rep in reports:
                grid = rep.surface.grid
                slack = 10.0 * rep.tol
                d = rep.diagnostics
                conditions = {
                    "converged": rep.converged and rep.residual < rep.tol,
                    "iterates_nondecreasing": d["min_iterate_increment"] >= -slack,
                    "above_identity": d["min_excess"] >= -slack,
                    "forward_diffs": d["min_forward_diff"] >= grid.x_step - slack,
                    "lambda_monotone": d["lambda_mono_excess"] <= d["tol_mono"],
                    "excess_nondecreasing": d["max_excess"] >= d["min_excess"],
                }
                if cfg.cap_tol is not None and grid.m1 > 0:
                    conditions["cap_adequacy"] = d["cap_excess"] <= cfg.cap_tol
                checked += 1
                for cname, okay in conditions.items():
                    if not okay:
                        problems.append(f"{name}/{label}/state{rep.state}: {cname}")
    report(4, not problems, f"fixed-point and shape invariants on {checked} solves: "
                            f"{problems if problems else 'all hold'}")


def test_criterion_05_example1_structure(runs):
    cfg, _, result = runs["example1"]
    reports = result.reports["main"]
    slack = _cmp_slack(cfg)
    msgs = []
    ok = True
    for m, rep in enumerate(reports):
        counts = extract_regions(rep.policy).intervals_per_row
        if not np.all(counts == 1):
            ok = False
            msgs.append(f"state {m} rows with {counts.max()} action intervals")
    v1_minus_v2 = float((reports[1].surface.values - reports[2].surface.values).min())
    if v1_minus_v2 < -slack:
        ok = False
    nt_gaps = result.manifest["checks"]["nt_min_gap"]
    if any(gap < -slack for gap in nt_gaps.values()):
        ok = False
    report(5, ok, "example1 structure: barrier rows in all states, "
                  f"min(V1-V2)={v1_minus_v2:.2e}, nt gaps {nt_gaps} {msgs}")


def test_criterion_06_example2_two_bands(runs):
    cfg, _, result = runs["example2"]
    ok = True
    details = []
    for m, rep in enumerate(result.reports["main"]):
        regions = extract_regions(rep.policy)
        counts = regions.intervals_per_row
        two_band_rows = [int(r) for r in np.flatnonzero(counts == 2)]
        # "pay out everything" rows: action at every positive surplus node
        # (nothing can be paid at zero surplus, so n = 0 rationally waits)
        top_all_action = bool(regions.action[1:, -1].all())
        details.append(f"state{m}: 2-band rows {two_band_rows}, top row action {top_all_action}")
        if not two_band_rows or not top_all_action:
            ok = False
    report(6, ok, "example2 structure: " + "; ".join(details))


def test_criterion_07_examples34_reproduction(runs):
    ok = True
    details = []
    for name, points in [("example3", (80, 80)), ("example4", (80, 110))]:
        cfg, directory, result = runs[name]
        if (cfg.grid.x_points, cfg.grid.lambda_points) != points:
            ok = False
        for m in range(cfg.problem.k + 1):
            lines = (directory / f"state{m}_regions.csv").read_text().splitlines()
            if len(lines) != points[1] + 1 or len(lines[1].split(",")) != points[0] + 1:
                ok = False
                details.append(f"{name} state{m} region table has wrong shape")
    cfg4, _, result4 = runs["example4"]
    x_step = cfg4.grid.x_max / cfg4.grid.n1
    kinks = result4.manifest["checks"]["cl_slice_kinks"]
    found = {
        col: k for col, k in kinks.items()
        if k["score"] > 3.0 and abs(k["x"] - 0.1) <= 1.5 * x_step
    }
    if not found:
        ok = False
    best = max(kinks.items(), key=lambda kv: kv[1]["score"])
    details.append(f"example4 kink: column {best[0]} score {best[1]['score']:.3g} at x={best[1]['x']:.4f}")
    report(7, ok, "examples 3/4 reproduction: region grids 80x80 and 80x110; " + "; ".join(details))


def test_criterion_08_shot_noise_advantage(runs):
    ok = True
    details = []
    for name in ("example1", "example2"):
        cfg, _, result = runs[name]
        gap = result.manifest["checks"]["advantage_min_gap"]
        details.append(f"{name}: min gap {gap:+.3e}")
        if gap < -_cmp_slack(cfg):
            ok = False
    report(8, ok, "shot-noise advantage over the constant-intensity model: " + "; ".join(details))


def test_criterion_09_monte_carlo_consistency(runs):
    ok = True
    details = []
    for name in EXAMPLES:
        cfg, directory, result = runs[name]
        if result.manifest["mc"]["paths"] != 100_000:
            ok = False
        rows = (directory / "mc_validation.csv").read_text().splitlines()[1:]
        worst = 0.0
        for line in rows:
            cols = line.split(",")
            diff = abs(float(cols[3]) - float(cols[2]))
            bound = float(cols[7])
            worst = max(worst, diff / bound)
            if int(cols[8]) != 1:
                ok = False
        if len(rows) != 5:
            ok = False
        details.append(f"{name}: worst |diff|/bound {worst:.2f}")
    report(9, ok, "Monte Carlo policy evaluation within 3 SE + C (delta+Delta): " + "; ".join(details))


def test_criterion_10_byte_identical_reruns(tmp_path):
    cfg = load_config("example1-mini")
    digests = []
    for workers, sub in (("1", "a"), ("3", "b")):
        os.environ["DIVOPT_WORKERS"] = workers
        try:
            out = tmp_path / sub
            run_experiment(cfg, out, check=True)
            digests.append({
                p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))
            })
        finally:
            os.environ.pop("DIVOPT_WORKERS", None)
    same_names = digests[0].keys() == digests[1].keys()
    same_bytes = same_names and all(digests[0][k] == digests[1][k] for k in digests[0])
    report(10, same_bytes and len(digests[0]) >= 8,
           f"byte-identical rerun under different worker counts across {len(digests[0])} CSVs")
