from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.integrate import solve_ivp

from divopt import (
    Deterministic,
    Erlang,
    Exponential,
    GridSpec,
    TruncatedExponential,
    build_kernel,
    claim_redistribution,
    cumulative_hazard,
    decayed_intensity,
    jump_redistribution,
)
from .conftest import ex1_post, ex1_pre


def test_decayed_intensity_endpoints():
    assert decayed_intensity(0.25, 1.25, 0.7, 0.0) == pytest.approx(1.25)
    assert decayed_intensity(0.25, 0.25, 0.7, 3.7) == pytest.approx(0.25)


def test_decayed_intensity_against_ode_integrator():
    # the decay is the solution of lam' = -d (lam - floor)
    sol = solve_ivp(lambda t, y: -0.7 * (y - 0.25), (0.0, 1.0), [1.25], rtol=1e-11, atol=1e-13)
    ours = float(decayed_intensity(0.25, 1.25, 0.7, 1.0))
    assert ours == pytest.approx(sol.y[0, -1], rel=1e-9)
    assert ours == pytest.approx(0.25 + math.exp(-0.7), rel=1e-14)


def test_cumulative_hazard_against_adaptive_quadrature():
    assert float(cumulative_hazard(0.25, 1.25, 0.7, 0.0)) == 0.0
    assert float(cumulative_hazard(0.3, 0.3, 0.7, 2.0)) == pytest.approx(0.6, rel=1e-14)
    val, _ = integrate.quad(lambda t: float(decayed_intensity(0.25, 1.25, 0.7, t)), 0.0, 1.0)
    ours = float(cumulative_hazard(0.25, 1.25, 0.7, 1.0))
    assert ours == pytest.approx(val, rel=1e-10)
    assert ours == pytest.approx(0.25 + (1 - math.exp(-0.7)) / 0.7, rel=1e-14)


# ---------------------------------------------------------------------------
# claim redistribution
# ---------------------------------------------------------------------------


def _grid(x_step=0.1, n1=5, lam_floor=1.0, Delta=0.5, m1=2) -> GridSpec:
    return GridSpec(delta=x_step, x_step=x_step, Delta=Delta, n1=n1, m1=m1, lambda_floor=lam_floor)


def test_claim_redistribution_exponential_frozen_values():
    g = _grid()
    mass, ruin, crumb = claim_redistribution(g, Exponential(10.0), 0.25)
    # destination 0.2 collects claims in (0, 0.05]; ruin needs a claim > 0.25
    assert mass[2] == pytest.approx(1 - math.exp(-0.5), rel=1e-12)
    assert ruin == pytest.approx(math.exp(-2.5), rel=1e-12)
    assert mass.sum() + ruin == pytest.approx(1.0, abs=1e-14)


def test_claim_redistribution_matches_monte_carlo():
    g = _grid()
    rng = np.random.default_rng(2024)
    u = rng.exponential(0.1, 1_000_000)
    post = 0.25 - u
    ruin_mc = float((post < 0).mean())
    dest2_mc = float(((post >= 0.2) & (post < 0.3)).mean())
    crumb_mc = float(np.where(post >= 0, post - np.floor(post / 0.1 + 1e-12) * 0.1, 0.0).mean())
    mass, ruin, crumb = claim_redistribution(g, Exponential(10.0), 0.25)
    n = 1_000_000
    assert ruin == pytest.approx(ruin_mc, abs=5 * math.sqrt(ruin * (1 - ruin) / n))
    assert mass[2] == pytest.approx(dest2_mc, abs=5 * math.sqrt(0.25 / n))
    assert crumb == pytest.approx(crumb_mc, abs=5 * 0.03 / math.sqrt(n))


def test_claim_redistribution_deterministic_atom():
    g = _grid()
    mass, ruin, crumb = claim_redistribution(g, Deterministic(0.1), 0.25)
    assert mass[1] == pytest.approx(1.0)
    assert ruin == 0.0
    assert crumb == pytest.approx(0.05, rel=1e-12)


def test_claim_redistribution_zero_surplus_all_ruin():
    g = _grid()
    mass, ruin, crumb = claim_redistribution(g, Exponential(10.0), 0.0)
    assert ruin == pytest.approx(1.0)
    assert crumb == 0.0
    with pytest.raises(ValueError):
        claim_redistribution(g, Exponential(10.0), -0.1)


@settings(max_examples=60, deadline=None)
@given(y=st.floats(0.0, 0.7), kind=st.integers(0, 3))
def test_claim_redistribution_conserves_mass(y, kind):
    dist = [Exponential(10.0), Erlang(2, 20.0), Deterministic(0.1), TruncatedExponential(10.0, 0.1)][kind]
    g = _grid()
    mass, ruin, crumb = claim_redistribution(g, dist, y)
    assert mass.sum() + ruin == pytest.approx(1.0, abs=1e-12)
    assert np.all(mass >= -1e-15) and 0.0 <= ruin <= 1.0
    assert crumb >= -1e-15
    if y < g.x_max + g.x_step:  # inside the scheme's reachable range
        assert crumb < g.x_step


# ---------------------------------------------------------------------------
# jump redistribution
# ---------------------------------------------------------------------------


def test_jump_redistribution_exponential_frozen_values():
    g = _grid()  # lambda rows 1.0, 1.5, 2.0
    mass = jump_redistribution(g, Exponential(0.5), 1.0)
    assert mass[1] == pytest.approx(1 - math.exp(-0.25), rel=1e-12)
    # cap bin absorbs the survival beyond the second-to-last row
    assert mass[2] == pytest.approx(math.exp(-0.25), rel=1e-12)
    assert mass[0] == 0.0


def test_jump_redistribution_matches_monte_carlo():
    g = _grid()
    rng = np.random.default_rng(77)
    y = rng.exponential(2.0, 1_000_000)
    dest1_mc = float(((1.0 + y > 1.0) & (1.0 + y <= 1.5)).mean())
    mass = jump_redistribution(g, Exponential(0.5), 1.0)
    assert mass[1] == pytest.approx(dest1_mc, abs=5 * math.sqrt(0.25 / 1_000_000))


@settings(max_examples=40, deadline=None)
@given(lam_c=st.floats(1.0, 2.4), kind=st.integers(0, 3))
def test_jump_redistribution_sums_to_one(lam_c, kind):
    dist = [Exponential(0.5), Erlang(2, 1.0), Deterministic(0.7), TruncatedExponential(1.0, 2.0)][kind]
    g = _grid()
    mass = jump_redistribution(g, dist, lam_c)
    assert mass.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(mass >= -1e-15)


def test_jump_redistribution_single_row_grid():
    g = _grid(m1=0)
    mass = jump_redistribution(g, Exponential(0.5), 1.0)
    assert mass.shape == (1,)
    assert mass[0] == 1.0


# ---------------------------------------------------------------------------
# kernel assembly
# ---------------------------------------------------------------------------


def test_build_kernel_conserves_probability_everywhere():
    spec = ex1_pre()
    grid = GridSpec.for_state(spec, 0.4, 29, 5.0, 19)
    kern = build_kernel(spec, grid)
    for m in range(grid.m1 + 1):
        assert kern.mass_balance(m)["total"] == pytest.approx(1.0, abs=1e-10)


def test_build_kernel_quiet_channel_closed_form():
    # no catastrophes, no switching, intensity at the floor: survival over a
    # step is exactly exp(-(floor + q) delta) after discounting
    spec = ex1_post(beta=0.0)
    grid = GridSpec.for_state(spec, 0.4, 19, 0.25, 0)
    kern = build_kernel(spec, grid)
    expected = math.exp(-(0.25 + 0.2) * grid.delta)
    assert kern.ne_factor[0] == pytest.approx(expected, rel=1e-13)
    assert kern.end_prob[0] == pytest.approx(math.exp(-0.25 * grid.delta), rel=1e-13)


def test_build_kernel_crumbs_stay_inside_a_cell():
    spec = ex1_pre()
    grid = GridSpec.for_state(spec, 0.4, 29, 5.0, 19)
    kern = build_kernel(spec, grid)
    # crumb_const is the crumb scaled by the claim channel weight, so the
    # raw expected crumb bound implies this integral stays under one cell
    assert np.all(kern.crumb_const >= -1e-15)
    assert np.all(kern.crumb_const <= grid.x_step)


def test_build_kernel_quadrature_already_converged():
    spec = ex1_pre()
    grid = GridSpec.for_state(spec, 0.4, 19, 5.0, 11)
    k16 = build_kernel(spec, grid, quad_nodes=16)
    k32 = build_kernel(spec, grid, quad_nodes=32)
    assert np.abs(k16.ne_factor - k32.ne_factor).max() < 1e-8
    assert np.abs(k16.crumb_const - k32.crumb_const).max() < 1e-8
    assert np.abs(k16.jump_J - k32.jump_J).max() < 1e-8
    assert np.abs(k16.jump_div_const - k32.jump_div_const).max() < 1e-8
    for m in range(grid.m1 + 1):
        for md, block in k16.claim_w[m].items():
            assert np.abs(block - k32.claim_w[m][md]).max() < 1e-8


def test_build_kernel_atom_claims_conserve_mass():
    spec = ex1_post(claim_dist=Deterministic(0.1))
    grid = GridSpec.for_state(spec, 0.45, 19, 5.0, 9)
    kern = build_kernel(spec, grid)
    for m in range(grid.m1 + 1):
        assert kern.mass_balance(m)["total"] == pytest.approx(1.0, abs=1e-10)


def test_build_kernel_rejects_mismatched_grid():
    spec = ex1_post()
    grid = GridSpec(delta=0.05, x_step=0.01, Delta=0.5, n1=4, m1=2, lambda_floor=0.25)
    with pytest.raises(ValueError, match="x_step"):
        build_kernel(spec, grid)
    good = GridSpec.for_state(spec, 0.4, 19, 5.0, 9)
    with pytest.raises(ValueError, match="quad_nodes"):
        build_kernel(spec, good, quad_nodes=2)


def test_kernel_node_channels_reconstruct_survival():
    # claim density lam(t) S(t), jump beta S(t), switch xi S(t); their
    # integrals plus the end-of-step survival add to one
    spec = ex1_pre()
    grid = GridSpec.for_state(spec, 0.4, 9, 5.0, 7)
    kern = build_kernel(spec, grid)
    for m in (0, 3, 7):
        t, w = kern.node_t[m], kern.node_w[m]
        S, lam = kern.node_S[m], kern.node_lam[m]
        total = (
            float(w @ (lam * S))
            + spec.beta * float(w @ S)
            + spec.switch_rate * float(w @ S)
            + kern.end_prob[m]
        )
        assert total == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(
            lam, decayed_intensity(spec.lambda_floor, grid.lam_nodes[m], spec.decay, t)
        )
