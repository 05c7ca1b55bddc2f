"""Independent Monte Carlo machinery for validating solved policies.

Everything here deliberately avoids the solver's precomputed tables: paths
are simulated event by event against the true continuous-time dynamics, the
one-step oracle replays the wait action experiment by brute force, and the
constant-intensity closed form provides an external reference for the
exponential-claims case.  Streams are counter-based (Philox) keyed by
(seed, path index), so results do not depend on worker count.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from . import _engine
from .grid import GridSpec, ValueSurface, sigma_up
from .model import Distribution, Exponential, StateSpec, TippingProblem
from .solver import PolicyMap

__all__ = [
    "PathConfig",
    "EstimateReport",
    "sample_path",
    "evaluate_policy",
    "one_step_oracle",
    "OneStepEstimate",
    "cl_closed_form",
    "cl_optimal_barrier",
    "worker_count",
]

WORKERS_ENV = "DIVOPT_WORKERS"


def worker_count() -> int:
    """Thread count for path sampling, from the environment (default 1)."""
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@dataclass(frozen=True)
class PathConfig:
    """Inputs of a policy evaluation run.

    ``policies[m]`` / ``grids[m]`` belong to the state with m switches left;
    the path starts in ``start_state`` (defaults to the top of the chain).
    The horizon only truncates a tail whose discounted mass is negligible;
    the default 40/q pushes that bias below 1e-10 of the value scale.
    """

    problem: TippingProblem
    grids: Sequence[GridSpec]
    policies: Sequence[PolicyMap]
    x0: float
    lam0: float
    paths: int
    seed: int
    horizon: Optional[float] = None
    start_state: Optional[int] = None

    def __post_init__(self) -> None:
        k = self.problem.k
        if len(self.grids) != k + 1 or len(self.policies) != k + 1:
            raise ValueError("one grid and one policy per state are required")
        if self.paths < 1:
            raise ValueError("paths must be positive")
        if self.x0 < 0:
            raise ValueError("x0 must be nonnegative")

    @property
    def start(self) -> int:
        return self.problem.k if self.start_state is None else self.start_state

    @property
    def horizon_value(self) -> float:
        if self.horizon is not None:
            return self.horizon
        q = min(self.problem.state(m).discount for m in range(self.problem.k + 1))
        return 40.0 / q


@dataclass(frozen=True)
class EstimateReport:
    """Sample statistics of discounted dividend payoffs."""

    mean: float
    se: float
    paths: int
    ruin_fraction: float
    tipped_fraction: float
    mean_tip_time: float
    truncated_fraction: float


class _EnginePack(NamedTuple):
    arrays: tuple
    policies: np.ndarray


def _pack(cfg: PathConfig) -> _EnginePack:
    k = cfg.problem.k
    ns = k + 1
    f = lambda: np.zeros(ns)
    p, q, delta, xstep = f(), f(), f(), f()
    lamfloor, lamstep, beta, decay, xi = f(), f(), f(), f(), f()
    n1 = np.zeros(ns, dtype=np.int64)
    m1 = np.zeros(ns, dtype=np.int64)
    ckind = np.zeros(ns, dtype=np.int64)
    c1, c2 = f(), f()
    jkind = np.zeros(ns, dtype=np.int64)
    j1, j2 = f(), f()
    for m in range(ns):
        spec, grid = cfg.problem.state(m), cfg.grids[m]
        p[m], q[m] = spec.premium, spec.discount
        delta[m], xstep[m] = grid.delta, grid.x_step
        n1[m], m1[m] = grid.n1, grid.m1
        lamfloor[m], lamstep[m] = grid.lambda_floor, grid.Delta
        beta[m], decay[m], xi[m] = spec.beta, spec.decay, spec.switch_rate
        ckind[m], c1[m], c2[m] = spec.claim_dist.engine_code()
        jkind[m], j1[m], j2[m] = spec.jump_dist.engine_code()
    pol = np.zeros((ns, int(n1.max()) + 1, int(m1.max()) + 1), dtype=np.int8)
    pol[:] = _engine.ACT_LIQUIDATE
    for m in range(ns):
        pol[m, : n1[m] + 1, : m1[m] + 1] = cfg.policies[m].actions
    arrays = (
        p, q, delta, xstep, n1, lamfloor, lamstep, m1, beta, decay, xi,
        ckind, c1, c2, jkind, j1, j2,
    )
    return _EnginePack(arrays=arrays, policies=pol)


def _path_rng(seed: int, path_index: int) -> np.random.Generator:
    key = np.array([np.uint64(seed), np.uint64(path_index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


_NO_RECORD = np.zeros(0)


def sample_path(
    cfg: PathConfig, path_index: int, record: bool = False
) -> Union[float, Tuple[float, np.ndarray, np.ndarray]]:
    """Discounted dividends of one path; same index, same payoff, always.

    With ``record=True`` also returns the (time, amount) payment stream,
    which recombines to the payoff under pure e^{-qt} discounting.
    """
    pack = _pack(cfg)
    rng = _path_rng(cfg.seed, path_index)
    if record:
        rec_t = np.full(100_000, np.nan)
        rec_d = np.full(100_000, np.nan)
    else:
        rec_t = rec_d = _NO_RECORD
    payoff, _ruin, _tip, _trunc = _engine.run_path(
        rng, cfg.start, cfg.x0, cfg.lam0, cfg.horizon_value, *pack.arrays,
        pack.policies, rec_t, rec_d,
    )
    if record:
        keep = ~np.isnan(rec_t)
        return float(payoff), rec_t[keep], rec_d[keep]
    return float(payoff)


def evaluate_policy(cfg: PathConfig) -> EstimateReport:
    """Mean and standard error of the discounted dividends over cfg.paths.

    Paths are independent streams; worker threads only split the index
    range, and the ordered reduction keeps the result identical for any
    worker count.
    """
    if cfg.paths < 2:
        raise ValueError("at least two paths are needed for a standard error")
    pack = _pack(cfg)
    payoffs = np.empty(cfg.paths)
    ruined = np.empty(cfg.paths, dtype=np.bool_)
    tip_times = np.empty(cfg.paths)
    truncated = np.empty(cfg.paths, dtype=np.bool_)

    def run_block(lo: int, hi: int) -> None:
        for i in range(lo, hi):
            rng = _path_rng(cfg.seed, i)
            payoff, ruin, tip, trunc = _engine.run_path(
                rng, cfg.start, cfg.x0, cfg.lam0, cfg.horizon_value, *pack.arrays,
                pack.policies, _NO_RECORD, _NO_RECORD,
            )
            payoffs[i] = payoff
            ruined[i] = ruin
            tip_times[i] = tip
            truncated[i] = trunc

    workers = worker_count()
    if workers == 1:
        run_block(0, cfg.paths)
    else:
        chunk = -(-cfg.paths // workers)
        bounds = [(lo, min(lo + chunk, cfg.paths)) for lo in range(0, cfg.paths, chunk)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda b: run_block(*b), bounds))

    tipped = tip_times >= 0
    return EstimateReport(
        mean=float(payoffs.mean()),
        se=float(payoffs.std(ddof=1) / math.sqrt(cfg.paths)),
        paths=cfg.paths,
        ruin_fraction=float(ruined.mean()),
        tipped_fraction=float(tipped.mean()),
        mean_tip_time=float(tip_times[tipped].mean()) if tipped.any() else math.nan,
        truncated_fraction=float(truncated.mean()),
    )


# ---------------------------------------------------------------------------
# one-step oracle
# ---------------------------------------------------------------------------


class OneStepEstimate(NamedTuple):
    mean: float
    se: float


def _sample_sizes(rng: np.random.Generator, dist: Distribution, size: int) -> np.ndarray:
    kind, p1, p2 = dist.engine_code()
    if kind == _engine.KIND_EXPONENTIAL:
        return rng.exponential(1.0 / p1, size)
    if kind == _engine.KIND_ERLANG:
        return rng.gamma(p1, 1.0 / p2, size)
    if kind == _engine.KIND_DETERMINISTIC:
        return np.full(size, p1)
    return np.minimum(rng.exponential(1.0 / p1, size), p2)


def thin_first_claim_times(
    rng: np.random.Generator,
    lam_floor: float,
    lam0: float,
    d: float,
    window: float,
    size: int,
) -> np.ndarray:
    """First claim time in (0, window] by thinning, inf where none arrives."""
    t_claim = np.full(size, np.inf)
    t_cur = np.zeros(size)
    env = np.full(size, lam0)
    active = env > 0
    while active.any():
        idx = np.flatnonzero(active)
        cand = t_cur[idx] + rng.standard_exponential(idx.size) / env[idx]
        beyond = cand >= window
        active[idx[beyond]] = False
        live = idx[~beyond]
        cand = cand[~beyond]
        lam_c = lam_floor + (lam0 - lam_floor) * np.exp(-d * cand)
        accept = rng.random(live.size) * env[live] <= lam_c
        t_claim[live[accept]] = cand[accept]
        active[live[accept]] = False
        t_cur[live[~accept]] = cand[~accept]
        env[live[~accept]] = lam_c[~accept]
    return t_claim


def one_step_oracle(
    spec: StateSpec,
    grid: GridSpec,
    n: int,
    m: int,
    w: ValueSurface,
    g: Optional[ValueSurface] = None,
    samples: int = 1_000_000,
    seed: int = 0,
) -> OneStepEstimate:
    """Brute-force replay of the wait action at node (n, m).

    Samples the next claim (thinning against the decayed intensity), the
    next intensity jump, and the switch time; whichever lands first inside
    the step decides the branch payoff, evaluated exactly as the grid
    strategy prescribes.  Completely independent of the kernel tables.
    """
    if samples < 10_000:
        raise ValueError("need at least 1e4 samples for a usable oracle")
    if n >= grid.n1:
        raise ValueError("wait action undefined at the top surplus node")
    p, q = spec.premium, spec.discount
    beta, xi, d, floor = spec.beta, spec.switch_rate, spec.decay, spec.lambda_floor
    delta = grid.delta
    lam_m = float(grid.lam_nodes[m])
    x_n = float(grid.x_nodes[n])
    rng = _path_rng(seed, 0)

    t_cat = rng.exponential(1.0 / beta, samples) if beta > 0 else np.full(samples, np.inf)
    t_sw = rng.exponential(1.0 / xi, samples) if xi > 0 else np.full(samples, np.inf)
    t_cl = thin_first_claim_times(rng, floor, lam_m, d, delta, samples)
    claims = _sample_sizes(rng, spec.claim_dist, samples)
    jumps = _sample_sizes(rng, spec.jump_dist, samples) if beta > 0 else None

    def snap_lam(lams: np.ndarray) -> np.ndarray:
        r = (lams - floor) / grid.Delta
        return np.clip(np.ceil(r - 1e-9 * np.maximum(1.0, np.abs(r))), 0, grid.m1).astype(int)

    payoff = np.zeros(samples)

    quiet = (t_cl >= delta) & (t_cat >= delta) & (t_sw >= delta)
    lam_d = floor + (lam_m - floor) * math.exp(-d * delta)
    payoff[quiet] = math.exp(-q * delta) * w.values[n + 1, sigma_up(grid, lam_d)]

    claim_first = (t_cl < delta) & (t_cl < t_cat) & (t_cl < t_sw)
    tc = t_cl[claim_first]
    y = x_n + p * tc
    post = y - claims[claim_first]
    alive = post >= 0
    md = snap_lam(floor + (lam_m - floor) * np.exp(-d * tc[alive]))
    j = np.clip(
        np.floor(post[alive] / grid.x_step + 1e-9 * (1.0 + post[alive] / grid.x_step)),
        0,
        grid.n1,
    ).astype(int)
    crumb = post[alive] - grid.x_nodes[j]
    vals = np.zeros(tc.size)
    vals[alive] = w.values[j, md] + crumb
    payoff[claim_first] = np.exp(-q * tc) * vals

    if beta > 0:
        jump_first = (t_cat < delta) & (t_cat <= t_cl) & (t_cat < t_sw)
        tj = t_cat[jump_first]
        lam_j = floor + (lam_m - floor) * np.exp(-d * tj) + jumps[jump_first]
        payoff[jump_first] = np.exp(-q * tj) * (p * tj + w.values[n, snap_lam(lam_j)])

    if xi > 0:
        if g is None:
            raise ValueError("switching states need the exit surface g")
        sw_first = (t_sw < delta) & (t_sw <= t_cl) & (t_sw <= t_cat)
        ts = t_sw[sw_first]
        lam_s = floor + (lam_m - floor) * np.exp(-d * ts)
        md_g = np.array([sigma_up(g.grid, lv) for lv in lam_s])
        vals = np.empty(ts.size)
        for mg in np.unique(md_g):
            sel = md_g == mg
            vals[sel] = g.value_at(x_n + p * ts[sel], int(mg))
        payoff[sw_first] = np.exp(-q * ts) * vals

    return OneStepEstimate(
        mean=float(payoff.mean()), se=float(payoff.std(ddof=1) / math.sqrt(samples))
    )


# ---------------------------------------------------------------------------
# constant-intensity closed form (exponential claims)
# ---------------------------------------------------------------------------


def _cl_roots(p: float, q: float, lam: float, mu: float) -> Tuple[float, float]:
    # characteristic roots of p s^2 + (p mu - lam - q) s - q mu = 0
    b = p * mu - lam - q
    disc = math.sqrt(b * b + 4.0 * p * q * mu)
    s1 = (-b + disc) / (2.0 * p)
    s2 = (-b - disc) / (2.0 * p)
    return s1, s2


def cl_optimal_barrier(lam: float, p: float, q: float, claim_rate: float) -> float:
    """Optimal dividend barrier of the constant-intensity exponential model."""
    mu = claim_rate
    s1, s2 = _cl_roots(p, q, lam, mu)
    num = s2 * s2 * (mu + s2)
    den = s1 * s1 * (mu + s1)
    if num <= den:
        return 0.0
    return math.log(num / den) / (s1 - s2)


def cl_closed_form(x, lam: float, p: float, q: float, claim_rate) -> np.ndarray:
    """Value of the optimal barrier strategy for exponential claims.

    The surplus drifts at rate p, claims arrive at constant intensity
    ``lam`` with Exp(claim_rate) sizes, payouts are discounted at q.  Below
    the optimal barrier b the value is h(x)/h'(b) with

        h(x) = (mu + s1) e^{s1 x} - (mu + s2) e^{s2 x},

    s1 > 0 > s2 the characteristic roots; above b it continues with slope
    one.  Valid whether or not the premium covers the expected claims.
    Rejects non-exponential claim laws.
    """
    if isinstance(claim_rate, Distribution):
        if not isinstance(claim_rate, Exponential):
            raise ValueError("the closed form only covers exponential claims")
        claim_rate = claim_rate.rate
    mu = float(claim_rate)
    if mu <= 0 or p <= 0 or q <= 0 or lam <= 0:
        raise ValueError("all parameters must be positive")
    s1, s2 = _cl_roots(p, q, lam, mu)
    b = cl_optimal_barrier(lam, p, q, mu)

    def h(v):
        return (mu + s1) * np.exp(s1 * v) - (mu + s2) * np.exp(s2 * v)

    def h_prime(v):
        return s1 * (mu + s1) * np.exp(s1 * v) - s2 * (mu + s2) * np.exp(s2 * v)

    x = np.asarray(x, dtype=float)
    scale = h_prime(b)
    out = np.where(x <= b, h(np.minimum(x, b)) / scale, x - b + h(b) / scale)
    return float(out) if out.ndim == 0 else out
