"""Jitted single-path simulator for the controlled surplus process.

One call runs one path under grid policies: true continuous-time dynamics
(decaying intensity, catastrophe jumps, claims by thinning, regime switches)
with dividend decisions at the discrete epochs the grid strategy defines --
after each elapsed step and immediately after every event.  Scalar numba
code; all distribution sampling is by inverse/compositional forms against a
caller-provided numpy Generator, so streams stay reproducible per path.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# distribution kind codes shared with model.Distribution.engine_code()
KIND_EXPONENTIAL = 0
KIND_ERLANG = 1
KIND_DETERMINISTIC = 2
KIND_TRUNCATED_EXP = 3

ACT_WAIT = 0
ACT_PAY = 1
ACT_LIQUIDATE = 2

_INF = np.inf
_IDX_EPS = 1e-9


@njit(cache=True, nogil=True)
def _sample_size(rng, kind, p1, p2):
    if kind == KIND_EXPONENTIAL:
        return rng.standard_exponential() / p1
    if kind == KIND_ERLANG:
        k = int(p1)
        s = 0.0
        for _ in range(k):
            s += rng.standard_exponential()
        return s / p2
    if kind == KIND_DETERMINISTIC:
        return p1
    e = rng.standard_exponential() / p1
    return e if e < p2 else p2


@njit(cache=True, nogil=True)
def _floor_idx(value, step, top):
    r = value / step
    j = int(np.floor(r + _IDX_EPS * (1.0 + r)))
    if j < 0:
        j = 0
    if j > top:
        j = top
    return j


@njit(cache=True, nogil=True)
def _ceil_idx(value, floor_val, step, top):
    r = (value - floor_val) / step
    j = int(np.ceil(r - _IDX_EPS * (1.0 + abs(r))))
    if j < 0:
        j = 0
    if j > top:
        j = top
    return j


@njit(cache=True, nogil=True)
def run_path(
    rng,
    s0,
    x0,
    lam0,
    horizon,
    # per-state parameter arrays, indexed by switches-left
    p_arr,
    q_arr,
    delta_arr,
    xstep_arr,
    n1_arr,
    lamfloor_arr,
    lamstep_arr,
    m1_arr,
    beta_arr,
    decay_arr,
    xi_arr,
    ckind, c1, c2,
    jkind, j1, j2,
    policies,      # int8 (n_states, max_n1+1, max_m1+1)
    rec_t, rec_d,  # payment recording buffers (len 0 disables)
):
    """Simulate one path; returns (payoff, ruined, tip_time, truncated)."""
    s = s0
    lam = lam0 if lam0 > lamfloor_arr[s] else lamfloor_arr[s]
    disc = 1.0
    payoff = 0.0
    t = 0.0
    tip_time = -1.0
    nrec = 0
    cap = rec_t.shape[0]

    # enter the grid: snap the initial surplus down, paying the remainder
    n = _floor_idx(x0, xstep_arr[s], n1_arr[s])
    crumb = x0 - n * xstep_arr[s]
    if crumb > 0.0:
        payoff += crumb
        if nrec < cap:
            rec_t[nrec] = t
            rec_d[nrec] = crumb
            nrec += 1

    truncated = False
    while True:
        if t >= horizon:
            truncated = True
            break
        m = _ceil_idx(lam, lamfloor_arr[s], lamstep_arr[s], m1_arr[s])
        act = policies[s, n, m]
        if act == ACT_LIQUIDATE:
            pay = n * xstep_arr[s]
            payoff += disc * pay
            if pay > 0.0 and nrec < cap:
                rec_t[nrec] = t
                rec_d[nrec] = pay
                nrec += 1
            break
        if act == ACT_PAY:
            if n == 0:
                break  # unreachable under a valid policy
            payoff += disc * xstep_arr[s]
            if nrec < cap:
                rec_t[nrec] = t
                rec_d[nrec] = xstep_arr[s]
                nrec += 1
            n -= 1
            continue
        # --- wait: race the step end against claim / jump / switch ---------
        if n >= n1_arr[s]:
            break  # unreachable under a valid policy
        p = p_arr[s]
        d = decay_arr[s]
        floor_s = lamfloor_arr[s]
        step = delta_arr[s]
        tau_cat = _INF if beta_arr[s] == 0.0 else rng.standard_exponential() / beta_arr[s]
        tau_sw = _INF if xi_arr[s] == 0.0 else rng.standard_exponential() / xi_arr[s]
        win = step
        if tau_cat < win:
            win = tau_cat
        if tau_sw < win:
            win = tau_sw
        # thinning: the intensity only decays inside the wait, so the value
        # at the last candidate is a valid envelope for the next one
        tau_claim = _INF
        tcur = 0.0
        env = lam
        while env > 0.0:
            tc = tcur + rng.standard_exponential() / env
            if tc >= win:
                break
            lam_tc = floor_s + (lam - floor_s) * np.exp(-d * tc)
            if rng.random() * env <= lam_tc:
                tau_claim = tc
                break
            tcur = tc
            env = lam_tc

        u = win if tau_claim >= win else tau_claim
        t += u
        disc *= np.exp(-q_arr[s] * u)
        lam = floor_s + (lam - floor_s) * np.exp(-d * u)

        if tau_claim < win:
            # claim: snap the post-claim surplus down, crumb out, or ruin
            y = n * xstep_arr[s] + p * u
            size = _sample_size(rng, ckind[s], c1[s], c2[s])
            ynew = y - size
            if ynew < -1e-12 * (1.0 + y):
                return payoff, True, tip_time, False
            if ynew < 0.0:
                ynew = 0.0
            j = _floor_idx(ynew, xstep_arr[s], n1_arr[s])
            crumb = ynew - j * xstep_arr[s]
            if crumb > 0.0:
                payoff += disc * crumb
                if nrec < cap:
                    rec_t[nrec] = t
                    rec_d[nrec] = crumb
                    nrec += 1
            n = j
        elif win == step and step <= tau_cat and step <= tau_sw:
            # quiet step: premium drift moved the surplus one cell up
            n += 1
        elif tau_cat <= tau_sw:
            # catastrophe: intensity jumps; the accrued premium is paid out
            pay = p * u
            payoff += disc * pay
            if pay > 0.0 and nrec < cap:
                rec_t[nrec] = t
                rec_d[nrec] = pay
                nrec += 1
            lam += _sample_size(rng, jkind[s], j1[s], j2[s])
        else:
            # regime switch: re-enter the next state's grid from below
            y = n * xstep_arr[s] + p * u
            s -= 1
            if s == 0:
                tip_time = t
            if lam < lamfloor_arr[s]:
                lam = lamfloor_arr[s]
            j = _floor_idx(y, xstep_arr[s], n1_arr[s])
            crumb = y - j * xstep_arr[s]
            if crumb > 0.0:
                payoff += disc * crumb
                if nrec < cap:
                    rec_t[nrec] = t
                    rec_d[nrec] = crumb
                    nrec += 1
            n = j

    return payoff, False, tip_time, truncated
