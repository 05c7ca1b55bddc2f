from __future__ import annotations

import logging

import pytest

from divopt import Deterministic, Erlang, Exponential, StateSpec, TippingProblem, TruncatedExponential

logging.getLogger("divopt").setLevel(logging.ERROR)


def ex1_pre(**overrides) -> StateSpec:
    kw = dict(
        lambda_floor=0.25,
        beta=1 / 3,
        decay=0.7,
        claim_dist=Exponential(10.0),
        jump_dist=Exponential(0.5),
        discount=0.2,
        loading=0.2,
        premium_override=101 / 700,
        switch_rate=1 / 3,
    )
    kw.update(overrides)
    return StateSpec(**kw)


def ex1_post(**overrides) -> StateSpec:
    kw = dict(
        lambda_floor=0.25,
        beta=0.5,
        decay=0.7,
        claim_dist=Exponential(10.0),
        jump_dist=Exponential(0.5),
        discount=0.2,
        loading=0.2,
        premium_override=141 / 700,
    )
    kw.update(overrides)
    return StateSpec(**kw)


@pytest.fixture(scope="session")
def all_claim_dists():
    return [
        Exponential(10.0),
        Erlang(2, 1.0),
        Deterministic(0.1),
        TruncatedExponential(10.0, 0.1),
    ]
