from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gamehedge.envelope import (
    check_G_membership,
    check_relations_2plus20,
    envelope_value_iteration_1d,
    game_concave_envelope,
    is_cancel_region,
    minimal_envelope_oracle_1d,
    ray_threshold,
    sampling_plan,
    subgradient_at_touch,
    tangent_coefficients,
)
from gamehedge.errors import InputError
from gamehedge.payoff import GameOption, MaxAffinePayoff, canonical_option, eval_payoff


def env_of(name, K, delta):
    return tangent_coefficients(canonical_option(name, K, delta))


def test_call_coefficients():
    e = env_of("call", 100.0, 40.0)
    assert e.A[0] == 100.0 and e.B[0] == pytest.approx(0.4)
    e = env_of("call", 100.0, 150.0)
    assert math.isinf(e.A[0]) and e.B[0] == 1.0


def test_put_coefficients():
    e = env_of("put", 100.0, 40.0)
    assert e.A[0] == 100.0 and e.B[0] == pytest.approx(-0.6)
    e = env_of("put", 100.0, 150.0)
    assert math.isinf(e.A[0]) and e.B[0] == 0.0


def test_spread_coefficients():
    e = env_of("spread", 2.0, 1.0)
    assert math.isinf(e.A[0]) and e.A[1] == 2.0
    assert np.allclose(e.B, [1.0, -0.5])
    e = env_of("spread", 2.0, 3.0)
    assert np.all(np.isinf(e.A)) and np.allclose(e.B, [1.0, 0.0])


def test_coefficient_lies_in_subgradient():
    for name, K, delta in [("call", 100, 40), ("put", 100, 40), ("spread", 2, 1), ("call", 7, 3)]:
        e = env_of(name, K, delta)
        for i in np.flatnonzero(np.isfinite(e.A)):
            lo, hi = subgradient_at_touch(e, i)
            assert lo - 1e-12 <= e.B[i] <= hi + 1e-12


def test_ray_threshold_examples():
    assert ray_threshold(env_of("call", 100.0, 40.0), [1.0]) == pytest.approx(100.0)
    assert ray_threshold(env_of("put", 100.0, 40.0), [1.0]) == pytest.approx(100.0)
    e = env_of("call", 100.0, 150.0)
    assert math.isinf(ray_threshold(e, [1.0]))
    ts = np.linspace(0.0, 1e6, 10001)
    assert np.all(e.base + e.B[0] * ts < eval_payoff(e.option.payoff, ts[:, None]) + 150.0)


def test_ray_threshold_rejects_origin():
    with pytest.raises(InputError):
        ray_threshold(env_of("call", 100.0, 40.0), [0.0])


def test_envelope_values():
    e = env_of("call", 100.0, 40.0)
    assert game_concave_envelope(e, [50.0]) == pytest.approx(20.0)
    assert game_concave_envelope(e, [130.0]) == pytest.approx(70.0)
    assert game_concave_envelope(e, [0.0]) == 0.0
    e = env_of("put", 100.0, 150.0)
    assert np.allclose(game_concave_envelope(e, np.linspace(0, 500, 11)[:, None]), 100.0)
    e = env_of("spread", 2.0, 1.0)
    assert game_concave_envelope(e, [3.0, 1.0]) == pytest.approx(4.5)
    assert game_concave_envelope(e, [0.0, 4.0]) == pytest.approx(1.0)
    assert game_concave_envelope(env_of("spread", 2.0, 3.0), [1.0, 1.0]) == pytest.approx(3.0)


def test_cancel_region_of_call_is_the_strike():
    e = env_of("call", 100.0, 40.0)
    assert is_cancel_region(e, [100.0])
    assert not is_cancel_region(e, [99.0]) and not is_cancel_region(e, [150.0])


def test_membership_of_envelope():
    opt = canonical_option("call", 100.0, 40.0)
    e = tangent_coefficients(opt)
    plan = sampling_plan(1, 300.0, 1000, 1000, seed=3)
    rep = check_G_membership(lambda x: game_concave_envelope(e, x), opt, plan)
    assert rep.is_member and rep.segments_tested > 0


def test_membership_of_payoff_fails_concavity():
    opt = canonical_option("call", 100.0, 40.0)
    plan = sampling_plan(1, 300.0, 200, 500, seed=1)
    rep = check_G_membership(lambda x: eval_payoff(opt.payoff, x), opt, plan)
    assert not rep.bound_violations
    assert rep.concavity_violations and not rep.is_member


def test_membership_of_cap():
    opt = canonical_option("call", 100.0, 40.0)
    plan = sampling_plan(1, 300.0, 200, 200, seed=2)
    rep = check_G_membership(lambda x: eval_payoff(opt.payoff, x) + 40.0, opt, plan)
    assert rep.is_member and rep.segments_tested == 0


def test_membership_flags_bound_violation():
    opt = canonical_option("put", 100.0, 40.0)
    plan = sampling_plan(1, 300.0, 50, 10, seed=2)
    rep = check_G_membership(lambda x: eval_payoff(opt.payoff, x) + 41.0, opt, plan)
    assert rep.bound_violations and not rep.is_member


def test_membership_two_assets():
    opt = canonical_option("spread", 2.0, 1.0)
    e = tangent_coefficients(opt)
    plan = sampling_plan(2, 6.0, 300, 300, seed=4)
    assert check_G_membership(lambda x: game_concave_envelope(e, x), opt, plan).is_member


@pytest.mark.parametrize("name,K,delta", [("call", 100, 40), ("put", 100, 150), ("call", 50, 10), ("put", 50, 10)])
def test_oracle_matches_envelope(name, K, delta):
    opt = canonical_option(name, K, delta)
    grid = np.linspace(0.0, 3.0 * K, 1200)
    h = grid[1] - grid[0]
    res = minimal_envelope_oracle_1d(opt, grid)
    r = game_concave_envelope(tangent_coefficients(opt), grid[:, None])
    assert np.max(np.abs(res.values - r)) <= 5 * h * opt.payoff.lipschitz
    assert res.residual <= 1e-10


def test_oracle_agrees_with_value_iteration():
    opt = canonical_option("call", 10.0, 4.0)
    grid = np.linspace(0.0, 30.0, 41)
    fast = minimal_envelope_oracle_1d(opt, grid).values
    slow = envelope_value_iteration_1d(opt, grid)
    assert np.max(np.abs(fast - slow)) < 1e-8


def test_oracle_large_penalty_gives_concave_envelope():
    opt = canonical_option("call", 100.0, 1e6)
    grid = np.linspace(0.0, 300.0, 601)
    res = minimal_envelope_oracle_1d(opt, grid)
    assert np.max(np.abs(res.values - grid)) <= 5 * (grid[1] - grid[0])


def test_oracle_rejects_two_assets():
    with pytest.raises(InputError):
        minimal_envelope_oracle_1d(canonical_option("spread", 2.0, 1.0), np.linspace(0, 1, 5))


def test_relations_examples():
    e = env_of("call", 100.0, 40.0)
    assert check_relations_2plus20(e, [150.0]) == (True, True)
    assert check_relations_2plus20(e, [100.0]) == (True, True)
    assert check_relations_2plus20(e, [20.0]) == (True, True)


canonical = st.sampled_from([("call", 100, 40), ("call", 100, 150), ("put", 100, 40), ("put", 100, 150), ("spread", 2, 1), ("spread", 2, 3)])


@settings(max_examples=300, deadline=None)
@given(canonical, st.lists(st.floats(0.0, 400.0, allow_nan=False), min_size=2, max_size=2))
def test_envelope_bounds(case, raw):
    name, K, delta = case
    e = env_of(name, K, delta)
    x = np.array(raw[: e.dim])
    f = eval_payoff(e.option.payoff, x)
    r = game_concave_envelope(e, x)
    assert f - 1e-9 <= r <= f + delta + 1e-9


@settings(max_examples=200, deadline=None)
@given(st.floats(1.0, 200.0), st.floats(0.1, 300.0), st.floats(0.1, 300.0), st.floats(0.0, 600.0), st.sampled_from(["call", "put"]))
def test_envelope_monotone_in_penalty(K, d1, d2, x, name):
    lo, hi = sorted((d1, d2))
    r_lo = game_concave_envelope(env_of(name, K, lo), [x])
    r_hi = game_concave_envelope(env_of(name, K, hi), [x])
    assert r_lo <= r_hi + 1e-9 * (1 + r_hi)


def test_general_payoff_envelope_is_member():
    F = MaxAffinePayoff.from_pieces([([0.0], 1.0), ([0.5], -2.0), ([2.0], -20.0)])
    opt = GameOption(F, 3.0)
    e = tangent_coefficients(opt)
    plan = sampling_plan(1, 40.0, 500, 500, seed=5)
    assert check_G_membership(lambda x: game_concave_envelope(e, x), opt, plan).is_member
    grid = np.linspace(0.0, 40.0, 801)
    res = minimal_envelope_oracle_1d(opt, grid)
    r = game_concave_envelope(e, grid[:, None])
    assert np.max(np.abs(res.values - r)) <= 5 * (grid[1] - grid[0]) * F.lipschitz
