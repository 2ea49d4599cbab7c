from __future__ import annotations

import io
import math

import numpy as np
import pytest

from gamehedge.errors import InputError, NumericalError
from gamehedge.market import (
    MarketModel,
    counterexample_2_4_paths,
    discount,
    fbm_cholesky,
    read_paths_csv,
    simulate,
    stack_paths,
    write_paths_csv,
)


def test_zero_volatility_is_constant():
    m = MarketModel(drift=(0.0,), vol=((0.0,),), rate=0.0)
    ps = simulate(m, [42.0], 10, 1.0, 0, 3)
    assert np.all(ps.stock == 42.0)
    assert np.all(ps.bank == 1.0)


def test_same_seed_is_bitwise_identical():
    m = MarketModel(drift=(0.05,), vol=((0.3,),), rate=0.02)
    a = simulate(m, [100.0], 50, 1.0, 9, 20)
    b = simulate(m, [100.0], 50, 1.0, 9, 20)
    assert np.array_equal(a.stock, b.stock) and np.array_equal(a.bank, b.bank)
    c = simulate(m, [100.0], 50, 1.0, 10, 20)
    assert not np.array_equal(a.stock, c.stock)


def test_path_streams_do_not_depend_on_count():
    m = MarketModel(drift=(0.0,), vol=((0.3,),))
    a = simulate(m, [100.0], 20, 1.0, 4, 5)
    b = simulate(m, [100.0], 20, 1.0, 4, 12)
    assert np.array_equal(a.stock, b.stock[:5])


def test_gbm_discounted_martingale():
    m = MarketModel(drift=(0.0,), vol=((0.3,),), rate=0.0)
    ps = simulate(m, [100.0], 4, 1.0, 1, 100_000)
    end = ps.discounted[:, -1, 0]
    se = end.std() / math.sqrt(len(end))
    assert abs(end.mean() - 100.0) < 4 * se


def test_fbm_half_is_brownian():
    m = MarketModel(kind="fbm", drift=(0.0,), vol=((1.0,),), hurst=0.5)
    ps = simulate(m, [1.0], 4, 1.0, 2, 10_000)
    b = np.log(ps.stock[:, :, 0])
    grid = ps.grid
    for i in range(1, 5):
        for j in range(i, 5):
            prod = b[:, i] * b[:, j]
            se = prod.std() / math.sqrt(len(prod))
            assert abs(prod.mean() - min(grid[i], grid[j])) < 3.5 * se


def test_fbm_cholesky_rejects_bad_hurst():
    with pytest.raises(NumericalError):
        fbm_cholesky(np.linspace(0.0, 1.0, 5), 1.5)


def test_model_validation():
    with pytest.raises(InputError):
        MarketModel(drift=(0.0, 0.0), vol=((1.0, 1.0), (1.0, 1.0)))
    with pytest.raises(InputError):
        MarketModel(kind="fbm", hurst=0.0)
    with pytest.raises(InputError):
        MarketModel(rate=0.5, rate_bound=0.1)
    with pytest.raises(InputError):
        MarketModel(kind="heston")


def test_from_dict_sigma_shorthand():
    m = MarketModel.from_dict({"sigma": [0.2, 0.3], "rate": 0.01})
    assert m.dim == 2 and m.vol == ((0.2, 0.0), (0.0, 0.3))


def test_constant_rate_discounting():
    m = MarketModel(drift=(0.0,), vol=((0.2,),), rate=0.05)
    ps = simulate(m, [100.0], 10, 2.0, 0, 3)
    p = ps[0]
    assert np.allclose(p.discounted[-1], p.stock[-1] * math.exp(-0.05 * 2.0))


def test_zero_rate_discount_is_identity():
    p = discount([0.0, 0.5, 1.0], [1.0, 2.0, 3.0], [1.0, 1.0, 1.0])
    assert np.array_equal(p.discounted[:, 0], [1.0, 2.0, 3.0])
    again = discount(p.grid, p.stock, p.bank, p.rate)
    assert np.array_equal(again.discounted, p.discounted)


def test_bounded_stochastic_rate():
    m = MarketModel(drift=(0.0,), vol=((0.2,),), rate=0.05, rate_kind="ou", rate_bound=0.08, rate_vol=0.2)
    ps = simulate(m, [100.0], 50, 1.0, 3, 200)
    assert np.all(ps.rate <= 0.08) and np.all(ps.rate >= 0.0)
    assert np.all(np.diff(ps.bank, axis=1) >= 0)
    assert np.all(ps.discounted[:, :, 0] >= ps.stock[:, :, 0] * np.exp(-0.08 * ps.grid)[None, :] - 1e-12)


def test_discount_validation():
    with pytest.raises(InputError):
        discount([0.0, 1.0], [1.0, 1.0], [1.0, 0.0])
    with pytest.raises(InputError):
        discount([0.0, 1.0], [1.0, 1.0], [2.0, 2.0])
    with pytest.raises(InputError):
        discount([0.0, 0.0], [1.0, 1.0], [1.0, 1.0])
    with pytest.raises(InputError):
        discount([0.0, 1.0], [1.0, -1.0], [1.0, 1.0])


def test_csv_round_trip():
    m = MarketModel(drift=(0.0, 0.0), vol=((0.2, 0.0), (0.1, 0.3)), rate=0.02)
    ps = simulate(m, [1.0, 2.0], 6, 1.0, 5, 3)
    buf = io.StringIO()
    write_paths_csv(ps, buf)
    buf.seek(0)
    back = stack_paths(read_paths_csv(buf))
    assert np.array_equal(back.stock, ps.stock)
    assert np.array_equal(back.bank, ps.bank)
    assert np.allclose(back.rate, ps.rate)


def test_csv_errors():
    with pytest.raises(InputError):
        read_paths_csv(io.StringIO("t,S0\n0,1\n"))
    with pytest.raises(InputError):
        read_paths_csv(io.StringIO("t,S_1,S0\n0,x,1\n"))


def test_stack_rejects_grid_mismatch():
    a = discount([0.0, 1.0], [1.0, 1.0], [1.0, 1.0])
    b = discount([0.0, 2.0], [1.0, 1.0], [1.0, 1.0])
    with pytest.raises(InputError):
        stack_paths([a, b])


def test_counterexample_paths():
    ps = counterexample_2_4_paths(200, 1.0, 11, 200)
    assert ps.flags["unbounded_rate"] and math.isinf(ps.rate_bound)
    s, b = ps.stock[:, :, 0], ps.bank
    assert np.all(b >= 1.0 / s * (1 - 1e-12))
    y = np.maximum(0.5 - s, 0.0) / b
    assert y.max() <= 0.25 + 1e-12


def test_counterexample_zero_noise():
    ps = counterexample_2_4_paths(10, 1.0, 0, 2, zero_noise=True)
    assert np.all(ps.stock == 1.0) and np.all(ps.bank == 1.0)
    assert np.all(np.maximum(0.5 - ps.stock, 0.0) == 0.0)
