from __future__ import annotations

import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gamehedge.cps import (
    AtomicIncrementDistribution,
    band_check,
    default_delta,
    esscher_theta,
    likelihood_weights,
    min_sibling_gap,
    project_path_to_tree,
    write_weights_csv,
)
from gamehedge.errors import InputError
from gamehedge.market import MarketModel, discount, simulate
from gamehedge.stopping import RIDGE, build_increment_basis, build_tree


def test_symmetric_atoms_need_no_tilt():
    r = esscher_theta(AtomicIncrementDistribution([[1.0], [-1.0]], [0.5, 0.5]))
    assert r.theta[0] == pytest.approx(0.0, abs=1e-14)
    assert np.allclose(r.new_probs, [0.5, 0.5])


def test_hand_derived_tilt():
    r = esscher_theta(AtomicIncrementDistribution([[1.0], [-1.0]], [0.9, 0.1]))
    assert abs(r.theta[0] + math.log(3.0)) <= 1e-10
    assert np.allclose(r.new_probs, [0.5, 0.5], atol=1e-12)


def test_basis_atoms_need_no_tilt():
    b = build_increment_basis(2)
    r = esscher_theta(AtomicIncrementDistribution(b.atoms, b.prob))
    assert np.allclose(r.theta, 0.0, atol=1e-12)


def test_interior_check():
    assert AtomicIncrementDistribution([[1.0], [2.0]], [0.5, 0.5]).interior_margin() == 0.0
    on_edge = AtomicIncrementDistribution([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], [0.2, 0.4, 0.4])
    assert not on_edge.has_interior_zero()
    flat = AtomicIncrementDistribution([[1.0, 0.0], [-1.0, 0.0]], [0.5, 0.5])
    assert not flat.has_interior_zero()
    with pytest.raises(InputError, match="no interior point"):
        esscher_theta(flat)


def test_distribution_validation():
    with pytest.raises(InputError):
        AtomicIncrementDistribution([[1.0], [-1.0]], [0.6, 0.6])
    with pytest.raises(InputError):
        AtomicIncrementDistribution([[1.0], [-1.0]], [1.0, 0.0])
    with pytest.raises(InputError):
        AtomicIncrementDistribution([[1.0], [-1.0]], [1.0])


def random_distribution(rng, d, k):
    while True:
        x = rng.normal(size=(k, d)) * rng.uniform(0.1, 3.0)
        p = rng.dirichlet(np.ones(k))
        dist = AtomicIncrementDistribution(x, p)
        if dist.has_interior_zero():
            return dist


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.integers(0, 3))
def test_tilted_mean_is_zero(seed, d, extra):
    rng = np.random.default_rng(seed)
    dist = random_distribution(rng, d, d + 1 + extra)
    r = esscher_theta(dist)
    assert np.linalg.norm(r.new_probs @ dist.atoms) <= 1e-10
    assert np.all(r.new_probs > 0) and abs(r.new_probs.sum() - 1.0) <= 1e-12
    assert r.residual <= 1e-10


@pytest.mark.parametrize("lam", [0.5, 2.0])
def test_scale_equivariance(lam):
    rng = np.random.default_rng(7)
    dist = random_distribution(rng, 2, 5)
    base = esscher_theta(dist).theta
    scaled = esscher_theta(AtomicIncrementDistribution(lam * dist.atoms, dist.probs)).theta
    assert np.allclose(scaled, base / lam, rtol=1e-8, atol=1e-10)


def lattice(N=3, a=0.015, s=100.0):
    return build_tree(build_increment_basis(1), [s], N, a / math.sqrt(1.0 / N) - RIDGE)


def path_along(values, m):
    """Piecewise-linear path through ``values`` with ``m`` grid steps per leg."""
    pts = [values[0]]
    for x, y in zip(values[:-1], values[1:]):
        pts.extend(x + (y - x) * np.arange(1, m + 1) / m)
    grid = np.linspace(0.0, 1.0, len(pts))
    return discount(grid, np.array(pts), np.ones(len(pts)))


def test_projection_follows_exact_path():
    t = lattice()
    nodes = [t.level(0)[0, 0], t.level(1)[1, 0], t.level(2)[1, 0], t.level(3)[2, 0]]
    seq, freeze, idx = project_path_to_tree(path_along(nodes, 4), t)
    assert freeze == 4
    assert np.allclose(seq[:, 0], nodes)
    assert idx.tolist() == [0, 1, 1, 2]


def test_projection_freezes_on_jump():
    t = lattice()
    nodes = [t.level(0)[0, 0], t.level(1)[1, 0], 120.0, 125.0]
    seq, freeze, idx = project_path_to_tree(path_along(nodes, 4), t)
    assert freeze == 2
    assert np.all(seq[2:] == seq[1])
    assert idx[2:].tolist() == [-1, -1]


def test_zero_volatility_projection():
    t = build_tree(build_increment_basis(1), [100.0], 3, 0.0, ridge=0.0)
    seq, freeze, _ = project_path_to_tree(path_along([100.0] * 4, 2), t)
    assert freeze == 4 and np.allclose(seq, 100.0, rtol=1e-14)


def test_projection_input_checks():
    t = lattice()
    p = path_along([100.0, 101.0, 102.0, 103.0], 2)
    with pytest.raises(InputError):
        project_path_to_tree(p, t, delta=min_sibling_gap(t))
    bad = discount(np.linspace(0, 1, 8), np.full(8, 100.0), np.ones(8))
    with pytest.raises(InputError):
        project_path_to_tree(bad, t)
    with pytest.raises(InputError):
        project_path_to_tree(path_along([99.0, 100.0, 101.0, 102.0], 2), t)


def test_default_delta():
    t = lattice()
    gap = min_sibling_gap(t)
    assert default_delta(t) == pytest.approx(gap / 8.0)


def test_band_check_trivial_cases():
    m = MarketModel(drift=(0.0,), vol=((0.2,),), rate=0.02)
    ps = list(simulate(m, [100.0], 12, 1.0, 0, 20))
    rep = band_check(ps, [p.discounted for p in ps], 1e-9)
    assert rep.ok and rep.unfrozen == 20
    rep = band_check(ps, [p.discounted for p in ps], 0.0)
    assert not rep.ok


def band_setup(seed=7, count=1000):
    N, m, a = 3, 2, 0.015
    t = lattice(N, a)
    model = MarketModel(drift=(0.0,), vol=((a / math.sqrt(1.0 / N),),), rate=0.0)
    ps = list(simulate(model, [100.0], N * m, 1.0, seed, count))
    return t, ps, [project_path_to_tree(p, t) for p in ps]


def test_band_pipeline():
    t, ps, proj = band_setup()
    rep = band_check(ps, [(q[0], q[1]) for q in proj], 0.05)
    assert rep.ok and rep.unfrozen > 0
    for seq, f, idx in proj:
        assert np.all(seq[min(f, len(seq) - 1) :] == seq[min(f, len(seq) - 1)])
        for k in range(min(f, len(seq)) - 1):
            assert idx[k + 1] in (idx[k], idx[k] + 1)


def test_likelihood_weights():
    t, ps, proj = band_setup(count=400)
    w = likelihood_weights(t, proj)
    assert w.shape == (400, 4)
    frozen = np.array([q[1] for q in proj])
    for p, f in enumerate(frozen):
        if f <= 3:
            assert np.all(w[p, f:] == 0.0)
        else:
            assert np.all((w[p] > 0) | np.isnan(w[p]))
    assert np.all(w[:, 0] == 1.0)
    buf = io.StringIO()
    write_weights_csv(w[:2], buf)
    assert buf.getvalue().splitlines()[0] == "path_id,step,weight"


def test_band_report_json():
    t, ps, proj = band_setup(count=50)
    rep = band_check(ps, [(q[0], q[1]) for q in proj], 0.0)
    data = json.loads(rep.to_json())
    assert data["ok"] is rep.ok and data["violation_count"] == len(rep.violations)
