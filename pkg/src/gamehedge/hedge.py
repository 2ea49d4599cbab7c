"""Trivial hedges, portfolio values under proportional costs, and pathwise
verification of the perfect-hedge property.

Time convention: holdings are left-continuous.  A trade booked at grid index
``u`` changes the holdings seen from index ``u + 1`` on and is charged at the
discounted price at ``u``; ``V(t_u)`` is the pre-trade value.
"""

from __future__ import annotations

import csv
import json
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._threads import parallel_map
from .envelope import EnvelopeData, _first_nonneg, _scale, game_concave_envelope
from .errors import InputError, NumericalError
from .market import MarketPath, PathSet, stack_paths
from .payoff import GameOption, eval_payoff

_CHUNK = 500


@dataclass(frozen=True, eq=False)
class Strategy:
    """Initial capital, holdings at time 0, and later rebalancing trades.

    ``trades`` is a time-ordered list of ``(grid index, holdings after trade)``.
    """

    initial_capital: float
    initial_holdings: np.ndarray
    trades: tuple[tuple[int, np.ndarray], ...] = ()

    def __post_init__(self) -> None:
        h0 = np.atleast_1d(np.asarray(self.initial_holdings, dtype=float))
        object.__setattr__(self, "initial_holdings", h0)
        trades = tuple((int(u), np.atleast_1d(np.asarray(h, dtype=float))) for u, h in self.trades)
        idx = [u for u, _ in trades]
        if idx != sorted(idx) or len(set(idx)) != len(idx):
            raise InputError("trades must be strictly time-ordered")
        if any(h.shape != h0.shape for _, h in trades):
            raise InputError("every holdings vector must match the asset count")
        object.__setattr__(self, "trades", trades)


def portfolio_values(strategy: Strategy, path: MarketPath, kappa: float) -> np.ndarray:
    """Discounted value V(t_k) at every grid index.

    V(t) = X0 + <g(t), S~(t)> - <g(0), s> + (1 - k) sum_{u<t} <S~(u), dg-(u)>
           - (1 + k) sum_{u<t} <S~(u), dg+(u)>.
    """
    if not 0 < kappa < 1:
        raise InputError(f"kappa must lie in (0, 1), got {kappa}")
    if strategy.initial_holdings.shape != (path.dim,):
        raise InputError("strategy and path have different asset counts")
    n = len(path.grid)
    disc = path.discounted
    hold = np.tile(strategy.initial_holdings, (n, 1))
    cash = np.full(n, strategy.initial_capital - float(strategy.initial_holdings @ disc[0]))
    prev = strategy.initial_holdings
    for u, h in strategy.trades:
        if not 0 <= u < n:
            raise InputError(f"trade index {u} outside the grid")
        jump = h - prev
        bought = np.clip(jump, 0.0, None)
        sold = np.clip(-jump, 0.0, None)
        flow = (1.0 - kappa) * float(sold @ disc[u]) - (1.0 + kappa) * float(bought @ disc[u])
        cash[u + 1 :] += flow
        hold[u + 1 :] = h
        prev = h
    return cash + np.einsum("kd,kd->k", hold, disc)


def portfolio_value(strategy: Strategy, path: MarketPath, kappa: float, t: int) -> float:
    if not 0 <= t < len(path.grid):
        raise InputError(f"time index {t} outside the grid")
    return float(portfolio_values(strategy, path, kappa)[t])


@dataclass(frozen=True, eq=False)
class TrivialHedge:
    """Buy-and-hold position plus cancellation at the first entry into D.

    ``immediate`` means the seller cancels at time 0 and holds nothing.
    """

    initial_capital: float
    holdings: np.ndarray
    immediate: bool
    env: EnvelopeData
    s0: np.ndarray

    @property
    def option(self) -> GameOption:
        return self.env.option

    def strategy(self) -> Strategy:
        return Strategy(self.initial_capital, self.holdings)

    def with_capital(self, capital: float) -> TrivialHedge:
        return TrivialHedge(capital, self.holdings, self.immediate, self.env, self.s0)

    def in_cancel_region(self, x) -> np.ndarray | bool:
        x = np.asarray(x, dtype=float)
        return eval_payoff(self.option.payoff, x) + self.option.penalty <= self.env.affine(x) + 1e-12 * _scale(self.env)

    def cancel_time(self, path: MarketPath) -> float:
        """First time the linearly interpolated price path enters D, capped at T."""
        if self.immediate:
            return 0.0
        k, theta = _first_hit(self, path.stock[None], path.grid)
        return float(_hit_times(path.grid, k, theta)[0])


def build_trivial_hedge(option: GameOption, env: EnvelopeData, s) -> TrivialHedge:
    """Cheapest perfect trivial hedge from initial stock vector ``s``."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    if s.shape != (option.dim,):
        raise InputError(f"initial stock must have length {option.dim}")
    if np.any(s <= 0):
        raise InputError("initial stock must be strictly positive in every asset")
    if env.option is not option and env.option != option:
        raise InputError("envelope data was built for a different option")
    r = float(game_concave_envelope(env, s))
    cap = float(eval_payoff(option.payoff, s)) + option.penalty
    if r < cap - 1e-12 * _scale(env):
        return TrivialHedge(r, np.array(env.B, dtype=float), False, env, s)
    return TrivialHedge(r, np.zeros(option.dim), True, env, s)


def _first_hit(hedge: TrivialHedge, stock: np.ndarray, grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per path: segment index and fraction of the first entry into D.

    Along a segment, F(0) + <B, x> - D - F(x) is concave piecewise linear in
    the fraction, so the entry point is found exactly.  Paths that never
    enter get index N (the last grid point) and fraction 0.
    """
    env = hedge.env
    F = env.option.payoff
    diff = env.B[None, :] - F.slopes  # (m, d)
    c0 = env.base - env.option.penalty - F.intercepts  # (m,)
    start = stock[:, :-1, :]
    step = stock[:, 1:, :] - start
    c = c0 + start @ diff.T  # (P, N, m)
    s = step @ diff.T
    theta = _first_nonneg(c, s, 1e-12 * _scale(env) * (1.0 + float(np.abs(stock).max())))
    hit = theta <= 1.0
    n = stock.shape[1] - 1
    any_hit = hit.any(axis=1)
    k = np.where(any_hit, hit.argmax(axis=1), n)
    th = np.where(any_hit, theta[np.arange(len(k)), np.minimum(k, n - 1)], 0.0)
    return k, th


def _hit_times(grid, k, theta):
    n = len(grid) - 1
    kk = np.minimum(k, n - 1)
    return np.where(k >= n, grid[-1], grid[kk] + theta * (grid[kk + 1] - grid[kk]))


@dataclass
class HedgeReport:
    paths_checked: int = 0
    violations: list = field(default_factory=list)  # (path id, time, shortfall)
    max_shortfall: float = 0.0
    sigma_times: np.ndarray = field(default_factory=lambda: np.empty(0))
    maturity: float = 1.0
    tolerance: float = 0.0
    initial_capital: float = math.nan

    @property
    def ok(self) -> bool:
        return not self.violations

    def sigma_distribution(self, bins: int = 10) -> dict:
        """Histogram of cancellation times; paths never cancelled are counted
        separately under ``at_maturity``."""
        t = self.sigma_times
        early = t[t < self.maturity]
        counts, edges = np.histogram(early, bins=bins, range=(0.0, self.maturity))
        return {
            "edges": edges.tolist(),
            "counts": counts.tolist(),
            "at_zero": int(np.sum(t == 0.0)),
            "at_maturity": int(np.sum(t >= self.maturity)),
        }

    def merge(self, other: HedgeReport) -> HedgeReport:
        return HedgeReport(
            self.paths_checked + other.paths_checked,
            self.violations + other.violations,
            max(self.max_shortfall, other.max_shortfall),
            np.concatenate([self.sigma_times, other.sigma_times]),
            self.maturity,
            max(self.tolerance, other.tolerance),
            self.initial_capital if not math.isnan(self.initial_capital) else other.initial_capital,
        )

    def to_dict(self, max_violations: int = 100) -> dict:
        return {
            "paths_checked": self.paths_checked,
            "violation_count": len(self.violations),
            "violations": [
                {"path_id": int(p), "time": float(t), "shortfall": float(s)} for p, t, s in self.violations[:max_violations]
            ],
            "max_shortfall": self.max_shortfall,
            "tolerance": self.tolerance,
            "initial_capital": self.initial_capital,
            "sigma_distribution": self.sigma_distribution(),
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def write_violations_csv(self, out) -> None:
        own = isinstance(out, (str, Path))
        fh = open(out, "w", newline="") if own else out
        try:
            w = csv.writer(fh)
            w.writerow(["path_id", "time", "shortfall"])
            for p, t, s in self.violations:
                w.writerow([int(p), repr(float(t)), repr(float(s))])
        finally:
            if own:
                fh.close()


def _check_chunk(hedge: TrivialHedge, grid, stock, bank, offset: int, tol: float) -> HedgeReport:
    opt = hedge.option
    s = hedge.s0
    gamma = hedge.holdings
    cap0 = hedge.initial_capital
    disc = stock / bank[:, :, None]
    value = cap0 + (disc - s) @ gamma  # buy-and-hold: no Stieltjes terms
    payoff = eval_payoff(opt.payoff, stock)
    y = payoff / bank
    P, n1 = y.shape
    n = n1 - 1
    if hedge.immediate:
        k = np.zeros(P, dtype=int)
        theta = np.zeros(P)
    else:
        k, theta = _first_hit(hedge, stock, grid)
    sigma = _hit_times(grid, k, theta)

    # buyer exercises first: grid times t <= sigma
    before = grid[None, :] <= sigma[:, None]
    short_y = np.where(before, y - value, -np.inf)
    # seller cancels first: X(sigma) is owed whenever a grid time lies after sigma
    kk = np.minimum(k, n - 1)
    rows = np.arange(P)
    s_sig = stock[rows, kk] + theta[:, None] * (stock[rows, kk + 1] - stock[rows, kk])
    b_sig = bank[rows, kk] + theta * (bank[rows, kk + 1] - bank[rows, kk])
    s_sig = np.where((k >= n)[:, None], stock[:, -1], s_sig)
    b_sig = np.where(k >= n, bank[:, -1], b_sig)
    v_sig = cap0 + (s_sig / b_sig[:, None] - s) @ gamma
    x_sig = (eval_payoff(opt.payoff, s_sig) + opt.penalty) / b_sig
    owes_x = sigma < grid[-1]
    short_x = np.where(owes_x, x_sig - v_sig, -np.inf)

    viol = []
    bad_y = short_y > tol
    for p, j in zip(*np.nonzero(bad_y)):
        viol.append((offset + int(p), float(grid[j]), float(short_y[p, j])))
    for p in np.flatnonzero(short_x > tol):
        viol.append((offset + int(p), float(sigma[p]), float(short_x[p])))
    worst = max(float(np.max(short_y)), float(np.max(short_x)), 0.0)
    return HedgeReport(P, viol, worst if viol else 0.0, sigma, float(grid[-1]), tol, cap0)


def verify_perfect_hedge(
    hedge: TrivialHedge,
    option: GameOption,
    paths: Sequence[MarketPath] | PathSet,
    kappa: float,
    tol: float | None = None,
) -> HedgeReport:
    """Check V(t) >= H(sigma, t) on every path.

    For grid times t <= sigma the buyer's claim Y(t) is checked against V(t);
    if the seller cancels before the end, X(sigma) is checked against V(sigma)
    at the exact (interpolated) cancellation time.  The hedge holds a constant
    position, so its value does not depend on ``kappa``; the rate is still
    validated because it enters the definition of V.
    """
    if not 0 < kappa < 1:
        raise InputError(f"kappa must lie in (0, 1), got {kappa}")
    if option is not hedge.option and option != hedge.option:
        raise InputError("hedge was built for a different option")
    ps = stack_paths(paths)
    if ps.stock.shape[2] != option.dim:
        raise InputError("paths and option have different asset counts")
    if not np.allclose(ps.stock[:, 0, :], hedge.s0, rtol=1e-12, atol=0):
        raise InputError("paths do not start at the hedge's initial stock vector")
    if tol is None:
        tol = 1e-9 * (1.0 + abs(float(game_concave_envelope(hedge.env, hedge.s0))))
    starts = range(0, len(ps), _CHUNK)

    def run(a: int) -> HedgeReport:
        b = min(a + _CHUNK, len(ps))
        return _check_chunk(hedge, ps.grid, ps.stock[a:b], ps.bank[a:b], a, tol)

    parts = parallel_map(run, starts)
    report = HedgeReport(maturity=float(ps.grid[-1]), tolerance=tol, initial_capital=hedge.initial_capital)
    for part in parts:
        report = report.merge(part)
    report.violations.sort(key=lambda v: (v[0], v[1]))
    return report


# -- static search for a non-constant penalty ------------------------------------


@dataclass(frozen=True)
class StaticHedgeResult:
    capital: float
    gamma: float
    level: float  # cancellation level; nan for the immediate/maturity rules
    rule: str  # "level", "immediate" or "maturity"
    evaluations: int


def _ex23_payoff(x):
    return 1.0 + max(x - 3.0, 0.0)


def _sup_over_time(q: float, r: float, T: float) -> float:
    """max over t in [0, T] of q * exp(-r t)."""
    return q if q >= 0 else q * math.exp(-r * T)


def _sup_buyer_constraint(gamma: float, lower: float) -> float:
    """sup over prices x > lower of g(x) - gamma * x, g(x) = 1 + (x - 3)^+."""
    if 1.0 - gamma > 0:
        return math.inf
    pts = [lower] + ([3.0] if lower < 3.0 else [])
    return max(_ex23_payoff(x) - gamma * x for x in pts)


def _ex23_capital(gamma: float, level: float, r: float, T: float, s: float) -> float:
    """Cheapest capital for holding ``gamma`` shares and cancelling when the
    price first reaches ``level``: the buyer may exercise at any price above
    the level, and at the level the seller owes twice the claim."""
    q1 = _sup_buyer_constraint(gamma, level)
    if math.isinf(q1):
        return math.inf
    q2 = 2.0 * _ex23_payoff(level) - gamma * level
    return gamma * s + max(_sup_over_time(q1, r, T), _sup_over_time(q2, r, T))


def static_hedge_search(
    r: float,
    T: float,
    s: float = 4.0,
    gamma_max: float = 3.0,
    rounds: int = 12,
    grid: int = 41,
) -> StaticHedgeResult:
    """Cheapest trivial hedge for Y = (1 + (S - 3)^+)/S0, X = 2Y, constant rate.

    Cancellation is either immediate, never (maturity), or at the first
    hitting of a level in [3, s).  The level family is searched on a grid
    that is zoomed around the incumbent; the feasibility edge in gamma is
    then located by bisection.
    """
    if r < 0:
        raise InputError("rate must be nonnegative")
    if T <= 0:
        raise InputError("maturity must be positive")
    evals = 0
    best = StaticHedgeResult(2.0 * _ex23_payoff(s), 0.0, math.nan, "immediate", 0)

    # never cancel: the buyer may exercise at any positive price
    for g in np.linspace(0.0, gamma_max, 4 * grid + 1):
        q = _sup_buyer_constraint(g, 0.0)
        evals += 1
        cap = g * s + _sup_over_time(q, r, T) if math.isfinite(q) else math.inf
        if cap < best.capital:
            best = StaticHedgeResult(cap, float(g), math.nan, "maturity", 0)

    lam_hi = np.nextafter(s, 0.0)
    g_lo, g_hi, l_lo, l_hi = 0.0, gamma_max, 3.0, lam_hi
    inc = None
    for _ in range(rounds):
        gs = np.linspace(g_lo, g_hi, grid)
        ls = np.linspace(l_lo, l_hi, grid)
        for g in gs:
            for lam in ls:
                evals += 1
                cap = _ex23_capital(float(g), float(lam), r, T, s)
                if inc is None or cap < inc[0]:
                    inc = (cap, float(g), float(lam))
        if inc is None or not math.isfinite(inc[0]):
            raise NumericalError("no feasible level-cancellation hedge on the search grid")
        dg = (g_hi - g_lo) / 4.0
        dl = (l_hi - l_lo) / 4.0
        g_lo, g_hi = max(0.0, inc[1] - dg), min(gamma_max, inc[1] + dg)
        l_lo, l_hi = max(3.0, inc[2] - dl), min(lam_hi, inc[2] + dl)

    cap, g, lam = inc
    # slide gamma down to the feasibility edge if that is cheaper
    lo, hi = 0.0, g
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        evals += 1
        if math.isfinite(_ex23_capital(mid, lam, r, T, s)):
            hi = mid
        else:
            lo = mid
    edge = _ex23_capital(hi, lam, r, T, s)
    if edge < cap:
        cap, g = edge, hi
    if cap < best.capital:
        best = StaticHedgeResult(cap, g, lam, "level", 0)
    return StaticHedgeResult(best.capital, best.gamma, best.level, best.rule, evals)
