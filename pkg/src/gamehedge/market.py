"""Discretized market scenarios with a savings account and discounted prices.

Model kinds are limited to families known to have conditional full support:
geometric Brownian motion (a Markov diffusion) and exponentials of fractional
Brownian motion.  Any other scenario set can be brought in through CSV.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import InputError, NumericalError

RateKind = Literal["constant", "ou"]


@dataclass(frozen=True, eq=False)
class MarketPath:
    grid: np.ndarray  # (N+1,)
    stock: np.ndarray  # (N+1, d)
    bank: np.ndarray  # (N+1,)
    rate: np.ndarray  # (N,)
    discounted: np.ndarray  # (N+1, d)
    rate_bound: float = math.inf

    @property
    def steps(self) -> int:
        return len(self.grid) - 1

    @property
    def dim(self) -> int:
        return self.stock.shape[1]

    @property
    def maturity(self) -> float:
        return float(self.grid[-1])


def discount(grid, stock, bank, rate=None, rate_bound: float = math.inf) -> MarketPath:
    """Attach S~ = S / S0 to a path; calling it on a finished path is harmless."""
    grid = np.asarray(grid, dtype=float)
    stock = np.asarray(stock, dtype=float)
    if stock.ndim == 1:
        stock = stock[:, None]
    bank = np.asarray(bank, dtype=float)
    if len(grid) < 2 or np.any(np.diff(grid) <= 0) or abs(grid[0]) > 0:
        raise InputError("grid must start at 0 and be strictly increasing")
    if stock.shape[0] != len(grid) or bank.shape != grid.shape:
        raise InputError("stock/bank lengths do not match the grid")
    if np.any(bank <= 0):
        raise InputError("bank account must stay positive")
    if abs(bank[0] - 1.0) > 1e-12:
        raise InputError(f"bank must start at 1, got {bank[0]}")
    if np.any(stock <= 0):
        raise InputError("stock prices must be strictly positive")
    if rate is None:
        rate = np.log(bank[1:] / bank[:-1]) / np.diff(grid)
    rate = np.asarray(rate, dtype=float)
    return MarketPath(grid, stock, bank, rate, stock / bank[:, None], rate_bound)


@dataclass(frozen=True, eq=False)
class PathSet(Sequence):
    """A batch of paths on a shared grid, stored as stacked arrays."""

    grid: np.ndarray
    stock: np.ndarray  # (count, N+1, d)
    bank: np.ndarray  # (count, N+1)
    rate: np.ndarray  # (count, N)
    rate_bound: float = math.inf
    flags: dict = field(default_factory=dict)

    @property
    def discounted(self) -> np.ndarray:
        return self.stock / self.bank[:, :, None]

    def __len__(self) -> int:
        return self.stock.shape[0]

    def __getitem__(self, i):  # type: ignore[override]
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        st, bk = self.stock[i], self.bank[i]
        return MarketPath(self.grid, st, bk, self.rate[i], st / bk[:, None], self.rate_bound)

    def __iter__(self) -> Iterator[MarketPath]:
        for i in range(len(self)):
            yield self[i]


@dataclass(frozen=True)
class MarketModel:
    """Price model plus a bounded interest-rate model.

    ``kind='gbm'`` uses ``drift`` and the volatility matrix ``vol`` (rows are
    per-asset loadings on independent Brownian motions).  ``kind='fbm'`` uses
    ``log S_i(t) = log s_i + drift_i t + (vol @ B_H(t))_i`` with independent
    fractional Brownian motions of Hurst index ``hurst``.

    Rates are either constant or an Ornstein-Uhlenbeck factor clipped to
    ``[0, rate_bound]``.
    """

    kind: Literal["gbm", "fbm"] = "gbm"
    drift: tuple[float, ...] = (0.0,)
    vol: tuple[tuple[float, ...], ...] = ((0.2,),)
    hurst: float = 0.5
    rate: float = 0.0
    rate_kind: RateKind = "constant"
    rate_bound: float = 0.1
    rate_reversion: float = 1.0
    rate_vol: float = 0.01

    def __post_init__(self) -> None:
        vol = np.atleast_2d(np.asarray(self.vol, dtype=float))
        d = len(self.drift)
        if vol.shape != (d, d):
            raise InputError(f"vol must be {d}x{d}, got {vol.shape}")
        if self.kind not in ("gbm", "fbm"):
            raise InputError(f"unsupported model kind {self.kind!r}")
        if self.kind == "fbm" and not 0 < self.hurst < 1:
            raise InputError(f"hurst must lie in (0, 1), got {self.hurst}")
        if np.any(vol != 0) and np.linalg.matrix_rank(vol) < d:
            raise InputError("volatility matrix must be full rank (or identically zero)")
        if self.rate_kind not in ("constant", "ou"):
            raise InputError(f"unsupported rate model {self.rate_kind!r}")
        if self.rate < 0 or self.rate > self.rate_bound:
            raise InputError(f"rate {self.rate} outside [0, rate_bound={self.rate_bound}]")

    @property
    def dim(self) -> int:
        return len(self.drift)

    @classmethod
    def from_dict(cls, spec: dict) -> MarketModel:
        spec = dict(spec)
        if "sigma" in spec and "vol" not in spec:
            sig = spec.pop("sigma")
            sig = [sig] if np.isscalar(sig) else list(sig)
            spec["vol"] = tuple(tuple(float(v) if i == j else 0.0 for j in range(len(sig))) for i, v in enumerate(sig))
            spec.setdefault("drift", tuple(0.0 for _ in sig))
        if "vol" in spec:
            spec["vol"] = tuple(tuple(float(v) for v in row) for row in np.atleast_2d(spec["vol"]))
        if "drift" in spec:
            spec["drift"] = tuple(float(v) for v in np.atleast_1d(spec["drift"]))
        try:
            return cls(**spec)
        except TypeError as exc:
            raise InputError(f"bad market spec: {exc}") from exc


def path_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, path index); generation order does not matter."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def fbm_cholesky(grid: np.ndarray, hurst: float) -> np.ndarray:
    """Lower Cholesky factor of Cov(B_H(t_j), B_H(t_k)) over grid[1:]."""
    t = grid[1:]
    h2 = 2.0 * hurst
    cov = 0.5 * (t[:, None] ** h2 + t[None, :] ** h2 - np.abs(t[:, None] - t[None, :]) ** h2)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"fBM covariance not positive definite (hurst={hurst}, N={len(t)})") from exc


def _rates(model: MarketModel, rng: np.random.Generator, dt: np.ndarray) -> np.ndarray:
    if model.rate_kind == "constant":
        return np.full(len(dt), model.rate)
    x = np.empty(len(dt))
    x[0] = model.rate
    z = rng.standard_normal(len(dt) - 1)
    k = model.rate_reversion
    for j in range(1, len(dt)):
        x[j] = x[j - 1] + k * (model.rate - x[j - 1]) * dt[j - 1] + model.rate_vol * math.sqrt(dt[j - 1]) * z[j - 1]
    return np.clip(x, 0.0, model.rate_bound)


def simulate(
    model: MarketModel,
    s0,
    steps: int,
    maturity: float,
    seed: int,
    count: int,
) -> PathSet:
    """Simulate ``count`` paths on a uniform grid of ``steps`` intervals."""
    s0 = np.atleast_1d(np.asarray(s0, dtype=float))
    d = model.dim
    if steps < 1 or count < 1:
        raise InputError("steps and count must be positive")
    if s0.shape != (d,) or np.any(s0 <= 0):
        raise InputError(f"initial stock must be a positive vector of length {d}")
    if maturity <= 0:
        raise InputError("maturity must be positive")
    grid = np.linspace(0.0, maturity, steps + 1)
    dt = np.diff(grid)
    vol = np.asarray(model.vol, dtype=float)
    mu = np.asarray(model.drift, dtype=float)
    chol = fbm_cholesky(grid, model.hurst) if model.kind == "fbm" else None

    stock = np.empty((count, steps + 1, d))
    bank = np.empty((count, steps + 1))
    rate = np.empty((count, steps))
    for p in range(count):
        rng = path_rng(seed, p)
        z = rng.standard_normal((steps, d))
        if chol is None:
            drift = (mu - 0.5 * np.sum(vol**2, axis=1))[None, :] * dt[:, None]
            incr = drift + np.sqrt(dt)[:, None] * (z @ vol.T)
            logs = np.vstack([np.zeros(d), np.cumsum(incr, axis=0)])
        else:
            b_h = np.vstack([np.zeros(d), chol @ z])
            logs = grid[:, None] * mu[None, :] + b_h @ vol.T
        stock[p] = s0 * np.exp(logs)
        r = _rates(model, rng, dt)
        rate[p] = r
        bank[p] = np.exp(np.concatenate([[0.0], np.cumsum(r * dt)]))
    return PathSet(grid, stock, bank, rate, model.rate_bound)


def counterexample_2_4_paths(
    steps: int,
    maturity: float,
    seed: int,
    count: int,
    zero_noise: bool = False,
) -> PathSet:
    """Unbounded-rate market: S0 = exp(int |W|), S = exp(int (|W| + 2W)).

    Integrals use the left-endpoint rule on the simulated Brownian path.
    The result carries ``rate_bound = inf`` and ``flags['unbounded_rate']``.
    """
    if steps < 1 or count < 1:
        raise InputError("steps and count must be positive")
    grid = np.linspace(0.0, maturity, steps + 1)
    dt = np.diff(grid)
    stock = np.empty((count, steps + 1, 1))
    bank = np.empty((count, steps + 1))
    rate = np.empty((count, steps))
    for p in range(count):
        if zero_noise:
            w = np.zeros(steps + 1)
        else:
            z = path_rng(seed, p).standard_normal(steps)
            w = np.concatenate([[0.0], np.cumsum(np.sqrt(dt) * z)])
        left = w[:-1]
        r = np.abs(left)
        rate[p] = r
        bank[p] = np.exp(np.concatenate([[0.0], np.cumsum(r * dt)]))
        stock[p, :, 0] = np.exp(np.concatenate([[0.0], np.cumsum((r + 2.0 * left) * dt)]))
    return PathSet(grid, stock, bank, rate, math.inf, {"unbounded_rate": True})


def write_paths_csv(paths, out) -> None:
    """Write columns path_id, t, S_1..S_d, S0, r (r is blank on the last row)."""
    paths = list(paths)
    if not paths:
        raise InputError("no paths to write")
    d = paths[0].dim
    header = ["path_id", "t", *[f"S_{i + 1}" for i in range(d)], "S0", "r"]
    own = isinstance(out, (str, Path))
    fh = open(out, "w", newline="") if own else out
    try:
        w = csv.writer(fh)
        w.writerow(header)
        for pid, p in enumerate(paths):
            for k, t in enumerate(p.grid):
                r = repr(float(p.rate[k])) if k < p.steps else ""
                w.writerow([pid, repr(float(t)), *[repr(float(v)) for v in p.stock[k]], repr(float(p.bank[k])), r])
    finally:
        if own:
            fh.close()


def read_paths_csv(source, rate_bound: float = math.inf) -> list[MarketPath]:
    """Read paths written by :func:`write_paths_csv`; ``path_id`` is optional."""
    own = isinstance(source, (str, Path))
    fh = open(source, newline="") if own else source
    try:
        rows = list(csv.DictReader(fh))
    finally:
        if own:
            fh.close()
    if not rows:
        raise InputError("empty path file")
    cols = rows[0].keys()
    s_cols = sorted((c for c in cols if c.startswith("S_")), key=lambda c: int(c[2:]))
    if "t" not in cols or "S0" not in cols or not s_cols:
        raise InputError("path CSV needs columns t, S_1..S_d, S0 [, r]")
    groups: dict[str, list[dict]] = {}
    for row in rows:
        groups.setdefault(row.get("path_id", "0"), []).append(row)
    out = []
    for rs in groups.values():
        try:
            grid = [float(r["t"]) for r in rs]
            stock = [[float(r[c]) for c in s_cols] for r in rs]
            bank = [float(r["S0"]) for r in rs]
            rate = [float(r["r"]) for r in rs[:-1]] if "r" in cols and all(r["r"] for r in rs[:-1]) else None
        except ValueError as exc:
            raise InputError(f"non-numeric value in path CSV: {exc}") from exc
        out.append(discount(grid, stock, bank, rate, rate_bound))
    return out


def stack_paths(paths: Sequence[MarketPath]) -> PathSet:
    """Pack a list of paths sharing one grid into a PathSet."""
    if isinstance(paths, PathSet):
        return paths
    paths = list(paths)
    if not paths:
        raise InputError("empty path collection")
    grid = paths[0].grid
    for p in paths[1:]:
        if p.grid.shape != grid.shape or not np.allclose(p.grid, grid, rtol=0, atol=1e-12):
            raise InputError("paths do not share a common grid")
    return PathSet(
        grid,
        np.stack([p.stock for p in paths]),
        np.stack([p.bank for p in paths]),
        np.stack([p.rate for p in paths]),
        min(p.rate_bound for p in paths),
    )
