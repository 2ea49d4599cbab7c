"""Convex piecewise-linear payoffs and the discounted game reward.

A payoff is stored as a finite family of affine pieces ``x -> <a_j, x> + b_j``
and evaluated as their maximum.  This keeps subgradients, tangents and
hitting thresholds exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np

from .errors import InputError

if TYPE_CHECKING:
    from .market import MarketPath

NEG_TOL = 1e-12
_TIE = 1e-12


@dataclass(frozen=True, eq=False)
class MaxAffinePayoff:
    """F(x) = max_j (<a_j, x> + b_j) on the nonnegative orthant."""

    slopes: np.ndarray  # (m, d)
    intercepts: np.ndarray  # (m,)

    def __post_init__(self) -> None:
        a = np.atleast_2d(np.asarray(self.slopes, dtype=float))
        b = np.atleast_1d(np.asarray(self.intercepts, dtype=float))
        if a.size == 0 or b.size == 0:
            raise InputError("payoff needs at least one affine piece")
        if a.ndim != 2 or b.ndim != 1 or a.shape[0] != b.shape[0]:
            raise InputError(f"inconsistent piece shapes {a.shape} and {b.shape}")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise InputError("payoff pieces must be finite")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "slopes", a)
        object.__setattr__(self, "intercepts", b)
        self._check_nonnegative()

    @classmethod
    def from_pieces(cls, pieces: list[tuple[Any, float]]) -> MaxAffinePayoff:
        if not pieces:
            raise InputError("payoff needs at least one affine piece")
        a = [np.atleast_1d(np.asarray(p[0], dtype=float)) for p in pieces]
        dims = {len(v) for v in a}
        if len(dims) != 1:
            raise InputError(f"pieces have mixed dimensions {sorted(dims)}")
        return cls(np.vstack(a), np.array([float(p[1]) for p in pieces]))

    @property
    def dim(self) -> int:
        return self.slopes.shape[1]

    @property
    def pieces(self) -> list[tuple[np.ndarray, float]]:
        return [(self.slopes[j].copy(), float(self.intercepts[j])) for j in range(len(self.intercepts))]

    @property
    def lipschitz(self) -> float:
        """max_j ||a_j||_1, a valid Lipschitz constant for the l1 distance."""
        return float(np.abs(self.slopes).sum(axis=1).max())

    @property
    def at_origin(self) -> float:
        return float(self.intercepts.max())

    def __call__(self, x: Any) -> Any:
        return eval_payoff(self, x)

    def section(self, i: int) -> Section1D:
        return section(self, i)

    def _check_nonnegative(self) -> None:
        if self.at_origin < -NEG_TOL:
            raise InputError(f"payoff is negative at the origin: F(0)={self.at_origin}")
        sections = tuple(Section1D(self.slopes[:, i], self.intercepts).pruned() for i in range(self.dim))
        # pruned sections are reused by every tangent and threshold computation
        object.__setattr__(self, "_sections", sections)
        if self.dim == 1:
            # convex on [0, inf): the minimum sits at 0 or a kink unless it falls forever
            sec = sections[0]
            low = float(np.min(sec(sec.kinks()), initial=self.at_origin))
            if sec.final_slope < 0:
                raise InputError("payoff becomes negative for large stock prices")
        else:
            low = self._orthant_minimum()
        if low < -NEG_TOL:
            raise InputError(f"payoff takes negative value {low:.3g} on the orthant")

    def _orthant_minimum(self) -> float:
        """min over x >= 0 of F(x), as the LP  min t  s.t.  <a_j, x> + b_j <= t."""
        from scipy.optimize import linprog

        m, d = self.slopes.shape
        cost = np.zeros(d + 1)
        cost[-1] = 1.0
        res = linprog(
            cost,
            A_ub=np.hstack([self.slopes, -np.ones((m, 1))]),
            b_ub=-self.intercepts,
            bounds=[(0, None)] * d + [(None, None)],
            method="highs",
        )
        if res.status == 3:
            return -np.inf
        if res.status != 0:
            raise InputError(f"could not bound the payoff from below: {res.message}")
        return float(res.fun)


@dataclass(frozen=True, eq=False)
class Section1D:
    """t -> max_j (slope_j * t + intercept_j) for t >= 0."""

    slopes: np.ndarray
    intercepts: np.ndarray

    def __post_init__(self) -> None:
        m = np.atleast_1d(np.asarray(self.slopes, dtype=float))
        c = np.atleast_1d(np.asarray(self.intercepts, dtype=float))
        if m.shape != c.shape or m.size == 0:
            raise InputError("section needs matching, nonempty slope/intercept arrays")
        m.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "slopes", m)
        object.__setattr__(self, "intercepts", c)
        object.__setattr__(self, "_active", None)

    @property
    def pieces(self) -> list[tuple[float, float]]:
        return list(zip(self.slopes.tolist(), self.intercepts.tolist()))

    def __call__(self, t: Any) -> Any:
        t = np.asarray(t, dtype=float)
        vals = np.multiply.outer(t, self.slopes) + self.intercepts
        out = vals.max(axis=-1)
        return float(out) if out.ndim == 0 else out

    def active_pieces(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Upper envelope on [0, inf): kinks t_1 < ... < t_k and slopes/intercepts
        of the k+1 pieces that are active on consecutive intervals."""
        if self._active is None:
            object.__setattr__(self, "_active", self._upper_envelope())
        return self._active

    def _upper_envelope(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        m, c = self.slopes, self.intercepts
        top = c.max()
        cand = np.flatnonzero(c >= top - _TIE * (1.0 + abs(top)))
        cur = int(cand[np.argmax(m[cand])])
        t_cur = 0.0
        kinks: list[float] = []
        idx = [cur]
        while True:
            steeper = np.flatnonzero(m > m[cur])
            if steeper.size == 0:
                break
            cross = (c[cur] - c[steeper]) / (m[steeper] - m[cur])
            cross = np.maximum(cross, t_cur)
            t_next = cross.min()
            ties = steeper[cross <= t_next + _TIE * (1.0 + abs(t_next))]
            nxt = int(ties[np.argmax(m[ties])])
            if t_next > t_cur + _TIE * (1.0 + abs(t_cur)):
                kinks.append(float(t_next))
                idx.append(nxt)
            else:
                idx[-1] = nxt
            cur, t_cur = nxt, t_next
        idx_arr = np.asarray(idx)
        out = (np.asarray(kinks), m[idx_arr], c[idx_arr])
        for arr in out:
            arr.setflags(write=False)
        return out

    def kinks(self) -> np.ndarray:
        return self.active_pieces()[0]

    def pruned(self) -> Section1D:
        _, m, c = self.active_pieces()
        return Section1D(m, c)

    @property
    def final_slope(self) -> float:
        return float(self.slopes.max())


@dataclass(frozen=True)
class GameOption:
    """Game option with discounted rewards Y = F(S)/S0 and X = (F(S) + penalty)/S0."""

    payoff: MaxAffinePayoff
    penalty: float
    maturity: float = 1.0

    def __post_init__(self) -> None:
        if not (np.isfinite(self.penalty) and self.penalty > 0):
            raise InputError(f"penalty must be positive, got {self.penalty}")
        if not (np.isfinite(self.maturity) and self.maturity > 0):
            raise InputError(f"maturity must be positive, got {self.maturity}")

    @property
    def dim(self) -> int:
        return self.payoff.dim

    def to_dict(self) -> dict[str, Any]:
        return {
            "dim": self.dim,
            "pieces": [{"a": a.tolist(), "b": b} for a, b in self.payoff.pieces],
            "penalty": self.penalty,
            "maturity": self.maturity,
        }

    @classmethod
    def from_dict(cls, spec: dict[str, Any]) -> GameOption:
        try:
            dim = int(spec["dim"])
            pieces = [(p["a"], p["b"]) for p in spec["pieces"]]
            penalty = float(spec["penalty"])
            maturity = float(spec.get("maturity", 1.0))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"bad option spec: {exc!r}") from exc
        payoff = MaxAffinePayoff.from_pieces(pieces)
        if payoff.dim != dim:
            raise InputError(f"spec declares dim={dim} but pieces have dim={payoff.dim}")
        return cls(payoff, penalty, maturity)

    @classmethod
    def from_json(cls, path: str | Path) -> GameOption:
        try:
            spec = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read option spec {path}: {exc}") from exc
        return cls.from_dict(spec)


def call_payoff(strike: float) -> MaxAffinePayoff:
    return MaxAffinePayoff.from_pieces([([1.0], -strike), ([0.0], 0.0)])


def put_payoff(strike: float) -> MaxAffinePayoff:
    return MaxAffinePayoff.from_pieces([([-1.0], strike), ([0.0], 0.0)])


def spread_payoff(strike: float) -> MaxAffinePayoff:
    """(x1 - x2 + K)^+ on two assets."""
    return MaxAffinePayoff.from_pieces([([1.0, -1.0], strike), ([0.0, 0.0], 0.0)])


CANONICAL = {"call": call_payoff, "put": put_payoff, "spread": spread_payoff}


def canonical_option(name: str, strike: float, penalty: float, maturity: float = 1.0) -> GameOption:
    try:
        make = CANONICAL[name]
    except KeyError:
        raise InputError(f"unknown canonical payoff {name!r}; choose from {sorted(CANONICAL)}") from None
    if strike <= 0:
        raise InputError(f"strike must be positive, got {strike}")
    return GameOption(make(strike), penalty, maturity)


def _as_points(F: MaxAffinePayoff, x: Any) -> np.ndarray:
    pts = np.asarray(x, dtype=float)
    if pts.ndim == 0:
        pts = pts.reshape(1)
    if pts.shape[-1] != F.dim:
        raise InputError(f"point has dimension {pts.shape[-1]}, payoff has {F.dim}")
    if np.any(pts < 0):
        raise InputError("payoff is defined on the nonnegative orthant only")
    return pts


def eval_payoff(F: MaxAffinePayoff, x: Any) -> Any:
    """Evaluate F at one point (shape (d,)) or a batch (shape (..., d))."""
    pts = _as_points(F, x)
    vals = (pts @ F.slopes.T + F.intercepts).max(axis=-1)
    if np.min(vals) < -NEG_TOL:
        raise InputError(f"payoff evaluated to {np.min(vals):.3g} < 0")
    return float(vals) if vals.ndim == 0 else vals


def section(F: MaxAffinePayoff, i: int) -> Section1D:
    """Restriction t -> F(t e_i); ``i`` is zero-based."""
    if not 0 <= i < F.dim:
        raise InputError(f"coordinate {i} out of range for dim {F.dim}")
    return F._sections[i]


def subgradient_1d(f: Section1D, t: float) -> tuple[float, float]:
    """Left and right derivatives of the section at ``t``.

    At t = 0 the left end is taken as the smallest slope active there.
    """
    if t < 0:
        raise InputError(f"subgradient requested at negative t={t}")
    vals = f.slopes * t + f.intercepts
    top = vals.max()
    active = f.slopes[vals >= top - _TIE * (1.0 + abs(top))]
    return float(active.min()), float(active.max())


def discounted_rewards(option: GameOption, path: MarketPath) -> tuple[np.ndarray, np.ndarray]:
    """Y(t_k) and X(t_k) along a path."""
    f = eval_payoff(option.payoff, path.stock)
    return f / path.bank, (f + option.penalty) / path.bank


def game_reward(option: GameOption, path: MarketPath, sigma: int, tau: int) -> float:
    """H(sigma, tau): X(sigma) if the seller cancels strictly first, else Y(tau)."""
    n = len(path.grid)
    for name, k in (("sigma", sigma), ("tau", tau)):
        if not 0 <= k < n:
            raise InputError(f"{name}={k} outside path grid of {n} points")
    if sigma < tau:
        f = eval_payoff(option.payoff, path.stock[sigma])
        return (f + option.penalty) / float(path.bank[sigma])
    return eval_payoff(option.payoff, path.stock[tau]) / float(path.bank[tau])
