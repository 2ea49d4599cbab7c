"""Game variant of the concave envelope.

For a payoff F and penalty D the envelope R is the smallest continuous g with
F <= g <= F + D that is concave on every convex region where g < F + D.  It
is built from one tangent line per coordinate axis: the line from (0, F(0))
that touches the shifted section F_i + D.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NumericalError
from .payoff import GameOption, eval_payoff, section, subgradient_1d

_REL = 1e-12


@dataclass(frozen=True, eq=False)
class EnvelopeData:
    A: np.ndarray  # touch points, inf where the tangent never touches
    B: np.ndarray  # tangent slopes
    base: float  # F(0)
    option: GameOption

    @property
    def dim(self) -> int:
        return len(self.B)

    def affine(self, x) -> np.ndarray | float:
        """F(0) + <B, x>."""
        return self.base + np.asarray(x, dtype=float) @ self.B

    def __call__(self, x):
        return game_concave_envelope(self, x)


def tangent_coefficients(option: GameOption) -> EnvelopeData:
    """Touch points A_i and slopes B_i of the tangents from (0, F(0)) to F_i + D.

    On a linear piece of F_i the tangency condition is either empty or holds
    on the whole piece, so the infimum is always attained at a kink; only kinks
    need checking.
    """
    F = option.payoff
    base = F.at_origin
    delta = option.penalty
    A = np.full(F.dim, np.inf)
    B = np.empty(F.dim)
    for i in range(F.dim):
        sec = section(F, i)
        kinks, slopes, _ = sec.active_pieces()
        B[i] = slopes[-1]
        for k, t in enumerate(kinks):
            ratio = (sec(t) + delta - base) / t
            lo, hi = slopes[k], slopes[k + 1]
            slack = _REL * (1.0 + abs(ratio))
            if lo - slack <= ratio <= hi + slack:
                A[i] = t
                B[i] = ratio
                break
    A.setflags(write=False)
    B.setflags(write=False)
    return EnvelopeData(A, B, base, option)


def _scale(env: EnvelopeData) -> float:
    F = env.option.payoff
    return 1.0 + abs(env.base) + env.option.penalty + float(np.abs(F.intercepts).max())


def _first_nonneg(c: np.ndarray, s: np.ndarray, tol: float) -> np.ndarray:
    """Smallest t >= 0 with min_j (c_j + s_j t) >= 0, row-wise; inf if none.

    ``c`` has shape (m,) or (n, m) and ``s`` has shape (n, m).  The feasible set
    of a concave piecewise-linear function is an interval, so it is the
    intersection of the per-piece half-lines.
    """
    c = np.broadcast_to(c, s.shape)
    flat = np.abs(s) <= tol * 1e-3
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        root = -c / s
    lo = np.where(s > 0, root, -np.inf)
    hi = np.where(s < 0, root, np.inf)
    lo = np.where(flat, -np.inf, lo).max(axis=-1)
    hi = np.where(flat, np.inf, hi).min(axis=-1)
    ok = np.all(~flat | (c >= -tol), axis=-1)
    lo = np.maximum(lo, 0.0)
    ok &= lo <= hi + _REL * (1.0 + np.abs(hi)) + 1e-12
    return np.where(ok, lo, np.inf)


def ray_threshold(env: EnvelopeData, x) -> float | np.ndarray:
    """First distance t along the ray through x at which the affine branch
    F(0) + <B, t u> reaches F(t u) + D (u = x / |x|, Euclidean norm)."""
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[1] != env.dim:
        raise InputError(f"point dimension {pts.shape[1]} != {env.dim}")
    if np.any(pts < 0):
        raise InputError("points must be in the nonnegative orthant")
    norms = np.linalg.norm(pts, axis=1)
    if np.any(norms == 0):
        raise InputError("ray threshold is undefined at the origin")
    u = pts / norms[:, None]
    F = env.option.payoff
    c = env.base - env.option.penalty - F.intercepts
    s = u @ (env.B[None, :] - F.slopes).T
    out = _first_nonneg(c, s, 1e-12 * _scale(env))
    return float(out[0]) if single else out


def game_concave_envelope(env: EnvelopeData, x) -> float | np.ndarray:
    """R(x): the affine branch inside the ray threshold, F + D beyond it."""
    pts = np.asarray(x, dtype=float)
    single = pts.ndim <= 1
    pts = np.atleast_2d(pts.reshape(1, -1) if pts.ndim == 0 else pts)
    if pts.shape[1] != env.dim:
        raise InputError(f"point dimension {pts.shape[1]} != {env.dim}")
    cap = eval_payoff(env.option.payoff, pts) + env.option.penalty
    out = np.atleast_1d(cap).astype(float).copy()
    norms = np.linalg.norm(pts, axis=1)
    zero = norms == 0
    out[zero] = env.base
    nz = ~zero
    if np.any(nz):
        h = np.atleast_1d(ray_threshold(env, pts[nz]))
        below = norms[nz] < h
        idx = np.flatnonzero(nz)[below]
        out[idx] = env.base + pts[idx] @ env.B
    return float(out[0]) if single else out


def is_cancel_region(env: EnvelopeData, x) -> np.ndarray | bool:
    """Membership in D = {x : D + F(x) <= F(0) + <B, x>}."""
    x = np.asarray(x, dtype=float)
    cap = eval_payoff(env.option.payoff, x) + env.option.penalty
    return cap <= env.affine(x) + 1e-12 * _scale(env)


# -- membership in the envelope class ----------------------------------------


@dataclass
class SamplingPlan:
    points: np.ndarray  # (n, d)
    segments: np.ndarray  # (m, 2, d)


@dataclass
class GMembershipReport:
    is_member: bool
    bound_violations: list = field(default_factory=list)
    concavity_violations: list = field(default_factory=list)
    segments_tested: int = 0


def sampling_plan(dim: int, x_max: float, n_points: int = 1000, n_segments: int = 1000, seed: int = 0) -> SamplingPlan:
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0.0, x_max, size=(n_points, dim))
    if dim == 1:
        pts = np.sort(pts, axis=0)
    segs = rng.uniform(0.0, x_max, size=(n_segments, 2, dim))
    return SamplingPlan(pts, segs)


def check_G_membership(
    g: Callable,
    option: GameOption,
    samples: SamplingPlan,
    tol: float = 1e-9,
    probes_per_segment: int = 9,
) -> GMembershipReport:
    """Test the bounds F <= g <= F + D and midpoint concavity of g on every
    sampled segment along which g stays strictly below F + D."""
    F = option.payoff
    delta = option.penalty

    def gv(pts):
        return np.array([float(g(p)) for p in pts])

    pts = np.asarray(samples.points, dtype=float)
    fv = eval_payoff(F, pts)
    gvals = gv(pts)
    bad = (gvals < fv - tol) | (gvals > fv + delta + tol)
    bounds = [(pts[i].copy(), float(fv[i]), float(gvals[i])) for i in np.flatnonzero(bad)]

    concav = []
    tested = 0
    lam = np.linspace(0.0, 1.0, probes_per_segment)
    for x, y in np.asarray(samples.segments, dtype=float):
        along = x[None, :] + lam[:, None] * (y - x)[None, :]
        if np.any(gv(along) >= eval_payoff(F, along) + delta - tol):
            continue
        tested += 1
        mid = 0.5 * (x + y)
        gap = float(g(mid)) - 0.5 * (float(g(x)) + float(g(y)))
        if gap < -tol:
            concav.append((x.copy(), y.copy(), gap))
    return GMembershipReport(not bounds and not concav, bounds, concav, tested)


# -- brute-force minimality oracle (one asset) --------------------------------


@dataclass
class OracleResult:
    grid: np.ndarray
    values: np.ndarray
    stop_set: np.ndarray  # nodes where the value equals F + D by policy
    iterations: int
    residual: float  # sup |g - min(F+D, max(F, midpoint average))|

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


def _upper_hull(xs: np.ndarray, ys: np.ndarray, ray: float | None) -> tuple[np.ndarray, np.ndarray]:
    """Vertices of the least concave majorant of the points, optionally
    continued to +inf by a ray of slope ``ray``."""
    hx: list[float] = []
    hy: list[float] = []
    for x, y in zip(xs, ys):
        while len(hx) >= 2:
            x1, y1, x2, y2 = hx[-2], hy[-2], hx[-1], hy[-1]
            if (y2 - y1) * (x - x1) <= (y - y1) * (x2 - x1):
                hx.pop()
                hy.pop()
            else:
                break
        hx.append(float(x))
        hy.append(float(y))
    if ray is not None:
        while len(hx) >= 2 and (hy[-1] - hy[-2]) < ray * (hx[-1] - hx[-2]):
            hx.pop()
            hy.pop()
    return np.asarray(hx), np.asarray(hy)


def _eval_hull(hx, hy, ray, x):
    out = np.interp(x, hx, hy)
    if ray is not None:
        beyond = x > hx[-1]
        out[beyond] = hy[-1] + ray * (x[beyond] - hx[-1])
    return out


def _policy_value(x, f, cap, stop, top_slope):
    """Value when the seller stops exactly on ``stop`` and the buyer's
    martingale is chosen optimally: run-wise concave hulls of F with F + D
    pinned at the neighbouring stop nodes."""
    n = len(x)
    v = np.where(stop, cap, 0.0)
    j = 0
    while j < n:
        if stop[j]:
            j += 1
            continue
        k = j
        while k + 1 < n and not stop[k + 1]:
            k += 1
        idx = list(range(j, k + 1))
        xs = [x[i] for i in idx]
        ys = [f[i] for i in idx]
        if j > 0:
            xs.insert(0, x[j - 1])
            ys.insert(0, cap[j - 1])
        ray = None
        if k + 1 < n:
            xs.append(x[k + 1])
            ys.append(cap[k + 1])
        else:
            ray = top_slope
        hx, hy = _upper_hull(np.asarray(xs), np.asarray(ys), ray)
        v[j : k + 1] = _eval_hull(hx, hy, ray, x[j : k + 1])
        j = k + 1
    return v


def _continuation(v, f, h, top_slope):
    ghost = v[-1] + top_slope * h
    nxt = np.append(v[1:], ghost)
    prv = np.insert(v[:-1], 0, v[0])
    cont = np.maximum(f, 0.5 * (prv + nxt))
    cont[0] = f[0]  # a nonnegative martingale started at 0 stays there
    return cont


def _oracle_grid(option: GameOption, grid) -> tuple[np.ndarray, int, float, float]:
    if option.dim != 1:
        raise InputError("the brute-force oracle handles one asset only")
    x = np.asarray(grid, dtype=float)
    if x.ndim != 1 or len(x) < 3 or x[0] != 0.0:
        raise InputError("oracle grid must be a 1-D grid starting at 0")
    h = float(x[1] - x[0])
    if h <= 0 or not np.allclose(np.diff(x), h, rtol=1e-9, atol=0):
        raise InputError("oracle grid must be uniform with positive spacing")
    sec = section(option.payoff, 0)
    kinks = sec.kinks()
    n_user = len(x)
    if kinks.size and kinks.max() + h > x[-1]:
        extra = int(np.ceil((kinks.max() + h - x[-1]) / h)) + 1
        x = np.concatenate([x, x[-1] + h * np.arange(1, extra + 1)])
    return x, n_user, h, sec.final_slope


def minimal_envelope_oracle_1d(option: GameOption, grid, max_iter: int = 100_000, tol: float = 1e-10) -> OracleResult:
    """Pointwise-minimal grid function g with F <= g <= F + D and
    g_j >= (g_{j-1} + g_{j+1}) / 2 wherever g_j < F_j + D.

    The minimal element solves g = min(F + D, max(F, midpoint average of g)).
    It is computed by policy iteration on the seller's stopping set; for a
    fixed set the buyer's best response is a run-wise concave hull.  Beyond
    the last grid node F is affine, and the continuation is taken with the
    final slope of F (the smallest concave extension that stays above F).
    If the grid ends before the last kink it is extended internally.
    """
    x, n_user, h, top_slope = _oracle_grid(option, grid)
    f = eval_payoff(option.payoff, x[:, None])
    cap = f + option.penalty
    scale = 1.0 + float(np.abs(cap).max())
    stop = np.zeros(len(x), dtype=bool)
    for it in range(1, max_iter + 1):
        v = _policy_value(x, f, cap, stop, top_slope)
        cont = _continuation(v, f, h, top_slope)
        new_stop = cap < cont - tol * scale
        new_stop[0] = False
        if np.array_equal(new_stop, stop):
            break
        stop = new_stop
    else:
        raise NumericalError(f"oracle policy iteration did not settle in {max_iter} rounds; stop-set size {stop.sum()}")
    g = np.minimum(cap, v)
    resid = float(np.max(np.abs(g - np.minimum(cap, _continuation(g, f, h, top_slope)))))
    return OracleResult(x[:n_user], g[:n_user], stop[:n_user], it, resid)


def envelope_value_iteration_1d(option: GameOption, grid, max_sweeps: int = 1_000_000, tol: float = 1e-12) -> np.ndarray:
    """Plain monotone iteration g <- min(F + D, max(F, midpoint average of g))
    from g = F.  Slow (diffusive), meant for small grids and cross-checks."""
    x, n_user, h, top_slope = _oracle_grid(option, grid)
    f = eval_payoff(option.payoff, x[:, None])
    cap = f + option.penalty
    g = f.copy()
    for _ in range(max_sweeps):
        new = np.minimum(cap, _continuation(g, f, h, top_slope))
        change = float(np.max(np.abs(new - g)))
        g = new
        if change < tol:
            return g[:n_user]
    raise NumericalError(f"value iteration did not converge in {max_sweeps} sweeps (last change {change:.3g})")


# -- relations used by the hedge argument --------------------------------------


def check_relations_2plus20(env: EnvelopeData, x, tol: float = 1e-9) -> tuple[bool, bool]:
    """Evaluate the two implications tying the tangent data to the payoff:

    1. F(x) > F(0) + <x, B>  implies  sum_{A_i finite} x_i / A_i > 1;
    2. sum_{A_i finite} x_i / A_i = 1  implies  F(x) + D <= F(0) + <x, B>.
    """
    x = np.asarray(x, dtype=float)
    fin = np.isfinite(env.A)
    ratio = float(np.sum(x[fin] / env.A[fin]))
    fx = eval_payoff(env.option.payoff, x)
    aff = float(env.affine(x))
    scale = _scale(env) + float(np.abs(x).sum()) * float(np.abs(env.B).max(initial=0.0))
    r1 = not (fx > aff + tol * scale) or ratio > 1.0
    r2 = not (abs(ratio - 1.0) <= 1e-9) or fx + env.option.penalty <= aff + tol * scale
    return bool(r1), bool(r2)


def subgradient_at_touch(env: EnvelopeData, i: int) -> tuple[float, float]:
    """Subgradient interval of F_i at A_i (for finite A_i)."""
    if not np.isfinite(env.A[i]):
        raise InputError(f"A_{i} is infinite")
    return subgradient_1d(section(env.option.payoff, i), float(env.A[i]))
