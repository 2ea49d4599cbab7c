"""Multinomial tree martingales and the seller's optimal stopping problem.

A tree martingale moves multiplicatively, ``child_i = node_i (1 + h <l e_i +
f_i, xi_m>)`` with ``h = sqrt(T/n)``, where the atoms ``xi_m`` are mean-zero
with identity covariance and ``f`` is a volatility control.  Backward
induction of ``min(F + penalty, E[child value])`` gives the seller's value of
the stopping game on that tree, a lower bound for the robust stopping value.
"""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from ._threads import parallel_map
from .envelope import EnvelopeData, game_concave_envelope
from .errors import InputError
from .payoff import GameOption, eval_payoff

RIDGE = 1e-8
MIN_FACTOR = 0.05
_LOG_CLIP = 700.0  # keeps lattice values finite and positive in float64


@dataclass(frozen=True, eq=False)
class IncrementBasis:
    matrix: np.ndarray  # (d+1, d+1) orthogonal, last column constant
    atoms: np.ndarray  # (d+1, d)
    prob: np.ndarray  # (d+1,)

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]


def build_increment_basis(d: int) -> IncrementBasis:
    """Householder reflection sending e_{d+1} to (1, ..., 1)/sqrt(d+1).

    Rows of the reflection are orthonormal, so dropping the constant last
    column leaves d+1 vectors that, scaled by sqrt(d+1), have mean zero and
    identity covariance under the uniform law.
    """
    if int(d) != d or d < 1:
        raise InputError(f"dimension must be a positive integer, got {d}")
    d = int(d)
    k = d + 1
    target = np.full(k, 1.0 / math.sqrt(k))
    v = -target
    v[-1] += 1.0
    H = np.eye(k) - 2.0 * np.outer(v, v) / float(v @ v)
    atoms = math.sqrt(k) * H[:, :d]
    return IncrementBasis(H, atoms, np.full(k, 1.0 / k))


# -- controls ---------------------------------------------------------------


class Control:
    """Volatility control: ``matrices(k, x)`` maps the nodes ``x`` (count, d) at
    level ``k`` to per-node matrices (count, d, d) whose row i is f_i."""

    constant: float | None = None

    def matrices(self, k: int, x: np.ndarray) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError

    def bound(self) -> float:
        """Upper bound on the spectral norm of every matrix, inf if unknown."""
        return math.inf

    def describe(self) -> dict:
        return {"kind": type(self).__name__}


@dataclass(frozen=True)
class ConstantControl(Control):
    c: float

    @property
    def constant(self) -> float:  # type: ignore[override]
        return self.c

    def matrices(self, k: int, x: np.ndarray) -> np.ndarray:
        d = x.shape[1]
        return np.broadcast_to(self.c * np.eye(d), (x.shape[0], d, d))

    def bound(self) -> float:
        return abs(self.c)

    def describe(self) -> dict:
        return {"kind": "constant", "c": float(self.c)}


@dataclass(frozen=True)
class TwoRegimeControl(Control):
    """c_in * I where F(0) + <B, x> - F(x) - penalty < 0, c_out * I elsewhere."""

    env: EnvelopeData
    c_in: float
    c_out: float

    def matrices(self, k: int, x: np.ndarray) -> np.ndarray:
        opt = self.env.option
        gap = self.env.affine(x) - eval_payoff(opt.payoff, x) - opt.penalty
        c = np.where(np.atleast_1d(gap) < 0, self.c_in, self.c_out)
        return c[:, None, None] * np.eye(x.shape[1])[None]

    def bound(self) -> float:
        return max(abs(self.c_in), abs(self.c_out))

    def describe(self) -> dict:
        return {"kind": "two-regime", "c_in": float(self.c_in), "c_out": float(self.c_out)}


@dataclass(frozen=True)
class FunctionControl(Control):
    """Wraps ``fn(k, x) -> (d, d)`` evaluated node by node."""

    fn: Callable[[int, np.ndarray], np.ndarray]

    def matrices(self, k: int, x: np.ndarray) -> np.ndarray:
        return np.stack([np.asarray(self.fn(k, row), dtype=float) for row in x])

    def describe(self) -> dict:
        return {"kind": "function", "name": getattr(self.fn, "__name__", "fn")}


def as_control(control) -> Control:
    if isinstance(control, Control):
        return control
    if callable(control):
        return FunctionControl(control)
    try:
        return ConstantControl(float(control))
    except (TypeError, ValueError):
        raise InputError(f"cannot interpret {control!r} as a control") from None


def c_max(n: int, T: float = 1.0, d: int = 1, ridge: float = RIDGE) -> float:
    """Largest constant control keeping every increment factor >= MIN_FACTOR."""
    if n < 1 or T <= 0:
        raise InputError("need n >= 1 and T > 0")
    peak = float(np.abs(build_increment_basis(d).atoms).max())
    return max(0.0, (1.0 - MIN_FACTOR) / (math.sqrt(T / n) * peak) - ridge)


def max_tree_depth(d: int) -> int:
    """Depth cap for non-recombining trees (about 4 million leaves)."""
    if d == 1:
        return 22
    if d == 2:
        return 13
    return int(math.floor(22 * math.log(2) / math.log(d + 1)))


# -- trees ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TreeMartingale:
    """Level-indexed node values.

    Non-recombining trees store ``levels[k]`` with shape ((d+1)^k, d); the
    children of node j are ``j*(d+1) + m``.  The recombining binomial lattice
    stores log-values: node j at level k has j up-moves, and its children are
    j (down) and j+1 (up).
    """

    depth: int
    root: np.ndarray
    maturity: float
    ridge: float
    basis: IncrementBasis
    control: Control
    recombining: bool
    levels: tuple = field(repr=False)
    factors: tuple = field(default=(), repr=False)  # lattice (down, up)

    @property
    def dim(self) -> int:
        return self.root.shape[0]

    def level(self, k: int) -> np.ndarray:
        if not 0 <= k <= self.depth:
            raise InputError(f"level {k} outside 0..{self.depth}")
        lv = self.levels[k]
        return np.exp(lv) if self.recombining else lv

    def children(self, k: int) -> np.ndarray:
        """Child node values of level ``k``: shape (count_k, branches, d)."""
        nxt = self.level(k + 1)
        if self.recombining:
            return np.stack([nxt[:-1], nxt[1:]], axis=1)
        b = self.dim + 1
        return nxt.reshape(-1, b, self.dim)

    def martingale_defect(self) -> float:
        """Largest relative gap between a node and its children's average."""
        if self.recombining:
            down, up = self.factors
            return abs(0.5 * (down + up) - 1.0)
        worst = 0.0
        for k in range(self.depth):
            node = self.level(k)
            avg = np.tensordot(self.basis.prob, self.children(k), axes=([0], [1]))
            worst = max(worst, float(np.max(np.abs(avg - node) / node)))
        return worst


def _step_factors(basis: IncrementBasis, mats: np.ndarray, h: float, ridge: float) -> np.ndarray:
    """(count, d+1, d) multiplicative factors for each node and atom."""
    d = basis.dim
    load = ridge * np.eye(d)[None] + mats  # row i: l e_i + f_i
    return 1.0 + h * np.einsum("cij,mj->cmi", load, basis.atoms)


_POSITIVITY = "increment factor outside (0, 2): increase n or shrink control"


def build_tree(
    basis: IncrementBasis,
    s,
    n: int,
    control,
    T: float = 1.0,
    ridge: float = RIDGE,
    recombine: bool | None = None,
) -> TreeMartingale:
    """Build the tree martingale of depth ``n`` rooted at ``s``.

    ``recombine`` defaults to True exactly when d = 1 and the control is
    constant; a recombining lattice is then used, allowing thousands of steps.
    """
    s = np.atleast_1d(np.asarray(s, dtype=float))
    d = basis.dim
    if s.shape != (d,) or np.any(s <= 0):
        raise InputError(f"root must be a positive vector of length {d}")
    if int(n) != n or n < 1:
        raise InputError(f"depth must be a positive integer, got {n}")
    if T <= 0 or ridge < 0:
        raise InputError("need T > 0 and ridge >= 0")
    n = int(n)
    ctrl = as_control(control)
    h = math.sqrt(T / n)
    lattice_ok = d == 1 and ctrl.constant is not None
    if recombine is None:
        recombine = lattice_ok
    if recombine and not lattice_ok:
        raise InputError("a recombining lattice needs d = 1 and a constant control")

    if recombine:
        step = h * (ctrl.constant + ridge)
        down, up = 1.0 - step, 1.0 + step
        if not (0.0 < down < 2.0 and 0.0 < up < 2.0):
            raise InputError(_POSITIVITY)
        ld, lu = math.log(down), math.log(up)
        ls = math.log(s[0])
        levels = tuple(
            np.clip(ls + ld * (k - np.arange(k + 1)) + lu * np.arange(k + 1), -_LOG_CLIP, _LOG_CLIP)[:, None]
            for k in range(n + 1)
        )
        return TreeMartingale(n, s, T, ridge, basis, ctrl, True, levels, (down, up))

    if n > max_tree_depth(d):
        raise InputError(f"non-recombining depth {n} exceeds the cap {max_tree_depth(d)} for d={d}")
    levels = [s[None, :]]
    for k in range(n):
        x = levels[-1]
        fac = _step_factors(basis, ctrl.matrices(k, x), h, ridge)
        if np.any(fac <= 0.0) or np.any(fac >= 2.0):
            raise InputError(_POSITIVITY)
        levels.append((x[:, None, :] * fac).reshape(-1, d))
    return TreeMartingale(n, s, T, ridge, basis, ctrl, False, tuple(levels))


# -- dynamic programming ----------------------------------------------------


@dataclass(frozen=True, eq=False)
class StoppingValue:
    value: float
    stop_region: tuple  # per level: bool flags, True where F + penalty attains the min
    control_used: dict


def optimal_stopping_dp(tree: TreeMartingale, option: GameOption) -> StoppingValue:
    """inf over stopping times of E[F(M(sigma)) + penalty * 1{sigma < n}].

    Terminal nodes pay F; stopping there is forced, so the terminal flags are
    all False.
    """
    if tree.dim != option.dim:
        raise InputError("tree and option have different dimensions")
    F, pen = option.payoff, option.penalty
    value = eval_payoff(F, tree.level(tree.depth))
    flags = [np.zeros(value.shape[0], dtype=bool)]
    probs = tree.basis.prob
    for k in range(tree.depth - 1, -1, -1):
        if tree.recombining:
            cont = 0.5 * (value[:-1] + value[1:])
        else:
            cont = value.reshape(-1, tree.dim + 1) @ probs
        stop = eval_payoff(F, tree.level(k)) + pen
        flags.append(stop <= cont)
        value = np.minimum(stop, cont)
    return StoppingValue(float(value[0]), tuple(reversed(flags)), tree.control.describe())


def discretization_allowance(option: GameOption, s, n: int, T: float = 1.0) -> float:
    """eps(n) = 3 L |s|_inf sqrt(T/n) c_max(n)."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    return 3.0 * option.payoff.lipschitz * float(np.max(s)) * math.sqrt(T / n) * c_max(n, T, option.dim)


@dataclass(frozen=True)
class DualBound:
    value: float
    control: dict
    evaluations: int
    exhausted: bool
    target: float  # R(s)
    allowance: float  # eps(n)

    @property
    def fraction(self) -> float:
        return self.value / self.target if self.target else math.nan

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "control": self.control,
            "evaluations": self.evaluations,
            "budget_exhausted": self.exhausted,
            "envelope_value": self.target,
            "fraction": self.fraction,
            "allowance": self.allowance,
        }


_GOLD = (math.sqrt(5.0) - 1.0) / 2.0


def dual_lower_bound(
    option: GameOption,
    s,
    n: int,
    control_family: Callable[[float], object] | str = "constant",
    budget: int = 80,
    c_range: tuple[float, float] | None = None,
    T: float = 1.0,
    grid_points: int = 17,
    xtol: float = 1e-4,
    env: EnvelopeData | None = None,
) -> DualBound:
    """Maximise the tree DP value over a scalar family of controls.

    ``control_family`` maps a scalar c to a control; the strings
    ``"constant"`` (c * I) and ``"two-regime"`` (c inside the continuation
    region, 0 elsewhere) are built in.  A coarse grid over ``c_range``
    brackets the maximum, then golden-section search refines it.
    """
    from .envelope import tangent_coefficients

    s = np.atleast_1d(np.asarray(s, dtype=float))
    env = env or tangent_coefficients(option)
    basis = build_increment_basis(option.dim)
    if c_range is None:
        c_range = (0.0, c_max(n, T, option.dim))
    lo, hi = map(float, c_range)
    if not 0 <= lo <= hi:
        raise InputError(f"bad control range {c_range}")
    if budget < 3:
        raise InputError("budget must allow at least three evaluations")
    if control_family == "constant":
        family = ConstantControl
    elif control_family == "two-regime":
        family = lambda c: TwoRegimeControl(env, c, 0.0)  # noqa: E731
    elif callable(control_family):
        family = control_family
    else:
        raise InputError(f"unknown control family {control_family!r}")

    seen: dict[float, float] = {}

    def value(c: float) -> float:
        if c not in seen:
            tree = build_tree(basis, s, n, family(c), T)
            seen[c] = optimal_stopping_dp(tree, option).value
        return seen[c]

    pts = list(np.linspace(lo, hi, max(2, min(grid_points, budget))))
    vals = parallel_map(value, pts)
    for c, v in zip(pts, vals):
        seen[c] = v
    evals = len(pts)
    i = int(np.argmax(vals))
    a = pts[max(i - 1, 0)]
    b = pts[min(i + 1, len(pts) - 1)]
    exhausted = False
    if b > a:
        x1 = b - _GOLD * (b - a)
        x2 = a + _GOLD * (b - a)
        f1, f2 = value(x1), value(x2)
        evals += 2
        while b - a > xtol * max(1.0, hi):
            if evals >= budget:
                exhausted = True
                break
            if f1 >= f2:
                b, x2, f2 = x2, x1, f1
                x1 = b - _GOLD * (b - a)
                f1 = value(x1)
            else:
                a, x1, f1 = x1, x2, f2
                x2 = a + _GOLD * (b - a)
                f2 = value(x2)
            evals += 1
    best_c = max(seen, key=seen.get)
    target = float(game_concave_envelope(env, s))
    return DualBound(
        seen[best_c],
        as_control(family(best_c)).describe(),
        evals,
        exhausted,
        target,
        discretization_allowance(option, s, n, T),
    )
