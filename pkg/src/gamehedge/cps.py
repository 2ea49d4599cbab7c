"""Martingale reweighting of atomic increments and the path-to-tree shadow
price construction.

A simulated discounted price path is snapped onto a tree martingale: at each
tree step it advances to the child whose straight-line corridor it stayed
inside, and freezes otherwise.  The snapped sequence, held constant between
tree dates, is the candidate shadow price; ``band_check`` verifies that the
real path stays within relative distance epsilon of it.
"""

from __future__ import annotations

import csv
import json
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linprog

from ._threads import parallel_map
from .errors import InputError, NumericalError
from .market import MarketPath
from .stopping import TreeMartingale

INTERIOR_THRESHOLD = 1e-10
_ARMIJO = 1e-4
_MAX_NEWTON = 200


@dataclass(frozen=True, eq=False)
class AtomicIncrementDistribution:
    atoms: np.ndarray  # (k, d)
    probs: np.ndarray  # (k,)

    def __post_init__(self) -> None:
        x = np.asarray(self.atoms, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        p = np.asarray(self.probs, dtype=float)
        if x.ndim != 2 or p.shape != (x.shape[0],) or x.shape[0] == 0:
            raise InputError("need k atoms of shape (k, d) and k probabilities")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(p))):
            raise InputError("atoms and probabilities must be finite")
        if np.any(p <= 0):
            raise InputError("probabilities must be strictly positive")
        if abs(p.sum() - 1.0) > 1e-14 * max(1, len(p)):
            raise InputError(f"probabilities sum to {p.sum():.17g}, not 1")
        object.__setattr__(self, "atoms", x)
        object.__setattr__(self, "probs", p)

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def interior_margin(self) -> float:
        """Largest t such that 0 = sum w_m x_m with w in the simplex and w >= t.

        Positive t with full-rank atoms means 0 lies in the interior of the
        convex hull.  Returns 0 when the atoms span a lower-dimensional set.
        """
        x = self.atoms
        k, d = x.shape
        if np.linalg.matrix_rank(x) < d:
            return 0.0
        # variables (w_1..w_k, t); minimise -t
        cost = np.zeros(k + 1)
        cost[-1] = -1.0
        a_eq = np.zeros((d + 1, k + 1))
        a_eq[:d, :k] = x.T
        a_eq[d, :k] = 1.0
        b_eq = np.zeros(d + 1)
        b_eq[d] = 1.0
        a_ub = np.hstack([-np.eye(k), np.ones((k, 1))])  # t - w_m <= 0
        res = linprog(cost, A_ub=a_ub, b_ub=np.zeros(k), A_eq=a_eq, b_eq=b_eq,
                      bounds=[(0, None)] * k + [(None, None)], method="highs")
        if res.status != 0:
            return 0.0
        return float(res.x[-1])

    def has_interior_zero(self) -> bool:
        return self.interior_margin() > INTERIOR_THRESHOLD


@dataclass(frozen=True, eq=False)
class EsscherResult:
    theta: np.ndarray
    new_probs: np.ndarray
    residual: float
    iterations: int


def _tilt(x: np.ndarray, logp: np.ndarray, theta: np.ndarray) -> tuple[float, np.ndarray]:
    z = logp + x @ theta
    top = z.max()
    w = np.exp(z - top)
    total = w.sum()
    return top + math.log(total), w / total


def esscher_theta(dist: AtomicIncrementDistribution, tol: float = 1e-12) -> EsscherResult:
    """theta with sum_m p_m exp(<theta, x_m>) x_m = 0, and the tilted law.

    Minimises psi(theta) = log sum_m p_m exp(<theta, x_m>), which has the same
    minimiser as the plain exponential sum but better conditioning, by Newton
    steps with Armijo backtracking.
    """
    if not dist.has_interior_zero():
        raise InputError("no interior point: 0 is not inside the convex hull of the atoms")
    x = dist.atoms
    logp = np.log(dist.probs)
    scale = float(np.abs(x).max())
    theta = np.zeros(dist.dim)
    psi, q = _tilt(x, logp, theta)
    for it in range(_MAX_NEWTON + 1):
        grad = q @ x
        res = float(np.linalg.norm(grad))
        if res <= tol * max(1.0, scale):
            return EsscherResult(theta, q, res, it)
        if it == _MAX_NEWTON:
            break
        centred = x - grad
        hess = (centred * q[:, None]).T @ centred
        step = -np.linalg.lstsq(hess, grad, rcond=None)[0]
        slope = float(grad @ step)
        if slope >= 0:  # singular Hessian direction: fall back to the gradient
            step, slope = -grad, -res**2
        # near the optimum the decrease in psi drops below rounding, so fall
        # back to requiring a smaller gradient there
        flat = abs(slope) <= 1e-12 * (1.0 + abs(psi))
        t = 1.0
        while True:
            cand = theta + t * step
            psi_c, q_c = _tilt(x, logp, cand)
            if psi_c <= psi + _ARMIJO * t * slope or t < 1e-16:
                break
            if flat and np.linalg.norm(q_c @ x) < res:
                break
            t *= 0.5
        theta, psi, q = cand, psi_c, q_c
    raise NumericalError(f"Esscher Newton iteration did not converge in {_MAX_NEWTON} steps (residual {res:.3g})")


# -- projection onto a tree ---------------------------------------------------


def _child_index(tree: TreeMartingale, k: int, j: int) -> np.ndarray:
    if tree.recombining:
        return np.array([j, j + 1])
    b = tree.dim + 1
    return np.arange(j * b, (j + 1) * b)


def min_sibling_gap(tree: TreeMartingale) -> float:
    """Smallest distance between two different children of a common node
    (inf when all siblings coincide)."""
    best = math.inf
    for k in range(tree.depth):
        ch = tree.children(k)  # (count, branches, d)
        diff = ch[:, :, None, :] - ch[:, None, :, :]
        dist = np.linalg.norm(diff, axis=-1)
        b = ch.shape[1]
        dist[:, np.arange(b), np.arange(b)] = np.inf
        dist[dist == 0.0] = np.inf
        best = min(best, float(dist.min()))
    return best


def default_delta(tree: TreeMartingale) -> float:
    """Half the smallest sibling gap divided by N + 1.

    A tree whose siblings all coincide (zero control, no ridge) imposes no
    separation; a radius of 1e-9 relative to the root is used then.
    """
    gap = min_sibling_gap(tree)
    if math.isinf(gap):
        return 1e-9 * (1.0 + float(np.abs(tree.root).max()))
    return 0.5 * gap / (tree.depth + 1)


def _substeps(path: MarketPath, tree: TreeMartingale) -> int:
    N = tree.depth
    steps = path.steps
    if steps % N:
        raise InputError(f"path has {steps} steps, not a multiple of the tree depth {N}")
    m = steps // N
    coarse = path.grid[::m]
    if not np.allclose(coarse, np.linspace(0.0, tree.maturity, N + 1), rtol=0, atol=1e-12 * tree.maturity):
        raise InputError("tree dates are not aligned with the path grid")
    return m


def project_path_to_tree(path: MarketPath, tree: TreeMartingale, delta: float | None = None) -> tuple[np.ndarray, int, np.ndarray]:
    """Snap the discounted path onto the tree.

    Returns the projected values M~(0..N) with shape (N+1, d), the freeze
    index (N+1 if the path never freezes), and the node indices visited
    (-1 after freezing).
    """
    if path.dim != tree.dim:
        raise InputError("path and tree have different dimensions")
    if delta is None:
        delta = default_delta(tree)
    gap = min_sibling_gap(tree)
    N = tree.depth
    if not 0 < delta < 0.5 * gap:
        raise InputError(f"delta={delta:.3g} too large for the tree (sibling gap {gap:.3g})")
    s = path.discounted
    if not np.allclose(s[0], tree.root, rtol=1e-12, atol=0):
        raise InputError("tree root differs from the discounted path start")
    m = _substeps(path, tree)
    frac = np.arange(m + 1) / m
    out = np.empty((N + 1, tree.dim))
    nodes = np.full(N + 1, -1)
    out[0] = s[0]
    nodes[0] = 0
    freeze = N + 1
    j = 0
    for k in range(N):
        x = out[k]
        kids = _child_index(tree, k, j)
        vals = tree.level(k + 1)[kids]  # (branches, d)
        seg = s[k * m : (k + 1) * m + 1]  # (m+1, d)
        line = x[None, None, :] + frac[None, :, None] * (vals[:, None, :] - x[None, None, :])
        dev = np.linalg.norm(seg[None] - line, axis=-1).max(axis=1)
        inside = np.flatnonzero(dev < (k + 1) * delta)
        if inside.size == 0:
            freeze = k + 1
            out[k + 1 :] = x
            break
        j = int(kids[inside[np.argmin(dev[inside])]])
        out[k + 1] = tree.level(k + 1)[j]
        nodes[k + 1] = j
    return out, freeze, nodes


@dataclass
class BandReport:
    epsilon: float
    violations: list = field(default_factory=list)  # (path id, time index, asset, ratio)
    paths_checked: int = 0
    unfrozen: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self, max_violations: int = 100) -> dict:
        return {
            "epsilon": self.epsilon,
            "ok": self.ok,
            "paths_checked": self.paths_checked,
            "unfrozen_paths": self.unfrozen,
            "violation_count": len(self.violations),
            "violations": [
                {"path_id": int(p), "time_index": int(t), "asset": int(i), "ratio": float(r)}
                for p, t, i, r in self.violations[:max_violations]
            ],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def shadow_on_grid(projected: np.ndarray, steps: int) -> np.ndarray:
    """Step function S^(t) = M~(floor(N t / T)) on a grid of ``steps`` intervals."""
    N = projected.shape[0] - 1
    if steps % N:
        raise InputError("grid steps must be a multiple of the tree depth")
    m = steps // N
    idx = np.minimum(np.arange(steps + 1) // m, N)
    return projected[idx]


def band_check(
    paths: Sequence[MarketPath],
    shadow: Sequence[tuple[np.ndarray, int]] | Sequence[np.ndarray],
    epsilon: float,
) -> BandReport:
    """Check 1 - eps < S~_i(t) / S^_i(t) < 1 + eps at grid times before freezing.

    ``shadow`` holds, per path, either a projected sequence with its freeze
    index (as returned by ``project_path_to_tree``) or a full array on the
    path grid, which is then checked everywhere.  For a projection frozen at
    index f, the tree intervals 0..f-2 are checked: on those the path is known
    to have followed the tree.
    """
    if epsilon < 0:
        raise InputError("epsilon must be nonnegative")
    if len(paths) != len(shadow):
        raise InputError("one shadow entry is needed per path")
    report = BandReport(float(epsilon), paths_checked=len(paths))

    def one(item):
        pid, (path, sh) = item
        s = path.discounted
        if isinstance(sh, tuple):
            seq, freeze = sh[0], int(sh[1])
            N = seq.shape[0] - 1
            hat = shadow_on_grid(seq, path.steps)
            m = path.steps // N
            upto = path.steps + 1 if freeze > N else max(freeze - 1, 0) * m
        else:
            hat = np.asarray(sh, dtype=float).reshape(s.shape)
            freeze, N = None, None
            upto = path.steps + 1
        ratio = s[:upto] / hat[:upto]
        bad = ~((ratio > 1.0 - epsilon) & (ratio < 1.0 + epsilon))
        viol = [(pid, int(t), int(i), float(ratio[t, i])) for t, i in zip(*np.nonzero(bad))]
        unfrozen = freeze is None or freeze > N
        return viol, unfrozen

    for viol, unfrozen in parallel_map(one, enumerate(zip(paths, shadow))):
        report.violations.extend(viol)
        report.unfrozen += bool(unfrozen)
    return report


# -- likelihood weights ---------------------------------------------------------


def likelihood_weights(tree: TreeMartingale, projections: Sequence[tuple[np.ndarray, int, np.ndarray]]) -> np.ndarray:
    """Per-path density process along the realised branches.

    At every visited node the empirical law of the observed child moves is
    tilted to a martingale law by the Esscher transform; the weight is the
    running product of new over empirical probabilities.  Weights are zero
    from the freeze index on and NaN where a node's observed moves do not
    surround zero (no martingale tilt exists).
    """
    N = tree.depth
    P = len(projections)
    nodes = np.array([pr[2] for pr in projections]).reshape(P, N + 1)
    ratio = np.ones((P, N))
    for k in range(N):
        live = np.flatnonzero(nodes[:, k + 1] >= 0)
        if live.size == 0:
            continue
        parent = nodes[live, k]
        for j in np.unique(parent):
            rows = live[parent == j]
            kids, counts = np.unique(nodes[rows, k + 1], return_counts=True)
            p_emp = counts / counts.sum()
            x = tree.level(k)[j]
            moves = tree.level(k + 1)[kids] - x
            try:
                tilt = esscher_theta(AtomicIncrementDistribution(moves, p_emp)).new_probs
            except (InputError, NumericalError):
                ratio[rows, k] = np.nan
                continue
            lookup = dict(zip(kids.tolist(), (tilt / p_emp).tolist()))
            ratio[rows, k] = [lookup[c] for c in nodes[rows, k + 1]]
    weights = np.concatenate([np.ones((P, 1)), np.cumprod(ratio, axis=1)], axis=1)
    frozen = np.array([pr[1] for pr in projections])
    for p, f in enumerate(frozen):
        if f <= N:
            weights[p, f:] = 0.0
    return weights


def write_weights_csv(weights: np.ndarray, out) -> None:
    own = isinstance(out, (str, Path))
    fh = open(out, "w", newline="") if own else out
    try:
        w = csv.writer(fh)
        w.writerow(["path_id", "step", "weight"])
        for p, row in enumerate(weights):
            for k, v in enumerate(row):
                w.writerow([p, k, repr(float(v))])
    finally:
        if own:
            fh.close()
