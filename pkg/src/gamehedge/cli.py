"""Command-line interface.

Exit codes: 0 on success, 2 on bad input, 3 when a verification fails.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from .envelope import game_concave_envelope, ray_threshold, tangent_coefficients
from .errors import InputError, NumericalError
from .hedge import build_trivial_hedge, static_hedge_search, verify_perfect_hedge
from .market import MarketModel, counterexample_2_4_paths, read_paths_csv, simulate, stack_paths, write_paths_csv
from .payoff import GameOption, canonical_option, eval_payoff

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_VERIFY = 3


class VerificationFailed(Exception):
    """Raised after output is written when a check did not pass."""


# -- shared argument groups ---------------------------------------------------


def _add_option_args(p: argparse.ArgumentParser, payoff="call", K=100.0, delta=40.0) -> None:
    g = p.add_argument_group("option")
    g.add_argument("--option", type=Path, help="JSON option spec (overrides --payoff/--K/--delta)")
    g.add_argument("--payoff", choices=["call", "put", "spread"], default=payoff)
    g.add_argument("--K", type=float, default=K, help="strike")
    g.add_argument("--delta", type=float, default=delta, help="cancellation penalty")
    g.add_argument("--T", type=float, default=1.0, help="maturity")


def _add_output_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--output", type=Path, help="write the report here instead of stdout")


def _add_market_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("market")
    g.add_argument("--market", type=Path, help="JSON market spec (MarketModel fields)")
    g.add_argument("--sigma", type=float, default=0.4, help="GBM volatility when no --market is given")
    g.add_argument("--r", type=float, default=0.03, help="constant interest rate")
    g.add_argument("--mu", type=float, help="drift (defaults to --r)")
    g.add_argument("--paths", type=int, default=10_000)
    g.add_argument("--steps", type=int, default=500)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--paths-csv", type=Path, help="read paths from CSV instead of simulating")
    g.add_argument("--export-paths", type=Path, help="write the simulated paths to CSV")


def _option(args) -> GameOption:
    if args.option is not None:
        return GameOption.from_json(args.option)
    return canonical_option(args.payoff, args.K, args.delta, args.T)


def _point(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise InputError(f"cannot parse point {text!r}") from None


def _s(args, option: GameOption) -> np.ndarray:
    s = _point(args.s) if isinstance(args.s, str) else np.atleast_1d(args.s)
    if s.shape != (option.dim,):
        raise InputError(f"initial stock needs {option.dim} components")
    return s


def _positive(name: str, v) -> None:
    if v is None or v <= 0:
        raise InputError(f"--{name} must be positive")


def _emit(args, payload: dict, rows: list[list] | None = None, header: list[str] | None = None) -> None:
    if args.format == "csv" and rows is not None:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(header)
        w.writerows(rows)
        text = buf.getvalue()
    else:
        text = json.dumps(payload, indent=2, default=_jsonable) + "\n"
    if args.output:
        args.output.write_text(text)
    else:
        sys.stdout.write(text)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _num(v: float):
    """JSON has no infinity; render it as a string."""
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")


# -- commands ---------------------------------------------------------------


def _branch(env, x) -> str:
    if not np.any(x):
        return "origin"
    return "affine" if np.linalg.norm(x) < ray_threshold(env, x) else "cap"


def cmd_envelope(args) -> int:
    option = _option(args)
    env = tangent_coefficients(option)
    pts = [_point(a) for a in (args.at or [])]
    if args.grid:
        try:
            lo, hi, n = args.grid.split(":")
            pts += [np.full(option.dim, t) for t in np.linspace(float(lo), float(hi), int(n))]
        except ValueError:
            raise InputError("--grid expects lo:hi:count") from None
    rows, table = [], []
    for x in pts:
        if x.shape != (option.dim,):
            raise InputError(f"point {x.tolist()} has the wrong dimension")
        f = float(eval_payoff(option.payoff, x))
        r = float(game_concave_envelope(env, x))
        br = _branch(env, x)
        table.append({"x": x.tolist(), "F": f, "R": r, "branch": br})
        rows.append([*x.tolist(), f, r, br])
    payload = {"A": [_num(a) for a in env.A], "B": env.B.tolist(), "F0": env.base, "points": table}
    header = [f"x{i + 1}" for i in range(option.dim)] + ["F", "R", "branch"]
    _emit(args, payload, rows, header)
    return EXIT_OK


def _market(args, dim: int) -> MarketModel:
    if args.market is not None:
        try:
            spec = json.loads(args.market.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read market spec: {exc}") from exc
        return MarketModel.from_dict(spec)
    mu = args.r if args.mu is None else args.mu
    vol = tuple(tuple(args.sigma if i == j else 0.0 for j in range(dim)) for i in range(dim))
    return MarketModel(drift=(mu,) * dim, vol=vol, rate=args.r, rate_bound=max(0.1, args.r))


def _paths(args, option: GameOption, s: np.ndarray):
    if args.paths_csv is not None:
        ps = stack_paths(read_paths_csv(args.paths_csv))
    else:
        _positive("paths", args.paths)
        _positive("steps", args.steps)
        ps = simulate(_market(args, option.dim), s, args.steps, option.maturity, args.seed, args.paths)
    if args.export_paths is not None:
        write_paths_csv(ps, args.export_paths)
    return ps


def cmd_hedge_verify(args) -> int:
    option = _option(args)
    if not 0 < args.kappa < 1:
        raise InputError("--kappa must lie in (0, 1)")
    s = _s(args, option)
    env = tangent_coefficients(option)
    hedge = build_trivial_hedge(option, env, s)
    if args.capital_offset:
        hedge = hedge.with_capital(hedge.initial_capital + args.capital_offset)
    ps = _paths(args, option, s)
    report = verify_perfect_hedge(hedge, option, ps, args.kappa)
    if args.violations_csv:
        report.write_violations_csv(args.violations_csv)
    payload = {
        "envelope_value": float(game_concave_envelope(env, s)),
        "holdings": hedge.holdings.tolist(),
        "cancel_immediately": hedge.immediate,
        "kappa": args.kappa,
        **report.to_dict(),
    }
    rows = [[p, t, v] for p, t, v in report.violations]
    _emit(args, payload, rows, ["path_id", "time", "shortfall"])
    if not report.ok:
        raise VerificationFailed(f"{len(report.violations)} hedge violations")
    return EXIT_OK


def cmd_dual_bound(args) -> int:
    from .stopping import dual_lower_bound

    option = _option(args)
    s = _s(args, option)
    _positive("n", args.n)
    rng = (0.0, 0.0) if args.family == "zero" else None
    fam = "constant" if args.family == "zero" else args.family
    res = dual_lower_bound(option, s, args.n, fam, budget=args.budget, c_range=rng, T=option.maturity)
    payload = {"n": args.n, **res.to_dict()}
    row = [res.value, json.dumps(res.control), res.fraction, res.target, res.allowance, res.evaluations, res.exhausted]
    _emit(args, payload, [row], ["value", "control", "fraction", "envelope_value", "allowance", "evaluations", "budget_exhausted"])
    return EXIT_OK


def cmd_cps_check(args) -> int:
    from .cps import band_check, default_delta, likelihood_weights, project_path_to_tree, write_weights_csv
    from .stopping import RIDGE, build_increment_basis, build_tree

    _positive("tree-steps", args.tree_steps)
    _positive("substeps", args.substeps)
    _positive("paths", args.paths)
    if not 0 < args.move < 1:
        raise InputError("--move must lie in (0, 1)")
    N, T = args.tree_steps, args.T
    h = math.sqrt(T / N)
    tree = build_tree(build_increment_basis(1), [args.s], N, args.move / h - RIDGE, T)
    vol = args.vol if args.vol is not None else args.move / h
    model = MarketModel(drift=(0.0,), vol=((vol,),), rate=0.0)
    ps = simulate(model, [args.s], N * args.substeps, T, args.seed, args.paths)
    delta = args.snap if args.snap is not None else default_delta(tree)
    proj = [project_path_to_tree(p, tree, delta) for p in ps]
    report = band_check(list(ps), [(q[0], q[1]) for q in proj], args.epsilon)
    weights = likelihood_weights(tree, proj)
    if args.weights_csv:
        write_weights_csv(weights, args.weights_csv)
    payload = {
        "tree_steps": N,
        "relative_move": args.move,
        "delta": delta,
        "freeze_counts": np.bincount([q[1] for q in proj], minlength=N + 2).tolist(),
        "positive_weight_paths": int(np.sum(weights[:, -1] > 0)),
        **report.to_dict(),
    }
    rows = [[p, k, float(v)] for p, row in enumerate(weights) for k, v in enumerate(row)]
    _emit(args, payload, rows, ["path_id", "step", "weight"])
    if not report.ok:
        raise VerificationFailed(f"{len(report.violations)} band violations")
    return EXIT_OK


# -- worked examples ----------------------------------------------------------


def _check(results: list, name: str, expected, observed, tol: float = 1e-10) -> None:
    e = np.asarray(expected, dtype=float)
    o = np.asarray(observed, dtype=float)
    both_inf = np.isinf(e) & np.isinf(o) & (np.sign(e) == np.sign(o))
    e_f, o_f = np.where(both_inf, 0.0, e), np.where(both_inf, 0.0, o)
    ok = bool(np.all(both_inf | (np.abs(e_f - o_f) <= tol * (1.0 + np.abs(e_f)))))
    status = "PASS" if ok else "FAIL"
    if e.size > 4:
        err = float(np.max(np.abs(e_f - o_f), initial=0.0))
        results.append({"check": name, "expected": f"{e.size} values", "observed": f"max error {err:.3g}", "status": status})
    else:
        results.append({"check": name, "expected": _listify(e), "observed": _listify(o), "status": status})


def _listify(a: np.ndarray):
    v = a.tolist()
    if isinstance(v, list):
        return [_num(x) for x in v]
    return _num(v)


def _one_dim_example(args, payoff: str, K: float, delta: float, formula, s: float, results: list) -> dict:
    option = canonical_option(payoff, K, delta, args.T)
    env = tangent_coefficients(option)
    xs = np.linspace(0.0, 3.0 * K, 61)
    _check(results, "R matches closed form", [formula(x) for x in xs], game_concave_envelope(env, xs[:, None]))
    hedge = build_trivial_hedge(option, env, [s])
    if hedge.immediate:
        _check(results, "hedge cancels at once with capital F(s)+penalty", float(option.payoff([s])) + delta, hedge.initial_capital)
    else:
        _check(results, "hedge capital equals R(s)", formula(s), hedge.initial_capital)
    ps = simulate(MarketModel(drift=(args.r,), vol=((0.4,),), rate=args.r), [s], 200, args.T, args.seed, args.paths)
    rep = verify_perfect_hedge(hedge, option, ps, 0.01)
    _check(results, "simulated hedge violations", 0, len(rep.violations), 0)
    return {"A": [_num(a) for a in env.A], "B": env.B.tolist(), "s": s, "holdings": hedge.holdings.tolist(), "hedge": rep.to_dict()}


def _spread_example(args, K: float, delta: float, results: list) -> dict:
    option = canonical_option("spread", K, delta, args.T)
    env = tangent_coefficients(option)
    rng = np.random.default_rng(args.seed)
    pts = rng.uniform(0.0, 3.0 * max(K, delta), size=(400, 2))
    F = lambda x: max(x[0] - x[1] + K, 0.0)  # noqa: E731
    if delta > K:
        exp = [F(x) + delta if (x[0] >= delta - K and x[1] >= delta) else x[0] + K for x in pts]
        _check(results, "A", [math.inf, math.inf], env.A)
        _check(results, "B", [1.0, 0.0], env.B)
    else:
        c = (K - delta) / K
        exp = [x[0] + K - c * x[1] if x[1] < K else F(x) + delta for x in pts]
        _check(results, "A", [math.inf, K], env.A)
        _check(results, "B", [1.0, -c], env.B)
    _check(results, "R matches closed form", exp, game_concave_envelope(env, pts))
    return {"A": [_num(a) for a in env.A], "B": env.B.tolist()}


def cmd_example(args) -> int:
    name = args.name
    results: list = []
    extra: dict = {}
    _positive("paths", args.paths)
    if name in ("call-i", "call-ii", "put-i", "put-ii"):
        K = args.K if args.K is not None else 100.0
        delta = args.delta if args.delta is not None else (1.5 * K if name.endswith("-i") else 0.4 * K)
        if name.endswith("-i") != (delta > K):
            raise InputError(f"{name} needs penalty {'>' if name.endswith('-i') else '<='} K")
        if name.startswith("call"):
            formula = (lambda x: x) if delta > K else (lambda x: delta * x / K if x < K else x + delta - K)
            s = args.s if args.s is not None else 0.5 * K
            extra = _one_dim_example(args, "call", K, delta, formula, s, results)
        else:
            formula = (lambda x: K) if delta > K else (lambda x: K - (K - delta) / K * x if x < K else delta)
            s = args.s if args.s is not None else 0.8 * K
            extra = _one_dim_example(args, "put", K, delta, formula, s, results)
    elif name in ("callput-i", "callput-ii"):
        K = args.K if args.K is not None else 2.0
        delta = args.delta if args.delta is not None else (1.5 * K if name.endswith("-i") else 0.5 * K)
        if name.endswith("-i") != (delta > K):
            raise InputError(f"{name} needs penalty {'>' if name.endswith('-i') else '<='} K")
        extra = _spread_example(args, K, delta, results)
    elif name == "ex2.3":
        res = static_hedge_search(args.r, args.T)
        _check(results, "static hedge value", 4.0 - math.exp(-args.r * args.T), res.capital, 1e-6)
        _check(results, "gamma", 1.0, res.gamma, 1e-6)
        _check(results, "cancellation level", 3.0, res.level, 1e-6)
        extra = {"capital": res.capital, "gamma": res.gamma, "level": res.level, "evaluations": res.evaluations}
    elif name == "ex2.4":
        ps = counterexample_2_4_paths(args.steps, args.T, args.seed, args.paths)
        y = np.maximum(0.5 - ps.stock[:, :, 0], 0.0) / ps.bank
        worst = float(y.max())
        results.append({"check": "Y <= 1/4 on every path", "expected": 0.25, "observed": worst,
                        "status": "PASS" if worst <= 0.25 + 1e-12 else "FAIL"})
        env = tangent_coefficients(canonical_option("put", 0.5, 1.0, args.T))
        extra = {"max_Y": worst, "bounded_rate_price": float(game_concave_envelope(env, [1.0])), "paths": args.paths}
    else:  # pragma: no cover - argparse restricts choices
        raise InputError(f"unknown example {name}")
    payload = {"example": name, "checks": results, **extra}
    rows = [[r["check"], json.dumps(r["expected"]), json.dumps(r["observed"]), r["status"]] for r in results]
    _emit(args, payload, rows, ["check", "expected", "observed", "status"])
    if any(r["status"] != "PASS" for r in results):
        raise VerificationFailed(f"example {name} failed")
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gamehedge", description="Super-replication of game options under transaction costs.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("envelope", help="tangent coefficients and envelope values")
    _add_option_args(p)
    p.add_argument("--at", action="append", help="evaluation point, comma separated; repeatable")
    p.add_argument("--grid", help="diagonal grid lo:hi:count")
    _add_output_args(p)
    p.set_defaults(func=cmd_envelope)

    p = sub.add_parser("hedge-verify", help="build the cheapest trivial hedge and check it on paths")
    _add_option_args(p)
    _add_market_args(p)
    p.add_argument("--s", default="50", help="initial stock, comma separated")
    p.add_argument("--kappa", type=float, default=0.01)
    p.add_argument("--capital-offset", type=float, default=0.0, help="added to the hedge capital")
    p.add_argument("--violations-csv", type=Path)
    _add_output_args(p)
    p.set_defaults(func=cmd_hedge_verify)

    p = sub.add_parser("dual-bound", help="tree optimal-stopping lower bound")
    _add_option_args(p)
    p.add_argument("--s", default="50", help="initial stock, comma separated")
    p.add_argument("--n", type=int, default=2000, help="tree depth")
    p.add_argument("--family", choices=["constant", "two-regime", "zero"], default="constant")
    p.add_argument("--budget", type=int, default=80)
    _add_output_args(p)
    p.set_defaults(func=cmd_dual_bound)

    p = sub.add_parser("cps-check", help="project GBM paths onto a tree and check the price band")
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--move", type=float, default=0.015, help="relative tree move per step")
    p.add_argument("--tree-steps", type=int, default=3)
    p.add_argument("--substeps", type=int, default=2, help="path steps per tree step")
    p.add_argument("--s", type=float, default=100.0)
    p.add_argument("--vol", type=float, help="path volatility (defaults to the tree's)")
    p.add_argument("--snap", type=float, help="snap radius delta (default: from the tree)")
    p.add_argument("--T", type=float, default=1.0)
    p.add_argument("--paths", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--weights-csv", type=Path)
    _add_output_args(p)
    p.set_defaults(func=cmd_cps_check)

    p = sub.add_parser("example", help="reproduce a worked example")
    p.add_argument("name", choices=["call-i", "call-ii", "put-i", "put-ii", "callput-i", "callput-ii", "ex2.3", "ex2.4"])
    p.add_argument("--K", type=float, help="strike (default 100, or 2 for the spread)")
    p.add_argument("--delta", type=float)
    p.add_argument("--s", type=float)
    p.add_argument("--r", type=float, default=0.03)
    p.add_argument("--T", type=float, default=1.0)
    p.add_argument("--paths", type=int, default=1000)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    _add_output_args(p)
    p.set_defaults(func=cmd_example)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except VerificationFailed as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
