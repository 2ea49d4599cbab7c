"""Super-replication of game options with proportional transaction costs."""

from .envelope import (
    EnvelopeData,
    check_G_membership,
    check_relations_2plus20,
    game_concave_envelope,
    minimal_envelope_oracle_1d,
    tangent_coefficients,
)
from .errors import InputError, NumericalError
from .hedge import HedgeReport, Strategy, TrivialHedge, build_trivial_hedge, portfolio_value, static_hedge_search, verify_perfect_hedge
from .market import MarketModel, MarketPath, PathSet, discount, simulate
from .payoff import GameOption, MaxAffinePayoff, canonical_option, eval_payoff, section

__all__ = [
    "EnvelopeData",
    "GameOption",
    "HedgeReport",
    "InputError",
    "MarketModel",
    "MarketPath",
    "MaxAffinePayoff",
    "NumericalError",
    "PathSet",
    "Strategy",
    "TrivialHedge",
    "build_trivial_hedge",
    "canonical_option",
    "check_G_membership",
    "check_relations_2plus20",
    "discount",
    "eval_payoff",
    "game_concave_envelope",
    "minimal_envelope_oracle_1d",
    "portfolio_value",
    "section",
    "simulate",
    "static_hedge_search",
    "tangent_coefficients",
    "verify_perfect_hedge",
]
