"""Episode planners.

Two action abstractions coexist: outcome enumeration picks a target
win/lose sequence directly (a forced winner pays the unconditional HOB
mean), while dynamic programming picks bids from a grid and wins
stochastically at the auction.  A closed-form continuation-value bid serves
as the exact continuous-bid optimum for testing the grid planner.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .model import (
    DELAY_NEVER,
    INITIAL_STATE,
    AuctionModel,
    Bounds,
    DelayIndex,
    ExposureState,
    ThetaIndex,
    TrueModel,
    delay_index,
    expected_payment,
    hob_mean,
    lose_index,
    next_state,
    reachable_states,
    win_index,
    win_probability,
)

__all__ = [
    "PlanParams",
    "OutcomePlan",
    "PolicyTable",
    "params_from_true",
    "outcome_value",
    "best_outcome_plan",
    "dp_policy",
    "closed_form_bid",
    "closed_form_policy",
    "policy_value",
    "default_bid_grid",
    "oracle_value",
]

MAX_ENUMERATION_H = 20

OutcomePlan = tuple[bool, ...]


@dataclass(frozen=True)
class PlanParams:
    """Everything planning needs for one customer: per-index conversion
    means at this context, delay factors, the auction view, the context
    itself, and the bid cap."""

    mu: Mapping[ThetaIndex, float]
    delay: Mapping[DelayIndex, float]
    auction: AuctionModel
    x: np.ndarray
    B_A: float

    def __post_init__(self) -> None:
        if any(v < 0 for v in self.mu.values()):
            raise ValueError("conversion means must be clamped nonnegative")
        if self.delay.get(DELAY_NEVER) != 1.0:
            raise ValueError("the never-exposed delay factor is fixed at 1")
        if self.B_A <= 0:
            raise ValueError("bid cap must be positive")

    @property
    def H(self) -> int:
        return self.auction.beta.shape[0]


def params_from_true(
    x: np.ndarray, m: TrueModel, a: AuctionModel, B_A: float = float("inf")
) -> PlanParams:
    """Plan against the true parameters (the oracle's view)."""
    mu = {idx: float(vec @ x) for idx, vec in m.theta.items()}
    return PlanParams(mu=mu, delay=dict(m.delay), auction=a, x=x, B_A=B_A)


def _forced_round_reward(
    params: PlanParams, h: int, s: ExposureState, won: bool
) -> float:
    # shared by outcome enumeration and forced-mode DP so their candidate
    # values agree bit for bit
    if won:
        return params.mu[win_index(s.s1)] - hob_mean(h, params.x, params.auction)
    return params.delay[delay_index(s.s1)] * params.mu[lose_index(s.s2)]


def _auction_round_reward(
    params: PlanParams, h: int, s: ExposureState, bid: float
) -> float:
    mu_lose = params.delay[delay_index(s.s1)] * params.mu[lose_index(s.s2)]
    if bid <= 0:
        return mu_lose
    F = win_probability(h, bid, params.x, params.auction)
    mu_win = params.mu[win_index(s.s1)]
    return (
        mu_lose * (1.0 - F)
        + mu_win * F
        - expected_payment(h, bid, params.x, params.auction)
    )


def outcome_value(plan: OutcomePlan, params: PlanParams) -> float:
    """Expected episode value of a target outcome sequence.

    Contributions are accumulated from the last round backward, matching
    the dynamic program's evaluation order exactly.
    """
    H = params.H
    if len(plan) != H:
        raise ValueError(f"plan must cover all {H} rounds")
    s = INITIAL_STATE
    contributions = []
    for h, won in enumerate(plan, start=1):
        contributions.append(_forced_round_reward(params, h, s, won))
        if h < H:
            s = next_state(s, won)
    total = 0.0
    for c in reversed(contributions):
        total += c
    return total


def best_outcome_plan(params: PlanParams) -> tuple[OutcomePlan, float]:
    """Exhaustive maximum over all 2^H outcome sequences; ties go to the
    lexicographically smallest plan (lose before win)."""
    H = params.H
    if H > MAX_ENUMERATION_H:
        raise ValueError(f"enumeration capped at H <= {MAX_ENUMERATION_H}")
    best_plan: OutcomePlan | None = None
    best = -float("inf")
    for plan in itertools.product((False, True), repeat=H):
        v = outcome_value(plan, params)
        if v > best:
            best_plan, best = plan, v
    return best_plan, best


@dataclass(frozen=True)
class PolicyTable:
    """Bids and continuation values on every reachable (round, state)."""

    bids: dict[tuple[int, ExposureState], float]
    values: dict[tuple[int, ExposureState], float]

    @property
    def value(self) -> float:
        return self.values[(1, INITIAL_STATE)]

    def act(self, h: int, s: ExposureState) -> float:
        return self.bids[(h, s)]


def dp_policy(
    params: PlanParams, bid_grid: np.ndarray, mode: str = "auction"
) -> PolicyTable:
    """Backward induction over reachable states on a fixed bid grid.

    Auction mode scores each bid by its expected round reward plus the
    win-probability mixture of successor values.  Forced mode treats any
    positive grid bid as a guaranteed win (paying the HOB mean) and zero as
    a guaranteed loss.  Ties go to the lower bid.
    """
    if mode not in ("auction", "forced"):
        raise ValueError(f"unknown planning mode {mode!r}")
    grid = [float(g) for g in bid_grid]
    if not grid or sorted(grid) != grid:
        raise ValueError("bid grid must be nonempty and ascending")
    if grid[0] < 0 or grid[-1] > params.B_A:
        raise ValueError("bid grid must lie in [0, B_A]")
    H = params.H
    bids: dict[tuple[int, ExposureState], float] = {}
    values: dict[tuple[int, ExposureState], float] = {}
    layers = reachable_states(H)
    for h in range(H, 0, -1):
        for s in layers[h - 1]:
            v_win = values[(h + 1, next_state(s, True))] if h < H else 0.0
            v_lose = values[(h + 1, next_state(s, False))] if h < H else 0.0
            best_bid, best = None, -float("inf")
            for a in grid:
                if mode == "forced":
                    if a == 0.0:
                        q = _forced_round_reward(params, h, s, False) + v_lose
                    else:
                        q = _forced_round_reward(params, h, s, True) + v_win
                else:
                    F = win_probability(h, a, params.x, params.auction)
                    q = (
                        _auction_round_reward(params, h, s, a)
                        + F * v_win
                        + (1.0 - F) * v_lose
                    )
                if q > best:
                    best_bid, best = a, q
            bids[(h, s)] = best_bid
            values[(h, s)] = best
    return PolicyTable(bids=bids, values=values)


def closed_form_bid(
    h: int,
    s: ExposureState,
    params: PlanParams,
    V_next: Callable[[ExposureState], float],
) -> float:
    """Truthful second-price bid with continuation values: the marginal
    value of winning this round, clamped to [0, B_A]."""
    marginal = (
        params.mu[win_index(s.s1)]
        - params.delay[delay_index(s.s1)] * params.mu[lose_index(s.s2)]
        + V_next(next_state(s, True))
        - V_next(next_state(s, False))
    )
    return min(max(marginal, 0.0), params.B_A)


def closed_form_policy(params: PlanParams) -> PolicyTable:
    """Backward induction with the exact continuous-bid maximizer at every
    state; the optimal auction-mode policy."""
    H = params.H
    bids: dict[tuple[int, ExposureState], float] = {}
    values: dict[tuple[int, ExposureState], float] = {}
    layers = reachable_states(H)
    for h in range(H, 0, -1):
        for s in layers[h - 1]:
            if h < H:
                v_next = lambda succ: values[(h + 1, succ)]
            else:
                v_next = lambda succ: 0.0
            a = closed_form_bid(h, s, params, v_next)
            F = win_probability(h, a, params.x, params.auction)
            v_win = values[(h + 1, next_state(s, True))] if h < H else 0.0
            v_lose = values[(h + 1, next_state(s, False))] if h < H else 0.0
            bids[(h, s)] = a
            values[(h, s)] = (
                _auction_round_reward(params, h, s, a)
                + F * v_win
                + (1.0 - F) * v_lose
            )
    return PolicyTable(bids=bids, values=values)


def policy_value(
    params: PlanParams, bid_fn: Callable[[int, ExposureState], float]
) -> float:
    """Expected episode value of a fixed bid rule under these parameters
    (auction semantics), by backward induction over reachable states."""
    H = params.H
    values: dict[tuple[int, ExposureState], float] = {}
    layers = reachable_states(H)
    for h in range(H, 0, -1):
        for s in layers[h - 1]:
            a = float(bid_fn(h, s))
            F = win_probability(h, a, params.x, params.auction)
            v_win = values[(h + 1, next_state(s, True))] if h < H else 0.0
            v_lose = values[(h + 1, next_state(s, False))] if h < H else 0.0
            values[(h, s)] = (
                _auction_round_reward(params, h, s, a)
                + F * v_win
                + (1.0 - F) * v_lose
            )
    return values[(1, INITIAL_STATE)]


def default_bid_grid(bounds: Bounds, points: int = 256) -> np.ndarray:
    """Zero plus log-spaced bids from b/100 up to the cap."""
    return np.concatenate(
        [[0.0], np.geomspace(bounds.b * 1e-2, bounds.B_A, points)]
    )


def oracle_value(
    x: np.ndarray,
    m: TrueModel,
    a: AuctionModel,
    mode: str = "outcome",
    bounds: Bounds | None = None,
) -> float:
    """Best achievable expected episode value under the true parameters.

    Outcome mode maximizes over target outcome sequences; dp mode runs the
    grid planner (requires bounds for the bid grid)."""
    if mode == "outcome":
        params = params_from_true(x, m, a)
        return best_outcome_plan(params)[1]
    if mode == "dp":
        if bounds is None:
            raise ValueError("dp mode needs bounds for the bid grid")
        params = params_from_true(x, m, a, B_A=bounds.B_A)
        return dp_policy(params, default_bid_grid(bounds)).value
    raise ValueError(f"unknown oracle mode {mode!r}")
