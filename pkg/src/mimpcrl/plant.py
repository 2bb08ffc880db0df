"""The real system and its reference performance metric.

The plant is the noisy scalar integrator the controller actually runs
on: the continuous input only acts while the switch is on, and every
step picks up a uniformly distributed disturbance with positive mean.
The controller's internal model is a separate, deterministic object; the
gap between the two is exactly what learning has to absorb.

Closed-loop performance is the discounted sum of the reference stage
cost along plant trajectories, estimated by Monte Carlo from a fixed
initial state.  The reference cost is frozen: learning moves the
controller's parameters, never the measuring stick.
"""

import math
from dataclasses import dataclass

import numpy as np

from .atlas import ScalarValueAtlas
from .ocp import BASELINE_PARAMS, PenaltyBand, OcpSpec
from .policy import (
    ExplorationConfig,
    MixedAction,
    nominal_actions_vector,
    perturbation_stream,
    sample_actions_vector,
)

NOISE_LOW = 0.0
NOISE_HIGH = 0.05
INITIAL_STATE = 0.0
_BAND = PenaltyBand()


def baseline_stage_cost(s, a_c, a_i):
    """Reference cost; broadcasts over arrays.

    Quadratic in the state and continuous input around the origin, a flat
    price per switch-on, and a linear penalty outside the band.  The
    weights are the fixed reference values, independent of any learned
    parameters.
    """
    s = np.asarray(s, dtype=float)
    band_excess = np.maximum(np.abs(s) - _BAND.hi, 0.0)
    return (
        0.5 * s**2
        + 0.5 * np.asarray(a_c, dtype=float) ** 2
        + BASELINE_PARAMS.switch_cost * np.asarray(a_i, dtype=float)
        + BASELINE_PARAMS.penalty_weight * band_excess
    )


def step(s: float, action: MixedAction, rng: np.random.Generator) -> tuple[float, float]:
    """Advance the plant one step; returns (next state, stage cost paid)."""
    cost = float(baseline_stage_cost(s, action.continuous[0], action.integer[0]))
    noise = NOISE_LOW + (NOISE_HIGH - NOISE_LOW) * rng.random()
    s_next = s + float(action.continuous[0]) * float(action.integer[0]) + noise
    return s_next, cost


def horizon_for(discount: float, tail_cutoff: float = 1e-3) -> int:
    """Smallest step count whose remaining discount weight is below cutoff."""
    if not 0.0 <= discount < 1.0:
        raise ValueError("discount must lie in [0, 1)")
    if discount == 0.0:
        return 1
    horizon = max(1, math.ceil(math.log(tail_cutoff) / math.log(discount)))
    while discount**horizon > tail_cutoff:
        horizon += 1
    while horizon > 1 and discount ** (horizon - 1) <= tail_cutoff:
        horizon -= 1
    return horizon


@dataclass(frozen=True)
class EvaluationConfig:
    """Monte-Carlo closed-loop evaluation settings.

    ``horizon`` of None truncates where the discount tail drops below
    ``tail_cutoff``; the truncation bias is below cutoff times the mean
    stage cost over the stationary phase, negligible against the
    Monte-Carlo error at these sample sizes.
    """

    rollouts: int
    discount: float = 0.95
    exploration: ExplorationConfig = ExplorationConfig(2e-2, 1e-2)
    seed: int = 0
    deterministic: bool = False
    horizon: int | None = None
    tail_cutoff: float = 1e-3

    def __post_init__(self) -> None:
        if self.rollouts < 2:
            raise ValueError("need at least two rollouts for a standard error")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must lie in [0, 1)")

    def resolved_horizon(self) -> int:
        return self.horizon if self.horizon is not None else horizon_for(self.discount, self.tail_cutoff)


@dataclass(frozen=True)
class PerformanceEstimate:
    mean: float
    stderr: float
    rollouts: int
    horizon: int
    discount: float


def rollout_returns(
    policy_fn,
    rollouts: int,
    horizon: int,
    discount: float,
    rng: np.random.Generator,
    initial_state: float = INITIAL_STATE,
    stage_cost=baseline_stage_cost,
) -> np.ndarray:
    """Discounted returns of ``rollouts`` independent plant trajectories.

    ``policy_fn(states, rng)`` maps a state vector to (integer,
    continuous) action vectors.  All trajectories advance in lockstep;
    the draw order is policy first, then one noise draw per state.
    ``stage_cost`` exists for oracle tests that need a simpler metric;
    performance reporting always uses the reference cost.
    """
    s = np.full(rollouts, float(initial_state))
    returns = np.zeros(rollouts)
    weight = 1.0
    for _ in range(horizon):
        a_i, a_c = policy_fn(s, rng)
        returns += weight * stage_cost(s, a_c, a_i)
        noise = NOISE_LOW + (NOISE_HIGH - NOISE_LOW) * rng.random(rollouts)
        s = s + a_c * a_i + noise
        weight *= discount
    return returns


def closed_loop_performance(
    spec: OcpSpec,
    theta: np.ndarray,
    cfg: EvaluationConfig,
    atlas: ScalarValueAtlas | None = None,
) -> PerformanceEstimate:
    """Monte-Carlo estimate of the discounted cost of running the policy.

    The sampled (exploring) policy is what actually runs on the plant, so
    it is the default; ``cfg.deterministic`` evaluates the greedy variant
    instead.
    """
    atlas = atlas or ScalarValueAtlas(spec, theta)
    horizon = cfg.resolved_horizon()
    rng = perturbation_stream(cfg.seed, 2 if cfg.deterministic else 1)

    if cfg.deterministic:
        def policy_fn(states, _rng):
            return nominal_actions_vector(atlas, states)
    else:
        def policy_fn(states, step_rng):
            integer, continuous, _ = sample_actions_vector(atlas, states, cfg.exploration, step_rng)
            return integer, continuous

    returns = rollout_returns(policy_fn, cfg.rollouts, horizon, cfg.discount, rng)
    return PerformanceEstimate(
        mean=float(returns.mean()),
        stderr=float(returns.std(ddof=1) / np.sqrt(cfg.rollouts)),
        rollouts=cfg.rollouts,
        horizon=horizon,
        discount=cfg.discount,
    )
