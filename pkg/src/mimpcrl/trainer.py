"""Actor-critic training of the mixed-integer control policy.

One learning step evaluates the current policy's value function exactly,
collects an on-policy batch with everything the gradient estimators need
per transition (score, input sensitivity, exploration geometry), fits
the compatible approximator's weights, and descends the parameters along
the chosen gradient estimate.

Two estimators of the same gradient are always assembled: the direct
form weights the scores with the critic's true advantage and the input
sensitivities with its finite-difference slope, while the compatible
form replaces both by the fitted linear approximator.  Their agreement
over a run is the numerical check of the compatibility construction, so
both land in every log record.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import numpy as np

from .atlas import ScalarValueAtlas
from .critic import (
    AdvantageFit,
    CriticConfig,
    ValueGrid,
    advantage,
    feature_vector,
    fit_weights,
    policy_evaluation,
)
from .ipsolver import PinnedProfileNlp, solve_fixed_profile
from .minlp import integer_value_table
from .ocp import MpcParams, OcpSpec
from .plant import (
    EvaluationConfig,
    PerformanceEstimate,
    baseline_stage_cost,
    closed_loop_performance,
    step,
)
from .policy import ExplorationConfig, MixedAction, PolicySample, perturbation_stream, sample_action
from .sens import (
    ExplorationMoments,
    exploration_moments,
    integer_score,
    solution_sensitivity,
    value_gradient,
)

logger = logging.getLogger(__name__)

# stream tags 1 and 2 belong to the closed-loop evaluator
_BATCH_STREAM = 3
_EVAL_STREAM = 4

_PENALTY_INDEX = [f.name for f in fields(MpcParams)].index("penalty_weight")


@dataclass(frozen=True)
class TransitionRecord:
    """One visited transition with its estimator ingredients.

    ``score`` differentiates the log-probability of the drawn integer;
    ``input_jacobian`` is the nominal first input's parameter sensitivity
    on the drawn branch; ``moments`` carries the tilt-gain Gram matrix
    and curvature bias of the continuous exploration.
    """

    state: float
    sample: PolicySample
    stage_cost: float
    next_state: float
    score: np.ndarray
    input_jacobian: np.ndarray
    moments: ExplorationMoments


@dataclass(frozen=True)
class TransitionBatch:
    """On-policy records collected under one parameter vector."""

    records: tuple[TransitionRecord, ...]
    theta: np.ndarray
    exploration: ExplorationConfig
    rollouts: int
    horizon: int

    def __post_init__(self) -> None:
        if len(self.records) != self.rollouts * self.horizon:
            raise ValueError("record count must equal rollouts * horizon")
        if len(self.records) <= self.theta.size:
            raise ValueError("batch must contain more records than parameters")

    def __len__(self) -> int:
        return len(self.records)

    def features(self) -> np.ndarray:
        """Compatible feature vectors, one row per record."""
        return np.stack(
            [
                feature_vector(
                    r.score,
                    r.input_jacobian,
                    r.moments,
                    r.sample.offset,
                    self.exploration.continuous_scale,
                )
                for r in self.records
            ]
        )

    def advantages(
        self, table: ValueGrid, discount: float, stage_cost=baseline_stage_cost
    ) -> np.ndarray:
        """Critic advantage at every visited state-action pair."""
        return np.array(
            [
                advantage(r.state, r.sample.action, table, discount, stage_cost=stage_cost)
                for r in self.records
            ]
        )


def collect_batch(
    spec: OcpSpec,
    theta: np.ndarray,
    exploration: ExplorationConfig,
    rollouts: int = 30,
    horizon: int = 50,
    *,
    seed: int = 0,
    stream_key: tuple[int, ...] = (),
    initial_state: float = 0.0,
    atlas: ScalarValueAtlas | None = None,
    tau_target: float = 1e-9,
    curvature_step: float = 1e-4,
) -> TransitionBatch:
    """Roll the stochastic policy on the plant and record every transition.

    Each rollout starts from ``initial_state`` on its own random
    substream, so the batch is reproducible regardless of collection
    order.  Branch solves warm-start from the previous step of the same
    rollout; a stalled warm solve falls back to a cold one before the
    batch is abandoned.
    """
    theta = np.asarray(theta, dtype=float)
    atlas = atlas or ScalarValueAtlas(spec, theta)
    records: list[TransitionRecord] = []
    for rollout in range(rollouts):
        rng = perturbation_stream(seed, _BATCH_STREAM, *stream_key, rollout)
        s = float(initial_state)
        warm = {}
        for k in range(horizon):
            try:
                s, record = _collect_record(
                    spec, s, theta, exploration, rng, atlas, warm,
                    tau_target, curvature_step,
                )
            except Exception as err:
                raise RuntimeError(
                    f"batch collection aborted at record {len(records)} "
                    f"(rollout {rollout}, step {k}): {err}"
                ) from err
            records.append(record)
    return TransitionBatch(
        records=tuple(records),
        theta=theta,
        exploration=exploration,
        rollouts=rollouts,
        horizon=horizon,
    )


def _collect_record(
    spec: OcpSpec,
    s: float,
    theta: np.ndarray,
    exploration: ExplorationConfig,
    rng: np.random.Generator,
    atlas: ScalarValueAtlas,
    warm: dict,
    tau_target: float,
    curvature_step: float,
) -> tuple[float, TransitionRecord]:
    table = integer_value_table(spec, s, theta, atlas=atlas, tau_target=tau_target)
    sample = sample_action(
        spec, s, theta, exploration, rng, atlas=atlas, table=table,
        tau_target=tau_target,
    )
    first = int(sample.action.integer[0])
    grads = {}
    solved = {}
    for entry in table.entries:
        if not entry.feasible:
            continue
        branch = entry.first
        bits = atlas.completion(s, branch)[0]
        nlp = PinnedProfileNlp(
            spec, s, theta, bits.reshape(spec.horizon, spec.n_i).astype(float)
        )
        report = solve_fixed_profile(nlp, tau_target=tau_target, warm_start=warm.get(branch))
        if report.status == "max_iter" and warm.get(branch) is not None:
            # the previous step's point can be dynamically inconsistent here
            report = solve_fixed_profile(nlp, tau_target=tau_target)
        if not report.solved:
            raise RuntimeError(f"pinned solve of branch {branch} failed: {report.message}")
        warm[branch] = report.point
        grads[branch] = value_gradient(nlp, report.point)
        solved[branch] = (nlp, report.point)
    score = integer_score(table, grads, first, exploration.integer_temperature)
    nlp, point = solved[first]
    sensitivity = solution_sensitivity(nlp, point)
    moments = exploration_moments(
        spec, s, theta, nlp.profile, exploration.continuous_scale,
        tau_target=tau_target, curvature_step=curvature_step, point=point,
    )
    s_next, cost = step(s, sample.action, rng)
    record = TransitionRecord(
        state=s,
        sample=sample,
        stage_cost=cost,
        next_state=s_next,
        score=score,
        input_jacobian=sensitivity.first_input_wrt_theta,
        moments=moments,
    )
    return s_next, record


@dataclass(frozen=True)
class GradientEstimate:
    """Both gradient estimates with their integer/continuous split.

    A mode that was not requested stays None; anything computed must be
    finite (a NaN gradient would silently corrupt the whole run).
    """

    direct: np.ndarray | None
    compatible: np.ndarray | None
    direct_terms: tuple[np.ndarray, np.ndarray] | None
    compatible_terms: tuple[np.ndarray, np.ndarray] | None
    samples: int

    def __post_init__(self) -> None:
        for part in (self.direct, self.compatible):
            if part is not None and not np.all(np.isfinite(part)):
                raise ValueError("gradient estimate must be finite")


def hybrid_gradient(
    batch: TransitionBatch,
    mode: str = "both",
    *,
    table: ValueGrid | None = None,
    discount: float | None = None,
    fit: AdvantageFit | None = None,
    advantage_fn=None,
    fd_step: float = 1e-4,
    stage_cost=baseline_stage_cost,
) -> GradientEstimate:
    """Sample-average policy gradient from one batch.

    The direct mode weights scores with the advantage and the input
    sensitivities with its central-difference slope in the continuous
    action; ``advantage_fn(record, action)`` defaults to the critic
    advantage from ``table`` and ``discount``.  The compatible mode uses
    the fitted approximator and its exact slope instead.
    """
    if mode not in ("direct", "compatible", "both"):
        raise ValueError(f"unknown gradient mode {mode!r}")
    want_direct = mode in ("direct", "both")
    want_compat = mode in ("compatible", "both")
    count = len(batch.records)
    direct = direct_terms = None
    compat = compat_terms = None
    if want_direct:
        if advantage_fn is None:
            if table is None or discount is None:
                raise ValueError(
                    "direct estimator needs the critic table and discount "
                    "(or an explicit advantage_fn)"
                )

            def advantage_fn(record, action):
                return advantage(record.state, action, table, discount, stage_cost=stage_cost)

        integer_term = np.zeros(batch.theta.size)
        continuous_term = np.zeros(batch.theta.size)
        for record in batch.records:
            action = record.sample.action
            value = advantage_fn(record, action)
            slope = _action_slope(advantage_fn, record, action, fd_step)
            integer_term += record.score * value
            continuous_term += record.input_jacobian.T @ slope
        direct_terms = (integer_term / count, continuous_term / count)
        direct = direct_terms[0] + direct_terms[1]
    if want_compat:
        if fit is None:
            raise ValueError("compatible estimator needs fitted weights")
        scale = batch.exploration.continuous_scale
        integer_term = np.zeros(batch.theta.size)
        continuous_term = np.zeros(batch.theta.size)
        for record in batch.records:
            psi = feature_vector(
                record.score,
                record.input_jacobian,
                record.moments,
                record.sample.offset,
                scale,
            )
            integer_term += record.score * float(fit.weights @ psi)
            slope = record.moments.gain_gram @ (record.input_jacobian @ fit.weights)
            continuous_term += record.input_jacobian.T @ (slope / scale)
        compat_terms = (integer_term / count, continuous_term / count)
        compat = compat_terms[0] + compat_terms[1]
    return GradientEstimate(
        direct=direct,
        compatible=compat,
        direct_terms=direct_terms,
        compatible_terms=compat_terms,
        samples=count,
    )


def _action_slope(advantage_fn, record: TransitionRecord, action: MixedAction, fd_step: float) -> np.ndarray:
    slope = np.zeros(action.continuous.size)
    for j in range(slope.size):
        bump = np.zeros(slope.size)
        bump[j] = fd_step
        up = MixedAction(continuous=action.continuous + bump, integer=action.integer)
        down = MixedAction(continuous=action.continuous - bump, integer=action.integer)
        slope[j] = (advantage_fn(record, up) - advantage_fn(record, down)) / (2.0 * fd_step)
    return slope


@dataclass(frozen=True)
class TrainSettings:
    """Everything one learning run depends on."""

    steps: int = 100
    learning_rate: float = 2e-3
    discount: float = 0.95
    exploration: ExplorationConfig = ExplorationConfig(
        integer_temperature=2e-2, continuous_scale=1e-2
    )
    rollouts: int = 30
    rollout_horizon: int = 50
    initial_state: float = 0.0
    seed: int = 0
    update_mode: str = "compatible"
    evaluation_rollouts: int = 1000
    critic: CriticConfig = CriticConfig()
    tau_target: float = 1e-9
    fd_step: float = 1e-4
    curvature_step: float = 1e-4
    adapt_mask: tuple[bool, ...] | None = None

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("a run needs at least one step")
        if self.learning_rate < 0.0:
            raise ValueError("learning_rate cannot be negative")
        if self.update_mode not in ("compatible", "direct"):
            raise ValueError(f"unknown update mode {self.update_mode!r}")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must lie in [0, 1)")
        if self.adapt_mask is not None and not any(self.adapt_mask):
            raise ValueError("adapt_mask must leave at least one parameter free")


@dataclass(frozen=True)
class StepRecord:
    """Log entry for one learning step, evaluated at its ``theta``."""

    index: int
    theta: np.ndarray
    performance: PerformanceEstimate
    gradient: GradientEstimate
    fit: AdvantageFit


@dataclass
class TrainingLog:
    records: list[StepRecord]
    final_theta: np.ndarray | None = None

    def thetas(self) -> np.ndarray:
        return np.stack([r.theta for r in self.records])

    def performance_means(self) -> np.ndarray:
        return np.array([r.performance.mean for r in self.records])


class TrainingError(RuntimeError):
    """A stage failed mid-run; ``log`` holds every completed step."""

    def __init__(self, message: str, log: TrainingLog):
        super().__init__(message)
        self.log = log


def apply_update(theta: np.ndarray, gradient: np.ndarray, learning_rate: float) -> np.ndarray:
    """Descent step with the band-penalty weight floored at zero.

    A negative penalty weight would make the slack reformulation
    unbounded, so the update projects it back and warns; every other
    component moves freely.
    """
    updated = theta - learning_rate * gradient
    if updated[_PENALTY_INDEX] < 0.0:
        logger.warning(
            "descent step drove the band penalty weight to %.3e; clipping to 0",
            updated[_PENALTY_INDEX],
        )
        updated[_PENALTY_INDEX] = 0.0
    return updated


def _evaluation_seed(seed: int, step_index: int) -> int:
    return int(
        np.random.SeedSequence([seed, _EVAL_STREAM, step_index]).generate_state(1)[0]
    )


def train(
    spec: OcpSpec,
    theta0: np.ndarray,
    settings: TrainSettings = TrainSettings(),
    on_step=None,
) -> TrainingLog:
    """Run the full actor-critic loop.

    Per step: exact policy evaluation, closed-loop performance estimate,
    batch collection, weight fit, both gradient estimates, then the
    parameter update along the configured mode.  ``on_step`` sees every
    ``StepRecord`` as soon as it exists, so callers can persist
    incrementally; a failure raises :class:`TrainingError` carrying the
    partial log.  ``settings.adapt_mask`` freezes the masked-out
    parameter components by zeroing their gradient entries.
    """
    theta = np.array(theta0, dtype=float)
    mask = None
    if settings.adapt_mask is not None:
        mask = np.asarray(settings.adapt_mask, dtype=float)
        if mask.shape != theta.shape:
            raise ValueError(
                f"adapt_mask has {mask.size} entries for {theta.size} parameters"
            )
    log = TrainingLog(records=[])
    for index in range(settings.steps):
        try:
            atlas = ScalarValueAtlas(spec, theta)
            table = policy_evaluation(
                spec,
                theta,
                settings.exploration,
                settings.discount,
                settings.critic,
                atlas=atlas,
            )
            performance = closed_loop_performance(
                spec,
                theta,
                EvaluationConfig(
                    rollouts=settings.evaluation_rollouts,
                    discount=settings.discount,
                    exploration=settings.exploration,
                    seed=_evaluation_seed(settings.seed, index),
                ),
                atlas=atlas,
            )
            batch = collect_batch(
                spec,
                theta,
                settings.exploration,
                settings.rollouts,
                settings.rollout_horizon,
                seed=settings.seed,
                stream_key=(index,),
                initial_state=settings.initial_state,
                atlas=atlas,
                tau_target=settings.tau_target,
                curvature_step=settings.curvature_step,
            )
            fit = fit_weights(batch.features(), batch.advantages(table, settings.discount))
            gradient = hybrid_gradient(
                batch,
                "both",
                table=table,
                discount=settings.discount,
                fit=fit,
                fd_step=settings.fd_step,
            )
        except Exception as err:
            raise TrainingError(f"training aborted at step {index}: {err}", log) from err
        record = StepRecord(
            index=index,
            theta=theta.copy(),
            performance=performance,
            gradient=gradient,
            fit=fit,
        )
        log.records.append(record)
        if on_step is not None:
            on_step(record)
        chosen = gradient.compatible if settings.update_mode == "compatible" else gradient.direct
        if mask is not None:
            chosen = chosen * mask
        theta = apply_update(theta, chosen, settings.learning_rate)
    log.final_theta = theta
    return log
