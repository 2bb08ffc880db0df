"""Stochastic mixed-integer policy.

The integer part of an action is drawn from a softmax over the pinned
branch values; the continuous part is the first input of the pinned
problem re-solved with a small linear objective tilt d @ u_0, where d is
Gaussian.  Every sample therefore satisfies the model constraints by
construction: it is the optimum of a feasible program, never a projected
or clipped draw.

The continuous density this induces is easy to sample and awkward to
evaluate; nothing here evaluates it.  Downstream gradient estimators need
only the drawn perturbation, the exploration offset against the
unperturbed input, and solution sensitivities.

Gaussians come from an explicit Box-Muller transform on counter-based
streams so that sample paths are reproducible bit for bit across
platforms and across any numpy changes to its normal sampler.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .atlas import ScalarValueAtlas
from .ipsolver import PinnedProfileNlp, solve_fixed_profile
from .minlp import IntegerValueTable, _atlas_applies, integer_value_table
from .ocp import OcpSpec


@dataclass(frozen=True)
class ExplorationConfig:
    """Exploration parameters.

    ``integer_temperature`` is in cost units; ``continuous_scale`` is the
    perturbation covariance (input-squared units, covariance scale * I),
    so the standard deviation of each component is its square root.
    """

    integer_temperature: float
    continuous_scale: float
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.integer_temperature > 0.0:
            raise ValueError("integer_temperature must be positive")
        if not self.continuous_scale > 0.0:
            raise ValueError("continuous_scale must be positive")


@dataclass(frozen=True)
class MixedAction:
    continuous: np.ndarray
    integer: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "continuous", np.atleast_1d(np.asarray(self.continuous, dtype=float)))
        object.__setattr__(self, "integer", np.atleast_1d(np.asarray(self.integer, dtype=np.int64)))
        if not np.all(np.isfinite(self.continuous)):
            raise ValueError("continuous action must be finite")
        if not np.all((self.integer == 0) | (self.integer == 1)):
            raise ValueError("integer action must be binary")


@dataclass(frozen=True)
class PolicySample:
    """One draw from the mixed policy with everything estimators need."""

    action: MixedAction
    perturbation: np.ndarray
    offset: np.ndarray
    log_probability: float
    completion: np.ndarray

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.offset)):
            raise ValueError("exploration offset must be finite")
        if self.log_probability > 1e-12:
            raise ValueError("log-probability of a draw cannot be positive")


def perturbation_stream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for one rollout; disjoint keys never collide."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *key])))


def standard_normal(rng: np.random.Generator, size: int) -> np.ndarray:
    """Box-Muller draws; fixed uniform consumption of 2 per output pair."""
    pairs = (size + 1) // 2
    u1 = rng.random(pairs)
    u2 = rng.random(pairs)
    radius = np.sqrt(-2.0 * np.log1p(-u1))
    angle = 2.0 * np.pi * u2
    out = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])
    return out[:size]


def integer_distribution(table: IntegerValueTable, temperature: float) -> np.ndarray:
    """Softmax over pinned branch values, aligned with ``table.entries``.

    Infeasible branches get exact probability zero.  Max-subtraction keeps
    the exponentials in range for any value scale.
    """
    if not temperature > 0.0:
        raise ValueError("temperature must be positive")
    values = np.array([e.value if e.feasible else np.inf for e in table.entries])
    feasible = np.isfinite(values)
    if not feasible.any():
        raise ValueError("no feasible integer choice to sample from")
    logits = -values[feasible] / temperature
    logits -= logits.max()
    weights = np.exp(logits)
    probs = np.zeros(values.size)
    probs[feasible] = weights / weights.sum()
    return probs


def nominal_continuous_input(
    spec: OcpSpec,
    s0: float,
    theta: np.ndarray,
    profile: np.ndarray,
    tau_target: float = 1e-9,
    atlas: ScalarValueAtlas | None = None,
) -> np.ndarray:
    """First continuous input of the unperturbed solve at a fixed profile."""
    if atlas is not None:
        bits = np.asarray(profile, dtype=np.int64).reshape(-1)
        return _atlas_profile_input(atlas, s0, bits, 0.0)
    nlp = PinnedProfileNlp(spec, s0, theta, np.asarray(profile, dtype=float).reshape(spec.horizon, spec.n_i))
    report = solve_fixed_profile(nlp, tau_target=tau_target)
    if not report.solved:
        raise ValueError(f"profile is not solvable: {report.message}")
    return report.point.y[nlp.iu(0)].copy()


def _atlas_profile_input(atlas: ScalarValueAtlas, s0: float, bits: np.ndarray, d: float) -> np.ndarray:
    # valid only when bits is the optimal completion of its own first entry,
    # which is how every caller in this module produces profiles
    expected = atlas.completion(s0, int(bits[0]))[0]
    if not np.array_equal(expected, bits):
        raise ValueError("profile is not the optimal completion of its first entry")
    return np.atleast_1d(atlas.first_input(s0, int(bits[0]), d=d))[:1].astype(float)


def sample_action(
    spec: OcpSpec,
    s0: float,
    theta: np.ndarray,
    cfg: ExplorationConfig,
    rng: np.random.Generator,
    method: str = "auto",
    atlas: ScalarValueAtlas | None = None,
    table: IntegerValueTable | None = None,
    tau_target: float = 1e-9,
) -> PolicySample:
    """Draw one mixed action.

    The integer part comes from the softmax table; the continuous part is
    the first input of the chosen branch's completion re-solved under the
    drawn objective tilt.  ``method`` picks how that solve happens:
    closed-form piecewise evaluation ("atlas", scalar layout only) or
    interior-point solves of the pinned program ("solver").  A solver
    stall triggers one full redraw before aborting, so exploration is
    never silently biased toward easy branches.
    """
    if method == "auto":
        method = "atlas" if _atlas_applies(spec) else "solver"
    if method not in ("atlas", "solver"):
        raise ValueError(f"unknown method {method!r}")
    if method == "atlas":
        if not _atlas_applies(spec):
            raise ValueError("the atlas method requires the scalar problem layout")
        atlas = atlas or ScalarValueAtlas(spec, theta)
    if table is None:
        table = integer_value_table(spec, s0, theta, atlas=atlas, tau_target=tau_target)

    probs = integer_distribution(table, cfg.integer_temperature)
    cumulative = np.cumsum(probs)
    for attempt in range(2):
        choice = int(np.searchsorted(cumulative, rng.random(), side="right"))
        choice = min(choice, probs.size - 1)
        entry = table.entries[choice]
        d = np.sqrt(cfg.continuous_scale) * standard_normal(rng, spec.n_u)
        try:
            a_c, nominal = _branch_inputs(spec, s0, theta, entry.completion, d, method, atlas, tau_target)
        except _SolverStall:
            if attempt == 1:
                raise RuntimeError(
                    "perturbed solve stalled twice; aborting the batch instead of "
                    "resampling toward easier branches"
                ) from None
            continue
        return PolicySample(
            action=MixedAction(continuous=a_c, integer=entry.completion[:1]),
            perturbation=d,
            offset=a_c - nominal,
            log_probability=float(np.log(probs[choice])),
            completion=entry.completion,
        )
    raise AssertionError("unreachable")


def sample_actions_vector(
    atlas: ScalarValueAtlas,
    s: np.ndarray,
    cfg: ExplorationConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One policy draw per state, for a whole batch at once.

    Returns (integer, continuous, perturbation) arrays.  Semantically one
    scalar draw per state; the batch form exists because closed-loop
    evaluation takes millions of draws and the piecewise closed form
    amortises beautifully over vectors.  The uniform-consumption order is
    one integer draw then one tilt draw per state, in batch order.
    """
    s = np.asarray(s, dtype=float)
    values = atlas.phi(s)
    # two-branch softmax: probability of the off branch
    p_off = expit((values[1] - values[0]) / cfg.integer_temperature)
    integer = (rng.random(s.shape) >= p_off).astype(np.int64)
    tilt = np.sqrt(cfg.continuous_scale) * standard_normal(rng, s.size).reshape(s.shape)
    continuous = atlas.first_input(s, integer, tilt)
    return integer, continuous, tilt


def nominal_actions_vector(atlas: ScalarValueAtlas, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Greedy variant: cheapest branch, no tilt; ties fall on the off branch."""
    s = np.asarray(s, dtype=float)
    values = atlas.phi(s)
    integer = (values[1] < values[0]).astype(np.int64)
    return integer, atlas.first_input(s, integer, 0.0)


class _SolverStall(Exception):
    pass


def _branch_inputs(
    spec: OcpSpec,
    s0: float,
    theta: np.ndarray,
    completion: np.ndarray,
    d: np.ndarray,
    method: str,
    atlas: ScalarValueAtlas | None,
    tau_target: float,
) -> tuple[np.ndarray, np.ndarray]:
    if method == "atlas":
        perturbed = _atlas_profile_input(atlas, s0, completion, float(d[0]))
        nominal = _atlas_profile_input(atlas, s0, completion, 0.0)
        return perturbed, nominal
    profile = np.asarray(completion, dtype=float).reshape(spec.horizon, spec.n_i)
    base = PinnedProfileNlp(spec, s0, theta, profile)
    base_report = solve_fixed_profile(base, tau_target=tau_target)
    if base_report.status == "max_iter":
        raise _SolverStall
    if not base_report.solved:
        raise RuntimeError(f"chosen branch is not solvable: {base_report.message}")
    tilted = PinnedProfileNlp(spec, s0, theta, profile, d=d)
    tilted_report = solve_fixed_profile(tilted, tau_target=tau_target, warm_start=base_report.point)
    if tilted_report.status == "max_iter":
        raise _SolverStall
    if not tilted_report.solved:
        raise RuntimeError(f"perturbed solve failed: {tilted_report.message}")
    return (
        tilted_report.point.y[tilted.iu(0)].copy(),
        base_report.point.y[base.iu(0)].copy(),
    )
