"""Exact policy evaluation and compatible advantage fitting.

The gradient estimators need the true advantage of the stochastic mixed
policy.  On a scalar state the clean way to get it is classic policy
evaluation: iterate the Bellman operator on a state grid until it fixes,
then read advantages off the converged values.  The expectation in the
operator factorises into the integer draw (closed-form softmax weights),
the objective tilt (Gauss-Hermite quadrature; the input responds almost
affinely to the tilt at the scales used here), and the plant noise
(midpoint rule on its interval).

The same module fits the weights of the compatible approximator by ridge
least squares on the feature vectors built from the policy scores and
input sensitivities.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .atlas import ScalarValueAtlas
from .ocp import OcpSpec
from .plant import NOISE_HIGH, NOISE_LOW, baseline_stage_cost
from .policy import ExplorationConfig, MixedAction
from .sens import ExplorationMoments

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CriticConfig:
    """Discretisation and stopping choices for policy evaluation.

    Defaults put 301 nodes on [-1.5, 1.5]: the plant drifts upward by at
    most one noise bound per step and the policy pulls toward the penalty
    band, so closed-loop states stay well inside.
    """

    grid_low: float = -1.5
    grid_high: float = 1.5
    grid_nodes: int = 301
    tolerance: float = 1e-6
    max_sweeps: int = 10_000
    tilt_nodes: int = 5
    noise_cells: int = 8

    def __post_init__(self) -> None:
        if not self.grid_low < self.grid_high:
            raise ValueError("grid_low must lie below grid_high")
        if self.grid_nodes < 2:
            raise ValueError("grid needs at least two nodes")
        if not self.tolerance > 0.0:
            raise ValueError("tolerance must be positive")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be positive")
        if self.tilt_nodes < 1 or self.noise_cells < 1:
            raise ValueError("quadrature needs at least one node")


@dataclass
class ValueGrid:
    """Piecewise-linear value function on a uniform state grid.

    Queries outside the grid clamp to the edge value; the instance keeps
    a running count so a caller can tell how often that happened.
    """

    nodes: np.ndarray
    values: np.ndarray
    clamp_count: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        self.nodes = np.asarray(self.nodes, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.nodes.ndim != 1 or self.nodes.shape != self.values.shape:
            raise ValueError("nodes and values must be matching vectors")
        if not np.all(np.diff(self.nodes) > 0.0):
            raise ValueError("grid nodes must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid values must be finite")

    def evaluate(self, s: np.ndarray | float) -> np.ndarray:
        q = np.asarray(s, dtype=float)
        outside = int(np.count_nonzero((q < self.nodes[0]) | (q > self.nodes[-1])))
        if outside:
            if self.clamp_count == 0:
                logger.warning(
                    "state query outside the value grid [%g, %g]; "
                    "clamping to the edge (further clamps only counted)",
                    self.nodes[0],
                    self.nodes[-1],
                )
            self.clamp_count += outside
        return np.interp(q, self.nodes, self.values)

    def __call__(self, s: np.ndarray | float) -> np.ndarray:
        return self.evaluate(s)


def tilt_quadrature(scale: float, nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Hermite rule for a mean-zero Gaussian with variance ``scale``."""
    points, weights = np.polynomial.hermite.hermgauss(nodes)
    return np.sqrt(2.0 * scale) * points, weights / np.sqrt(np.pi)


def noise_quadrature(
    cells: int, low: float = NOISE_LOW, high: float = NOISE_HIGH
) -> np.ndarray:
    """Midpoint nodes for a uniform density on [low, high]; equal weights."""
    return low + (np.arange(cells) + 0.5) * (high - low) / cells


def _branch_weights(
    atlas: ScalarValueAtlas, states: np.ndarray, temperature: float
) -> np.ndarray:
    """Softmax probabilities of the two integer branches, shape (2,) + states."""
    values = atlas.phi(states)
    if not np.all(np.isfinite(values)):
        raise ValueError("pinned branch values must be finite on the grid")
    p_on = expit((values[0] - values[1]) / temperature)
    return np.stack([1.0 - p_on, p_on])


def _bellman_parts(
    spec: OcpSpec,
    theta: np.ndarray,
    exploration: ExplorationConfig,
    config: CriticConfig,
    atlas: ScalarValueAtlas | None,
    stage_cost,
):
    """Precompute everything state-independent of V for the grid operator.

    Returns (grid, probs, tilt_weights, stage, next_states, outside) with
    stage and next_states indexed (branch, tilt node[, noise cell], grid
    node).  The operator itself only interpolates and averages, so the
    sweep loop stays cheap.
    """
    atlas = atlas or ScalarValueAtlas(spec, theta)
    grid = np.linspace(config.grid_low, config.grid_high, config.grid_nodes)
    probs = _branch_weights(atlas, grid, exploration.integer_temperature)
    tilts, tilt_weights = tilt_quadrature(
        exploration.continuous_scale, config.tilt_nodes
    )
    inputs = np.stack(
        [
            np.stack([atlas.first_input(grid, branch, d) for d in tilts])
            for branch in (0, 1)
        ]
    )
    branch = np.array([0, 1]).reshape(2, 1, 1)
    stage = stage_cost(grid[None, None, :], inputs, branch)
    noise = noise_quadrature(config.noise_cells)
    next_states = (
        grid[None, None, None, :]
        + (inputs * branch)[:, :, None, :]
        + noise[None, None, :, None]
    )
    outside = int(
        np.count_nonzero(
            (next_states < config.grid_low) | (next_states > config.grid_high)
        )
    )
    return grid, probs, tilt_weights, stage, next_states, outside


def _apply_operator(
    values: np.ndarray,
    grid: np.ndarray,
    probs: np.ndarray,
    tilt_weights: np.ndarray,
    stage: np.ndarray,
    next_states: np.ndarray,
    discount: float,
) -> np.ndarray:
    continuation = np.interp(next_states.ravel(), grid, values)
    continuation = continuation.reshape(next_states.shape).mean(axis=2)
    branch_value = np.einsum("j,bjg->bg", tilt_weights, stage + discount * continuation)
    return np.sum(probs * branch_value, axis=0)


def policy_evaluation(
    spec: OcpSpec,
    theta: np.ndarray,
    exploration: ExplorationConfig,
    discount: float,
    config: CriticConfig = CriticConfig(),
    atlas: ScalarValueAtlas | None = None,
    stage_cost=baseline_stage_cost,
) -> ValueGrid:
    """Fixed point of the Bellman operator for the stochastic policy.

    Jacobi sweeps over the grid until the sup-norm change drops below the
    configured tolerance.  The expectation at each node runs over the
    integer draw, the Gaussian tilt and the plant noise as described in
    the module docstring.
    """
    if not 0.0 <= discount < 1.0:
        raise ValueError("discount must lie in [0, 1)")
    grid, probs, tilt_weights, stage, next_states, outside = _bellman_parts(
        spec, theta, exploration, config, atlas, stage_cost
    )
    if outside:
        logger.warning(
            "%d of %d quadrature successor states fall outside the value "
            "grid and clamp to its edge",
            outside,
            next_states.size,
        )
    values = np.zeros(grid.shape)
    for _ in range(config.max_sweeps):
        updated = _apply_operator(
            values, grid, probs, tilt_weights, stage, next_states, discount
        )
        residual = float(np.max(np.abs(updated - values)))
        values = updated
        if residual <= config.tolerance:
            return ValueGrid(nodes=grid, values=values)
    raise RuntimeError(
        f"policy evaluation did not converge: sup-norm residual {residual:.3e} "
        f"after {config.max_sweeps} sweeps"
    )


def bellman_residual(
    spec: OcpSpec,
    theta: np.ndarray,
    exploration: ExplorationConfig,
    discount: float,
    table: ValueGrid,
    config: CriticConfig = CriticConfig(),
    atlas: ScalarValueAtlas | None = None,
    stage_cost=baseline_stage_cost,
) -> float:
    """Sup-norm change from one more operator application to ``table``."""
    grid, probs, tilt_weights, stage, next_states, _ = _bellman_parts(
        spec, theta, exploration, config, atlas, stage_cost
    )
    if grid.shape != table.nodes.shape or not np.allclose(grid, table.nodes):
        raise ValueError("table grid does not match the critic configuration")
    updated = _apply_operator(
        table.values, grid, probs, tilt_weights, stage, next_states, discount
    )
    return float(np.max(np.abs(updated - table.values)))


def advantage(
    s: float,
    action: MixedAction,
    table: ValueGrid,
    discount: float,
    noise_cells: int = 8,
    noise_bounds: tuple[float, float] = (NOISE_LOW, NOISE_HIGH),
    stage_cost=baseline_stage_cost,
) -> float:
    """A(s, a) = L(s, a) + gamma * E_n[V(s + a_c a_i + n)] - V(s).

    The noise expectation uses the same midpoint rule as policy
    evaluation; ``noise_bounds`` collapses it for deterministic tests.
    """
    a_c = float(action.continuous[0])
    a_i = int(action.integer[0])
    cost = float(stage_cost(s, a_c, a_i))
    midpoints = noise_quadrature(noise_cells, *noise_bounds)
    continuation = float(np.mean(table.evaluate(s + a_c * a_i + midpoints)))
    return cost + discount * continuation - float(table.evaluate(s))


def feature_vector(
    score: np.ndarray,
    input_jacobian: np.ndarray,
    moments: ExplorationMoments,
    offset: np.ndarray,
    continuous_scale: float,
) -> np.ndarray:
    """Compatible feature psi for one sampled transition.

    ``score`` is the integer-policy score, ``input_jacobian`` the first
    input's sensitivity to the parameters (rows per input component) and
    ``offset`` the realised continuous exploration against the nominal
    input.  The continuous term rescales the curvature-corrected offset
    by the tilt-gain Gram matrix.
    """
    excess = np.atleast_1d(np.asarray(offset, dtype=float)) - moments.exploration_bias
    psi = score + input_jacobian.T @ (moments.gain_gram @ excess) / continuous_scale
    if not np.all(np.isfinite(psi)):
        raise ValueError("feature vector must be finite")
    return psi


@dataclass(frozen=True)
class AdvantageFit:
    """Weights of the compatible approximator with fit diagnostics."""

    weights: np.ndarray
    residual_norm: float
    condition: float

    def __post_init__(self) -> None:
        if not (np.all(np.isfinite(self.weights)) and np.isfinite(self.residual_norm)):
            raise ValueError("fit results must be finite")


def ridge_strength(second_moment: np.ndarray) -> float:
    """Regulariser used by ``fit_weights``; relative to the feature scale."""
    return 1e-8 * float(np.trace(second_moment)) / second_moment.shape[0]


def fit_weights(features: np.ndarray, advantages: np.ndarray) -> AdvantageFit:
    """Least-squares weights of the advantage approximator.

    Solves the ridge normal equations (sum psi psi^T + lambda I) w =
    sum psi A with lambda proportional to the mean feature energy.  A
    rank-deficient batch still solves, with the undetermined directions
    pinned to zero weight; only a batch with no feature energy at all is
    beyond that rescue and errors out.
    """
    psi = np.asarray(features, dtype=float)
    target = np.asarray(advantages, dtype=float)
    if psi.ndim != 2 or psi.shape[0] == 0:
        raise ValueError("feature batch must be a nonempty matrix")
    if target.shape != (psi.shape[0],):
        raise ValueError("one advantage sample per feature row is required")
    second_moment = psi.T @ psi
    if not np.all(np.isfinite(second_moment)):
        raise np.linalg.LinAlgError("feature second moments are not finite")
    ridge = ridge_strength(second_moment)
    spectrum = np.linalg.eigvalsh(second_moment)
    if spectrum[-1] <= 0.0:
        # all-zero features leave nothing for the ridge to scale against
        raise np.linalg.LinAlgError(
            "feature second-moment matrix is rank deficient beyond the "
            "ridge rescue (condition estimate inf)"
        )
    if spectrum[0] < 10.0 * ridge:
        # a batch can legitimately carry no information about some
        # parameter direction (its feature component vanishes on every
        # sample); the ridge pins those weights to zero
        logger.warning(
            "feature directions with energy below the ridge detected "
            "(weakest %.3e vs ridge %.3e); their weights stay at zero",
            spectrum[0],
            ridge,
        )
    system = second_moment + ridge * np.eye(psi.shape[1])
    condition = float((spectrum[-1] + ridge) / (max(spectrum[0], 0.0) + ridge))
    weights = np.linalg.solve(system, psi.T @ target)
    residual = float(np.linalg.norm(target - psi @ weights))
    return AdvantageFit(weights=weights, residual_norm=residual, condition=condition)
