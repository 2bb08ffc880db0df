"""Derivatives of pinned-profile solutions.

Everything here differentiates the fixed-tau barrier system the solver
actually converged on, treating its primal-dual root as an implicit
function of the cost parameters and of the objective tilt d.  Comparing
these derivatives against re-solves at a different tau (or against
tau -> 0 limits) breaks down near active-set changes, so finite-difference
cross-checks must re-solve at the same fixed tau.

The value gradient needs no linear solve at all: at a converged point the
primal-dual terms of the Lagrangian are stationary, so the total
parameter derivative of the optimal value collapses to the partial one.
Solution sensitivities need one factorisation of the KKT Jacobian and a
right-hand side per parameter.

Integer branches are left out deliberately.  The optimal completion is a
piecewise-constant function of the parameters, so its contribution to any
gradient is zero almost everywhere.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve

from .ipsolver import (
    KktSingularError,
    PinnedProfileNlp,
    PrimalDualPoint,
    kkt_residual,
    solve_fixed_profile,
    stationarity_tolerance,
)
from .minlp import IntegerValueTable
from .ocp import OcpSpec
from .policy import integer_distribution

STALE_FACTOR = 10.0


def _require_fresh(nlp, point: PrimalDualPoint, factor: float = STALE_FACTOR) -> None:
    tol = stationarity_tolerance(point.tau)
    _, residual = kkt_residual(nlp, point)
    if residual > factor * tol:
        raise ValueError(
            f"point does not solve this problem: residual {residual:.3e} "
            f"exceeds {factor:g}x the tolerance {tol:.1e} at tau={point.tau:.1e}"
        )


def value_gradient(nlp: PinnedProfileNlp, point: PrimalDualPoint) -> np.ndarray:
    """Parameter gradient of the pinned optimal value.

    Stationarity of the converged point reduces the total derivative to
    the partial parameter gradient of the Lagrangian at fixed
    (y, lam, mu); a point that does not solve ``nlp`` is rejected rather
    than silently differentiated.
    """
    _require_fresh(nlp, point)
    return nlp.lag_grad_theta(point.y, point.lam, point.mu)


@dataclass(frozen=True)
class SolutionSensitivity:
    """Derivatives of the full primal-dual solution.

    ``wrt_theta`` and ``wrt_perturbation`` stack rows as (y, lam, mu);
    the ``first_input_*`` views are the u_0 rows, which are the only ones
    the policy-gradient estimators consume.
    """

    wrt_theta: np.ndarray
    wrt_perturbation: np.ndarray
    first_input_wrt_theta: np.ndarray
    first_input_wrt_perturbation: np.ndarray


def solution_sensitivity(nlp: PinnedProfileNlp, point: PrimalDualPoint) -> SolutionSensitivity:
    """Implicit-function derivatives of the fixed-tau root.

    One LU factorisation of the KKT Jacobian serves every right-hand
    side.  A Jacobian without full rank is reported with its smallest
    singular value; it is never regularised, because a doctored
    sensitivity would silently corrupt every downstream gradient.
    """
    _require_fresh(nlp, point)
    y, lam, mu = point.y, point.lam, point.mu
    n_y, n_eq, n_in = nlp.n_y, nlp.n_eq, nlp.n_in

    jac_f = nlp.eq_jac(y)
    jac_h = nlp.ineq_jac(y)
    jacobian = np.zeros((n_y + n_eq + n_in, n_y + n_eq + n_in))
    jacobian[:n_y, :n_y] = nlp.lag_hess(y, lam, mu)
    jacobian[:n_y, n_y : n_y + n_eq] = jac_f.T
    jacobian[:n_y, n_y + n_eq :] = jac_h.T
    jacobian[n_y : n_y + n_eq, :n_y] = jac_f
    jacobian[n_y + n_eq :, :n_y] = mu[:, None] * jac_h
    jacobian[n_y + n_eq :, n_y + n_eq :] = np.diag(nlp.ineq(y))

    rhs = np.zeros((jacobian.shape[0], nlp.spec.n_theta + nlp.spec.n_u))
    rhs[:n_y, : nlp.spec.n_theta] = nlp.lag_grad_y_jac_theta(y, lam, mu)
    rhs[n_y : n_y + n_eq, : nlp.spec.n_theta] = nlp.eq_jac_theta(y)
    rhs[n_y + n_eq :, : nlp.spec.n_theta] = mu[:, None] * nlp.ineq_jac_theta(y)
    rhs[nlp.iu(0), nlp.spec.n_theta :] = np.eye(nlp.spec.n_u)

    with warnings.catch_warnings():
        # exact singularity is caught right below and raised with a
        # singular-value estimate instead of scipy's generic warning
        warnings.simplefilter("ignore", LinAlgWarning)
        factors, pivots = lu_factor(jacobian)
    diag = np.abs(np.diag(factors))
    if diag.min() < 1e-14 * max(diag.max(), 1.0):
        smallest = float(np.linalg.svd(jacobian, compute_uv=False)[-1])
        if smallest < 1e-12 * max(diag.max(), 1.0):
            raise KktSingularError(0, point.tau, smallest)
    sens = -lu_solve((factors, pivots), rhs)

    u0 = nlp.iu(0)
    return SolutionSensitivity(
        wrt_theta=sens[:, : nlp.spec.n_theta],
        wrt_perturbation=sens[:, nlp.spec.n_theta :],
        first_input_wrt_theta=sens[u0, : nlp.spec.n_theta].copy(),
        first_input_wrt_perturbation=sens[u0, nlp.spec.n_theta :].copy(),
    )


def near_active_set_change(nlp, point: PrimalDualPoint, factor: float = 10.0) -> bool:
    """Whether some inequality sits close to switching activity.

    On the barrier path every row satisfies |h| * mu = tau, so the
    product itself cannot discriminate; a row is near the switch exactly
    when |h| and mu are BOTH small, i.e. both of order sqrt(tau).
    Sensitivities change rapidly across the switch, so finite-difference
    validation is skipped (never fudged) on flagged instances.
    """
    h = nlp.ineq(point.y)
    closeness = np.maximum(np.abs(h), point.mu)
    return bool(np.min(closeness) < factor * np.sqrt(point.tau))


def first_input_curvature(
    spec: OcpSpec,
    s0: float,
    theta: np.ndarray,
    profile: np.ndarray,
    step: float = 1e-4,
    tau_target: float = 1e-9,
    warm: PrimalDualPoint | None = None,
    polish_tol: float | None = None,
) -> np.ndarray:
    """Sum over tilt coordinates of the second derivative of u_0.

    Centred differences of the first-order sensitivity across tilted
    re-solves; third-order implicit differentiation would save nothing
    and behaves worse near nonsmooth points.
    """
    shaped = np.asarray(profile, dtype=float).reshape(spec.horizon, spec.n_i)
    total = np.zeros(spec.n_u)
    for i in range(spec.n_u):
        columns = []
        for sign in (1.0, -1.0):
            d = np.zeros(spec.n_u)
            d[i] = sign * step
            nlp = PinnedProfileNlp(spec, s0, theta, shaped, d=d)
            report = solve_fixed_profile(
                nlp, tau_target=tau_target, warm_start=warm, polish_tol=polish_tol
            )
            if not report.solved:
                raise RuntimeError(f"tilted solve failed: {report.message}")
            sens = solution_sensitivity(nlp, report.point)
            columns.append(sens.first_input_wrt_perturbation[:, i])
        total += (columns[0] - columns[1]) / (2.0 * step)
    return total


def integer_score(
    table: IntegerValueTable,
    grads: dict[int, np.ndarray],
    first: int,
    temperature: float,
) -> np.ndarray:
    """Parameter gradient of the log-probability of drawing ``first``.

    The softmax structure gives the score as the branch-probability
    weighted mean of the value gradients minus the drawn branch's own,
    scaled by the temperature, so its expectation under the table is the
    zero vector identically.
    """
    probs = integer_distribution(table, temperature)
    entry_index = {e.first: k for k, e in enumerate(table.entries)}
    if first not in entry_index or not table.entries[entry_index[first]].feasible:
        raise ValueError(f"branch {first} is not a feasible choice")
    expectation = None
    for k, entry in enumerate(table.entries):
        if not entry.feasible:
            continue
        if entry.first not in grads:
            raise ValueError(f"missing value gradient for feasible branch {entry.first}")
        term = probs[k] * grads[entry.first]
        expectation = term if expectation is None else expectation + term
    return (expectation - grads[first]) / temperature


@dataclass(frozen=True)
class ExplorationMoments:
    """Second-order exploration geometry at one state and profile.

    ``gain_gram`` is the Gram matrix of the first input's tilt gain, so
    it is symmetric positive semidefinite by construction.
    ``exploration_bias`` is the mean shift of the sampled input away from
    the nominal one induced by curvature of the tilt response.
    """

    gain_gram: np.ndarray
    exploration_bias: np.ndarray


def exploration_moments(
    spec: OcpSpec,
    s0: float,
    theta: np.ndarray,
    profile: np.ndarray,
    continuous_scale: float,
    tau_target: float = 1e-9,
    curvature_step: float = 1e-4,
    point: PrimalDualPoint | None = None,
) -> ExplorationMoments:
    shaped = np.asarray(profile, dtype=float).reshape(spec.horizon, spec.n_i)
    nlp = PinnedProfileNlp(spec, s0, theta, shaped)
    if point is None:
        report = solve_fixed_profile(nlp, tau_target=tau_target)
        if not report.solved:
            raise RuntimeError(f"base solve failed: {report.message}")
        point = report.point
    gain = solution_sensitivity(nlp, point).first_input_wrt_perturbation
    curvature = first_input_curvature(
        spec, s0, theta, shaped, curvature_step, tau_target, warm=point
    )
    return ExplorationMoments(
        gain_gram=gain @ gain.T,
        exploration_bias=0.5 * continuous_scale * curvature,
    )
