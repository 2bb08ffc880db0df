"""Parametric optimal control model consumed by the solvers.

The model is a finite-horizon problem over continuous inputs u_k, binary
inputs i_k and per-stage slack variables sl_k:

    min   T(x_N, th) + sum_k  l(x_k, u_k, sl_k, i_k, th)
    s.t.  x_{k+1} = F(x_k, u_k, i_k, th),   x_0 = s,
          h_k(x_k, u_k, sl_k, i_k, th) <= 0,
          i_k in {0, 1}^{n_i}.

``OcpSpec`` carries the evaluators together with their analytic first and
second derivatives (the sensitivity layer differentiates the KKT system,
so finite differencing inside the model is not an option).  The bundled
scalar example has a single state that integrates ``u*i`` plus a constant
model bias, a quadratic tracking cost, an activation price on the binary
input, and an exact penalty that keeps the state inside a band; the
penalty is expressed through one slack variable per stage so each
fixed-integer subproblem is a smooth QP.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

THETA_LABELS = ("x_ref", "u_ref", "switch_cost", "penalty_weight", "model_bias")


@dataclass(frozen=True)
class MpcParams:
    """Adjustable parameters of the control model.

    Attributes:
        x_ref: state reference of the tracking cost.
        u_ref: continuous-input reference of the tracking cost.
        switch_cost: price added per active binary input (must stay >= 0
            for the activation trade-off to be meaningful; negative values
            are allowed but flagged by the trainer).
        penalty_weight: weight of the exact band penalty; must be >= 0 or
            the slack reformulation becomes unbounded.
        model_bias: additive constant in the prediction model.
    """

    x_ref: float = 0.0
    u_ref: float = 0.0
    switch_cost: float = 0.2
    penalty_weight: float = 1.0
    model_bias: float = 0.0

    def __post_init__(self) -> None:
        vals = self.as_array()
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"non-finite parameter vector {vals}")
        if self.penalty_weight < 0.0:
            raise ValueError(
                f"penalty_weight must be >= 0, got {self.penalty_weight}"
            )

    def as_array(self) -> np.ndarray:
        return np.array(
            [
                self.x_ref,
                self.u_ref,
                self.switch_cost,
                self.penalty_weight,
                self.model_bias,
            ]
        )

    @staticmethod
    def from_array(theta: np.ndarray) -> "MpcParams":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (5,):
            raise ValueError(f"expected 5 parameters, got shape {theta.shape}")
        return MpcParams(*theta)


#: Parameters of the baseline task cost (fixed; learning never moves them).
BASELINE_PARAMS = MpcParams(
    x_ref=0.0, u_ref=0.0, switch_cost=0.2, penalty_weight=1.0, model_bias=0.0
)


@dataclass(frozen=True)
class PenaltyBand:
    """State band [lo, hi] whose violation is charged linearly.

    The stage cost term ``penalty_weight * max(lo - x, x - hi, 0)`` is
    rewritten with one slack per stage:

        sl >= x - hi,   sl >= lo - x,   sl >= 0,   cost  penalty_weight*sl.

    For any feasible point ``sl >= max(lo - x, x - hi, 0)``, and with a
    positive weight the minimiser pins the slack to that value, so the
    reformulation is exact.
    """

    lo: float = -0.2
    hi: float = 0.2

    def __post_init__(self) -> None:
        if not self.hi > self.lo:
            raise ValueError(f"empty band [{self.lo}, {self.hi}]")

    def violation(self, x: np.ndarray | float) -> np.ndarray | float:
        return np.maximum(np.maximum(self.lo - x, x - self.hi), 0.0)


DEFAULT_BAND = PenaltyBand()


@dataclass(frozen=True)
class OcpSpec:
    """Evaluator bundle defining one parametric mixed-integer OCP.

    The continuous stage variables are v = (x, u, sl).  All evaluators are
    twice differentiable in the continuous arguments; derivative callables
    must be analytic because the KKT sensitivity layer differentiates
    through them.  ``is_quadratic`` marks cost Hessians and constraint
    Jacobians as independent of v, letting the interior-point solver cache
    them per instance.
    """

    horizon: int
    n_x: int
    n_u: int
    n_i: int
    n_slack: int
    n_theta: int
    m_stage: int
    m_term: int

    stage_cost: Callable
    stage_cost_grad: Callable
    stage_cost_hess: Callable
    stage_cost_grad_theta: Callable
    stage_cost_cross: Callable

    dynamics: Callable
    dynamics_jac: Callable
    dynamics_jac_theta: Callable

    stage_ineq: Callable
    stage_ineq_jac: Callable
    stage_ineq_jac_theta: Callable

    terminal_cost: Callable
    terminal_cost_grad: Callable
    terminal_cost_hess: Callable
    terminal_cost_grad_theta: Callable
    terminal_cost_cross: Callable

    terminal_ineq: Callable | None = None
    terminal_ineq_jac: Callable | None = None
    terminal_ineq_jac_theta: Callable | None = None

    is_quadratic: bool = False
    band: PenaltyBand = field(default=DEFAULT_BAND)
    terminal_weight: float = 0.0

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        for name in ("n_x", "n_u", "n_i", "n_slack", "n_theta"):
            if getattr(self, name) < 0 or (name in ("n_x", "n_u") and getattr(self, name) < 1):
                raise ValueError(f"{name} invalid: {getattr(self, name)}")
        if self.m_term > 0 and self.terminal_ineq is None:
            raise ValueError("m_term > 0 but no terminal inequality evaluator")

    @property
    def n_stage_vars(self) -> int:
        return self.n_x + self.n_u + self.n_slack


def riccati_terminal_weight(
    a: float = 1.0,
    b: float = 1.0,
    q: float = 1.0,
    r: float = 1.0,
    discount: float = 1.0,
    tol: float = 1e-14,
    max_iter: int = 10_000,
) -> float:
    """Fixed point of the scalar discrete-time Riccati recursion.

    Solves P = q + a^2 P - (a b P)^2 / (r + b^2 P) by iteration, optionally
    with the discounted system matrices sqrt(discount)*a, sqrt(discount)*b.

    Raises:
        RuntimeError: if the iteration has not contracted below ``tol``
            after ``max_iter`` sweeps; the message carries the residual.
    """
    if discount <= 0.0 or discount > 1.0:
        raise ValueError(f"discount must be in (0, 1], got {discount}")
    ad = np.sqrt(discount) * a
    bd = np.sqrt(discount) * b
    p = q
    for _ in range(max_iter):
        p_next = q + ad * ad * p - (ad * bd * p) ** 2 / (r + bd * bd * p)
        if abs(p_next - p) <= tol * max(1.0, abs(p_next)):
            p = p_next
            break
        p = p_next
    else:
        residual = abs(q + ad * ad * p - (ad * bd * p) ** 2 / (r + bd * bd * p) - p)
        raise RuntimeError(
            f"Riccati iteration did not converge in {max_iter} sweeps, "
            f"residual {residual:.3e}"
        )
    return float(p)


def baseline_stage_cost(
    s: float,
    a_c: float,
    a_i: float,
    params: MpcParams = BASELINE_PARAMS,
    band: PenaltyBand = DEFAULT_BAND,
) -> float:
    """Task cost charged by the environment for one transition."""
    track = 0.5 * (s - params.x_ref) ** 2 + 0.5 * (a_c - params.u_ref) ** 2
    return float(
        track
        + params.switch_cost * a_i
        + params.penalty_weight * band.violation(s)
    )


def build_scalar_example(
    horizon: int = 10,
    band: PenaltyBand = DEFAULT_BAND,
    discount: float | None = None,
) -> OcpSpec:
    """Scalar benchmark problem: x+ = x + u*i + bias, banded quadratic cost.

    The terminal cost is 0.5 * P * (x - x_ref)^2 with P the Riccati weight
    of the always-active (i = 1) linear system with unit weights; pass
    ``discount`` to use the discounted system matrices instead.

    theta layout (n_theta = 5): (x_ref, u_ref, switch_cost, penalty_weight,
    model_bias), matching ``MpcParams.as_array``.
    """
    p_term = riccati_terminal_weight(discount=discount if discount else 1.0)
    lo, hi = band.lo, band.hi

    def stage_cost(k, x, u, sl, i, th):
        return (
            0.5 * (x[0] - th[0]) ** 2
            + 0.5 * (u[0] - th[1]) ** 2
            + th[2] * i[0]
            + th[3] * sl[0]
        )

    def stage_cost_grad(k, x, u, sl, i, th):
        return np.array([x[0] - th[0], u[0] - th[1], th[3]])

    def stage_cost_hess(k, x, u, sl, i, th):
        return np.diag([1.0, 1.0, 0.0])

    def stage_cost_grad_theta(k, x, u, sl, i, th):
        return np.array([-(x[0] - th[0]), -(u[0] - th[1]), i[0], sl[0], 0.0])

    def stage_cost_cross(k, x, u, sl, i, th):
        out = np.zeros((3, 5))
        out[0, 0] = -1.0
        out[1, 1] = -1.0
        out[2, 3] = 1.0
        return out

    def dynamics(k, x, u, i, th):
        return np.array([x[0] + u[0] * i[0] + th[4]])

    def dynamics_jac(k, x, u, i, th):
        return np.array([[1.0, i[0]]])

    def dynamics_jac_theta(k, x, u, i, th):
        out = np.zeros((1, 5))
        out[0, 4] = 1.0
        return out

    def stage_ineq(k, x, u, sl, i, th):
        return np.array([x[0] - hi - sl[0], lo - x[0] - sl[0], -sl[0]])

    def stage_ineq_jac(k, x, u, sl, i, th):
        return np.array(
            [[1.0, 0.0, -1.0], [-1.0, 0.0, -1.0], [0.0, 0.0, -1.0]]
        )

    def stage_ineq_jac_theta(k, x, u, sl, i, th):
        return np.zeros((3, 5))

    def terminal_cost(x, th):
        return 0.5 * p_term * (x[0] - th[0]) ** 2

    def terminal_cost_grad(x, th):
        return np.array([p_term * (x[0] - th[0])])

    def terminal_cost_hess(x, th):
        return np.array([[p_term]])

    def terminal_cost_grad_theta(x, th):
        return np.array([-p_term * (x[0] - th[0]), 0.0, 0.0, 0.0, 0.0])

    def terminal_cost_cross(x, th):
        out = np.zeros((1, 5))
        out[0, 0] = -p_term
        return out

    return OcpSpec(
        horizon=horizon,
        n_x=1,
        n_u=1,
        n_i=1,
        n_slack=1,
        n_theta=5,
        m_stage=3,
        m_term=0,
        stage_cost=stage_cost,
        stage_cost_grad=stage_cost_grad,
        stage_cost_hess=stage_cost_hess,
        stage_cost_grad_theta=stage_cost_grad_theta,
        stage_cost_cross=stage_cost_cross,
        dynamics=dynamics,
        dynamics_jac=dynamics_jac,
        dynamics_jac_theta=dynamics_jac_theta,
        stage_ineq=stage_ineq,
        stage_ineq_jac=stage_ineq_jac,
        stage_ineq_jac_theta=stage_ineq_jac_theta,
        terminal_cost=terminal_cost,
        terminal_cost_grad=terminal_cost_grad,
        terminal_cost_hess=terminal_cost_hess,
        terminal_cost_grad_theta=terminal_cost_grad_theta,
        terminal_cost_cross=terminal_cost_cross,
        is_quadratic=True,
        band=band,
        terminal_weight=p_term,
    )


def with_terminal_constraint(
    spec: OcpSpec, upper: float, lower: float | None = None
) -> OcpSpec:
    """Copy of ``spec`` with the extra terminal constraint x_N <= upper,
    and optionally lower <= x_N.  A lower bound above the upper one makes
    every integer profile infeasible.

    Used by tests to build instances that are infeasible for some (or all)
    integer profiles.
    """
    if spec.n_x != 1:
        raise ValueError("helper only supports scalar-state models")
    rows = 1 if lower is None else 2

    def terminal_ineq(x, th):
        out = [x[0] - upper]
        if lower is not None:
            out.append(lower - x[0])
        return np.array(out)

    def terminal_ineq_jac(x, th):
        return np.array([[1.0], [-1.0]][:rows])

    def terminal_ineq_jac_theta(x, th):
        return np.zeros((rows, spec.n_theta))

    return replace(
        spec,
        m_term=rows,
        terminal_ineq=terminal_ineq,
        terminal_ineq_jac=terminal_ineq_jac,
        terminal_ineq_jac_theta=terminal_ineq_jac_theta,
    )
