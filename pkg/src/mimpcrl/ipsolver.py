"""Primal-dual interior-point solver for fixed-integer subproblems.

Once the binary profile of the OCP is pinned, what remains is a smooth
continuous program

    min  obj(y)   s.t.  f(y) = 0,  h(y) <= 0,

with y stacking states, continuous inputs and slacks.  ``PinnedProfileNlp``
transcribes an ``OcpSpec`` into this form (adding the linear exploration
term d'u_0 when requested) and exposes the derivatives the solver and the
sensitivity layer need.

The solver follows the barrier path: for a fixed parameter tau it runs
Newton's method on the perturbed KKT residual

    r(y, lam, mu; tau) = [ grad_y L;  f(y);  mu * h(y) + tau ],

with a fraction-to-boundary rule keeping mu > 0 and h(y) < 0, and reduces
tau geometrically until ``tau_target``.  The returned point satisfies the
fixed-tau system, which keeps the solution a smooth function of problem
parameters; sensitivities are therefore taken at fixed tau, never in the
tau -> 0 limit.

Infeasible instances are detected with a max-margin phase-I; a negative
optimal margin marks the profile infeasible instead of surfacing as a
solver failure.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .ocp import OcpSpec

logger = logging.getLogger(__name__)

FRACTION_TO_BOUNDARY = 0.995
INFEASIBILITY_THRESHOLD = 1e-6


def stationarity_tolerance(tau: float, kkt_tol: float = 1e-8) -> float:
    """Residual tolerance that makes a fixed-tau point tau-accurate.

    The duality gap is bounded by n_in * (tau + residual), so the residual
    must sit below tau for the reported objective to be tau-accurate.
    """
    return min(kkt_tol, max(0.1 * tau, 1e-12))


class KktSingularError(RuntimeError):
    """KKT matrix could not be factorised (reported, never regularised away)."""

    def __init__(self, iteration: int, tau: float, smallest_sv: float):
        self.iteration = iteration
        self.tau = tau
        self.smallest_sv = smallest_sv
        super().__init__(
            f"singular KKT matrix at iteration {iteration}, tau={tau:.3e}, "
            f"smallest singular value {smallest_sv:.3e}"
        )


@dataclass(frozen=True)
class PrimalDualPoint:
    """Primal-dual iterate satisfying the fixed-tau KKT system."""

    y: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    tau: float

    def __post_init__(self) -> None:
        if np.any(self.mu < 0):
            raise ValueError("inequality multipliers must be nonnegative")


@dataclass(frozen=True)
class SolveReport:
    """Outcome of one fixed-profile solve.

    ``objective`` is the plain objective at the solution (no barrier
    terms).  ``status`` is one of ``solved``, ``infeasible``, ``max_iter``.
    ``infeasibility`` carries the worst constraint violation when
    infeasible.
    """

    status: str
    objective: float
    point: PrimalDualPoint | None
    iterations: int
    kkt_residual: float
    infeasibility: float = 0.0
    message: str = ""

    @property
    def solved(self) -> bool:
        return self.status == "solved"


# ----------------------------------------------------------------------
# transcription
# ----------------------------------------------------------------------


class PinnedProfileNlp:
    """Dense transcription of an OCP with a fixed binary profile.

    Variable layout: ``y = [x_0..x_N, u_0..u_{N-1}, sl_0..sl_{N-1}]``.
    Equalities are the initial condition followed by the dynamics defects;
    inequalities are the stage constraints followed by terminal ones.

    The model family keeps dynamics and constraints affine in the
    continuous variables and their Jacobians independent of theta, so the
    Lagrangian Hessian reduces to the cost Hessian.  With
    ``spec.is_quadratic`` the whole problem is assembled once into
    (W, g0, A, f0, G, h0) and every evaluation is a matrix product.
    """

    def __init__(
        self,
        spec: OcpSpec,
        s0: np.ndarray | float,
        theta: np.ndarray,
        profile: np.ndarray,
        d: np.ndarray | None = None,
    ):
        self.spec = spec
        self.s0 = np.atleast_1d(np.asarray(s0, dtype=float))
        self.theta = np.asarray(theta, dtype=float)
        profile = np.asarray(profile, dtype=float).reshape(spec.horizon, spec.n_i)
        if not np.all((profile == 0.0) | (profile == 1.0)):
            raise ValueError("profile entries must be 0 or 1")
        self.profile = profile
        self.d = (
            np.zeros(spec.n_u) if d is None else np.atleast_1d(np.asarray(d, dtype=float))
        )
        if self.d.shape != (spec.n_u,):
            raise ValueError(f"d must have shape ({spec.n_u},)")
        if self.s0.shape != (spec.n_x,):
            raise ValueError(f"s0 must have shape ({spec.n_x},)")
        if self.theta.shape != (spec.n_theta,):
            raise ValueError(f"theta must have shape ({spec.n_theta},)")

        n = spec.horizon
        self.n_y = (n + 1) * spec.n_x + n * spec.n_u + n * spec.n_slack
        self.n_eq = (n + 1) * spec.n_x
        self.n_in = n * spec.m_stage + spec.m_term
        self._off_u = (n + 1) * spec.n_x
        self._off_sl = self._off_u + n * spec.n_u
        self._struct: tuple[np.ndarray, np.ndarray] | None = None
        self._cache: dict[str, np.ndarray] | None = None
        if spec.is_quadratic:
            self._build_quadratic_cache()

    # -- index helpers -------------------------------------------------

    def ix(self, k: int) -> slice:
        return slice(k * self.spec.n_x, (k + 1) * self.spec.n_x)

    def iu(self, k: int) -> slice:
        return slice(self._off_u + k * self.spec.n_u, self._off_u + (k + 1) * self.spec.n_u)

    def isl(self, k: int) -> slice:
        return slice(
            self._off_sl + k * self.spec.n_slack,
            self._off_sl + (k + 1) * self.spec.n_slack,
        )

    @property
    def u0_slice(self) -> slice:
        return self.iu(0)

    def split(self, y: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return y[self.ix(k)], y[self.iu(k)], y[self.isl(k)]

    def _stage_indices(self, k: int) -> np.ndarray:
        return np.r_[
            np.arange(*self.ix(k).indices(self.n_y)),
            np.arange(*self.iu(k).indices(self.n_y)),
            np.arange(*self.isl(k).indices(self.n_y)),
        ]

    # -- constraint structure (affine family: constant Jacobians) --------

    def _assemble_structure(self) -> tuple[np.ndarray, np.ndarray]:
        if self._struct is not None:
            return self._struct
        sp, th = self.spec, self.theta
        n = sp.horizon
        zx, zu, zsl = np.zeros(sp.n_x), np.zeros(sp.n_u), np.zeros(sp.n_slack)
        a = np.zeros((self.n_eq, self.n_y))
        g = np.zeros((self.n_in, self.n_y))
        a[self.ix(0), self.ix(0)] = np.eye(sp.n_x)
        for k in range(n):
            ik = self.profile[k]
            jac = sp.dynamics_jac(k, zx, zu, ik, th)
            a[self.ix(k + 1), self.ix(k)] = -jac[:, : sp.n_x]
            a[self.ix(k + 1), self.iu(k)] = -jac[:, sp.n_x :]
            a[self.ix(k + 1), self.ix(k + 1)] = np.eye(sp.n_x)
            hjac = sp.stage_ineq_jac(k, zx, zu, zsl, ik, th)
            rows = slice(k * sp.m_stage, (k + 1) * sp.m_stage)
            g[rows, self.ix(k)] = hjac[:, : sp.n_x]
            g[rows, self.iu(k)] = hjac[:, sp.n_x : sp.n_x + sp.n_u]
            g[rows, self.isl(k)] = hjac[:, sp.n_x + sp.n_u :]
        if sp.m_term:
            g[n * sp.m_stage :, self.ix(n)] = sp.terminal_ineq_jac(zx, th)
        self._struct = (a, g)
        return self._struct

    def _build_quadratic_cache(self) -> None:
        sp, th = self.spec, self.theta
        zx, zu, zsl = np.zeros(sp.n_x), np.zeros(sp.n_u), np.zeros(sp.n_slack)
        w = np.zeros((self.n_y, self.n_y))
        for k in range(sp.horizon):
            idx = self._stage_indices(k)
            w[np.ix_(idx, idx)] += sp.stage_cost_hess(k, zx, zu, zsl, self.profile[k], th)
        xn = np.arange(*self.ix(sp.horizon).indices(self.n_y))
        w[np.ix_(xn, xn)] += sp.terminal_cost_hess(zx, th)

        a, g = self._assemble_structure()
        y0 = np.zeros(self.n_y)
        self._cache = {
            "W": w,
            "A": a,
            "G": g,
            "g0": self._objective_grad_slow(y0),
            "f0": self._eq_slow(y0),
            "h0": self._ineq_slow(y0),
            "obj0": self._objective_slow(y0),
        }

    # -- evaluation ------------------------------------------------------

    def objective(self, y: np.ndarray) -> float:
        if self._cache is not None:
            c = self._cache
            return float(0.5 * y @ (c["W"] @ y) + c["g0"] @ y + c["obj0"])
        return self._objective_slow(y)

    def _objective_slow(self, y: np.ndarray) -> float:
        sp, th = self.spec, self.theta
        total = float(self.d @ y[self.iu(0)])
        for k in range(sp.horizon):
            x, u, sl = self.split(y, k)
            total += sp.stage_cost(k, x, u, sl, self.profile[k], th)
        total += sp.terminal_cost(y[self.ix(sp.horizon)], th)
        return total

    def objective_grad(self, y: np.ndarray) -> np.ndarray:
        if self._cache is not None:
            c = self._cache
            return c["W"] @ y + c["g0"]
        return self._objective_grad_slow(y)

    def _objective_grad_slow(self, y: np.ndarray) -> np.ndarray:
        sp, th = self.spec, self.theta
        grad = np.zeros(self.n_y)
        for k in range(sp.horizon):
            x, u, sl = self.split(y, k)
            gv = sp.stage_cost_grad(k, x, u, sl, self.profile[k], th)
            grad[self.ix(k)] += gv[: sp.n_x]
            grad[self.iu(k)] += gv[sp.n_x : sp.n_x + sp.n_u]
            grad[self.isl(k)] += gv[sp.n_x + sp.n_u :]
        grad[self.ix(sp.horizon)] += sp.terminal_cost_grad(y[self.ix(sp.horizon)], th)
        grad[self.iu(0)] += self.d
        return grad

    def eq(self, y: np.ndarray) -> np.ndarray:
        if self._cache is not None:
            c = self._cache
            return c["A"] @ y + c["f0"]
        return self._eq_slow(y)

    def _eq_slow(self, y: np.ndarray) -> np.ndarray:
        sp, th = self.spec, self.theta
        f = np.zeros(self.n_eq)
        f[self.ix(0)] = y[self.ix(0)] - self.s0
        for k in range(sp.horizon):
            x, u, _ = self.split(y, k)
            f[self.ix(k + 1)] = y[self.ix(k + 1)] - sp.dynamics(
                k, x, u, self.profile[k], th
            )
        return f

    def ineq(self, y: np.ndarray) -> np.ndarray:
        if self._cache is not None:
            c = self._cache
            return c["G"] @ y + c["h0"]
        return self._ineq_slow(y)

    def _ineq_slow(self, y: np.ndarray) -> np.ndarray:
        sp, th = self.spec, self.theta
        h = np.zeros(self.n_in)
        for k in range(sp.horizon):
            x, u, sl = self.split(y, k)
            h[k * sp.m_stage : (k + 1) * sp.m_stage] = sp.stage_ineq(
                k, x, u, sl, self.profile[k], th
            )
        if sp.m_term:
            h[sp.horizon * sp.m_stage :] = sp.terminal_ineq(y[self.ix(sp.horizon)], th)
        return h

    def eq_jac(self, y: np.ndarray) -> np.ndarray:
        return self._assemble_structure()[0]

    def ineq_jac(self, y: np.ndarray) -> np.ndarray:
        return self._assemble_structure()[1]

    def lag_hess(self, y: np.ndarray, lam: np.ndarray, mu: np.ndarray) -> np.ndarray:
        if self._cache is not None:
            return self._cache["W"]
        sp, th = self.spec, self.theta
        w = np.zeros((self.n_y, self.n_y))
        for k in range(sp.horizon):
            x, u, sl = self.split(y, k)
            idx = self._stage_indices(k)
            w[np.ix_(idx, idx)] += sp.stage_cost_hess(k, x, u, sl, self.profile[k], th)
        xn = np.arange(*self.ix(sp.horizon).indices(self.n_y))
        w[np.ix_(xn, xn)] += sp.terminal_cost_hess(y[self.ix(sp.horizon)], th)
        return w

    # -- theta derivatives (sensitivity layer) ---------------------------

    def lag_grad_theta(self, y: np.ndarray, lam: np.ndarray, mu: np.ndarray) -> np.ndarray:
        sp, th = self.spec, self.theta
        out = np.zeros(sp.n_theta)
        for k in range(sp.horizon):
            x, u, sl = self.split(y, k)
            out += sp.stage_cost_grad_theta(k, x, u, sl, self.profile[k], th)
        out += sp.terminal_cost_grad_theta(y[self.ix(sp.horizon)], th)
        out += self.eq_jac_theta(y).T @ lam
        out += self.ineq_jac_theta(y).T @ mu
        return out

    def lag_grad_y_jac_theta(
        self, y: np.ndarray, lam: np.ndarray, mu: np.ndarray
    ) -> np.ndarray:
        sp, th = self.spec, self.theta
        out = np.zeros((self.n_y, sp.n_theta))
        for k in range(sp.horizon):
            x, u, sl = self.split(y, k)
            cross = sp.stage_cost_cross(k, x, u, sl, self.profile[k], th)
            out[self.ix(k)] += cross[: sp.n_x]
            out[self.iu(k)] += cross[sp.n_x : sp.n_x + sp.n_u]
            out[self.isl(k)] += cross[sp.n_x + sp.n_u :]
        out[self.ix(sp.horizon)] += sp.terminal_cost_cross(y[self.ix(sp.horizon)], th)
        return out

    def eq_jac_theta(self, y: np.ndarray) -> np.ndarray:
        sp, th = self.spec, self.theta
        out = np.zeros((self.n_eq, sp.n_theta))
        for k in range(sp.horizon):
            x, u, _ = self.split(y, k)
            out[self.ix(k + 1)] = -sp.dynamics_jac_theta(k, x, u, self.profile[k], th)
        return out

    def ineq_jac_theta(self, y: np.ndarray) -> np.ndarray:
        sp, th = self.spec, self.theta
        out = np.zeros((self.n_in, sp.n_theta))
        for k in range(sp.horizon):
            x, u, sl = self.split(y, k)
            out[k * sp.m_stage : (k + 1) * sp.m_stage] = sp.stage_ineq_jac_theta(
                k, x, u, sl, self.profile[k], th
            )
        if sp.m_term:
            out[sp.horizon * sp.m_stage :] = sp.terminal_ineq_jac_theta(
                y[self.ix(sp.horizon)], th
            )
        return out

    # -- starting point ---------------------------------------------------

    def initial_guess(self) -> np.ndarray:
        """Dynamics rollout with zero inputs, slacks pushed inside the bounds."""
        sp, th = self.spec, self.theta
        y = np.zeros(self.n_y)
        y[self.ix(0)] = self.s0
        for k in range(sp.horizon):
            x = y[self.ix(k)]
            y[self.ix(k + 1)] = sp.dynamics(k, x, np.zeros(sp.n_u), self.profile[k], th)
            if sp.n_slack:
                y[self.isl(k)] = sp.band.violation(float(x[0])) + 0.5
        return y


# ----------------------------------------------------------------------
# KKT residual
# ----------------------------------------------------------------------


def kkt_residual(
    nlp, point: PrimalDualPoint, tau: float | None = None
) -> tuple[np.ndarray, float]:
    """Stacked fixed-tau KKT residual and its infinity norm."""
    tau = point.tau if tau is None else tau
    y, lam, mu = point.y, point.lam, point.mu
    grad_l = nlp.objective_grad(y) + nlp.eq_jac(y).T @ lam + nlp.ineq_jac(y).T @ mu
    r = np.concatenate([grad_l, nlp.eq(y), mu * nlp.ineq(y) + tau])
    return r, float(np.max(np.abs(r)))


# ----------------------------------------------------------------------
# Newton core
# ----------------------------------------------------------------------


@dataclass
class _Iterate:
    y: np.ndarray
    lam: np.ndarray
    mu: np.ndarray


def _newton_at_tau(nlp, it: _Iterate, tau: float, tol: float, budget: int) -> tuple[bool, int]:
    """Newton on the fixed-tau residual, updating ``it`` in place."""
    n_y, n_eq = nlp.n_y, nlp.n_eq
    iters = 0
    while True:
        h = nlp.ineq(it.y)
        a = nlp.eq_jac(it.y)
        g = nlp.ineq_jac(it.y)
        grad_l = nlp.objective_grad(it.y) + a.T @ it.lam + g.T @ it.mu
        r = np.concatenate([grad_l, nlp.eq(it.y), it.mu * h + tau])
        if float(np.max(np.abs(r))) <= tol:
            return True, iters
        if iters >= budget:
            return False, iters

        n = n_y + n_eq + nlp.n_in
        jac = np.zeros((n, n))
        jac[:n_y, :n_y] = nlp.lag_hess(it.y, it.lam, it.mu)
        jac[:n_y, n_y : n_y + n_eq] = a.T
        jac[:n_y, n_y + n_eq :] = g.T
        jac[n_y : n_y + n_eq, :n_y] = a
        jac[n_y + n_eq :, :n_y] = it.mu[:, None] * g
        jac[n_y + n_eq :, n_y + n_eq :] = np.diag(h)

        try:
            step = np.linalg.solve(jac, -r)
        except np.linalg.LinAlgError:
            step = None
        if step is None or not np.all(np.isfinite(step)):
            smallest = float(np.linalg.svd(jac, compute_uv=False)[-1])
            raise KktSingularError(iters, tau, smallest)

        dy = step[:n_y]
        dmu = step[n_y + n_eq :]
        alpha = 1.0
        neg = dmu < 0.0
        if np.any(neg):
            alpha = min(alpha, float(np.min(-FRACTION_TO_BOUNDARY * it.mu[neg] / dmu[neg])))
        dh = g @ dy
        grow = dh > 0.0
        if np.any(grow):
            alpha = min(alpha, float(np.min(-FRACTION_TO_BOUNDARY * h[grow] / dh[grow])))
        # guard for non-affine inequalities: back off until strictly interior
        for _ in range(30):
            if np.all(nlp.ineq(it.y + alpha * dy) < 0.0):
                break
            alpha *= 0.5
        it.y = it.y + alpha * dy
        it.lam = it.lam + alpha * step[n_y : n_y + n_eq]
        it.mu = np.maximum(it.mu + alpha * dmu, 1e-300)
        iters += 1


def _follow_path(
    nlp, it: _Iterate, tau0: float, tau_target: float, tol: float, max_iter: int
) -> tuple[bool, int, float]:
    """Reduce tau geometrically from tau0 to tau_target.  Returns
    (converged at target, iterations used, final tau)."""
    tau = tau0
    total = 0
    while True:
        inner_tol = max(0.2 * tau, tol) if tau > tau_target else tol
        converged, used = _newton_at_tau(nlp, it, tau, inner_tol, max_iter - total)
        total += used
        if tau <= tau_target:
            return converged, total, tau
        if not converged:
            return False, total, tau
        tau = max(tau_target, 0.1 * tau)


# ----------------------------------------------------------------------
# solver entry point
# ----------------------------------------------------------------------


def solve_fixed_profile(
    nlp: PinnedProfileNlp,
    tau_target: float = 1e-9,
    warm_start: PrimalDualPoint | None = None,
    kkt_tol: float = 1e-8,
    max_iter: int = 100,
    polish_tol: float | None = None,
    check_feasibility: bool = True,
) -> SolveReport:
    """Path-following solve of one fixed-profile NLP.

    Args:
        nlp: transcribed problem.
        tau_target: final barrier parameter.  The default is small enough
            that the reported objective sits within ~n_in*tau of the true
            optimum; sensitivity consumers pass a larger value and
            differentiate at that fixed tau.
        warm_start: point from a nearby instance; falls back to a cold
            start when it is not strictly interior.
        kkt_tol: infinity-norm tolerance on the fixed-tau residual.
        max_iter: total Newton iteration budget.
        polish_tol: optional tighter residual target (finite-difference
            oracles need residuals well below the difference step).
        check_feasibility: classify non-interior or stalled instances with
            the elastic phase-I instead of failing.

    Raises:
        KktSingularError: the KKT matrix lost rank; reported with its
            smallest singular value, never silently regularised.
    """
    if nlp.n_in == 0:
        raise ValueError("solver expects at least one inequality constraint")
    tol = stationarity_tolerance(tau_target, kkt_tol)
    if polish_tol is not None:
        tol = min(tol, polish_tol)

    it, warm = _starting_point(nlp, warm_start)
    if np.any(nlp.ineq(it.y) >= 0.0):
        if not check_feasibility:
            raise ValueError("starting point is not strictly interior")
        infeasible, interior = _phase1(nlp)
        if infeasible is not None:
            return infeasible
        it = _Iterate(y=interior, lam=np.zeros(nlp.n_eq), mu=np.ones(nlp.n_in))
        warm = False

    if warm:
        tau0 = float(np.clip(np.median(-it.mu * nlp.ineq(it.y)), tau_target, 1.0))
    else:
        tau0 = max(1.0, tau_target)
    converged, total, tau = _follow_path(nlp, it, tau0, tau_target, tol, max_iter)

    if converged:
        point = PrimalDualPoint(y=it.y, lam=it.lam, mu=it.mu, tau=tau)
        _, res = kkt_residual(nlp, point)
        return SolveReport(
            status="solved",
            objective=nlp.objective(it.y),
            point=point,
            iterations=total,
            kkt_residual=res,
        )

    if check_feasibility:
        infeasible, _ = _phase1(nlp)
        if infeasible is not None:
            return infeasible
    point = PrimalDualPoint(y=it.y, lam=it.lam, mu=np.maximum(it.mu, 0.0), tau=tau)
    _, res = kkt_residual(nlp, point)
    return SolveReport(
        status="max_iter",
        objective=nlp.objective(it.y),
        point=point,
        iterations=total,
        kkt_residual=res,
        message=f"stopped at tau={tau:.3e} with residual {res:.3e}",
    )


def _starting_point(
    nlp: PinnedProfileNlp, warm_start: PrimalDualPoint | None
) -> tuple[_Iterate, bool]:
    if warm_start is not None:
        y = warm_start.y.copy()
        if np.all(nlp.ineq(y) < 0.0):
            mu = np.maximum(warm_start.mu.copy(), 1e-12)
            return _Iterate(y=y, lam=warm_start.lam.copy(), mu=mu), True
        logger.debug("warm start not interior; falling back to cold start")
    return (
        _Iterate(y=nlp.initial_guess(), lam=np.zeros(nlp.n_eq), mu=np.ones(nlp.n_in)),
        False,
    )


# ----------------------------------------------------------------------
# elastic phase-I
# ----------------------------------------------------------------------


class _MarginNlp:
    """Max-margin feasibility problem over z = (y, m):

        min  -m + ridge/2 * |z|^2   s.t.  f(y) = 0,  h(y) + m <= 0.

    A positive optimal margin certifies a strictly interior point; a
    negative one equals minus the smallest achievable worst violation.
    The start (dynamics rollout, m below -max h) is always strictly
    feasible, and the dynamics defects are satisfiable for any inputs, so
    no elastic terms on the equalities are needed.  The ridge bounds the
    otherwise linear objective and keeps the KKT matrix nonsingular.
    """

    RIDGE = 1e-8

    def __init__(self, base: PinnedProfileNlp):
        self.base = base
        self.n_y = base.n_y + 1
        self.n_eq = base.n_eq
        self.n_in = base.n_in

    def margin(self, z: np.ndarray) -> float:
        return float(z[-1])

    def objective(self, z: np.ndarray) -> float:
        return -z[-1] + 0.5 * self.RIDGE * float(z @ z)

    def objective_grad(self, z: np.ndarray) -> np.ndarray:
        grad = self.RIDGE * z
        grad[-1] -= 1.0
        return grad

    def eq(self, z: np.ndarray) -> np.ndarray:
        return self.base.eq(z[:-1])

    def ineq(self, z: np.ndarray) -> np.ndarray:
        return self.base.ineq(z[:-1]) + z[-1]

    def eq_jac(self, z: np.ndarray) -> np.ndarray:
        out = np.zeros((self.n_eq, self.n_y))
        out[:, :-1] = self.base.eq_jac(z[:-1])
        return out

    def ineq_jac(self, z: np.ndarray) -> np.ndarray:
        out = np.zeros((self.n_in, self.n_y))
        out[:, :-1] = self.base.ineq_jac(z[:-1])
        out[:, -1] = 1.0
        return out

    def lag_hess(self, z: np.ndarray, lam: np.ndarray, mu: np.ndarray) -> np.ndarray:
        out = np.zeros((self.n_y, self.n_y))
        out[:-1, :-1] = self.base.lag_hess(z[:-1], lam, mu)
        out[np.diag_indices(self.n_y)] += self.RIDGE
        return out

    def initial_guess(self) -> np.ndarray:
        y = self.base.initial_guess()
        z = np.zeros(self.n_y)
        z[:-1] = y
        z[-1] = -float(np.max(self.base.ineq(y))) - 1.0
        return z


def _phase1(nlp: PinnedProfileNlp) -> tuple[SolveReport | None, np.ndarray | None]:
    """Classify feasibility.  Returns (infeasible report, None) or
    (None, strictly interior point) when the instance is feasible."""
    margin_nlp = _MarginNlp(nlp)
    it = _Iterate(
        y=margin_nlp.initial_guess(),
        lam=np.zeros(margin_nlp.n_eq),
        mu=np.ones(margin_nlp.n_in),
    )
    _, total, _ = _follow_path(margin_nlp, it, 1.0, 1e-9, 1e-10, 300)
    margin = margin_nlp.margin(it.y)
    if margin > 1e-12:
        return None, it.y[:-1].copy()
    violation = max(-margin, 0.0)
    reason = (
        f"phase-I worst violation {violation:.3e}"
        if violation > INFEASIBILITY_THRESHOLD
        else "feasible set has empty interior"
    )
    return (
        SolveReport(
            status="infeasible",
            objective=np.nan,
            point=None,
            iterations=total,
            kkt_residual=0.0,
            infeasibility=violation,
            message=reason,
        ),
        None,
    )
