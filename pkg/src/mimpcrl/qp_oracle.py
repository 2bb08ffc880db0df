"""Independent reference solutions for fixed-profile subproblems.

Everything here exists to check the interior-point solver against a
different algorithm family on a different transcription, so none of it
shares code with :mod:`.ipsolver`:

* the states are eliminated, leaving a dense QP in inputs and slacks;
* that QP is solved exactly with a primal active-set method;
* as a second opinion, ``enumerate_slack_regimes`` brute-forces the
  per-stage slack regimes (exponential in the horizon) and solves an
  unconstrained least-squares problem per regime.

Only quadratic problems without terminal inequalities are supported;
that covers every instance the checks need.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .ocp import OcpSpec


@dataclass(frozen=True)
class CondensedQp:
    """min 0.5 v'Hv + g'v + const  s.t.  C v <= b, with v = (inputs, slacks)."""

    h: np.ndarray
    g: np.ndarray
    c_ineq: np.ndarray
    b_ineq: np.ndarray
    const: float
    n_u_total: int
    state_gain: np.ndarray
    state_offset: np.ndarray

    def states(self, v: np.ndarray) -> np.ndarray:
        """Trajectory x_0..x_N implied by v, shape (N+1, n_x)."""
        return self.state_offset + np.einsum("kij,j->ki", self.state_gain, v)

    def objective(self, v: np.ndarray) -> float:
        return float(0.5 * v @ (self.h @ v) + self.g @ v + self.const)


@dataclass(frozen=True)
class OracleSolution:
    objective: float
    inputs: np.ndarray
    slacks: np.ndarray
    states: np.ndarray
    active: list[int]
    multipliers: np.ndarray


def build_condensed(
    spec: OcpSpec,
    s0: float | np.ndarray,
    theta: np.ndarray,
    profile: np.ndarray,
    d: np.ndarray | None = None,
) -> CondensedQp:
    """Eliminate the states of a quadratic OCP with a pinned profile."""
    if not spec.is_quadratic:
        raise ValueError("condensing requires a quadratic problem")
    if spec.m_term:
        raise ValueError("terminal inequalities are not supported here")
    n = spec.horizon
    theta = np.asarray(theta, dtype=float)
    profile = np.asarray(profile, dtype=float).reshape(n, spec.n_i)
    s0 = np.atleast_1d(np.asarray(s0, dtype=float))
    n_v = n * spec.n_u + n * spec.n_slack
    zx, zu, zsl = np.zeros(spec.n_x), np.zeros(spec.n_u), np.zeros(spec.n_slack)

    def u_cols(k: int) -> slice:
        return slice(k * spec.n_u, (k + 1) * spec.n_u)

    def sl_cols(k: int) -> slice:
        return slice(n * spec.n_u + k * spec.n_slack, n * spec.n_u + (k + 1) * spec.n_slack)

    # affine state maps x_k = P_k v + r_k
    p = np.zeros((n + 1, spec.n_x, n_v))
    r = np.zeros((n + 1, spec.n_x))
    r[0] = s0
    for k in range(n):
        jac = spec.dynamics_jac(k, zx, zu, profile[k], theta)
        fx, fu = jac[:, : spec.n_x], jac[:, spec.n_x :]
        c_k = spec.dynamics(k, zx, zu, profile[k], theta)
        p[k + 1] = fx @ p[k]
        p[k + 1][:, u_cols(k)] += fu
        r[k + 1] = fx @ r[k] + c_k

    h = np.zeros((n_v, n_v))
    g = np.zeros(n_v)
    const = 0.0
    m = n * spec.m_stage
    c_rows = np.zeros((m, n_v))
    b_rows = np.zeros(m)

    for k in range(n):
        # w_k = (x_k, u_k, sl_k) = T v + t
        t_mat = np.zeros((spec.n_stage_vars, n_v))
        t_vec = np.zeros(spec.n_stage_vars)
        t_mat[: spec.n_x] = p[k]
        t_vec[: spec.n_x] = r[k]
        t_mat[spec.n_x : spec.n_x + spec.n_u, u_cols(k)] = np.eye(spec.n_u)
        t_mat[spec.n_x + spec.n_u :, sl_cols(k)] = np.eye(spec.n_slack)

        hk = spec.stage_cost_hess(k, zx, zu, zsl, profile[k], theta)
        gk = spec.stage_cost_grad(k, zx, zu, zsl, profile[k], theta)
        h += t_mat.T @ hk @ t_mat
        g += t_mat.T @ (hk @ t_vec + gk)
        const += float(
            0.5 * t_vec @ (hk @ t_vec)
            + gk @ t_vec
            + spec.stage_cost(k, zx, zu, zsl, profile[k], theta)
        )

        jk = spec.stage_ineq_jac(k, zx, zu, zsl, profile[k], theta)
        h0 = spec.stage_ineq(k, zx, zu, zsl, profile[k], theta)
        rows = slice(k * spec.m_stage, (k + 1) * spec.m_stage)
        c_rows[rows] = jk @ t_mat
        b_rows[rows] = -(h0 + jk @ t_vec)

    hn = spec.terminal_cost_hess(zx, theta)
    gn = spec.terminal_cost_grad(zx, theta)
    h += p[n].T @ hn @ p[n]
    g += p[n].T @ (hn @ r[n] + gn)
    const += float(0.5 * r[n] @ (hn @ r[n]) + gn @ r[n] + spec.terminal_cost(zx, theta))

    if d is not None:
        g[u_cols(0)] += np.atleast_1d(np.asarray(d, dtype=float))

    return CondensedQp(
        h=h, g=g, c_ineq=c_rows, b_ineq=b_rows, const=float(const),
        n_u_total=n * spec.n_u, state_gain=p, state_offset=r,
    )


def active_set_qp(
    qp: CondensedQp,
    v0: np.ndarray,
    working: list[int],
    tol: float = 1e-11,
    max_iter: int = 500,
) -> tuple[np.ndarray, list[int], np.ndarray]:
    """Primal active-set method for a convex QP with inequality rows.

    ``v0`` must be feasible with the rows in ``working`` exactly active.
    The Hessian may be singular on a working set (the relaxations solved
    by the integer search have flat switch directions); such steps move
    along a zero-curvature descent ray until a row blocks.  Returns
    (solution, active rows, multipliers).
    """
    h, g, c, b = qp.h, qp.g, qp.c_ineq, qp.b_ineq
    v = np.asarray(v0, dtype=float).copy()
    if np.any(c @ v - b > 1e-9):
        raise ValueError("infeasible starting point")
    work = list(working)

    for _ in range(max_iter):
        cw = c[work]
        nw = len(work)
        kkt = np.zeros((v.size + nw, v.size + nw))
        kkt[: v.size, : v.size] = h
        if nw:
            kkt[: v.size, v.size :] = cw.T
            kkt[v.size :, : v.size] = cw
        rhs = np.concatenate([-(h @ v + g), np.zeros(nw)])
        is_ray = False
        try:
            sol = np.linalg.solve(kkt, rhs)
            if not np.all(np.isfinite(sol)):
                raise np.linalg.LinAlgError("non-finite step")
            step = sol[: v.size]
            mult = sol[v.size :]
        except np.linalg.LinAlgError:
            step = _descent_ray(h, h @ v + g, cw)
            mult = np.zeros(nw)
            is_ray = True

        if not is_ray and float(np.max(np.abs(step), initial=0.0)) < tol:
            if nw == 0 or float(np.min(mult)) >= -tol:
                return v, work, np.maximum(mult, 0.0)
            work.pop(int(np.argmin(mult)))
            continue

        alpha = np.inf if is_ray else 1.0
        blocking = -1
        cp = c @ step
        candidates = cp > tol
        candidates[work] = False
        if np.any(candidates):
            ratios = np.full(b.size, np.inf)
            ratios[candidates] = (b[candidates] - c[candidates] @ v) / cp[candidates]
            j = int(np.argmin(ratios))
            if ratios[j] < alpha:
                alpha = float(ratios[j])
                blocking = j
        if blocking < 0 and is_ray:
            raise RuntimeError("descent ray is unblocked; the QP is unbounded")
        v = v + alpha * step
        if blocking >= 0:
            work.append(blocking)

    raise RuntimeError("active-set method did not converge")


def _descent_ray(h: np.ndarray, grad: np.ndarray, cw: np.ndarray) -> np.ndarray:
    """Unit direction with zero curvature and zero working-row movement.

    Used when the working-set system is singular: the objective is then
    linear along some feasible direction, and walking it until a row
    blocks restores a nonsingular working set.
    """
    stacked = np.vstack([h, cw]) if cw.size else h
    _, sv, vt = np.linalg.svd(stacked)
    scale = max(float(sv[0]), 1.0)
    null = vt[sv < 1e-10 * scale]
    if null.size == 0:
        raise RuntimeError("singular working-set system without a flat direction")
    slopes = null @ grad
    pick = int(np.argmax(np.abs(slopes)))
    if abs(slopes[pick]) < 1e-12:
        raise RuntimeError("flat directions are all gradient-orthogonal")
    return -np.sign(slopes[pick]) * null[pick]


def _vertex_start(spec: OcpSpec, qp: CondensedQp) -> tuple[np.ndarray, list[int]]:
    """Zero inputs, slacks sitting exactly on their defining constraint."""
    if spec.n_x != 1 or spec.n_u != 1 or spec.n_slack != 1 or spec.m_stage != 3:
        raise ValueError("vertex start assumes the scalar slack-band layout")
    n = spec.horizon
    v = np.zeros(qp.h.shape[0])
    states = qp.states(v)
    working: list[int] = []
    for k in range(n):
        x = float(states[k, 0])
        if x > spec.band.hi:
            v[n + k] = x - spec.band.hi
            working.append(3 * k)
        elif x < spec.band.lo:
            v[n + k] = spec.band.lo - x
            working.append(3 * k + 1)
        else:
            working.append(3 * k + 2)
    return v, working


def solve_condensed(
    spec: OcpSpec,
    s0: float | np.ndarray,
    theta: np.ndarray,
    profile: np.ndarray,
    d: np.ndarray | None = None,
) -> OracleSolution:
    """Exact minimum of one pinned-profile instance via the active set."""
    qp = build_condensed(spec, s0, theta, profile, d)
    v0, working = _vertex_start(spec, qp)
    v, active, mult = active_set_qp(qp, v0, working)
    n = spec.horizon
    return OracleSolution(
        objective=qp.objective(v),
        inputs=v[: qp.n_u_total].reshape(n, spec.n_u),
        slacks=v[qp.n_u_total :].reshape(n, spec.n_slack),
        states=qp.states(v),
        active=sorted(active),
        multipliers=mult,
    )


def enumerate_slack_regimes(
    spec: OcpSpec,
    s0: float | np.ndarray,
    theta: np.ndarray,
    profile: np.ndarray,
    d: np.ndarray | None = None,
    tol: float = 1e-9,
) -> float:
    """Brute-force cross-check of :func:`solve_condensed`.

    At a minimum with positive penalty weight each slack equals
    max(x - hi, lo - x, 0).  Per stage one of five regimes is assigned:
    one of the three max branches (turning the slack into an affine
    function of the state and the problem into an unconstrained quadratic
    in the inputs), or the state pinned to a band edge (an equality row;
    minima sitting exactly on the penalty kink fall in no branch
    interior).  Every candidate evaluates the true objective at a feasible
    point, and the optimum is reproduced by at least one assignment, so
    the minimum over candidates is exact.  Exponential in the horizon, so
    keep it to small instances.
    """
    qp = build_condensed(spec, s0, theta, profile, d)
    n = spec.horizon
    if spec.n_x != 1 or spec.n_u != 1 or spec.n_slack != 1:
        raise ValueError("regime enumeration assumes the scalar layout")
    lo, hi = spec.band.lo, spec.band.hi
    best = np.inf

    # regimes 0..2: sigma = alpha*x + beta on the stated region;
    # regimes 3..4: x pinned to an edge, sigma = 0
    branches = ((1.0, -hi), (-1.0, lo), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0))

    for assignment in product(range(5), repeat=n):
        m_mat = np.zeros((2 * n, n))
        m_vec = np.zeros(2 * n)
        m_mat[:n] = np.eye(n)
        pins: list[tuple[int, float]] = []
        for k, choice in enumerate(assignment):
            alpha, beta = branches[choice]
            m_mat[n + k] = alpha * qp.state_gain[k, 0, :n]
            m_vec[n + k] = alpha * qp.state_offset[k, 0] + beta
            if choice == 3:
                pins.append((k, hi))
            elif choice == 4:
                pins.append((k, lo))
        hh = m_mat.T @ qp.h @ m_mat
        gg = m_mat.T @ (qp.h @ m_vec + qp.g)
        cc = 0.5 * m_vec @ (qp.h @ m_vec) + qp.g @ m_vec + qp.const

        if pins:
            e_mat = np.array([qp.state_gain[k, 0, :n] for k, _ in pins])
            e_rhs = np.array([target - qp.state_offset[k, 0] for k, target in pins])
            kkt = np.zeros((n + len(pins), n + len(pins)))
            kkt[:n, :n] = hh
            kkt[:n, n:] = e_mat.T
            kkt[n:, :n] = e_mat
            rhs = np.concatenate([-gg, e_rhs])
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                continue
            u = sol[:n]
            if float(np.max(np.abs(e_mat @ u - e_rhs))) > 1e-8:
                continue
        else:
            u = np.linalg.solve(hh, -gg)

        x = qp.state_offset[:n, 0] + qp.state_gain[:n, 0, :n] @ u
        ok = True
        for k, choice in enumerate(assignment):
            if choice == 0 and x[k] < hi - tol:
                ok = False
                break
            if choice == 1 and x[k] > lo + tol:
                ok = False
                break
            if choice == 2 and not (lo - tol <= x[k] <= hi + tol):
                ok = False
                break
        if ok:
            best = min(best, float(0.5 * u @ (hh @ u) + gg @ u + cc))
    if not np.isfinite(best):
        raise RuntimeError("no consistent slack regime found")
    return best
