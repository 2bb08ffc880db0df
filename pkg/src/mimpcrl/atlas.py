"""Exact dynamic-programming value maps for the scalar benchmark problem.

For the scalar model family every finite-horizon value function is
piecewise quadratic in the state, so instead of re-solving an NLP per
query the whole problem is solved once per parameter vector, backwards in
time, as closed-form operations on piecewise quadratics:

* switch off (i = 0): the input decouples and the successor value is a
  pure shift by the model bias;
* switch on (i = 1): minimising the input penalty plus the successor
  value is a proximal (Moreau) envelope evaluated at a shifted point.

``ScalarValueAtlas`` keeps the free-integer optimal cost-to-go per stage
(with argmin branch tags for replaying optimal integer completions), the
per-stage envelopes (for recovering the optimal first input, also under a
linear first-input perturbation with weight d), and an on-demand cache of
pinned-profile value functions shared across common suffixes, which makes
exhaustive profile enumeration cheap.

All queries are exact minimisers of the underlying subproblems, which
makes the atlas both the production fast path and a strong cross-check
for the barrier solver.
"""

from __future__ import annotations

from itertools import product

import numpy as np

from . import pq
from .ocp import OcpSpec

_BRANCH_OFF = 0
_BRANCH_ON = 1


class ScalarValueAtlas:
    """All pinned and free subproblem minima for one parameter vector."""

    def __init__(self, spec: OcpSpec, theta: np.ndarray):
        if spec.n_x != 1 or spec.n_u != 1 or spec.n_i != 1 or spec.n_slack != 1:
            raise ValueError("the atlas covers the scalar problem layout only")
        if spec.m_term:
            raise ValueError("terminal inequalities are not supported")
        self.spec = spec
        self.theta = np.asarray(theta, dtype=float).copy()
        if self.theta.shape != (spec.n_theta,):
            raise ValueError(f"theta must have shape ({spec.n_theta},)")
        x_ref, u_ref, switch_cost, penalty, bias = self.theta
        self.x_ref = float(x_ref)
        self.u_ref = float(u_ref)
        self.switch_cost = float(switch_cost)
        self.penalty = float(penalty)
        self.bias = float(bias)
        n = spec.horizon
        self.horizon = n

        # running cost of the current state, shared by both branches
        self._state_cost = pq.quadratic(0.5, -self.x_ref, 0.5 * self.x_ref**2)
        if self.penalty != 0.0:
            self._state_cost = self._state_cost.add(
                pq.hinge_band(spec.band.lo, spec.band.hi, self.penalty)
            )

        terminal_curv = 0.5 * spec.terminal_weight
        terminal = pq.quadratic(
            terminal_curv, -2.0 * terminal_curv * self.x_ref,
            terminal_curv * self.x_ref**2,
        )

        # cost_to_go[k] is the free-integer optimum over stages k..N-1;
        # its piece meta carries the minimising branch for replay.
        # envelope[k] is the proximal envelope of cost_to_go[k+1].
        self.cost_to_go: list[pq.PiecewiseQuadratic | None] = [None] * (n + 1)
        self.envelope: list[pq.Envelope | None] = [None] * n
        self.cost_to_go[n] = terminal
        for k in range(n - 1, -1, -1):
            succ = self.cost_to_go[k + 1]
            env = pq.proximal_envelope(succ)
            self.envelope[k] = env
            off = succ.shift(self.bias)
            on = env.pq.shift(self.u_ref + self.bias).add_quadratic(
                0.0, 0.0, self.switch_cost
            )
            self.cost_to_go[k] = (
                pq.minimum(off, on, tag_f=_BRANCH_OFF, tag_g=_BRANCH_ON)
                .add(self._state_cost)
                .compress()
            )

        # first-stage values with the first integer pinned
        w1 = self.cost_to_go[1]
        self._phi_on_env = pq.proximal_envelope(w1)
        self._phi = (
            w1.shift(self.bias).add(self._state_cost).compress(),
            self._phi_on_env.pq.shift(self.u_ref + self.bias)
            .add_quadratic(0.0, 0.0, self.switch_cost)
            .add(self._state_cost)
            .compress(),
        )

        self._suffix_values: dict[tuple[int, ...], pq.PiecewiseQuadratic] = {
            (): terminal
        }
        self._suffix_envelopes: dict[tuple[int, ...], pq.Envelope] = {}

    # -- free problem ----------------------------------------------------

    def free_value(self, s: np.ndarray | float) -> np.ndarray:
        """Mixed-integer optimum as a function of the initial state."""
        return self.cost_to_go[0](np.asarray(s, dtype=float))

    def phi(self, s: np.ndarray | float) -> np.ndarray:
        """Values with the first integer pinned; shape (2,) + s.shape."""
        s = np.asarray(s, dtype=float)
        return np.stack([self._phi[0](s), self._phi[1](s)])

    def completion(self, s: np.ndarray | float, first: np.ndarray | int) -> np.ndarray:
        """Optimal integer profile given the first entry, shape s.shape+(N,).

        Stage 0 applies ``first``; later stages replay the branch tags left
        by the backward pass.  Exact ties fall on the side the minimum
        construction resolved them to (the off branch on overlaps).
        """
        s = np.atleast_1d(np.asarray(s, dtype=float))
        first = np.broadcast_to(np.asarray(first, dtype=np.int64), s.shape)
        bits = np.zeros(s.shape + (self.horizon,), dtype=np.int64)
        bits[..., 0] = first
        x = self._advance(s, first, 0)
        for k in range(1, self.horizon):
            w = self.cost_to_go[k]
            branch = w.meta[w.piece_index(x), 0]
            bits[..., k] = branch
            x = self._advance(x, branch, k)
        return bits

    def _advance(self, x: np.ndarray, branch: np.ndarray, k: int) -> np.ndarray:
        on = self.envelope[k].argmin(x + self.u_ref + self.bias)
        return np.where(branch == _BRANCH_ON, on, x + self.bias)

    # -- pinned profiles ---------------------------------------------------

    def suffix_value(self, bits: tuple[int, ...]) -> pq.PiecewiseQuadratic:
        """Value of stages N-len(bits)..N-1 under the pinned suffix ``bits``.

        The stage cost is time-invariant, so the function depends only on
        the remaining bit string; common suffixes are shared in a cache.
        """
        cached = self._suffix_values.get(bits)
        if cached is not None:
            return cached
        tail_value = self.suffix_value(bits[1:])
        if bits[0] == 0:
            value = tail_value.shift(self.bias).add(self._state_cost).compress()
        else:
            env = self.suffix_envelope(bits[1:])
            value = (
                env.pq.shift(self.u_ref + self.bias)
                .add_quadratic(0.0, 0.0, self.switch_cost)
                .add(self._state_cost)
                .compress()
            )
        self._suffix_values[bits] = value
        return value

    def suffix_envelope(self, bits: tuple[int, ...]) -> pq.Envelope:
        env = self._suffix_envelopes.get(bits)
        if env is None:
            env = pq.proximal_envelope(self.suffix_value(bits))
            self._suffix_envelopes[bits] = env
        return env

    def pinned_value(self, s: np.ndarray | float, bits) -> np.ndarray:
        """Optimal cost with the whole integer profile pinned."""
        key = tuple(int(b) for b in np.asarray(bits).reshape(-1))
        if len(key) != self.horizon:
            raise ValueError("profile length must match the horizon")
        return self.suffix_value(key)(np.asarray(s, dtype=float))

    def all_profile_values(self, s: float) -> tuple[np.ndarray, np.ndarray]:
        """Values of every integer profile at one state.

        Returns (profiles, values) with profiles in lexicographic order,
        shape (2^N, N).  Shared suffixes make this linear in the number of
        distinct suffixes rather than solves.
        """
        profiles = np.array(list(product((0, 1), repeat=self.horizon)), dtype=np.int64)
        values = np.array(
            [float(self.suffix_value(tuple(row))(float(s))) for row in profiles]
        )
        return profiles, values

    # -- first continuous input -------------------------------------------

    def first_input(
        self,
        s: np.ndarray | float,
        first: np.ndarray | int,
        d: np.ndarray | float = 0.0,
    ) -> np.ndarray:
        """Optimal first input with first integer ``first``, remaining
        integers at their unperturbed optimal completion, and an extra
        linear objective term d * u_0.

        With the switch off the input only pays its own penalty, so
        u_0 = u_ref - d.  With the switch on, completing the square folds
        d into the envelope query point.
        """
        s = np.atleast_1d(np.asarray(s, dtype=float))
        first = np.broadcast_to(np.asarray(first, dtype=np.int64), s.shape)
        d = np.broadcast_to(np.asarray(d, dtype=float), s.shape)
        out = np.full(s.shape, self.u_ref) - d
        on = first == _BRANCH_ON
        if np.any(on):
            bits = self.completion(s[on], 1)
            z = s[on] + self.u_ref + self.bias - d[on]
            target = np.empty(z.shape)
            suffixes = [tuple(row) for row in bits[..., 1:].reshape(-1, self.horizon - 1)]
            for key in set(suffixes):
                mask = np.array([sfx == key for sfx in suffixes]).reshape(z.shape)
                target[mask] = self.suffix_envelope(key).argmin(z[mask])
            out[on] = target - s[on] - self.bias
        return out
