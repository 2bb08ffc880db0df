"""Sensitivity tests.

Every implicit-function derivative is validated against central finite
differences of re-solves AT THE SAME fixed tau.  The tau used for these
checks is 1e-6 with a 1e-12 polish: the wider boundary layer keeps the
solution a smooth function over the difference stencil while the polish
keeps the solve noise far below the truncation error.
"""

import numpy as np
import pytest

from mimpcrl import sens
from mimpcrl.atlas import ScalarValueAtlas
from mimpcrl.ipsolver import (
    KktSingularError,
    PinnedProfileNlp,
    PrimalDualPoint,
    solve_fixed_profile,
)
from mimpcrl.minlp import integer_value_table
from mimpcrl.ocp import BASELINE_PARAMS, build_scalar_example
from mimpcrl.policy import integer_distribution

SPEC = build_scalar_example()
THETA0 = BASELINE_PARAMS.as_array()
ON_FIRST = np.array([1, 0, 0, 0, 0, 0, 0, 0, 0, 0])
TAU_CHECK = 1e-6
POLISH = 1e-12


def solve_at(s0, theta, bits, d=None, tau=TAU_CHECK, warm=None):
    nlp = PinnedProfileNlp(SPEC, s0, theta, np.asarray(bits, dtype=float).reshape(10, 1), d=d)
    report = solve_fixed_profile(nlp, tau_target=tau, warm_start=warm, polish_tol=POLISH)
    assert report.solved, report.message
    return nlp, report


def fd_theta(fn, theta, step=1e-5):
    cols = []
    for j in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[j] += step
        dn[j] -= step
        cols.append((fn(up) - fn(dn)) / (2.0 * step))
    return np.stack(cols, axis=-1)


class TestValueGradient:
    def test_matches_fd_oracle_on_both_branches(self):
        atlas = ScalarValueAtlas(SPEC, THETA0)
        for first in (0, 1):
            bits = atlas.completion(0.5, first)[0]
            nlp, report = solve_at(0.5, THETA0, bits)
            grad = sens.value_gradient(nlp, report.point)
            oracle = fd_theta(lambda th: solve_at(0.5, th, bits, warm=report.point)[1].objective, THETA0)
            rel = np.abs(grad - oracle) / np.maximum(np.abs(oracle), 1e-6)
            assert rel.max() < 1e-4

    def test_switch_cost_component_counts_active_stages(self):
        # the switch price enters the cost linearly per active stage, so
        # that component of the gradient is exactly the profile sum
        rng = np.random.default_rng(5)
        for _ in range(3):
            bits = rng.integers(0, 2, size=10)
            nlp, report = solve_at(0.8, THETA0, bits)
            grad = sens.value_gradient(nlp, report.point)
            assert grad[2] == pytest.approx(float(bits.sum()), abs=1e-9)

    def test_model_bias_component_is_pure_multiplier_term(self):
        # the bias appears only in the dynamics, so its component must
        # equal the multiplier contraction with the dynamics sensitivity
        nlp, report = solve_at(0.5, THETA0, ON_FIRST)
        grad = sens.value_gradient(nlp, report.point)
        structural = nlp.eq_jac_theta(report.point.y).T @ report.point.lam
        assert grad[4] == pytest.approx(structural[4], abs=1e-12)

    def test_rejects_point_from_other_problem(self):
        nlp, report = solve_at(0.5, THETA0, ON_FIRST)
        other = PrimalDualPoint(
            y=report.point.y + 0.05,
            lam=report.point.lam,
            mu=report.point.mu,
            tau=report.point.tau,
        )
        with pytest.raises(ValueError, match="does not solve"):
            sens.value_gradient(nlp, other)


class TestSolutionSensitivity:
    def test_theta_derivatives_match_fd_resolves(self):
        rng = np.random.default_rng(17)
        checked = 0
        while checked < 4:
            theta = THETA0 + rng.uniform(-0.1, 0.1, size=5)
            theta[3] = abs(theta[3])
            s0 = float(rng.uniform(-1.0, 1.0))
            bits = ScalarValueAtlas(SPEC, theta).completion(s0, int(rng.integers(0, 2)))[0]
            nlp, report = solve_at(s0, theta, bits)
            if sens.near_active_set_change(nlp, report.point):
                continue
            full = sens.solution_sensitivity(nlp, report.point)

            def u0_of(th):
                n, r = solve_at(s0, th, bits, warm=report.point)
                return r.point.y[n.iu(0)][0]

            oracle = fd_theta(u0_of, theta)
            got = full.first_input_wrt_theta[0]
            mask = np.abs(oracle) > 1e-6
            assert np.all(np.abs(got - oracle)[~mask] < 1e-8)
            if mask.any():
                rel = np.abs(got - oracle)[mask] / np.abs(oracle)[mask]
                assert rel.max() < 1e-4
            checked += 1

    def test_perturbation_derivative_matches_fd_resolves(self):
        nlp, report = solve_at(0.5, THETA0, ON_FIRST)
        full = sens.solution_sensitivity(nlp, report.point)
        step = 1e-5
        up = solve_at(0.5, THETA0, ON_FIRST, d=np.array([step]), warm=report.point)
        dn = solve_at(0.5, THETA0, ON_FIRST, d=np.array([-step]), warm=report.point)
        oracle = (up[1].point.y[up[0].iu(0)][0] - dn[1].point.y[dn[0].iu(0)][0]) / (2 * step)
        assert full.first_input_wrt_perturbation[0, 0] == pytest.approx(oracle, rel=1e-6)

    def test_satisfies_implicit_linear_system(self):
        # reassemble the KKT Jacobian and both right-hand sides from the
        # public blocks and verify J @ (-dz) = rhs, which pins signs,
        # block placement, and the linearity of the solve in one shot
        nlp, report = solve_at(0.5, THETA0, ON_FIRST)
        full = sens.solution_sensitivity(nlp, report.point)
        y, lam, mu = report.point.y, report.point.lam, report.point.mu
        n_y, n_eq, n_in = nlp.n_y, nlp.n_eq, nlp.n_in
        jac = np.zeros((n_y + n_eq + n_in,) * 2)
        jac[:n_y, :n_y] = nlp.lag_hess(y, lam, mu)
        jac[:n_y, n_y : n_y + n_eq] = nlp.eq_jac(y).T
        jac[:n_y, n_y + n_eq :] = nlp.ineq_jac(y).T
        jac[n_y : n_y + n_eq, :n_y] = nlp.eq_jac(y)
        jac[n_y + n_eq :, :n_y] = mu[:, None] * nlp.ineq_jac(y)
        jac[n_y + n_eq :, n_y + n_eq :] = np.diag(nlp.ineq(y))
        rhs = np.zeros((jac.shape[0], 6))
        rhs[:n_y, :5] = nlp.lag_grad_y_jac_theta(y, lam, mu)
        rhs[n_y : n_y + n_eq, :5] = nlp.eq_jac_theta(y)
        rhs[n_y + n_eq :, :5] = mu[:, None] * nlp.ineq_jac_theta(y)
        rhs[nlp.iu(0), 5:] = 1.0
        stacked = np.hstack([full.wrt_theta, full.wrt_perturbation])
        assert np.max(np.abs(jac @ (-stacked) - rhs)) < 1e-9

    def test_singular_jacobian_reports_smallest_singular_value(self):
        class FlatNlp:
            class spec:
                n_theta = 1
                n_u = 1

            n_y, n_eq, n_in = 1, 0, 1

            def iu(self, k):
                return slice(0, 1)

            def objective_grad(self, y):
                return np.zeros(1)

            def eq(self, y):
                return np.zeros(0)

            def ineq(self, y):
                return np.array([-1.0])

            def eq_jac(self, y):
                return np.zeros((0, 1))

            def ineq_jac(self, y):
                return np.zeros((1, 1))

            def lag_hess(self, y, lam, mu):
                return np.zeros((1, 1))

            def lag_grad_y_jac_theta(self, y, lam, mu):
                return np.zeros((1, 1))

            def eq_jac_theta(self, y):
                return np.zeros((0, 1))

            def ineq_jac_theta(self, y):
                return np.zeros((1, 1))

        point = PrimalDualPoint(y=np.zeros(1), lam=np.zeros(0), mu=np.zeros(1), tau=1e-9)
        with pytest.raises(KktSingularError):
            sens.solution_sensitivity(FlatNlp(), point)


class TestNearActiveFlag:
    def test_clear_instance_not_flagged(self):
        nlp, report = solve_at(0.5, THETA0, ON_FIRST)
        assert not sens.near_active_set_change(nlp, report.point)

    def test_band_transition_is_flagged(self):
        # the optimal next state crosses the band edge around this state,
        # so one row has both a small residual and a small multiplier
        nlp, report = solve_at(2.26, THETA0, ON_FIRST)
        assert sens.near_active_set_change(nlp, report.point)


class TestFirstInputCurvature:
    def test_decoupled_profile_has_exactly_affine_response(self):
        # with every stage off the input never touches the state, so the
        # input subproblem is a pure quadratic and its tilt curvature is 0
        curv = sens.first_input_curvature(SPEC, 0.2, THETA0, np.zeros(10), tau_target=TAU_CHECK, polish_tol=POLISH)
        assert curv[0] == pytest.approx(0.0, abs=1e-10)

    def test_interior_instance_curvature_negligible(self):
        curv = sens.first_input_curvature(SPEC, 0.5, THETA0, ON_FIRST, tau_target=1e-9)
        assert abs(curv[0]) < 1e-6

    def test_band_edge_curvature_is_real_and_converged(self):
        # the optimal next state sits in the band-edge boundary layer, so
        # the response has genuine fourth-order structure and the central
        # difference error must shrink by ~4x per step halving
        estimates = [
            sens.first_input_curvature(
                SPEC, 2.0, THETA0, ON_FIRST, step=h, tau_target=TAU_CHECK, polish_tol=POLISH
            )[0]
            for h in (4e-3, 2e-3, 1e-3)
        ]
        assert abs(estimates[1]) > 1e-4
        ratio = (estimates[0] - estimates[1]) / (estimates[1] - estimates[2])
        assert 3.0 < ratio < 5.0

    def test_stencil_is_direction_symmetric(self):
        step = 1e-4
        gains = {}
        for sign in (1.0, -1.0):
            nlp, report = solve_at(0.5, THETA0, ON_FIRST, d=np.array([sign * step]))
            gains[sign] = sens.solution_sensitivity(nlp, report.point).first_input_wrt_perturbation[0, 0]
        forward = (gains[1.0] - gains[-1.0]) / (2 * step)
        backward = (gains[-1.0] - gains[1.0]) / (-2 * step)
        assert forward == backward


class TestIntegerScore:
    @staticmethod
    def branch_gradients(s0, theta, table):
        grads = {}
        for entry in table.entries:
            nlp, report = solve_at(s0, theta, entry.completion, tau=1e-9)
            grads[entry.first] = sens.value_gradient(nlp, report.point)
        return grads

    def test_expectation_identity(self):
        table = integer_value_table(SPEC, 0.5, THETA0)
        grads = self.branch_gradients(0.5, THETA0, table)
        probs = integer_distribution(table, 2e-2)
        expectation = sum(
            probs[k] * sens.integer_score(table, grads, e.first, 2e-2)
            for k, e in enumerate(table.entries)
        )
        assert np.max(np.abs(expectation)) < 1e-12

    def test_two_branch_closed_form(self):
        table = integer_value_table(SPEC, 0.5, THETA0)
        grads = self.branch_gradients(0.5, THETA0, table)
        probs = integer_distribution(table, 2e-2)
        got = sens.integer_score(table, grads, 1, 2e-2)
        manual = (probs[0] * grads[0] + probs[1] * grads[1] - grads[1]) / 2e-2
        np.testing.assert_array_equal(got, manual)

    def test_equal_probability_two_branch_formula(self):
        from mimpcrl.minlp import BranchEntry, IntegerValueTable

        g0, g1 = np.arange(5.0), np.ones(5)
        table = IntegerValueTable(
            (
                BranchEntry(0, True, 1.0, np.zeros(10, dtype=np.int64)),
                BranchEntry(
                    1, True, 1.0, np.r_[np.ones(1, dtype=np.int64), np.zeros(9, dtype=np.int64)]
                ),
            )
        )
        score = sens.integer_score(table, {0: g0, 1: g1}, 1, 0.5)
        np.testing.assert_allclose(score, (g0 - g1) / (2 * 0.5), atol=1e-14)

    def test_single_feasible_branch_scores_zero(self):
        from mimpcrl.minlp import BranchEntry, IntegerValueTable

        table = IntegerValueTable(
            (
                BranchEntry(0, True, 2.0, np.zeros(10, dtype=np.int64)),
                BranchEntry(1, False, np.nan, None),
            )
        )
        score = sens.integer_score(table, {0: np.arange(5.0)}, 0, 1e-2)
        np.testing.assert_array_equal(score, np.zeros(5))

    def test_missing_gradient_rejected(self):
        table = integer_value_table(SPEC, 0.5, THETA0)
        grads = self.branch_gradients(0.5, THETA0, table)
        del grads[0]
        with pytest.raises(ValueError, match="missing value gradient"):
            sens.integer_score(table, grads, 1, 1e-2)

    def test_infeasible_choice_rejected(self):
        from mimpcrl.minlp import BranchEntry, IntegerValueTable

        table = IntegerValueTable(
            (
                BranchEntry(0, True, 2.0, np.zeros(10, dtype=np.int64)),
                BranchEntry(1, False, np.nan, None),
            )
        )
        with pytest.raises(ValueError, match="not a feasible choice"):
            sens.integer_score(table, {0: np.zeros(5)}, 1, 1e-2)


class TestExplorationMoments:
    def test_gram_matches_squared_gain(self):
        nlp, report = solve_at(0.5, THETA0, ON_FIRST, tau=1e-9)
        gain = sens.solution_sensitivity(nlp, report.point).first_input_wrt_perturbation
        moments = sens.exploration_moments(SPEC, 0.5, THETA0, ON_FIRST, 1e-2, point=report.point)
        assert moments.gain_gram.shape == (1, 1)
        assert moments.gain_gram[0, 0] == pytest.approx(gain[0, 0] ** 2, rel=1e-12)
        assert moments.gain_gram[0, 0] >= 0.0

    def test_interior_instance_has_negligible_bias(self):
        moments = sens.exploration_moments(SPEC, 0.5, THETA0, ON_FIRST, 1e-2)
        assert abs(moments.exploration_bias[0]) < 1e-8

    def test_psd_across_random_instances(self):
        rng = np.random.default_rng(29)
        for _ in range(3):
            theta = THETA0 + rng.uniform(-0.1, 0.1, size=5)
            theta[3] = abs(theta[3])
            s0 = float(rng.uniform(-1.0, 1.0))
            bits = ScalarValueAtlas(SPEC, theta).completion(s0, 1)[0]
            moments = sens.exploration_moments(SPEC, s0, theta, bits, 1e-2)
            assert np.all(np.linalg.eigvalsh(moments.gain_gram) >= -1e-12)
            np.testing.assert_array_equal(moments.gain_gram, moments.gain_gram.T)
