"""Interior-point solver checked against the condensed active-set oracle."""

import dataclasses

import numpy as np
import pytest

from mimpcrl.ipsolver import (
    KktSingularError,
    PinnedProfileNlp,
    PrimalDualPoint,
    kkt_residual,
    solve_fixed_profile,
)
from mimpcrl.ocp import BASELINE_PARAMS, build_scalar_example, with_terminal_constraint
from mimpcrl.qp_oracle import enumerate_slack_regimes, solve_condensed

SPEC = build_scalar_example()
THETA0 = BASELINE_PARAMS.as_array()


def random_instance(rng, horizon=10, spread=0.1):
    s0 = rng.uniform(-1.2, 1.2)
    theta = THETA0 + rng.uniform(-spread, spread, size=5)
    profile = rng.integers(0, 2, size=(horizon, 1)).astype(float)
    return s0, theta, profile


class TestTranscription:
    def test_cached_and_slow_paths_agree(self):
        rng = np.random.default_rng(3)
        s0, theta, profile = random_instance(rng)
        d = np.array([0.3])
        fast = PinnedProfileNlp(SPEC, s0, theta, profile, d=d)
        slow = PinnedProfileNlp(
            dataclasses.replace(SPEC, is_quadratic=False), s0, theta, profile, d=d
        )
        for _ in range(5):
            y = rng.normal(size=fast.n_y)
            assert fast.objective(y) == pytest.approx(slow.objective(y), abs=1e-12)
            np.testing.assert_allclose(fast.objective_grad(y), slow.objective_grad(y),
                                       atol=1e-12)
            np.testing.assert_allclose(fast.eq(y), slow.eq(y), atol=1e-12)
            np.testing.assert_allclose(fast.ineq(y), slow.ineq(y), atol=1e-12)
            np.testing.assert_allclose(fast.lag_hess(y, None, None),
                                       slow.lag_hess(y, np.zeros(11), np.zeros(30)),
                                       atol=1e-12)

    def test_equalities_vanish_on_simulated_trajectory(self):
        rng = np.random.default_rng(4)
        s0, theta, profile = random_instance(rng)
        nlp = PinnedProfileNlp(SPEC, s0, theta, profile)
        y = nlp.initial_guess()
        np.testing.assert_allclose(nlp.eq(y), 0.0, atol=1e-14)
        assert np.all(nlp.ineq(y) < 0.0)

    def test_dims(self):
        nlp = PinnedProfileNlp(SPEC, 0.0, THETA0, np.zeros((10, 1)))
        assert (nlp.n_y, nlp.n_eq, nlp.n_in) == (31, 11, 30)
        assert nlp.u0_slice == slice(11, 12)

    def test_rejects_fractional_profile(self):
        with pytest.raises(ValueError, match="0 or 1"):
            PinnedProfileNlp(SPEC, 0.0, THETA0, np.full((10, 1), 0.5))

    def test_theta_derivatives_match_finite_differences(self):
        rng = np.random.default_rng(5)
        s0, theta, profile = random_instance(rng)
        nlp = PinnedProfileNlp(SPEC, s0, theta, profile)
        y = rng.normal(size=nlp.n_y)
        lam = rng.normal(size=nlp.n_eq)
        mu = rng.uniform(0.1, 1.0, size=nlp.n_in)
        eps = 1e-6

        def lagrangian(th):
            p = PinnedProfileNlp(SPEC, s0, th, profile)
            return p.objective(y) + lam @ p.eq(y) + mu @ p.ineq(y)

        def grad_l(th):
            p = PinnedProfileNlp(SPEC, s0, th, profile)
            return p.objective_grad(y) + p.eq_jac(y).T @ lam + p.ineq_jac(y).T @ mu

        for j in range(5):
            e = np.zeros(5)
            e[j] = eps
            fd = (lagrangian(theta + e) - lagrangian(theta - e)) / (2 * eps)
            assert nlp.lag_grad_theta(y, lam, mu)[j] == pytest.approx(fd, abs=1e-7)
            fd_vec = (grad_l(theta + e) - grad_l(theta - e)) / (2 * eps)
            np.testing.assert_allclose(
                nlp.lag_grad_y_jac_theta(y, lam, mu)[:, j], fd_vec, atol=1e-7
            )
            fd_eq = (
                PinnedProfileNlp(SPEC, s0, theta + e, profile).eq(y)
                - PinnedProfileNlp(SPEC, s0, theta - e, profile).eq(y)
            ) / (2 * eps)
            np.testing.assert_allclose(nlp.eq_jac_theta(y)[:, j], fd_eq, atol=1e-8)
            fd_in = (
                PinnedProfileNlp(SPEC, s0, theta + e, profile).ineq(y)
                - PinnedProfileNlp(SPEC, s0, theta - e, profile).ineq(y)
            ) / (2 * eps)
            np.testing.assert_allclose(nlp.ineq_jac_theta(y)[:, j], fd_in, atol=1e-8)


class TestSolverAgainstOracle:
    def test_objective_matches_active_set(self):
        rng = np.random.default_rng(11)
        for _ in range(40):
            s0, theta, profile = random_instance(rng)
            d = np.array([rng.normal(0.0, 0.1)]) if rng.random() < 0.5 else None
            report = solve_fixed_profile(
                PinnedProfileNlp(SPEC, s0, theta, profile, d=d), tau_target=1e-9
            )
            assert report.solved
            oracle = solve_condensed(SPEC, s0, theta, profile, d=d)
            assert report.objective == pytest.approx(oracle.objective, abs=1e-7)

    def test_first_input_matches_active_set(self):
        rng = np.random.default_rng(12)
        for _ in range(10):
            s0, theta, profile = random_instance(rng)
            nlp = PinnedProfileNlp(SPEC, s0, theta, profile)
            report = solve_fixed_profile(nlp, tau_target=1e-9)
            oracle = solve_condensed(SPEC, s0, theta, profile)
            assert report.point.y[nlp.u0_slice][0] == pytest.approx(
                oracle.inputs[0, 0], abs=1e-5
            )

    def test_oracle_agrees_with_regime_enumeration(self):
        spec5 = build_scalar_example(horizon=5)
        rng = np.random.default_rng(13)
        for _ in range(6):
            s0 = rng.uniform(-1.2, 1.2)
            theta = THETA0 + rng.uniform(-0.1, 0.1, size=5)
            profile = rng.integers(0, 2, size=(5, 1)).astype(float)
            oracle = solve_condensed(spec5, s0, theta, profile)
            brute = enumerate_slack_regimes(spec5, s0, theta, profile)
            assert oracle.objective == pytest.approx(brute, abs=1e-9)

    def test_solver_agrees_with_regime_enumeration(self):
        spec6 = build_scalar_example(horizon=6)
        rng = np.random.default_rng(14)
        s0 = rng.uniform(-1.0, 1.0)
        theta = THETA0 + rng.uniform(-0.1, 0.1, size=5)
        profile = rng.integers(0, 2, size=(6, 1)).astype(float)
        report = solve_fixed_profile(
            PinnedProfileNlp(spec6, s0, theta, profile), tau_target=1e-9
        )
        brute = enumerate_slack_regimes(spec6, s0, theta, profile)
        assert report.objective == pytest.approx(brute, abs=1e-7)

    def test_nonquadratic_path_reaches_same_minimum(self):
        rng = np.random.default_rng(15)
        s0, theta, profile = random_instance(rng)
        slow_spec = dataclasses.replace(SPEC, is_quadratic=False)
        fast = solve_fixed_profile(PinnedProfileNlp(SPEC, s0, theta, profile))
        slow = solve_fixed_profile(PinnedProfileNlp(slow_spec, s0, theta, profile))
        assert slow.solved
        assert fast.objective == pytest.approx(slow.objective, abs=1e-9)


class TestBarrierPath:
    def test_objective_decreases_along_the_path(self):
        rng = np.random.default_rng(21)
        for _ in range(5):
            s0, theta, profile = random_instance(rng)
            nlp = PinnedProfileNlp(SPEC, s0, theta, profile)
            objs = [
                solve_fixed_profile(nlp, tau_target=tau).objective
                for tau in (1e-4, 1e-6, 1e-8)
            ]
            assert objs[0] >= objs[1] - 1e-12
            assert objs[1] >= objs[2] - 1e-12
            oracle = solve_condensed(SPEC, s0, theta, profile)
            assert objs[2] >= oracle.objective - 1e-7

    def test_report_point_satisfies_fixed_tau_kkt(self):
        rng = np.random.default_rng(22)
        s0, theta, profile = random_instance(rng)
        nlp = PinnedProfileNlp(SPEC, s0, theta, profile)
        report = solve_fixed_profile(nlp, tau_target=1e-6, kkt_tol=1e-10)
        assert report.point.tau == pytest.approx(1e-6)
        _, res = kkt_residual(nlp, report.point)
        assert res <= 1e-10
        assert np.all(report.point.mu > 0)
        assert np.all(nlp.ineq(report.point.y) < 0)

    def test_warm_start_cuts_iterations(self):
        rng = np.random.default_rng(23)
        s0, theta, profile = random_instance(rng)
        nlp = PinnedProfileNlp(SPEC, s0, theta, profile)
        cold = solve_fixed_profile(nlp, tau_target=1e-6)
        bumped = PinnedProfileNlp(SPEC, s0, theta + 1e-6, profile)
        warm = solve_fixed_profile(bumped, tau_target=1e-6, warm_start=cold.point)
        assert warm.solved
        assert warm.iterations <= 5
        assert warm.iterations < cold.iterations


class TestFeasibility:
    def test_unreachable_terminal_bound_is_flagged(self):
        spec = with_terminal_constraint(SPEC, upper=-5.0)
        nlp = PinnedProfileNlp(spec, 0.0, THETA0, np.zeros((10, 1)))
        report = solve_fixed_profile(nlp)
        assert report.status == "infeasible"
        assert report.infeasibility > 1.0
        assert report.point is None

    def test_reachable_terminal_bound_solves_and_costs_more(self):
        spec = with_terminal_constraint(SPEC, upper=-0.3)
        profile = np.ones((10, 1))
        constrained = solve_fixed_profile(PinnedProfileNlp(spec, 0.0, THETA0, profile))
        free = solve_fixed_profile(PinnedProfileNlp(SPEC, 0.0, THETA0, profile))
        assert constrained.solved
        assert constrained.objective > free.objective + 1e-3

    def test_slack_terminal_bound_changes_nothing(self):
        spec = with_terminal_constraint(SPEC, upper=100.0)
        profile = np.ones((10, 1))
        loose = solve_fixed_profile(PinnedProfileNlp(spec, 0.3, THETA0, profile))
        free = solve_fixed_profile(PinnedProfileNlp(SPEC, 0.3, THETA0, profile))
        assert loose.solved
        assert loose.objective == pytest.approx(free.objective, abs=1e-7)


class _DegenerateNlp:
    """One variable, zero curvature, one vacuous constraint."""

    n_y, n_eq, n_in = 1, 0, 1
    spec = None

    def objective(self, y):
        return 0.0

    def objective_grad(self, y):
        return np.array([1.0])

    def eq(self, y):
        return np.zeros(0)

    def eq_jac(self, y):
        return np.zeros((0, 1))

    def ineq(self, y):
        return np.array([-1.0])

    def ineq_jac(self, y):
        return np.zeros((1, 1))

    def lag_hess(self, y, lam, mu):
        return np.zeros((1, 1))

    def initial_guess(self):
        return np.zeros(1)


class TestErrors:
    def test_singular_kkt_raises_with_details(self):
        with pytest.raises(KktSingularError) as info:
            solve_fixed_profile(_DegenerateNlp(), check_feasibility=False)
        assert info.value.smallest_sv == pytest.approx(0.0, abs=1e-12)
        assert "tau" in str(info.value)

    def test_negative_multipliers_rejected(self):
        with pytest.raises(ValueError, match="nonnegative"):
            PrimalDualPoint(
                y=np.zeros(1), lam=np.zeros(0), mu=np.array([-1.0]), tau=1e-6
            )
