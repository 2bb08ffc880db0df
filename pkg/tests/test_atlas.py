"""Cross-checks of the closed-form value atlas against the NLP solvers.

The atlas is an independent route to the same subproblem minima the
barrier solver and the condensed active-set oracle compute, so the two
sides are held to near machine precision against the oracle and to the
barrier gap against the interior-point path.
"""

import numpy as np
import pytest

from mimpcrl.atlas import ScalarValueAtlas
from mimpcrl.ipsolver import PinnedProfileNlp, solve_fixed_profile
from mimpcrl.ocp import BASELINE_PARAMS, build_scalar_example, with_terminal_constraint
from mimpcrl.qp_oracle import solve_condensed

SPEC = build_scalar_example()
SPEC6 = build_scalar_example(horizon=6)
THETA0 = BASELINE_PARAMS.as_array()


def random_theta(rng, spread=0.15):
    return THETA0 + rng.uniform(-spread, spread, size=THETA0.size)


def ip_value(spec, s0, theta, profile_bits, d=None):
    profile = np.asarray(profile_bits, dtype=float).reshape(spec.horizon, 1)
    dd = None if d is None else np.array([float(d)])
    report = solve_fixed_profile(
        PinnedProfileNlp(spec, s0, theta, profile, d=dd), tau_target=1e-9
    )
    assert report.solved, report.message
    return report


class TestPinnedValues:
    def test_matches_condensed_oracle(self):
        rng = np.random.default_rng(11)
        for spec in (SPEC, SPEC6):
            for _ in range(3):
                theta = random_theta(rng)
                atlas = ScalarValueAtlas(spec, theta)
                for _ in range(4):
                    s0 = rng.uniform(-1.2, 1.2)
                    bits = rng.integers(0, 2, size=spec.horizon)
                    ours = float(atlas.pinned_value(s0, bits))
                    ref = solve_condensed(
                        spec, s0, theta, bits.reshape(-1, 1).astype(float)
                    ).objective
                    assert abs(ours - ref) < 1e-11 * (1.0 + abs(ref))

    def test_zero_penalty_weight_drops_the_hinge(self):
        rng = np.random.default_rng(12)
        theta = random_theta(rng)
        theta[3] = 0.0
        atlas = ScalarValueAtlas(SPEC6, theta)
        for _ in range(4):
            s0 = rng.uniform(-1.2, 1.2)
            bits = rng.integers(0, 2, size=SPEC6.horizon)
            ref = solve_condensed(
                SPEC6, s0, theta, bits.reshape(-1, 1).astype(float)
            ).objective
            assert abs(float(atlas.pinned_value(s0, bits)) - ref) < 1e-11

    def test_profile_length_is_checked(self):
        atlas = ScalarValueAtlas(SPEC6, THETA0)
        with pytest.raises(ValueError):
            atlas.pinned_value(0.3, np.zeros(5, dtype=int))

    def test_rejects_unsupported_layouts(self):
        with pytest.raises(ValueError):
            ScalarValueAtlas(with_terminal_constraint(SPEC6, upper=1.0), THETA0)
        with pytest.raises(ValueError):
            ScalarValueAtlas(SPEC6, THETA0[:4])


class TestFreeAndPinnedFirst:
    def test_phi_is_min_over_matching_profiles(self):
        rng = np.random.default_rng(13)
        theta = random_theta(rng)
        atlas = ScalarValueAtlas(SPEC6, theta)
        for s0 in rng.uniform(-1.2, 1.2, size=4):
            profiles, values = atlas.all_profile_values(float(s0))
            phi = atlas.phi(float(s0))
            for first in (0, 1):
                group = values[profiles[:, 0] == first]
                assert abs(phi[first] - group.min()) < 1e-12 * (1 + abs(phi[first]))
            assert abs(atlas.free_value(float(s0)) - phi.min()) < 1e-12

    def test_profiles_enumerate_in_lexicographic_order(self):
        atlas = ScalarValueAtlas(SPEC6, THETA0)
        profiles, values = atlas.all_profile_values(0.4)
        assert profiles.shape == (64, 6)
        assert values.shape == (64,)
        np.testing.assert_array_equal(profiles[0], np.zeros(6))
        np.testing.assert_array_equal(profiles[1], [0, 0, 0, 0, 0, 1])
        np.testing.assert_array_equal(profiles[-1], np.ones(6))

    def test_completion_attains_phi(self):
        rng = np.random.default_rng(14)
        for _ in range(3):
            theta = random_theta(rng)
            atlas = ScalarValueAtlas(SPEC, theta)
            s = rng.uniform(-1.2, 1.2, size=5)
            phi = atlas.phi(s)
            for first in (0, 1):
                bits = atlas.completion(s, first)
                assert bits.shape == s.shape + (SPEC.horizon,)
                np.testing.assert_array_equal(bits[:, 0], first)
                for j in range(s.size):
                    replayed = float(atlas.pinned_value(s[j], bits[j]))
                    assert abs(replayed - phi[first, j]) < 1e-10

    def test_phi_matches_barrier_solver_at_completion(self):
        rng = np.random.default_rng(15)
        theta = random_theta(rng)
        atlas = ScalarValueAtlas(SPEC, theta)
        for s0 in rng.uniform(-1.0, 1.0, size=3):
            phi = atlas.phi(float(s0))
            for first in (0, 1):
                bits = atlas.completion(float(s0), first)[0]
                report = ip_value(SPEC, float(s0), theta, bits)
                assert abs(report.objective - phi[first]) < 1e-7


class TestFirstInput:
    def test_off_branch_is_reference_minus_perturbation(self):
        atlas = ScalarValueAtlas(SPEC, THETA0)
        d = np.array([-0.3, 0.0, 0.2])
        out = atlas.first_input(np.array([0.1, -0.4, 0.9]), 0, d=d)
        np.testing.assert_allclose(out, THETA0[1] - d, atol=0)

    def test_on_branch_matches_oracle_under_perturbation(self):
        rng = np.random.default_rng(16)
        theta = random_theta(rng)
        atlas = ScalarValueAtlas(SPEC, theta)
        for _ in range(6):
            s0 = rng.uniform(-1.2, 1.2)
            d = rng.normal(0.0, 0.1)
            bits = atlas.completion(s0, 1)[0]
            sol = solve_condensed(
                SPEC, s0, theta, bits.reshape(-1, 1).astype(float), d=np.array([d])
            )
            ours = float(atlas.first_input(s0, 1, d=d)[0])
            assert abs(ours - sol.inputs[0, 0]) < 1e-9

    def test_vector_queries_match_scalar_loop(self):
        rng = np.random.default_rng(17)
        theta = random_theta(rng)
        atlas = ScalarValueAtlas(SPEC, theta)
        s = rng.uniform(-1.2, 1.2, size=7)
        first = rng.integers(0, 2, size=7)
        d = rng.normal(0.0, 0.05, size=7)
        batch = atlas.first_input(s, first, d=d)
        bits = atlas.completion(s, first)
        for j in range(7):
            one = atlas.first_input(s[j], int(first[j]), d=d[j])[0]
            assert abs(batch[j] - float(one)) < 1e-14
            np.testing.assert_array_equal(bits[j], atlas.completion(s[j], int(first[j]))[0])
