"""Policy sampling tests.

The closed-form piecewise path and the interior-point path are two
independent implementations of the same sampling rule, so cross-checking
them on a shared random stream is the main correctness device here.
"""

import numpy as np
import pytest

from mimpcrl import policy
from mimpcrl.atlas import ScalarValueAtlas
from mimpcrl.minlp import BranchEntry, IntegerValueTable, integer_value_table
from mimpcrl.ocp import BASELINE_PARAMS, build_scalar_example, with_terminal_constraint
from mimpcrl.qp_oracle import solve_condensed

SPEC = build_scalar_example()
THETA0 = BASELINE_PARAMS.as_array()
CFG = policy.ExplorationConfig(integer_temperature=2e-2, continuous_scale=1e-2, seed=7)


def two_entry_table(v0, v1):
    return IntegerValueTable(
        (
            BranchEntry(0, v0 is not None, np.nan if v0 is None else v0, None if v0 is None else np.zeros(10, dtype=np.int64)),
            BranchEntry(1, v1 is not None, np.nan if v1 is None else v1, None if v1 is None else np.r_[np.ones(1, dtype=np.int64), np.zeros(9, dtype=np.int64)]),
        )
    )


class TestExplorationConfig:
    def test_rejects_nonpositive_temperature(self):
        with pytest.raises(ValueError):
            policy.ExplorationConfig(integer_temperature=0.0, continuous_scale=1e-2)

    def test_rejects_nonpositive_scale(self):
        with pytest.raises(ValueError):
            policy.ExplorationConfig(integer_temperature=1e-2, continuous_scale=-1.0)


class TestActionTypes:
    def test_integer_part_must_be_binary(self):
        with pytest.raises(ValueError):
            policy.MixedAction(continuous=np.zeros(1), integer=np.array([2]))

    def test_continuous_part_must_be_finite(self):
        with pytest.raises(ValueError):
            policy.MixedAction(continuous=np.array([np.inf]), integer=np.array([1]))

    def test_sample_log_probability_cannot_be_positive(self):
        action = policy.MixedAction(continuous=np.zeros(1), integer=np.array([0]))
        with pytest.raises(ValueError):
            policy.PolicySample(
                action=action,
                perturbation=np.zeros(1),
                offset=np.zeros(1),
                log_probability=0.5,
                completion=np.zeros(10, dtype=np.int64),
            )


class TestIntegerDistribution:
    def test_value_gap_of_temperature_log3(self):
        table = two_entry_table(1.0, 1.0 + 0.3 * np.log(3.0))
        np.testing.assert_allclose(policy.integer_distribution(table, 0.3), [0.75, 0.25], atol=1e-14)

    def test_equal_values_split_evenly(self):
        table = two_entry_table(4.0, 4.0)
        np.testing.assert_allclose(policy.integer_distribution(table, 1e-3), [0.5, 0.5], atol=1e-14)

    def test_single_feasible_branch_gets_everything(self):
        table = two_entry_table(5.0, None)
        np.testing.assert_array_equal(policy.integer_distribution(table, 0.1), [1.0, 0.0])

    def test_normalization_and_shift_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            v0, v1 = rng.normal(scale=50.0, size=2)
            base = policy.integer_distribution(two_entry_table(v0, v1), 0.05)
            shifted = policy.integer_distribution(two_entry_table(v0 + 1e4, v1 + 1e4), 0.05)
            assert base.sum() == pytest.approx(1.0, abs=1e-12)
            np.testing.assert_allclose(base, shifted, atol=1e-12)

    def test_extreme_values_stay_finite(self):
        probs = policy.integer_distribution(two_entry_table(1e6, -1e6), 1e-3)
        assert np.all(np.isfinite(probs))
        np.testing.assert_allclose(probs, [0.0, 1.0], atol=1e-300)

    def test_empty_feasible_set_rejected(self):
        with pytest.raises(ValueError, match="no feasible integer choice"):
            policy.integer_distribution(two_entry_table(None, None), 0.1)

    def test_nonpositive_temperature_rejected(self):
        with pytest.raises(ValueError, match="temperature"):
            policy.integer_distribution(two_entry_table(1.0, 2.0), 0.0)


class TestGaussianStream:
    def test_box_muller_moments(self):
        rng = policy.perturbation_stream(0, 0)
        draws = policy.standard_normal(rng, 200_000)
        assert abs(draws.mean()) < 0.01
        assert abs(draws.std() - 1.0) < 0.01
        assert abs((draws**3).mean()) < 0.02

    def test_odd_size_consumes_full_pairs(self):
        a = policy.standard_normal(policy.perturbation_stream(1, 2), 5)
        b = policy.standard_normal(policy.perturbation_stream(1, 2), 6)
        np.testing.assert_array_equal(a, b[:5])

    def test_streams_reproducible_and_disjoint(self):
        a = policy.standard_normal(policy.perturbation_stream(42, 3), 8)
        b = policy.standard_normal(policy.perturbation_stream(42, 3), 8)
        c = policy.standard_normal(policy.perturbation_stream(42, 4), 8)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)


class TestNominalInput:
    def test_origin_all_off_is_zero(self):
        got = policy.nominal_continuous_input(SPEC, 0.0, THETA0, np.zeros(10))
        assert got[0] == pytest.approx(0.0, abs=1e-10)

    def test_matches_exact_qp_oracle(self):
        ones = np.ones(10)
        got = policy.nominal_continuous_input(SPEC, 0.5, THETA0, ones)
        oracle = solve_condensed(SPEC, 0.5, THETA0, ones.reshape(10, 1))
        assert got[0] == pytest.approx(oracle.inputs[0, 0], abs=1e-6)

    def test_atlas_shortcut_matches_solver(self):
        atlas = ScalarValueAtlas(SPEC, THETA0)
        bits = atlas.completion(0.7, 1)[0]
        fast = policy.nominal_continuous_input(SPEC, 0.7, THETA0, bits, atlas=atlas)
        slow = policy.nominal_continuous_input(SPEC, 0.7, THETA0, bits)
        assert fast[0] == pytest.approx(slow[0], abs=1e-8)

    def test_atlas_shortcut_rejects_foreign_profile(self):
        atlas = ScalarValueAtlas(SPEC, THETA0)
        with pytest.raises(ValueError, match="optimal completion"):
            policy.nominal_continuous_input(SPEC, 0.7, THETA0, np.ones(10), atlas=atlas)

    def test_infeasible_profile_rejected(self):
        tight = with_terminal_constraint(SPEC, upper=-5.0)
        with pytest.raises(ValueError, match="not solvable"):
            policy.nominal_continuous_input(tight, 0.5, THETA0, np.zeros(10))


class TestSampleAction:
    def test_paths_agree_on_shared_stream(self):
        atlas = ScalarValueAtlas(SPEC, THETA0)
        table = integer_value_table(SPEC, 0.5, THETA0, atlas=atlas)
        fast = policy.sample_action(
            SPEC, 0.5, THETA0, CFG, policy.perturbation_stream(7, 1), method="atlas", atlas=atlas, table=table
        )
        slow = policy.sample_action(
            SPEC, 0.5, THETA0, CFG, policy.perturbation_stream(7, 1), method="solver", table=table
        )
        np.testing.assert_array_equal(fast.completion, slow.completion)
        np.testing.assert_array_equal(fast.perturbation, slow.perturbation)
        assert fast.action.continuous[0] == pytest.approx(slow.action.continuous[0], abs=1e-8)
        assert fast.offset[0] == pytest.approx(slow.offset[0], abs=1e-8)
        assert fast.log_probability == slow.log_probability

    def test_identical_seed_identical_stream(self):
        atlas = ScalarValueAtlas(SPEC, THETA0)
        runs = []
        for _ in range(2):
            rng = policy.perturbation_stream(CFG.seed, 0)
            runs.append(
                [policy.sample_action(SPEC, 0.4, THETA0, CFG, rng, atlas=atlas) for _ in range(50)]
            )
        for a, b in zip(*runs):
            np.testing.assert_array_equal(a.action.continuous, b.action.continuous)
            np.testing.assert_array_equal(a.action.integer, b.action.integer)
            np.testing.assert_array_equal(a.perturbation, b.perturbation)
            assert a.log_probability == b.log_probability

    def test_vanishing_scale_recovers_nominal_input(self):
        tiny = policy.ExplorationConfig(integer_temperature=2e-2, continuous_scale=1e-30, seed=1)
        atlas = ScalarValueAtlas(SPEC, THETA0)
        smp = policy.sample_action(SPEC, 0.5, THETA0, tiny, policy.perturbation_stream(1, 0), atlas=atlas)
        nominal = policy.nominal_continuous_input(SPEC, 0.5, THETA0, smp.completion, atlas=atlas)
        assert abs(smp.offset[0]) < 1e-12
        assert smp.action.continuous[0] == pytest.approx(nominal[0], abs=1e-12)

    def test_empirical_frequency_matches_softmax(self):
        # pick a state on the switching boundary so both branches carry
        # real probability mass, then check the binomial count at 3 sigma
        atlas = ScalarValueAtlas(SPEC, THETA0)
        lo, hi = 0.2, 0.5
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            gap = float(atlas.phi(mid)[1] - atlas.phi(mid)[0])
            lo, hi = (mid, hi) if gap > 0 else (lo, mid)
        s_mixed = 0.5 * (lo + hi)
        table = integer_value_table(SPEC, s_mixed, THETA0, atlas=atlas)
        p1 = policy.integer_distribution(table, CFG.integer_temperature)[1]
        assert 0.2 < p1 < 0.8

        n, rng = 4000, policy.perturbation_stream(11, 0)
        count = sum(
            int(
                policy.sample_action(SPEC, s_mixed, THETA0, CFG, rng, atlas=atlas, table=table).action.integer[0]
            )
            for _ in range(n)
        )
        sigma = np.sqrt(n * p1 * (1 - p1))
        assert abs(count - n * p1) < 3 * sigma

    def test_samples_respect_band_constraints(self):
        # the chosen branch is re-solved, never projected, so the sampled
        # input must reproduce the pinned optimum of its own tilted
        # problem; spot-check against the exact QP oracle
        rng = policy.perturbation_stream(5, 0)
        for _ in range(5):
            smp = policy.sample_action(SPEC, 0.9, THETA0, CFG, rng, method="solver")
            oracle = solve_condensed(
                SPEC, 0.9, THETA0, smp.completion.reshape(10, 1).astype(float), d=smp.perturbation
            )
            assert smp.action.continuous[0] == pytest.approx(oracle.inputs[0, 0], abs=1e-7)

    def test_integer_draw_never_uses_infeasible_branch(self):
        # synthetic table whose completion is not the atlas optimum, so
        # the generic solver path must carry the draw
        table = two_entry_table(3.0, None)
        rng = policy.perturbation_stream(9, 0)
        for _ in range(5):
            smp = policy.sample_action(SPEC, 0.5, THETA0, CFG, rng, method="solver", table=table)
            assert smp.action.integer[0] == 0

    def test_unknown_method_rejected(self):
        with pytest.raises(ValueError, match="unknown method"):
            policy.sample_action(SPEC, 0.5, THETA0, CFG, policy.perturbation_stream(0, 0), method="mcmc")

    def test_stall_retries_once_then_aborts(self, monkeypatch):
        calls = []

        def always_stall(*args, **kwargs):
            calls.append(1)
            raise policy._SolverStall

        monkeypatch.setattr(policy, "_branch_inputs", always_stall)
        with pytest.raises(RuntimeError, match="stalled twice"):
            policy.sample_action(SPEC, 0.5, THETA0, CFG, policy.perturbation_stream(0, 0))
        assert len(calls) == 2

    def test_single_stall_recovers_with_fresh_draw(self, monkeypatch):
        real = policy._branch_inputs
        state = {"first": True}

        def stall_once(*args, **kwargs):
            if state.pop("first", False):
                raise policy._SolverStall
            return real(*args, **kwargs)

        monkeypatch.setattr(policy, "_branch_inputs", stall_once)
        smp = policy.sample_action(SPEC, 0.5, THETA0, CFG, policy.perturbation_stream(0, 0))
        assert np.all(np.isfinite(smp.action.continuous))
