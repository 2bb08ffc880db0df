"""Config parsing, serialization round trips, and load-time validation."""

from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from mimpcrl import config as cfg

REPO_ROOT = Path(__file__).resolve().parents[1]


class TestRoundTrip:
    def test_default_round_trip(self):
        base = cfg.RunConfig()
        assert cfg.loads(cfg.dumps(base)) == base

    def test_modified_round_trip_keeps_full_precision(self):
        modified = replace(
            cfg.RunConfig(),
            learning_rate=1.0 / 3.0,
            model_bias=0.1 + 1e-14,
            steps=17,
            adapt_mask=(True, False, True, True, False),
            output_dir="artifacts/run-1",
        )
        restored = cfg.loads(cfg.dumps(modified))
        assert restored == modified
        assert restored.learning_rate == modified.learning_rate

    def test_save_and_load_file(self, tmp_path):
        path = tmp_path / "run.ini"
        original = replace(cfg.RunConfig(), seed=7, steps=3)
        cfg.save_config(original, path)
        assert cfg.load_config(path, env={}) == original

    def test_checked_in_defaults_match_code_defaults(self):
        path = REPO_ROOT / "configs" / "default.ini"
        assert cfg.load_config(path, env={}) == cfg.RunConfig()

    def test_partial_file_keeps_defaults_elsewhere(self):
        loaded = cfg.loads("[training]\nsteps = 5\n")
        assert loaded.steps == 5
        assert loaded.learning_rate == cfg.RunConfig().learning_rate


class TestParsing:
    def test_unknown_key_reports_line(self):
        text = "[training]\nsteps = 5\nstep_count = 9\n"
        with pytest.raises(ValueError, match=r"step_count.*line 3"):
            cfg.loads(text)

    def test_unknown_section_rejected(self):
        with pytest.raises(ValueError, match=r"unknown config section \[extras\]"):
            cfg.loads("[extras]\nfoo = 1\n")

    def test_misplaced_key_suggests_section(self):
        with pytest.raises(ValueError, match=r"did you mean section \[critic\]"):
            cfg.loads("[training]\ngrid_low = -1\n")

    def test_type_errors_are_diagnosed(self):
        with pytest.raises(ValueError, match="cannot parse '3.5' as int"):
            cfg.loads("[training]\nsteps = 3.5\n")
        with pytest.raises(ValueError, match="0/1 flags"):
            cfg.loads("[training]\nadapt_mask = 1,2,1,1,1\n")

    def test_default_section_rejected(self):
        with pytest.raises(ValueError, match="DEFAULT"):
            cfg.loads("[DEFAULT]\nsteps = 5\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ValueError, match="parse failure"):
            cfg.loads("[training]\nsteps = 5\nsteps = 6\n")

    def test_syntax_error_reports_line(self):
        with pytest.raises(ValueError, match=r"line\s+2"):
            cfg.loads("[training]\nnot an assignment\n")


class TestEnvOverrides:
    def test_env_wins_over_file(self):
        loaded = cfg.loads(
            "[training]\nsteps = 5\n",
            env={"MIMPCRL__TRAINING__STEPS": "9", "UNRELATED": "x"},
        )
        assert loaded.steps == 9

    def test_env_alone_overrides_defaults(self):
        loaded = cfg.loads("", env={"MIMPCRL__RUN__SEED": "123"})
        assert loaded.seed == 123

    def test_unknown_env_key_rejected(self):
        with pytest.raises(ValueError, match="names no config key"):
            cfg.loads("", env={"MIMPCRL__TRAINING__BOGUS": "1"})

    def test_malformed_env_key_rejected(self):
        with pytest.raises(ValueError, match="malformed override"):
            cfg.loads("", env={"MIMPCRL__STEPS": "1"})

    def test_env_values_are_type_checked(self):
        with pytest.raises(ValueError, match="cannot parse"):
            cfg.loads("", env={"MIMPCRL__TRAINING__STEPS": "many"})


class TestValidation:
    @pytest.mark.parametrize(
        "text",
        [
            "[training]\nsteps = 0\n",
            "[training]\nlearning_rate = -0.1\n",
            "[training]\nupdate_mode = momentum\n",
            "[training]\ndiscount = 1.0\n",
            "[training]\nrollouts = 1\nrollout_horizon = 5\n",
            "[training]\nevaluation_rollouts = 1\n",
            "[training]\nadapt_mask = 1,1\n",
            "[training]\nadapt_mask = 0,0,0,0,0\n",
            "[model]\npenalty_weight = -1.0\n",
            "[model]\nhorizon = 0\n",
            "[exploration]\ncontinuous_scale = 0.0\n",
            "[critic]\ngrid_nodes = 1\n",
            "[critic]\ngrid_low = 2.0\n",
            "[numerics]\ntau_target = 0.0\n",
            "[numerics]\nfd_step = -1e-4\n",
            "[run]\nseed = -1\n",
            "[run]\noutput_dir =\n",
            "[training]\ninitial_state = nan\n",
        ],
    )
    def test_bad_configs_fail_at_load(self, text):
        with pytest.raises(ValueError):
            cfg.loads(text)


class TestAssembly:
    def test_settings_carry_every_tunable(self):
        loaded = cfg.loads(
            "[training]\nsteps = 4\nupdate_mode = direct\nadapt_mask = 1,0,1,1,1\n"
            "[numerics]\ntau_target = 1e-7\n"
            "[run]\nseed = 11\n"
        )
        settings = loaded.settings()
        assert settings.steps == 4
        assert settings.update_mode == "direct"
        assert settings.adapt_mask == (True, False, True, True, True)
        assert settings.tau_target == 1e-7
        assert settings.seed == 11
        assert settings.critic.grid_nodes == loaded.grid_nodes
        assert settings.exploration.continuous_scale == loaded.continuous_scale

    def test_theta_matches_parameter_order(self):
        loaded = cfg.loads("[model]\nswitch_cost = 0.3\nmodel_bias = 0.01\n")
        np.testing.assert_array_equal(loaded.theta(), [0.0, 0.0, 0.3, 1.0, 0.01])

    def test_problem_uses_configured_horizon(self):
        loaded = cfg.loads("[model]\nhorizon = 6\n")
        assert loaded.problem().horizon == 6
