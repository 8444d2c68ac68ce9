"""Tests for configuration, presets, the run pipeline and the command line

Validates that:
1. Config files load, report every violation and hash canonically
2. Presets are all valid and export as editable config files
3. CLI subcommands parse and exit with the documented codes
4. A run writes results.csv and summary.txt with the documented columns
5. Results do not depend on the worker count
6. Built-in acceptance presets pass their gating criteria (slow)
"""
import json
import os
import sys
from dataclasses import replace
from unittest.mock import patch

import pandas as pd
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from quenched_lab import (
    PRESETS, ConfigurationError, Criterion, ExperimentConfig, RunSummary, ValidationError, apply_overrides,
    diagnostic, generate_sample_config, list_presets, load_config, load_preset, main, parse_arguments, run,
    validate, write_results_csv,
)


def small_clt_config(out_dir, workers=1):
    config = load_preset("doubling-clt")
    numerics = replace(config.numerics, n_bins=256, n=100, n_paths=300, batch_size=64, positions=16, n_lags=20)
    return apply_overrides(replace(config, numerics=numerics), out=str(out_dir), threads=workers)


class TestConfigLoading:
    """Test reading config files"""

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError, match="Config file not found"):
            load_config(tmp_path / "nope.json")

    def test_invalid_json(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{ not json")
        with pytest.raises(ConfigurationError) as exc_info:
            load_config(bad)
        assert "Invalid JSON" in str(exc_info.value)
        assert exc_info.value.config_file == str(bad)

    def test_not_an_object(self):
        with pytest.raises(ConfigurationError, match="JSON object"):
            ExperimentConfig.from_dict([1, 2])

    def test_preset_file_loads(self, preset_config_file):
        config = load_config(preset_config_file)
        assert config.scenario == "conditions"
        assert config.conditions.rho == {"b2": 0.5, "b3": 0.5}

    def test_output_dir_from_environment(self):
        data = load_preset("doubling-clt").to_dict()
        data.pop("output_dir")
        with patch.dict(os.environ, {'QLAB_OUTPUT_DIR': '/tmp/qlab-out'}):
            assert ExperimentConfig.from_dict(data).output_dir == '/tmp/qlab-out'


class TestValidation:
    """Test that validation names every violation"""

    def test_every_violation_reported(self, invalid_config_file):
        violations = validate(load_config(invalid_config_file))
        assert any(v.startswith("base.transition row 0 sums to") for v in violations)
        assert "maps.b3 missing" in violations
        assert "epsilon must be in (0,1)" in violations
        assert len(violations) >= 3

    def test_unknown_fields(self):
        data = load_preset("doubling-clt").to_dict()
        data["numerics"]["bogus"] = 1
        data["extra_top"] = True
        violations = validate(ExperimentConfig.from_dict(data))
        assert "unknown field numerics.bogus" in violations
        assert "unknown field extra_top" in violations

    def test_empty_alphabet(self):
        data = load_preset("doubling-clt").to_dict()
        data["base"] = {"kind": "iid", "alphabet": []}
        assert "base.alphabet must not be empty" in validate(ExperimentConfig.from_dict(data))

    def test_bad_map_reported(self):
        data = load_preset("doubling-clt").to_dict()
        data["maps"]["T2"] = {"family": "beta", "beta": 2.5}
        assert any(v.startswith("maps.T2:") for v in validate(ExperimentConfig.from_dict(data)))

    def test_homogenization_needs_fast_slow(self):
        data = load_preset("doubling-homogenization").to_dict()
        data.pop("fast_slow")
        violations = validate(ExperimentConfig.from_dict(data))
        assert "fast_slow section required for the homogenization scenario" in violations

    def test_refinement_needs_frozen_mode(self):
        data = load_preset("doubling-homogenization").to_dict()
        data["fast_slow"]["mode"] = "annealed"
        assert "fast_slow.refinement needs mode frozen" in validate(ExperimentConfig.from_dict(data))
        data["fast_slow"]["refinement"] = "yes"
        assert "fast_slow.refinement must be true or false" in validate(ExperimentConfig.from_dict(data))

    def test_bad_counts(self):
        data = load_preset("doubling-clt").to_dict()
        data["numerics"]["n_bins"] = 1
        data["numerics"]["p"] = 5
        data["workers"] = -1
        violations = validate(ExperimentConfig.from_dict(data))
        assert "numerics.n_bins must be an integer >= 2" in violations
        assert any(v.startswith("numerics.p must be one of") for v in violations)
        assert "workers must be an integer >= 0" in violations

    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_presets_are_valid(self, name):
        assert validate(load_preset(name)) == []


class TestConfigHash:
    """Test canonical config hashing"""

    def test_key_order_does_not_matter(self):
        data = load_preset("doubling-decomposition").to_dict()
        reordered = dict(reversed(list(data.items())))
        reordered["numerics"] = dict(reversed(list(data["numerics"].items())))
        assert ExperimentConfig.from_dict(reordered).config_hash == ExperimentConfig.from_dict(data).config_hash

    def test_execution_settings_excluded(self, tmp_path):
        config = load_preset("doubling-clt")
        moved = apply_overrides(config, out=str(tmp_path), threads=8, cache_dir=str(tmp_path), dump=True)
        assert moved.config_hash == config.config_hash

    def test_experiment_content_included(self):
        config = load_preset("doubling-clt")
        assert apply_overrides(config, seed=5).config_hash != config.config_hash
        assert apply_overrides(config, n_bins=2048).config_hash != config.config_hash

    def test_format(self):
        digest = load_preset("doubling-clt").config_hash
        assert len(digest) == 12
        int(digest, 16)

    def test_overrides_do_not_mutate(self):
        config = load_preset("doubling-clt")
        apply_overrides(config, seed=11, n_bins=128)
        assert config.master_seed == 0
        assert config.numerics.n_bins == 4096


class TestPresets:
    """Test built-in presets"""

    def test_listing(self):
        names = [name for name, _ in list_presets()]
        assert len(names) == 16
        assert {"doubling-clt", "doubling-decomposition", "coboundary-degeneracy",
                "doubling-homogenization", "conditions-iid"} <= set(names)

    def test_unknown_preset(self):
        with pytest.raises(ConfigurationError, match="Unknown preset"):
            load_preset("no-such-preset")

    def test_sample_config_round_trip(self, tmp_path, capsys):
        output = tmp_path / "homog.json"
        assert generate_sample_config(str(output), "doubling-homogenization")
        assert "Sample configuration file created" in capsys.readouterr().out
        assert load_config(output).config_hash == load_preset("doubling-homogenization").config_hash

    def test_sample_config_unwritable(self, tmp_path):
        assert not generate_sample_config(str(tmp_path / "missing" / "dir" / "x.json"))


class TestParseArguments:
    """Test argument parsing"""

    def test_run_arguments(self):
        args = parse_arguments(['run', 'doubling-clt', '--seed', '7', '--threads', '4', '--n-bins', '2048',
                                '--out', 'results/run7', '--dump', '--log-format', 'json'])
        assert args.command == 'run'
        assert args.config == 'doubling-clt'
        assert args.seed == 7
        assert args.threads == 4
        assert args.n_bins == 2048
        assert args.out == 'results/run7'
        assert args.dump is True
        assert args.log_format == 'json'

    def test_run_defaults(self):
        args = parse_arguments(['run', 'doubling-clt'])
        assert args.seed is None
        assert args.dump is None
        assert args.quiet is False
        assert args.log_level is None

    def test_presets_format(self):
        assert parse_arguments(['presets', '--format', 'json']).output_format == 'json'

    def test_subcommand_required(self):
        with pytest.raises(SystemExit):
            parse_arguments([])

    def test_invalid_log_level(self):
        with pytest.raises(SystemExit):
            parse_arguments(['run', 'doubling-clt', '--log-level', 'CHATTY'])

    def test_sys_argv(self):
        with patch.object(sys, 'argv', ['quenched_lab', 'validate', 'doubling-clt']):
            args = parse_arguments()
        assert args.command == 'validate'


class TestMainExitCodes:
    """Test main() exit codes"""

    def test_presets(self, capsys):
        with pytest.raises(SystemExit) as exc_info:
            main(['presets'])
        assert exc_info.value.code == 0
        assert "doubling-clt" in capsys.readouterr().out

    def test_presets_json(self, capsys):
        with pytest.raises(SystemExit):
            main(['presets', '--format', 'json'])
        listing = json.loads(capsys.readouterr().out)
        assert len(listing) == 16
        assert set(listing[0]) == {'name', 'description'}

    def test_validate_valid(self, capsys):
        with pytest.raises(SystemExit) as exc_info:
            main(['validate', 'doubling-clt'])
        assert exc_info.value.code == 0
        assert "Config is valid" in capsys.readouterr().out

    def test_validate_invalid(self, invalid_config_file, capsys):
        with pytest.raises(SystemExit) as exc_info:
            main(['validate', invalid_config_file])
        assert exc_info.value.code == 1
        out = capsys.readouterr().out
        assert "maps.b3 missing" in out
        assert "epsilon must be in (0,1)" in out

    def test_validate_missing_file(self, tmp_path):
        with pytest.raises(SystemExit) as exc_info:
            main(['validate', str(tmp_path / "missing.json")])
        assert exc_info.value.code == 1

    def test_sample_config(self, tmp_path):
        with pytest.raises(SystemExit) as exc_info:
            main(['sample-config', '--preset', 'conditions-iid', '--output', str(tmp_path / "c.json")])
        assert exc_info.value.code == 0
        assert (tmp_path / "c.json").exists()

    def test_sample_config_unknown_preset(self, tmp_path):
        with pytest.raises(SystemExit) as exc_info:
            main(['sample-config', '--preset', 'nope', '--output', str(tmp_path / "c.json")])
        assert exc_info.value.code == 1

    def test_run_invalid_config(self, invalid_config_file, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        with pytest.raises(SystemExit) as exc_info:
            main(['run', invalid_config_file, '--quiet'])
        assert exc_info.value.code == 1
        assert "maps.b3 missing" in capsys.readouterr().err

    def test_run_conditions(self, preset_config_file, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        with pytest.raises(SystemExit) as exc_info:
            main(['run', preset_config_file, '--quiet'])
        assert exc_info.value.code == 0
        assert (tmp_path / "results" / "results.csv").exists()
        assert list((tmp_path / "logs").glob("QLab_conditions_*.log"))

    def test_run_failing_gate_exits_two(self, preset_config_file, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        failing = RunSummary("abc", "conditions", [Criterion("x", 1.0, passed=False)])
        with patch('quenched_lab.run', return_value=failing):
            with pytest.raises(SystemExit) as exc_info:
                main(['run', preset_config_file, '--quiet'])
        assert exc_info.value.code == 2


class TestRunPipeline:
    """Test run() outputs"""

    def test_invalid_config_raises(self, invalid_config_file):
        with pytest.raises(ValidationError) as exc_info:
            run(load_config(invalid_config_file))
        assert "maps.b3 missing" in exc_info.value.violations

    def test_outputs(self, preset_config_file, tmp_path):
        config = apply_overrides(load_config(preset_config_file), dump=True)
        summary = run(config)
        assert summary.passed
        assert summary.exit_code == 0

        frame = pd.read_csv(tmp_path / "results" / "results.csv", dtype={'config_hash': str})
        assert list(frame.columns) == ['name', 'value', 'stderr', 'tolerance', 'pass', 'method', 'config_hash']
        assert set(frame['config_hash']) == {config.config_hash}
        assert {"upper_mixing", "holder_clause", "contraction[b2]"} <= set(frame['name'])
        assert frame['name'].is_unique

        written = json.loads((tmp_path / "results" / "summary.txt").read_text())
        assert written['passed'] is True
        assert written['scenario'] == "conditions"
        assert (tmp_path / "results" / "dump" / "ulam_b2.csv").exists()
        assert (tmp_path / "results" / "dump" / "holder_pairs.csv").exists()

    def test_rerun_is_byte_identical_across_workers(self, tmp_path):
        run(small_clt_config(tmp_path / "serial", workers=1))
        run(small_clt_config(tmp_path / "threaded", workers=3))
        serial = (tmp_path / "serial" / "results.csv").read_bytes()
        threaded = (tmp_path / "threaded" / "results.csv").read_bytes()
        assert serial == threaded

    def test_homogenization_reports_epsilon_refinement(self, tmp_path):
        config = load_preset("doubling-homogenization")
        assert config.fast_slow.refinement
        numerics = replace(config.numerics, n_bins=256, n_paths=200, epsilon=0.1, positions=16, n_lags=20)
        summary = run(apply_overrides(replace(config, numerics=numerics), out=str(tmp_path), dump=True))
        refinement = {c.name: c for c in summary.criteria if c.name.startswith("refinement_")}
        assert set(refinement) == {"refinement_ks[eps=0.4]", "refinement_ks[eps=0.2]", "refinement_ks[eps=0.1]",
                                   "refinement_non_increasing"}
        assert not any(c.gating for c in refinement.values())
        table = pd.read_csv(tmp_path / "dump" / "epsilon_refinement.csv", comment="#")
        assert list(table["epsilon"]) == [0.4, 0.2, 0.1]

    def test_summary_exit_codes(self):
        gate_ok = Criterion("a", 0.0, passed=True)
        gate_bad = Criterion("b", 1.0, passed=False)
        info_bad = diagnostic("c", 1.0)
        info_bad.passed = False
        assert RunSummary("h", "clt", [gate_ok, info_bad]).exit_code == 0
        assert RunSummary("h", "clt", [gate_ok, gate_bad]).exit_code == 2

    def test_write_results_csv(self, tmp_path):
        path = write_results_csv([Criterion("sigma_correlation[0,0]", 0.25, 0.001, 0.01, True, "correlation-sum"),
                                  diagnostic("lag0[0,0]", 1.0 / 12.0)], tmp_path / "r.csv", "abc123")
        frame = pd.read_csv(path, dtype={'config_hash': str})
        assert list(frame['name']) == ["sigma_correlation[0,0]", "lag0[0,0]"]
        assert list(frame['config_hash']) == ["abc123", "abc123"]


@pytest.mark.slow
class TestAcceptancePresets:
    """Run built-in presets at reduced resolution and check their gating criteria"""

    @pytest.mark.parametrize("name, n_bins", [
        ("doubling-decomposition", 1024),
        ("doubling-cos-decomposition", 1024),
        ("coboundary-degeneracy", 1024),
        ("random-beta-decomposition", None),
        ("markov-lasota-yorke-decomposition", None),
        ("doubling-clt", 1024),
        ("doubling-homogenization", 1024),
        ("conditions-iid", 1024),
    ])
    def test_preset_passes(self, name, n_bins, tmp_path):
        config = apply_overrides(load_preset(name), n_bins=n_bins, out=str(tmp_path), threads=0)
        summary = run(config)
        failed = [c.name for c in summary.criteria if c.gating and not c.passed]
        assert failed == []
