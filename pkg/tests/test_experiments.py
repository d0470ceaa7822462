# tests/test_experiments.py

import json
import math
import os

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from src import experiments
from src.errors import ConfigError
from src.persistence import checkpoint_utils, config_utils
from src.processing import noise
from src.processing.observables import EstimateSeries

TAU_C = math.sqrt(2.0)


def _parse(values):
    return config_utils.parse_config({k: str(v) for k, v in values.items()})


def _read_json(path):
    with open(path, encoding='utf-8') as f:
        return json.load(f)


class TestPlanning:

    def test_batch_plan(self, harmonic_config_values):
        values = dict(harmonic_config_values, ESTIMATOR_TRAJECTORIES=25)
        assert experiments.batch_plan(_parse(values)) == [(0, 10), (1, 10), (2, 5)]

    def test_batch_plan_rejects_empty(self, harmonic_config_values):
        with pytest.raises(ConfigError):
            experiments.batch_plan(_parse(dict(harmonic_config_values, ESTIMATOR_TRAJECTORIES=0)))

    def test_stencil(self, ou_model, psd2):
        assert experiments.stencil(noise.realize(ou_model, 1)) == (1, 1, 0)
        assert experiments.stencil(noise.realize(psd2, 1)) == (2, 2, 1)

    def test_default_fit_window_is_clipped(self, harmonic_config_values):
        config = _parse(dict(harmonic_config_values, EXPERIMENT_KIND='ips-mobility', DYNAMICS_FORCE='free',
                             DYNAMICS_N_PARTICLES=1, DYNAMICS_T_MAX=4.0))
        spectrum, force = experiments.build_spectrum(config), experiments.build_force(config)
        assert experiments.fit_window(config, spectrum, force) == (2.0, 4.0)

    def test_explicit_fit_window(self, harmonic_config_values):
        config = _parse(dict(harmonic_config_values, ESTIMATOR_FIT_WINDOW="0.5,1"))
        assert experiments.fit_window(config, None, None) == (0.5, 1.0)

    def test_rational_peaks_from_config(self, harmonic_config_values):
        config = _parse(dict(harmonic_config_values, SPECTRUM_FAMILY='rational', SPECTRUM_RATIONAL_R=2,
                             SPECTRUM_PEAKS="1,0.5,1;1,0,2"))
        assert len(experiments.build_spectrum(config).peaks) == 2

    def test_max_abs_z_against_a_constant(self):
        series = EstimateSeries(np.linspace(0.0, 1.0, 3), np.array([0.0, 0.2, -0.6]), np.array([0.0, 0.1, 0.2]),
                                np.full(3, 10))
        assert experiments.max_abs_z(series, 0.0) == pytest.approx(3.0)
        assert experiments.max_abs_z(series, np.array([5.0, 0.2, -0.2])) == pytest.approx(2.0)


class TestHarmonicSensitivity:

    def test_artifacts(self, harmonic_config_values):
        config = _parse(dict(harmonic_config_values, ESTIMATOR_FINITE_DIFFERENCE='true',
                             ESTIMATOR_FD_TRAJECTORIES=10, OUTPUT_TRAJECTORY='true', OUTPUT_CHECKPOINT='true'))
        summary = experiments.process_experiment(config)
        out = config['OUTPUT_DIR']
        for name in ('chi.csv', 'variance.csv', 'finite_difference.csv', 'terms/phi_p00.csv',
                     'terms/dphi_p11.csv', 'weights/p00.csv', 'weights/p11.csv', 'trajectory.csv',
                     'checkpoints/batch_000.bin', 'checkpoints/batch_003.bin', 'summary.json', 'manifest.json'):
            assert os.path.isfile(os.path.join(out, name)), name

        chi = pd.read_csv(os.path.join(out, 'chi.csv'))
        assert len(chi) == 101
        assert chi['n_samples'].iloc[-1] == 40
        assert summary['variance_longtime'] == pytest.approx(0.5)
        assert summary['second_sensitivity_longtime'] == pytest.approx(0.75)
        assert {'chi_max_abs_z', 'fd_max_abs_z', 'weight_max_abs_z', 'sensitivity_final'} <= set(summary)

        manifest = _read_json(os.path.join(out, 'manifest.json'))
        assert manifest['config_hash'] == config.config_hash()
        assert manifest['seed'] == 3
        assert 'chi.csv' in manifest['artifacts']

    def test_results_do_not_depend_on_thread_count(self, harmonic_config_values, tmp_path):
        config = _parse(harmonic_config_values)
        experiments.process_experiment(config, threads=1, out_dir=str(tmp_path / "one"))
        experiments.process_experiment(config, threads=2, out_dir=str(tmp_path / "two"))
        for name in ('chi.csv', 'terms/phi_p00.csv', 'variance.csv', 'summary.json'):
            with open(tmp_path / "one" / name, 'rb') as a, open(tmp_path / "two" / name, 'rb') as b:
                assert a.read() == b.read(), name

    def test_second_sensitivity_artifact_name(self, harmonic_config_values):
        config = _parse(dict(harmonic_config_values, SPECTRUM_FAMILY='matern', MALLIAVIN_PERTURBATION='linear',
                             MALLIAVIN_OBSERVABLE='x2'))
        experiments.process_experiment(config)
        out = config['OUTPUT_DIR']
        assert os.path.isfile(os.path.join(out, 'sensitivity.csv'))
        assert os.path.isfile(os.path.join(out, 'terms', 'd2phi_p22.csv'))
        assert not os.path.exists(os.path.join(out, 'chi.csv'))

    def test_zero_cross_sensitivity_is_not_capped(self, harmonic_config_values):
        config = _parse(dict(harmonic_config_values, SPECTRUM_FAMILY='rational', MALLIAVIN_PERTURBATION='linear',
                             ESTIMATOR_SE_CAP=0.2, ESTIMATOR_TRAJECTORIES=200, ESTIMATOR_BATCH_SIZE=100))
        summary = experiments.process_experiment(config)
        sensitivity = pd.read_csv(os.path.join(config['OUTPUT_DIR'], 'sensitivity.csv'))
        assert len(sensitivity) == 101
        assert abs(summary['sensitivity_final']) <= 4.0 * summary['sensitivity_final_stderr']


class TestOracleCompare:

    @pytest.mark.parametrize("family, perturbation, observable", [
        ("rational", "constant", "x"), ("rational", "linear", "x2"), ("matern", "linear", "x2")])
    def test_terms_agree_with_oracle(self, harmonic_config_values, family, perturbation, observable):
        config = _parse(dict(harmonic_config_values, EXPERIMENT_KIND='oracle-compare', SPECTRUM_FAMILY=family,
                             MALLIAVIN_PERTURBATION=perturbation, MALLIAVIN_OBSERVABLE=observable,
                             DYNAMICS_BURN_IN=10.0, ESTIMATOR_TRAJECTORIES=4000, ESTIMATOR_BATCH_SIZE=1000))
        summary = experiments.process_experiment(config)
        assert max(summary['term_max_abs_z'].values()) < 4.0
        gap = abs(summary['sensitivity_final'] - summary['oracle_sensitivity_final'])
        assert gap < 4.0 * summary['sensitivity_final_stderr']
        assert os.path.isfile(os.path.join(config['OUTPUT_DIR'], 'manifest.json'))

    def test_terms_against_oracle(self, harmonic_config_values):
        config = _parse(dict(harmonic_config_values, EXPERIMENT_KIND='oracle-compare', SPECTRUM_FAMILY='rational'))
        summary = experiments.process_experiment(config)
        assert set(summary['term_max_abs_z']) == {'phi_p00', 'phi_p10', 'dphi_p11'}
        oracle = pd.read_csv(os.path.join(config['OUTPUT_DIR'], 'oracle_decomposition.csv'))
        assert set(oracle.columns) == {'t', 'phi_p00', 'phi_p10', 'dphi_p11'}

    def test_needs_single_harmonic_particle(self, harmonic_config_values):
        config = _parse(dict(harmonic_config_values, EXPERIMENT_KIND='oracle-compare', DYNAMICS_N_PARTICLES=2))
        with pytest.raises(ConfigError):
            experiments.process_experiment(config)


class TestMobilityAndNoise:

    def test_free_particle_mobility(self, harmonic_config_values):
        config = _parse(dict(harmonic_config_values, EXPERIMENT_KIND='ips-mobility', DYNAMICS_FORCE='free',
                             DYNAMICS_N_PARTICLES=4, DYNAMICS_DIMENSION=2, ESTIMATOR_ORIGINS=2,
                             ESTIMATOR_ORIGIN_SPACING=2.0, ESTIMATOR_FIT_WINDOW="0.5,1.0"))
        summary = experiments.process_experiment(config)
        assert summary['fit_window'] == [0.5, 1.0]
        assert summary['origins'] == 2
        chi = pd.read_csv(os.path.join(config['OUTPUT_DIR'], 'chi.csv'))
        # two origins per trajectory
        assert chi['n_samples'].iloc[-1] == 80

    def test_screened_coulomb_mobility_matches_finite_differences(self, harmonic_config_values):
        config = _parse(dict(harmonic_config_values, EXPERIMENT_KIND='ips-mobility', DYNAMICS_FORCE='screened-coulomb',
                             DYNAMICS_N_PARTICLES=32, DYNAMICS_DIMENSION=3, DYNAMICS_DT=0.001, DYNAMICS_T_MAX=0.2,
                             DYNAMICS_BURN_IN=0.2, ESTIMATOR_TRAJECTORIES=32, ESTIMATOR_BATCH_SIZE=16,
                             ESTIMATOR_FIT_WINDOW="0.1,0.2", ESTIMATOR_FINITE_DIFFERENCE='true',
                             ESTIMATOR_FD_TRAJECTORIES=16, ESTIMATOR_LAMBDA=0.5))
        summary = experiments.process_experiment(config)
        assert summary['fd_max_abs_z'] < 4.0
        assert summary['cutoff'] == pytest.approx(1.0 + 10.0 / 24.0)
        assert os.path.isfile(os.path.join(config['OUTPUT_DIR'], 'finite_difference.csv'))

    def test_einstein_ratio_does_not_grow_with_correlation_time(self, harmonic_config_values, tmp_path):
        ratios = []
        for tau_c in (0.01 * TAU_C, TAU_C):
            config = _parse(dict(harmonic_config_values, EXPERIMENT_KIND='ips-mobility',
                                 DYNAMICS_FORCE='screened-coulomb', DYNAMICS_N_PARTICLES=32, DYNAMICS_DIMENSION=3,
                                 SPECTRUM_TAU_C=tau_c, DYNAMICS_DT=0.001, DYNAMICS_T_MAX=1.0, DYNAMICS_BURN_IN=0.5,
                                 ESTIMATOR_TRAJECTORIES=16, ESTIMATOR_BATCH_SIZE=16, ESTIMATOR_FIT_WINDOW="0.5,1.0"))
            summary = experiments.process_experiment(config, out_dir=str(tmp_path / f"tau_c_{tau_c:.4f}"))
            ratios.append((summary['T_eff_ratio'], summary['T_eff_E_stderr'] / summary['T_eff_sp']))
        (short, short_se), (long, long_se) = ratios
        assert long <= short + 3.0 * math.hypot(short_se, long_se)

    def test_noise_validation(self, harmonic_config_values):
        config = _parse(dict(harmonic_config_values, EXPERIMENT_KIND='noise-validation', DYNAMICS_T_MAX=50.0,
                             DYNAMICS_RECORD_EVERY=5, ESTIMATOR_TRAJECTORIES=8, ESTIMATOR_BATCH_SIZE=4,
                             ESTIMATOR_MAX_LAG=5.0))
        summary = experiments.process_experiment(config)
        autocov = pd.read_csv(os.path.join(config['OUTPUT_DIR'], 'autocov.csv'))
        assert len(autocov) == 101
        assert autocov['estimate'].iloc[0] == pytest.approx(1.0, rel=0.3)
        assert summary['psd0_target'] == pytest.approx(2.0)
        assert summary['tau_c_target'] == pytest.approx(TAU_C)
        assert summary['family'] == "ou"
        assert np.isfinite(summary['tau_c'])
        assert 0.0 < summary['integration_window'] <= 5.0


class TestAnalyticCommands:

    def test_oracle_curves(self, harmonic_config_values, tmp_path):
        config = _parse(dict(harmonic_config_values, SPECTRUM_FAMILY='matern', MALLIAVIN_PERTURBATION='linear',
                             MALLIAVIN_OBSERVABLE='x2', DYNAMICS_T_MAX=20.0))
        summary, artifacts = experiments.process_oracle(config, out_dir=str(tmp_path / "oracle"))
        assert len(artifacts) == 4
        assert summary['variance_longtime'] == pytest.approx(0.46447, abs=1e-5)
        sensitivity = pd.read_csv(tmp_path / "oracle" / "oracle_sensitivity.csv")
        assert sensitivity['estimate'].iloc[-1] == pytest.approx(summary['second_sensitivity_longtime'], rel=1e-3)

    def test_describe_calibration(self, harmonic_config_values):
        info = experiments.describe_calibration(_parse(harmonic_config_values))
        assert info['psd0'] == pytest.approx(2.0)
        assert info['c0'] == pytest.approx(1.0)
        assert info['form'] == "nonsingular"


class TestValidate:

    def test_valid(self, write_config, harmonic_config_values):
        report = experiments.validate_experiment(write_config(harmonic_config_values))
        assert report == {'unknown': [], 'missing': [], 'warnings': [], 'errors': []}

    def test_missing_and_unknown(self, write_config, harmonic_config_values):
        values = {k: v for k, v in harmonic_config_values.items() if k != 'SPECTRUM_FAMILY'}
        values['SPECTRUM_COLOUR'] = 'pink'
        report = experiments.validate_experiment(write_config(values))
        assert report['missing'] == ['SPECTRUM_FAMILY']
        assert report['unknown'] == ['SPECTRUM_COLOUR']

    def test_coarse_time_step_warning(self, write_config, harmonic_config_values):
        values = dict(harmonic_config_values, DYNAMICS_DT=TAU_C, DYNAMICS_T_MAX=TAU_C)
        report = experiments.validate_experiment(write_config(values))
        assert any("dt too coarse" in w for w in report['warnings'])

    def test_bad_family(self, write_config, harmonic_config_values):
        report = experiments.validate_experiment(write_config(dict(harmonic_config_values, SPECTRUM_FAMILY='pink')))
        assert report['errors']

    def test_resume_needs_checkpoints(self, write_config, harmonic_config_values, tmp_path):
        values = dict(harmonic_config_values, DYNAMICS_RESUME=str(tmp_path / "nowhere"))
        report = experiments.validate_experiment(write_config(values))
        assert any("No checkpoint" in e for e in report['errors'])


class TestResume:

    def _values(self, harmonic_config_values, **extra):
        return dict(harmonic_config_values, EXPERIMENT_KIND='ips-mobility', DYNAMICS_FORCE='free',
                    DYNAMICS_N_PARTICLES=4, DYNAMICS_DIMENSION=2, ESTIMATOR_TRAJECTORIES=20,
                    ESTIMATOR_FIT_WINDOW="0.5,1.0", **extra)

    def test_batches_start_from_saved_states(self, harmonic_config_values, tmp_path):
        first = _parse(self._values(harmonic_config_values, OUTPUT_CHECKPOINT='true'))
        experiments.process_experiment(first, out_dir=str(tmp_path / "first"))
        assert os.path.isfile(tmp_path / "first" / "checkpoints" / "batch_001.bin")
        saved = checkpoint_utils.load_state(str(tmp_path / "first" / "checkpoints" / "batch_000.bin"))

        resumed = _parse(self._values(harmonic_config_values, DYNAMICS_RESUME=str(tmp_path / "first"),
                                      OUTPUT_TRAJECTORY='true'))
        experiments.process_experiment(resumed, out_dir=str(tmp_path / "second"))
        start = pd.read_csv(tmp_path / "second" / "trajectory.csv").iloc[0]
        assert_allclose(start[[f'x_{i}' for i in range(1, 9)]].to_numpy(dtype=float), saved.x[0])

    def test_batch_size_must_match(self, harmonic_config_values, tmp_path):
        first = _parse(self._values(harmonic_config_values, OUTPUT_CHECKPOINT='true'))
        experiments.process_experiment(first, out_dir=str(tmp_path / "first"))
        resumed = _parse(self._values(harmonic_config_values, DYNAMICS_RESUME=str(tmp_path / "first"),
                                      ESTIMATOR_BATCH_SIZE=5))
        with pytest.raises(ConfigError, match="batch 0"):
            experiments.process_experiment(resumed, out_dir=str(tmp_path / "second"))
