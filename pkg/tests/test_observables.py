# tests/test_observables.py

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.errors import ConfigError, NumericalError
from src.processing import dynamics, forces, malliavin, noise, observables
from src.processing.observables import EstimateSeries, RunningStats


class TestRunningStats:

    def test_matches_numpy(self, rng):
        samples = rng.standard_normal((5, 300))
        stats = RunningStats.from_samples(samples)
        assert_allclose(stats.mean, samples.mean(axis=1))
        assert_allclose(stats.variance(), samples.var(axis=1, ddof=1))
        assert_allclose(stats.stderr(), samples.std(axis=1, ddof=1) / math.sqrt(300))

    def test_merge_is_order_independent_in_value(self, rng):
        samples = rng.standard_normal((3, 100))
        parts = [RunningStats.from_samples(samples[:, i:i + 25]) for i in range(0, 100, 25)]
        merged = observables.merge_all(parts)
        assert merged.count == 100
        assert_allclose(merged.mean, samples.mean(axis=1), rtol=1e-12)
        assert_allclose(merged.m2, RunningStats.from_samples(samples).m2, rtol=1e-10)

    def test_merge_with_empty(self):
        stats = RunningStats.from_samples(np.ones((2, 3)))
        stats.merge(RunningStats.empty(2))
        assert stats.count == 3

    def test_variance_undefined_for_one_sample(self):
        assert np.all(np.isnan(RunningStats.from_samples(np.ones((2, 1))).variance()))


class TestEstimateSeries:

    def test_from_samples_flattens_extra_axes(self, rng):
        samples = rng.standard_normal((4, 10, 3))
        series = EstimateSeries.from_samples(np.arange(4.0), samples)
        assert_allclose(series.estimate, samples.reshape(4, -1).mean(axis=1))
        assert np.all(series.n_samples == 30)

    def test_exact_and_frame(self):
        frame = EstimateSeries.exact([0.0, 1.0], 2.0).to_frame()
        assert list(frame.columns) == ['t', 'estimate', 'stderr', 'n_samples']
        assert_allclose(frame['estimate'], [2.0, 2.0])
        assert_allclose(frame['stderr'], 0.0)

    def test_subsample_and_at(self):
        series = EstimateSeries.exact(np.linspace(0.0, 1.0, 11), np.arange(11.0))
        assert_allclose(series.subsample(5).t, [0.0, 0.5, 1.0])
        assert series.at(0.32)[0] == 3.0

    def test_cap_by_stderr(self):
        t = np.linspace(0.0, 1.0, 6)
        series = EstimateSeries(t, np.ones(6), np.array([0.0, 0.01, 0.05, 0.3, 0.4, 0.5]), np.full(6, 10))
        capped = observables.cap_by_stderr(series, 0.2)
        assert len(capped.t) == 3

    def test_noise_only_series_is_not_capped(self):
        t = np.linspace(0.0, 1.0, 6)
        series = EstimateSeries(t, np.array([0.0, 0.01, -0.02, 0.03, -0.01, 0.02]), np.full(6, 0.01), np.full(6, 10))
        assert len(observables.cap_by_stderr(series, 0.2).t) == 6


class TestObservableBuilders:

    def test_named_observables(self):
        x = np.array([[[1.0, -2.0]]])
        assert_allclose(observables.observable_from_name("x", 1)(x), [[-2.0]])
        assert_allclose(observables.observable_from_name("x2", 1)(x), [[4.0]])
        with pytest.raises(ConfigError):
            observables.observable_from_name("x3")


def _free_particles(model, n_trajectories, n, dimension, seed, t_max=1.0, record_every=1):
    config = dynamics.SimConfig(dt=0.01, t_max=t_max, spectrum=model, force=forces.Free(),
                                n_trajectories=n_trajectories, n_particles=n, dimension=dimension,
                                burn_in=3.0, lead=1, record_every=record_every)
    realization = noise.realize(model, n * dimension)
    return dynamics.simulate(config, np.random.default_rng(seed), realization=realization), realization


class TestMobility:

    def test_free_particle_mobility(self, ou_model):
        traj, realization = _free_particles(ou_model, 500, 4, 2, seed=1)
        lift = malliavin.lift_perturbation(malliavin.ConstantForce(particle=None, dimension=2), realization)
        weights = malliavin.propagate_weights(traj, lift)
        chi = observables.mobility_function([(traj, weights)])
        usable = chi.stderr > 0
        # chi(t) = t / xi0 for free particles
        assert np.all(np.abs(chi.estimate - traj.times)[usable] <= 4.0 * chi.stderr[usable] + 0.01)

    def test_mobility_needs_per_coordinate_weights(self, ou_model):
        traj, realization = _free_particles(ou_model, 5, 2, 1, seed=1)
        weights = malliavin.propagate_weights(traj, malliavin.lift_perturbation(malliavin.ConstantForce(),
                                                                                 realization))
        with pytest.raises(ConfigError):
            observables.mobility_samples(traj, weights)

    def test_msd_of_free_particles(self, ou_model):
        traj, _ = _free_particles(ou_model, 500, 4, 2, seed=2, t_max=20.0, record_every=10)
        msd = observables.msd([traj], dimension=2)
        # Each coordinate: 2 T t - 2 T tau_p (1 - exp(-t / tau_p)); summed over d = 2
        t = traj.times
        expected = 2.0 * (2.0 * t - 2.0 * (1.0 - np.exp(-t)))
        usable = msd.stderr > 0
        assert np.all(np.abs(msd.estimate - expected)[usable] <= 4.0 * msd.stderr[usable] + 0.02 * expected[usable])

    def test_wrapped_coordinates_are_rejected(self, ou_model):
        traj, _ = _free_particles(ou_model, 2, 1, 1, seed=3)
        traj.box = np.array([0.01])
        with pytest.raises(NumericalError):
            observables.msd_samples(traj, 1)


class TestEinstein:

    def _series(self, t, chi_slope, msd_slope, dimension=3):
        chi = EstimateSeries(t, chi_slope * t, np.full_like(t, 1e-3), np.full(t.shape, 100))
        msd = EstimateSeries(t, 2 * dimension * msd_slope * t, np.full_like(t, 1e-3), np.full(t.shape, 100))
        return chi, msd

    def test_ratio_of_slopes(self):
        t = np.linspace(0.0, 10.0, 101)
        chi, msd = self._series(t, 0.5, 0.75)
        estimate = observables.einstein_temperature(chi, msd, (5.0, 10.0), dimension=3)
        assert estimate.T_eff_E == pytest.approx(1.5)
        assert estimate.mu == pytest.approx(0.5)
        assert estimate.D_sd == pytest.approx(0.75)

    def test_window_outside_range(self):
        t = np.linspace(0.0, 10.0, 101)
        chi, msd = self._series(t, 1.0, 1.0)
        with pytest.raises(ConfigError):
            observables.einstein_temperature(chi, msd, (5.0, 20.0))


class TestFiniteDifference:

    def _config(self, model, n_trajectories=200):
        return dynamics.SimConfig(dt=0.01, t_max=1.0, spectrum=model, force=forces.Harmonic(1.0),
                                  n_trajectories=n_trajectories, burn_in=3.0)

    def test_common_random_numbers_recover_discrete_chi(self, psd1):
        config = self._config(psd1, 20)
        series = observables.finite_difference_sensitivity(config, 0.05, observables.position(0),
                                                           malliavin.ConstantForce())
        chi = 1.0 - (1.0 - 0.01) ** np.arange(101)
        assert_allclose(series.estimate, chi, atol=1e-9)

    def test_common_random_numbers_reduce_variance(self, psd1):
        config = self._config(psd1, 100)
        shared = observables.finite_difference_sensitivity(config, 0.05, observables.position(0),
                                                           malliavin.ConstantForce(), check_linearity=False)
        independent = observables.finite_difference_sensitivity(config, 0.05, observables.position(0),
                                                                malliavin.ConstantForce(),
                                                                common_random_numbers=False, check_linearity=False)
        assert shared.stderr[-1] < 0.01 * independent.stderr[-1]

    def test_default_lambda(self, psd1):
        assert observables.default_lambda(self._config(psd1)) == pytest.approx(0.01 * math.sqrt(1.0))

    def test_seed_sequences_are_distinct_streams(self, psd1):
        config = self._config(psd1, 10)
        _, first, _ = observables.finite_difference_samples(config, 0.1, observables.square(0),
                                                            malliavin.LinearForce(), seed=[1, 0],
                                                            check_linearity=False)
        _, second, _ = observables.finite_difference_samples(config, 0.1, observables.square(0),
                                                             malliavin.LinearForce(), seed=[1, 1],
                                                             check_linearity=False)
        assert not np.allclose(first, second)


class TestAutocovariance:

    def test_lagged_products(self):
        f = np.arange(6.0).reshape(6, 1, 1)
        samples = observables.autocovariance_samples(f, 2)
        assert samples.shape == (3, 1)
        assert samples[0, 0] == pytest.approx(np.mean(np.arange(4.0) ** 2))
        assert samples[2, 0] == pytest.approx(np.mean(np.arange(4.0) * np.arange(2.0, 6.0)))

    def test_too_many_lags(self):
        with pytest.raises(ConfigError):
            observables.autocovariance_samples(np.zeros((3, 1, 1)), 3)

    def test_spectral_estimates_of_exponential(self):
        t = np.linspace(0.0, 40.0, 40001)
        autocov = EstimateSeries.exact(t, np.exp(-t))
        estimates = observables.spectral_estimates(autocov)
        assert estimates['psd0'] == pytest.approx(2.0, rel=1e-4)
        assert estimates['tau_c'] == pytest.approx(math.sqrt(2.0), rel=1e-4)

    def test_noisy_tail_is_not_integrated(self):
        t = np.linspace(0.0, 20.0, 2001)
        c = np.where(t < 10.0, np.exp(-t), -0.05)
        estimates = observables.spectral_estimates(EstimateSeries.exact(t, c))
        assert estimates['window'] == pytest.approx(9.99)
        assert estimates['psd0'] == pytest.approx(2.0, rel=1e-3)
        assert estimates['tau_c'] == pytest.approx(math.sqrt(2.0), rel=1e-2)

    def test_negative_start_is_rejected(self):
        t = np.linspace(0.0, 1.0, 11)
        with pytest.raises(NumericalError):
            observables.spectral_estimates(EstimateSeries.exact(t, -np.ones(11)))

    def test_generated_ou_noise(self, ou_model):
        config = dynamics.SimConfig(dt=0.01, t_max=100.0, spectrum=ou_model, force=forces.Free(),
                                    n_trajectories=20, burn_in=10.0, record_noise=True, record_every=5)
        realization = noise.realize(ou_model, 1)
        traj = dynamics.simulate(config, np.random.default_rng(7), realization=realization)
        autocov = observables.empirical_autocovariance(realization.output(traj.y), 0.05, 60)
        reference = noise.correlation(ou_model, autocov.t)
        assert np.all(np.abs(autocov.estimate - reference) <= 4.0 * autocov.stderr + 0.02)

    @staticmethod
    def _generated_autocov(model):
        config = dynamics.SimConfig(dt=0.01, t_max=200.0, spectrum=model, force=forces.Free(),
                                    n_trajectories=80, burn_in=10.0, record_noise=True, record_every=5)
        realization = noise.realize(model, 1)
        traj = dynamics.simulate(config, np.random.default_rng(11), realization=realization)
        return observables.empirical_autocovariance(realization.output(traj.y), 0.05, 200)

    @pytest.mark.parametrize("family", ["rational", "matern"])
    def test_generated_colored_noise(self, family):
        model = noise.calibrate(family, 1.0, 1.0, math.sqrt(2.0))
        autocov = self._generated_autocov(model)
        reference = noise.correlation(model, autocov.t)
        assert autocov.estimate[0] == pytest.approx(reference[0], rel=0.08)
        assert np.all(np.abs(autocov.estimate - reference) <= 4.0 * autocov.stderr + 0.02)

        estimates = observables.spectral_estimates(autocov)
        assert estimates['psd0'] == pytest.approx(noise.psd_value(model, 0.0), rel=0.2)
        inside = autocov.t <= estimates['window']
        exact = observables.spectral_estimates(EstimateSeries.exact(autocov.t[inside], reference[inside]))
        assert estimates['tau_c'] == pytest.approx(exact['tau_c'], rel=0.2)

    def test_matern_correlation_time(self):
        model = noise.calibrate("matern", 1.0, 1.0, math.sqrt(2.0), nu=1.5)
        estimates = observables.spectral_estimates(self._generated_autocov(model))
        assert estimates['tau_c'] == pytest.approx(model.tau_c, rel=0.25)
