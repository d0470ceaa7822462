# tests/test_noise.py

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.integrate import quad

from src.errors import ConfigError, NumericalError
from src.processing import noise

TAU_C = math.sqrt(2.0)


class TestCalibrate:

    def test_ou_persistence_time(self, ou_model):
        assert ou_model.tau_p == pytest.approx(1.0)

    def test_rational_single_peak(self, psd1):
        peak, = psd1.peaks
        assert peak.sigma == pytest.approx(1.58114, abs=1e-5)
        assert peak.ell == pytest.approx(0.4)
        assert peak.omega == pytest.approx(0.2)

    def test_matern_three_halves(self, psd2):
        assert psd2.sigma_nu ** 2 == pytest.approx(0.70711, abs=1e-5)
        assert psd2.tau_nu == pytest.approx(1.22474, abs=1e-5)

    def test_psd_at_zero_is_twice_xi0_T(self, any_model):
        assert float(noise.psd_value(any_model, 0.0)) == pytest.approx(2.0, rel=1e-12)

    @pytest.mark.parametrize("nu", [0.5, 1.5, 2.5, 0.8])
    def test_matern_psd_at_zero_for_any_nu(self, nu):
        model = noise.calibrate("matern", 2.0, 0.5, 0.3, nu=nu)
        assert float(noise.psd_value(model, 0.0)) == pytest.approx(2.0 * 2.0 * 0.5, rel=1e-10)

    def test_rational_curvature_gives_tau_c(self, psd1):
        assert math.sqrt(noise._curvature_ratio(psd1)) == pytest.approx(TAU_C, rel=1e-12)

    def test_rejects_non_positive_tau_c(self):
        with pytest.raises(ConfigError):
            noise.calibrate("ou", 1.0, 1.0, 0.0)

    def test_rejects_unknown_family(self):
        with pytest.raises(ConfigError):
            noise.calibrate("pink", 1.0, 1.0, 1.0)

    def test_rational_with_two_peaks_needs_triples(self):
        with pytest.raises(ConfigError):
            noise.calibrate("rational", 1.0, 1.0, 1.0, r=2)

    def test_explicit_peaks_are_kept(self):
        model = noise.calibrate("rational", 1.0, 1.0, 1.0, peaks=[(1.0, 0.5, 2.0), (0.5, 0.0, 1.0)])
        assert len(model.peaks) == 2
        assert model.peaks[1] == noise.RationalPeak(0.5, 0.0, 1.0)


class TestCorrelation:

    def test_variance_is_integral_of_psd(self, any_model):
        area, _ = quad(lambda w: float(noise.psd_value(any_model, w)), 0.0, np.inf, limit=200)
        assert float(noise.correlation(any_model, 0.0)) == pytest.approx(area / math.pi, rel=1e-7)

    def test_integral_of_correlation_is_half_psd0(self, any_model):
        area, _ = quad(lambda t: float(noise.correlation(any_model, t)), 0.0, np.inf, limit=200)
        assert area == pytest.approx(1.0, rel=1e-7)

    def test_ou_decays_by_one_over_e_at_tau_p(self, ou_model):
        ratio = noise.correlation(ou_model, 1.0) / noise.correlation(ou_model, 0.0)
        assert float(ratio) == pytest.approx(math.exp(-1.0))

    def test_correlation_is_even(self, psd2):
        t = np.linspace(0.0, 3.0, 7)
        assert_allclose(noise.correlation(psd2, -t), noise.correlation(psd2, t))


class TestRealization:

    @pytest.mark.parametrize("omega", [0.0, 0.3, 1.0, 4.0])
    def test_state_space_psd_matches_model(self, any_model, omega):
        realization = noise.realize(any_model, 1)
        assert noise.state_space_psd(realization, omega) == pytest.approx(float(noise.psd_value(any_model, omega)),
                                                                           rel=1e-10)

    def test_stationary_output_variance_matches_correlation(self, any_model):
        realization = noise.realize(any_model, 1)
        variance = realization.block_C @ realization.block_sigma_inf @ realization.block_C.T
        assert variance[0, 0] == pytest.approx(float(noise.correlation(any_model, 0.0)), rel=1e-10)

    def test_rational_lyapunov_block(self, psd1):
        realization = noise.realize(psd1, 1)
        assert_allclose(realization.block_sigma_inf, 0.5 * 0.4 * np.eye(2), atol=1e-12)

    def test_matern_lyapunov_block(self, psd2):
        realization = noise.realize(psd2, 1)
        ell = 2.0 / TAU_C
        assert_allclose(realization.block_sigma_inf, ell / 4.0 * np.eye(2), atol=1e-12)
        assert realization.form == "brunowski"
        assert realization.brunowski.n_prime == 2

    def test_kronecker_layout(self, psd1):
        realization = noise.realize(psd1, 3)
        assert realization.q == 6 and realization.p == 6
        assert realization.A.shape == (6, 6)
        assert_allclose(realization.A, np.kron(realization.block_A, np.eye(3)))

    def test_output_picks_first_state_per_component(self, ou_model):
        realization = noise.realize(ou_model, 2)
        assert_allclose(realization.output(np.array([[1.5, -2.0]])), [[1.5, -2.0]])

    def test_euler_step(self, ou_model):
        realization = noise.realize(ou_model, 1)
        y = realization.evolve(np.array([[1.0]]), np.zeros((1, 1)), 0.1)
        assert y[0, 0] == pytest.approx(0.9)

    def test_matern_needs_half_integer_nu(self):
        model = noise.calibrate("matern", 1.0, 1.0, 1.0, nu=0.8)
        with pytest.raises(ConfigError):
            noise.realize(model, 1)

    def test_matern_one_half_is_first_order(self):
        realization = noise.realize(noise.calibrate("matern", 1.0, 1.0, 1.0, nu=0.5), 1)
        assert realization.brunowski.n_prime == 1
        assert realization.q0 == 1


class TestLyapunov:

    def test_residual(self, psd2):
        realization = noise.realize(psd2, 1)
        assert noise.lyapunov_residual(realization.block_A, realization.block_B,
                                       realization.block_sigma_inf) < 1e-12

    def test_unstable_matrix(self):
        with pytest.raises(NumericalError):
            noise.stationary_covariance(np.array([[-1.0]]), np.array([[1.0]]))

    def test_block_size_limit(self):
        q = noise.MAX_LYAPUNOV_BLOCK + 1
        with pytest.raises(ConfigError):
            noise.stationary_covariance(np.eye(q), np.eye(q))

    def test_sampled_covariance(self, psd1, rng):
        realization = noise.realize(psd1, 1)
        samples = noise.sample_stationary(realization, rng, size=200_000)
        assert samples.shape == (200_000, 2)
        assert_allclose(np.cov(samples.T), realization.block_sigma_inf, atol=0.01)

    def test_single_sample_shape(self, ou_model, rng):
        realization = noise.realize(ou_model, 4)
        assert noise.sample_stationary(realization, rng).shape == (4,)
