# tests/conftest.py

import math

import numpy as np
import pytest

from src.processing import noise

# Reduced units used throughout: k = xi0 = T = 1, tau_c = sqrt(2)
TAU_C = math.sqrt(2.0)


@pytest.fixture
def ou_model():
    return noise.calibrate("ou", 1.0, 1.0, TAU_C)


@pytest.fixture
def psd1():
    """Rational spectrum with one peak."""
    return noise.calibrate("rational", 1.0, 1.0, TAU_C)


@pytest.fixture
def psd2():
    """Matern spectrum with nu = 3/2."""
    return noise.calibrate("matern", 1.0, 1.0, TAU_C, nu=1.5)


@pytest.fixture(params=["ou", "rational", "matern"])
def any_model(request):
    return noise.calibrate(request.param, 1.0, 1.0, TAU_C)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def write_config(tmp_path):
    """Writes KEY=value lines to a config file and returns its path."""
    def _write(values, name="experiment.env"):
        path = tmp_path / name
        path.write_text("".join(f"{key}={value}\n" for key, value in values.items()))
        return str(path)
    return _write


@pytest.fixture
def harmonic_config_values(tmp_path):
    """Small harmonic-sensitivity config that runs in seconds."""
    return {
        'EXPERIMENT_KIND': 'harmonic-sensitivity',
        'EXPERIMENT_NAME': 'unit',
        'RNG_SEED': 3,
        'SPECTRUM_FAMILY': 'ou',
        'SPECTRUM_TAU_C': TAU_C,
        'DYNAMICS_DT': 0.01,
        'DYNAMICS_T_MAX': 1.0,
        'DYNAMICS_BURN_IN': 2.0,
        'MALLIAVIN_PERTURBATION': 'constant',
        'MALLIAVIN_OBSERVABLE': 'x',
        'ESTIMATOR_TRAJECTORIES': 40,
        'ESTIMATOR_BATCH_SIZE': 10,
        'ESTIMATOR_SE_CAP': 0,
        'OUTPUT_DIR': str(tmp_path / "results"),
    }
