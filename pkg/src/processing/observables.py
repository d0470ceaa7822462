# src/processing/observables.py

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid

from src.errors import ConfigError, NumericalError

log = logging.getLogger(__name__)

# --- Configuration ---
DEFAULT_SE_CAP = 0.2              # truncate series once stderr > 20% of the signal scale
SIGNAL_SE = 4.0                   # a series is treated as signal once |estimate| exceeds this many stderrs
SLOPE_DRIFT_WARNING = 0.1         # MSD slope drift allowed inside the Einstein fit window
NONLINEARITY_SE = 5.0             # finite-difference slope mismatch threshold, in standard errors
AUTOCOV_WINDOW_SE = 2.0           # spectral estimates stop where the autocovariance falls into the noise
DEFAULT_MAX_HALVINGS = 3
DEFAULT_LAMBDA_FRACTION = 0.01


# --- Estimate containers ---

@dataclass
class EstimateSeries:
    """Per-time mean, standard error and sample count of an estimated function of time."""
    t: np.ndarray
    estimate: np.ndarray
    stderr: np.ndarray
    n_samples: np.ndarray

    @classmethod
    def from_samples(cls, times, samples):
        """Samples of shape (F, S, ...) are flattened to S' independent samples per frame."""
        samples = np.asarray(samples, dtype=float)
        flat = samples.reshape(samples.shape[0], -1)
        return cls.from_stats(times, RunningStats.from_samples(flat))

    @classmethod
    def from_stats(cls, times, stats):
        count = np.full(len(times), stats.count, dtype=int)
        return cls(np.asarray(times, dtype=float), stats.mean.copy(), stats.stderr(), count)

    @classmethod
    def exact(cls, times, values):
        """Analytic curve: stderr 0 and no samples."""
        times = np.asarray(times, dtype=float)
        values = np.broadcast_to(np.asarray(values, dtype=float), times.shape).copy()
        return cls(times, values, np.zeros_like(times), np.zeros(times.shape, dtype=int))

    def to_frame(self):
        return pd.DataFrame({'t': self.t, 'estimate': self.estimate,
                             'stderr': self.stderr, 'n_samples': self.n_samples})

    def at(self, t):
        """Row (estimate, stderr) at the frame closest to t."""
        i = int(np.argmin(np.abs(self.t - t)))
        return self.estimate[i], self.stderr[i]

    def truncate(self, n):
        return EstimateSeries(self.t[:n], self.estimate[:n], self.stderr[:n], self.n_samples[:n])

    def subsample(self, every):
        if every <= 1:
            return self
        return EstimateSeries(self.t[::every], self.estimate[::every], self.stderr[::every], self.n_samples[::every])


@dataclass
class RunningStats:
    """Welford accumulator over independent samples, vectorised over frames, with Chan's merge."""
    count: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def empty(cls, shape):
        return cls(0, np.zeros(shape), np.zeros(shape))

    @classmethod
    def from_samples(cls, samples):
        """samples: (F, S) -> stats over the S axis."""
        samples = np.asarray(samples, dtype=float)
        count = samples.shape[1]
        if count == 0:
            return cls.empty(samples.shape[0])
        mean = samples.mean(axis=1)
        m2 = np.sum((samples - mean[:, None]) ** 2, axis=1)
        return cls(count, mean, m2)

    def update(self, samples):
        self.merge(RunningStats.from_samples(samples))
        return self

    def merge(self, other):
        if other.count == 0:
            return self
        if self.count == 0:
            self.count, self.mean, self.m2 = other.count, other.mean.copy(), other.m2.copy()
            return self
        total = self.count + other.count
        delta = other.mean - self.mean
        self.mean = self.mean + delta * (other.count / total)
        self.m2 = self.m2 + other.m2 + delta ** 2 * (self.count * other.count / total)
        self.count = total
        return self

    def variance(self):
        if self.count < 2:
            return np.full_like(self.mean, np.nan)
        return self.m2 / (self.count - 1)

    def stderr(self):
        return np.sqrt(self.variance() / max(self.count, 1))


def merge_all(stats_list):
    """Merges accumulators left to right (fixed order keeps results independent of scheduling)."""
    total = None
    for stats in stats_list:
        if total is None:
            total = RunningStats(stats.count, stats.mean.copy(), stats.m2.copy())
        else:
            total.merge(stats)
    return total


def cap_by_stderr(series, max_relative=DEFAULT_SE_CAP, signal=None):
    """
    Truncates the series where stderr first exceeds max_relative times the signal scale.
    A series that never rises SIGNAL_SE standard errors above zero has no scale and is left whole.
    """
    usable = np.isfinite(series.stderr) & (series.stderr > 0)
    significant = np.abs(series.estimate[usable]) > SIGNAL_SE * series.stderr[usable]
    if signal is None and not np.any(significant):
        log.info(f"Series is indistinguishable from zero (|estimate| <= {SIGNAL_SE:g} SE); no cap applied.")
        return series
    scale = np.nanmax(np.abs(series.estimate)) if signal is None else abs(signal)
    over = np.flatnonzero(series.stderr > max_relative * scale)
    if over.size == 0 or scale == 0:
        return series
    cut = max(int(over[0]), 2)
    log.warning(f"Standard error exceeds {max_relative:.0%} of the signal from t={series.t[over[0]]:.4g}; "
                f"series capped at {cut} frames.")
    return series.truncate(cut)


# --- Observables ---

def position(index=0):
    return lambda x: x[..., index]


def square(index=0):
    return lambda x: x[..., index] ** 2


def observable_from_name(name, index=0):
    name = str(name).lower()
    if name in ("x", "position"):
        return position(index)
    if name in ("x2", "square"):
        return square(index)
    raise ConfigError(f"Unknown observable '{name}'. Expected x or x2.")


def displacement_from(origin):
    """Per-coordinate displacement observable relative to the positions at a time origin."""
    return lambda x: x - origin


# --- Mobility, MSD, Einstein temperature ---

def mobility_samples(trajectory, weights, sensitivity_terms=None):
    """
    zeta samples for one time origin: per-coordinate sensitivity of the displacement, averaged over
    coordinates, giving one sample per trajectory (F, M).
    """
    if weights.zero_like().ndim != 3:
        raise ConfigError("Mobility needs per-coordinate weights (constant force on every coordinate)")
    if sensitivity_terms is None:
        from src.processing.malliavin import decomposition as sensitivity_terms
    observable = displacement_from(trajectory.x[0])
    terms = sensitivity_terms(trajectory, observable, weights)
    return sum(terms.values()).mean(axis=2)


def mobility_function(segments, origin_spacing=None, decorrelation_time=None, sensitivity_terms=None):
    """
    chi(t) averaged over particles, directions, time origins and trajectories. Each segment is a
    (trajectory, weights) pair recorded from one time origin with weights restarted at zero.
    """
    if not segments:
        raise ConfigError("Mobility needs at least one time origin")
    if origin_spacing is not None and decorrelation_time is not None and len(segments) > 1:
        if origin_spacing < decorrelation_time:
            log.warning(f"Time origins {origin_spacing:.4g} apart are closer than the decorrelation time "
                        f"{decorrelation_time:.4g}; standard errors will be underestimated.")
    stats = merge_all(RunningStats.from_samples(mobility_samples(traj, w, sensitivity_terms))
                      for traj, w in segments)
    return EstimateSeries.from_stats(segments[0][0].times, stats)


def _check_unwrapped(trajectory):
    if trajectory.box is None:
        return
    jumps = np.abs(np.diff(trajectory.x, axis=0))
    box = np.tile(trajectory.box, trajectory.x.shape[-1] // len(trajectory.box))
    if np.any(jumps > 0.5 * box):
        raise NumericalError("Wrapped coordinates detected (jump larger than half the box); MSD needs unwrapped positions")


def msd_samples(trajectory, dimension=None):
    """Per-trajectory mean over particles of |x_i(t) - x_i(0)|^2, shape (F, M)."""
    _check_unwrapped(trajectory)
    if dimension is None:
        dimension = len(trajectory.box) if trajectory.box is not None else 1
    disp = trajectory.x - trajectory.x[0]
    frames, m, n = disp.shape
    return np.sum(disp.reshape(frames, m, n // dimension, dimension) ** 2, axis=3).mean(axis=2)


def msd(segments, dimension=None):
    """MSD(t) averaged over origins (segments) and trajectories; segments are trajectories."""
    if not segments:
        raise ConfigError("MSD needs at least one time origin")
    stats = merge_all(RunningStats.from_samples(msd_samples(traj, dimension)) for traj in segments)
    return EstimateSeries.from_stats(segments[0].times, stats)


@dataclass
class EinsteinEstimate:
    """Einstein temperature over a fit window, with the fitted mobility and self-diffusion."""
    T_eff_E: float
    stderr: float
    mu: float
    D_sd: float
    window: tuple


def einstein_temperature(chi, msd_series, fit_window, dimension=3):
    """
    T_eff^E = [MSD(t) / (2d)] / chi(t) averaged over the window, with errors propagated per point.
    mu and D_sd are the least-squares slopes of chi and MSD/(2d) over the same window.
    """
    t_lo, t_hi = fit_window
    if t_lo >= t_hi or t_lo < chi.t[0] or t_hi > chi.t[-1] + 1e-12:
        raise ConfigError(f"Fit window {fit_window} is outside the recorded range [{chi.t[0]}, {chi.t[-1]}]")
    inside = (chi.t >= t_lo) & (chi.t <= t_hi)
    if inside.sum() < 4:
        raise ConfigError(f"Fit window {fit_window} holds fewer than 4 frames")

    diffusion = msd_series.estimate[inside] / (2.0 * dimension)
    diffusion_se = msd_series.stderr[inside] / (2.0 * dimension)
    response = chi.estimate[inside]
    ratio = diffusion / response
    ratio_se = np.abs(ratio) * np.sqrt((diffusion_se / diffusion) ** 2 + (chi.stderr[inside] / response) ** 2)

    t = chi.t[inside]
    half = len(t) // 2
    slope_first = np.polyfit(t[:half], diffusion[:half], 1)[0]
    slope_second = np.polyfit(t[half:], diffusion[half:], 1)[0]
    mean_slope = 0.5 * (slope_first + slope_second)
    if mean_slope == 0 or abs(slope_first - slope_second) > SLOPE_DRIFT_WARNING * abs(mean_slope):
        log.warning(f"MSD is not linear over the fit window {fit_window}: slopes {slope_first:.4g} vs {slope_second:.4g}")

    return EinsteinEstimate(T_eff_E=float(np.mean(ratio)), stderr=float(np.mean(ratio_se)),
                            mu=float(np.polyfit(t, response, 1)[0]), D_sd=float(np.polyfit(t, diffusion, 1)[0]),
                            window=(t_lo, t_hi))


# --- Finite-difference oracle ---

def default_lambda(config):
    """0.01 k l: stiffness times the natural length scale of the force field."""
    k = config.force.stiffness()
    if k <= 0:
        return DEFAULT_LAMBDA_FRACTION
    sigma_V = getattr(config.force, 'sigma_V', None)
    length = sigma_V if sigma_V is not None else np.sqrt(config.spectrum.T_eff_sp / k)
    return DEFAULT_LAMBDA_FRACTION * k * length


def finite_difference_samples(config, lambda_step, observable, perturbation, seed=0,
                              common_random_numbers=True, check_linearity=True,
                              max_halvings=DEFAULT_MAX_HALVINGS):
    """
    Per-trajectory central differences [Phi_{+lam} - Phi_{-lam}] / (2 lam) on steady-state starts,
    with shared noise across the +-lam runs. Linearity is checked against the +-lam/2 slope; lam is
    halved on mismatch until max_halvings is exhausted. Returns (times, samples (F, S), lam).
    """
    from src.processing.dynamics import simulate, with_perturbation
    root = [int(s) for s in np.atleast_1d(seed)]

    def run(lam, stream):
        traj = simulate(with_perturbation(config, perturbation, lam), np.random.default_rng(root + [stream]))
        return traj.times, observable(traj.x)

    minus_stream = 0 if common_random_numbers else 1
    lam = lambda_step if lambda_step else default_lambda(config)
    for attempt in range(max_halvings + 1):
        times, phi_plus = run(lam, 0)
        _, phi_minus = run(-lam, minus_stream)
        slope = (phi_plus - phi_minus) / (2.0 * lam)
        slope = slope.reshape(slope.shape[0], -1)
        if not check_linearity:
            return times, slope, lam

        _, half_plus = run(0.5 * lam, 0)
        _, half_minus = run(-0.5 * lam, minus_stream)
        half = ((half_plus - half_minus) / lam).reshape(slope.shape)
        mismatch = RunningStats.from_samples(slope - half)
        scale = np.max(np.abs(slope.mean(axis=1))) + 1e-300
        excess = np.abs(mismatch.mean) - NONLINEARITY_SE * np.nan_to_num(mismatch.stderr()) - 1e-10 * scale
        if np.all(excess <= 0):
            return times, slope, lam
        log.warning(f"Nonlinear response at lambda={lam:.4g} (attempt {attempt + 1}); halving the step.")
        lam *= 0.5
    raise NumericalError(f"Finite-difference response stays nonlinear after {max_halvings} halvings of lambda")


def finite_difference_sensitivity(config, lambda_step, observable, perturbation, seed=0, **options):
    """Finite-difference oracle as an EstimateSeries (see finite_difference_samples)."""
    times, samples, _ = finite_difference_samples(config, lambda_step, observable, perturbation, seed, **options)
    return EstimateSeries.from_samples(times, samples)


# --- Noise validation ---

def autocovariance_samples(f, max_lag, origin_stride=1):
    """
    Lagged products of a stationary recorded noise f (F, M, n) for lags 0..max_lag frames, averaged
    over start times; one sample per trajectory and component, shape (max_lag + 1, M * n).
    """
    f = np.asarray(f, dtype=float)
    frames = f.shape[0]
    if max_lag >= frames:
        raise ConfigError(f"max_lag={max_lag} needs more than {frames} recorded frames")
    starts = np.arange(0, frames - max_lag, origin_stride)
    samples = np.empty((max_lag + 1,) + f.shape[1:])
    for lag in range(max_lag + 1):
        samples[lag] = np.mean(f[starts] * f[starts + lag], axis=0)
    return samples.reshape(max_lag + 1, -1)


def empirical_autocovariance(f, dt, max_lag, origin_stride=1):
    """Autocovariance estimate with lags in time units (frame spacing dt)."""
    samples = autocovariance_samples(f, max_lag, origin_stride)
    return EstimateSeries.from_samples(np.arange(max_lag + 1) * dt, samples)


def spectral_estimates(autocov):
    """
    psd(0) = 2 int c and tau_c^2 = int t^2 c / int c from an empirical autocovariance, integrated up to
    the first lag where the estimate is no longer AUTOCOV_WINDOW_SE standard errors above zero.
    """
    weak = np.flatnonzero(autocov.estimate <= AUTOCOV_WINDOW_SE * np.nan_to_num(autocov.stderr))
    end = int(weak[0]) if weak.size else len(autocov.t)
    if end < 2:
        raise NumericalError("Empirical autocovariance is not positive at small lags; cannot estimate psd(0)")
    t, c = autocov.t[:end], autocov.estimate[:end]
    if end < len(autocov.t):
        log.info(f"Autocovariance integrated up to t={t[-1]:.4g}; the rest is within the noise")
    area = trapezoid(c, t)
    second = trapezoid(t ** 2 * c, t)
    return {'psd0': 2.0 * area, 'tau_c': float(np.sqrt(second / area)), 'window': float(t[-1])}
