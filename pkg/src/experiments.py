# src/experiments.py

import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone

import numpy as np

from src import __version__
from src.errors import ArtifactIOError, ConfigError, SensitivityError
from src.persistence import checkpoint_utils, config_utils, csv_utils
from src.processing import dynamics, forces, harmonic_oracle, malliavin, noise, observables
from src.processing.observables import EstimateSeries, RunningStats

log = logging.getLogger(__name__)

# --- Configuration ---
DEFAULT_ORIGIN_SPACING_FACTOR = 5.0
DEFAULT_FIT_WINDOW = (5.0, 10.0)
DEFAULT_MAX_LAG_FACTOR = 15.0
CHECKPOINT_DIR = "checkpoints"


# --- Builders: config -> domain objects ---

def build_spectrum(config):
    family = config['SPECTRUM_FAMILY']
    options = {}
    if family == "matern":
        options['nu'] = config['SPECTRUM_NU']
    elif family == "rational":
        options['r'] = config['SPECTRUM_RATIONAL_R']
        peaks = config_utils.parse_peaks(config['SPECTRUM_PEAKS'])
        if peaks:
            options['peaks'] = peaks
    return noise.calibrate(family, config['DYNAMICS_XI0'], config['SPECTRUM_T_EFF'],
                           config['SPECTRUM_TAU_C'], **options)


def build_force(config):
    return forces.build_force(config['DYNAMICS_FORCE'], k=config['DYNAMICS_K'],
                              n_particles=config['DYNAMICS_N_PARTICLES'], dimension=config['DYNAMICS_DIMENSION'],
                              sigma_V=config['DYNAMICS_SIGMA_V'], A_V=config['DYNAMICS_A_V'],
                              kappa=config['DYNAMICS_KAPPA'], density=config['DYNAMICS_DENSITY'],
                              box=config.get('DYNAMICS_BOX'), cutoff=config.get('DYNAMICS_CUTOFF'),
                              skin=config.get('DYNAMICS_SKIN'))


def build_perturbation(config, per_coordinate=False):
    dimension = config['DYNAMICS_DIMENSION']
    if per_coordinate:
        return malliavin.ConstantForce(particle=None, dimension=dimension)
    return malliavin.perturbation_from_name(config['MALLIAVIN_PERTURBATION'], config['MALLIAVIN_PARTICLE'],
                                            config['MALLIAVIN_DIRECTION'], dimension)


def observable_index(config):
    return config['MALLIAVIN_PARTICLE'] * config['DYNAMICS_DIMENSION'] + config['MALLIAVIN_DIRECTION']


def relaxation_time(config, spectrum, force):
    """Slowest relaxation scale: tau_c, xi0/k, or the interaction time xi0 sigma_V^2 / T."""
    scales = [spectrum.tau_c]
    if isinstance(force, forces.ScreenedCoulomb):
        scales.append(config['DYNAMICS_XI0'] * force.sigma_V ** 2 / spectrum.T_eff_sp)
    elif force.stiffness() > 0:
        scales.append(config['DYNAMICS_XI0'] / force.stiffness())
    return max(scales)


def stencil(realization):
    """(n', lead, tail): weight order and the positions recorded before t=0 and past the horizon."""
    if realization.form == "brunowski":
        n_prime = realization.brunowski.n_prime
        return n_prime, n_prime, n_prime - 1
    return 1, 1, 0


def make_sim_config(config, spectrum, force, n_trajectories, lead=0, tail=0, record_noise=False):
    return dynamics.SimConfig(dt=config['DYNAMICS_DT'], t_max=config['DYNAMICS_T_MAX'], spectrum=spectrum,
                              force=force, n_trajectories=n_trajectories,
                              n_particles=config['DYNAMICS_N_PARTICLES'], dimension=config['DYNAMICS_DIMENSION'],
                              xi0=config['DYNAMICS_XI0'], burn_in=config.get('DYNAMICS_BURN_IN'),
                              seed=config['RNG_SEED'], record_every=config['DYNAMICS_RECORD_EVERY'],
                              lead=lead, tail=tail, record_noise=record_noise)


def batch_plan(config):
    total, size = config['ESTIMATOR_TRAJECTORIES'], config['ESTIMATOR_BATCH_SIZE']
    if total < 1 or size < 1:
        raise ConfigError("ESTIMATOR_TRAJECTORIES and ESTIMATOR_BATCH_SIZE must be >= 1")
    return [(b, min(size, total - b * size)) for b in range(math.ceil(total / size))]


def batch_rng(config, index, state=None):
    """Batch b draws from the stream (seed, b); a resumed batch continues on (seed, b, steps)."""
    if state is None:
        return np.random.default_rng([config['RNG_SEED'], index])
    return np.random.default_rng([config['RNG_SEED'], index, state.steps])


def checkpoint_path(directory, index):
    return os.path.join(directory, CHECKPOINT_DIR, f"batch_{index:03d}.bin")


def resume_state(config, index, size, realization):
    """State of batch b saved by an earlier run under DYNAMICS_RESUME, or None for a fresh burn-in."""
    directory = config['DYNAMICS_RESUME']
    if not directory:
        return None
    path = checkpoint_path(directory, index)
    state = checkpoint_utils.load_state(path)
    if state.x.shape != (size, realization.n) or state.y.shape[1] != realization.q:
        raise ConfigError(f"Checkpoint {path} holds {state.x.shape[0]}x{state.x.shape[1]} positions and "
                          f"{state.y.shape[1]} noise states; batch {index} needs {size}x{realization.n} "
                          f"and {realization.q}")
    log.info(f"Batch {index}: resuming from {path} at step {state.steps}")
    return state


def _fd_size(config, index, size):
    limit = config['ESTIMATOR_FD_TRAJECTORIES']
    if not limit:
        return size
    return int(np.clip(limit - index * config['ESTIMATOR_BATCH_SIZE'], 0, size))


def _stats(samples):
    samples = np.asarray(samples, dtype=float)
    return RunningStats.from_samples(samples.reshape(samples.shape[0], -1))


# --- Batch workers (top level so the process pool can pickle them) ---

def harmonic_batch(config, index, size):
    """One batch of single-particle trajectories: sensitivity terms, weights, <x^2>, optional FD oracle."""
    spectrum, force = build_spectrum(config), build_force(config)
    n = config['DYNAMICS_N_PARTICLES'] * config['DYNAMICS_DIMENSION']
    realization = noise.realize(spectrum, n)
    _, lead, tail = stencil(realization)
    lift = malliavin.lift_perturbation(build_perturbation(config), realization)
    observable = observables.observable_from_name(config['MALLIAVIN_OBSERVABLE'], observable_index(config))

    sim = make_sim_config(config, spectrum, force, size, lead, tail)
    state = resume_state(config, index, size, realization)
    traj = dynamics.simulate(sim, batch_rng(config, index, state), state=state, realization=realization)
    weights = malliavin.propagate_weights(traj, lift)
    terms = malliavin.decomposition(traj, observable, weights)

    stats = {f'term:{label}': _stats(samples) for label, samples in terms.items()}
    stats['sensitivity'] = _stats(sum(terms.values()))
    stats['variance'] = _stats(traj.x[..., observable_index(config)] ** 2)
    for (j, k), values in weights.weights.items():
        stats[f'weight:p{j}{k}'] = _stats(values)

    fd_size = _fd_size(config, index, size)
    if config['ESTIMATOR_FINITE_DIFFERENCE'] and fd_size:
        fd_sim = make_sim_config(config, spectrum, force, fd_size)
        _, samples, lam = observables.finite_difference_samples(
            fd_sim, config.get('ESTIMATOR_LAMBDA'), observable, lift.descriptor, seed=[config['RNG_SEED'], index])
        stats['finite_difference'] = _stats(samples)
        log.debug(f"Batch {index}: finite differences with lambda={lam:.4g}")

    log.debug(f"Batch {index}: {size} trajectories done")
    return _batch_result(config, index, traj, stats)


def ips_batch(config, index, size):
    """One batch of interacting-particle runs over several time origins: chi and MSD samples."""
    spectrum, force = build_spectrum(config), build_force(config)
    dimension = config['DYNAMICS_DIMENSION']
    n = config['DYNAMICS_N_PARTICLES'] * dimension
    realization = noise.realize(spectrum, n)
    _, lead, tail = stencil(realization)
    lift = malliavin.lift_perturbation(build_perturbation(config, per_coordinate=True), realization)

    sim = make_sim_config(config, spectrum, force, size, lead, tail)
    state = resume_state(config, index, size, realization)
    rng = batch_rng(config, index, state)
    spacing = config.get('ESTIMATOR_ORIGIN_SPACING') or DEFAULT_ORIGIN_SPACING_FACTOR * relaxation_time(config, spectrum, force)
    gap_steps = max(int(round((spacing - sim.t_max) / sim.dt)) - sim.tail, 0)

    if state is None:
        state = dynamics.initial_state(sim, rng, realization)
    chi_stats, msd_stats, first = None, None, None
    for origin in range(config['ESTIMATOR_ORIGINS']):
        traj = dynamics.simulate(sim, rng, state, realization)
        weights = malliavin.propagate_weights(traj, lift)
        chi = RunningStats.from_samples(observables.mobility_samples(traj, weights, malliavin.decomposition))
        msd = RunningStats.from_samples(observables.msd_samples(traj, dimension))
        chi_stats = chi if chi_stats is None else chi_stats.merge(chi)
        msd_stats = msd if msd_stats is None else msd_stats.merge(msd)
        if first is None:
            first = traj
        state = traj.final_state
        if origin < config['ESTIMATOR_ORIGINS'] - 1 and gap_steps:
            state = dynamics.advance(sim, rng, state, gap_steps, realization)
        log.debug(f"Batch {index}: origin {origin + 1}/{config['ESTIMATOR_ORIGINS']} done")

    stats = {'chi': chi_stats, 'msd': msd_stats}
    fd_size = _fd_size(config, index, size)
    if config['ESTIMATOR_FINITE_DIFFERENCE'] and fd_size:
        fd_sim = make_sim_config(config, spectrum, force, fd_size)
        tagged = malliavin.ConstantForce(config['MALLIAVIN_PARTICLE'], config['MALLIAVIN_DIRECTION'], dimension)
        _, samples, _ = observables.finite_difference_samples(
            fd_sim, config.get('ESTIMATOR_LAMBDA'), observables.position(observable_index(config)), tagged,
            seed=[config['RNG_SEED'], index])
        stats['finite_difference'] = _stats(samples)

    result = _batch_result(config, index, first, stats)
    result['final_state'] = state if config['OUTPUT_CHECKPOINT'] else None
    return result


def noise_batch(config, index, size):
    """One batch of free noise paths: lagged products of f = C y."""
    spectrum = build_spectrum(config)
    n = config['DYNAMICS_N_PARTICLES'] * config['DYNAMICS_DIMENSION']
    realization = noise.realize(spectrum, n)
    sim = make_sim_config(config, spectrum, forces.Free(), size, record_noise=True)
    traj = dynamics.simulate(sim, batch_rng(config, index), realization=realization)
    f = realization.output(traj.y)
    frame_dt = sim.dt * sim.record_every
    max_lag = int(round(max_lag_time(config, spectrum) / frame_dt))
    stats = {'autocov': RunningStats.from_samples(observables.autocovariance_samples(f, max_lag))}
    result = _batch_result(config, index, traj, stats)
    result['times'] = np.arange(max_lag + 1) * frame_dt
    result['final_state'] = None
    return result


def _batch_result(config, index, traj, stats):
    result = {'index': index, 'times': traj.times, 'stats': stats, 'trajectory': None, 'final_state': None}
    if index == 0 and config['OUTPUT_TRAJECTORY']:
        result['trajectory'] = traj.select(0)
    if config['OUTPUT_CHECKPOINT']:
        result['final_state'] = traj.final_state
    return result


BATCH_FUNCTIONS = {'harmonic': harmonic_batch, 'ips': ips_batch, 'noise': noise_batch}


def _run_batch(job):
    name, config, index, size = job
    return BATCH_FUNCTIONS[name](config, index, size)


def run_batches(config, name, threads=1):
    """
    Runs every batch of the plan, in a process pool when threads > 1, and merges the accumulators in
    batch order so the result does not depend on the thread count. Returns the per-batch results and
    the merged accumulators.
    """
    jobs = [(name, config, index, size) for index, size in batch_plan(config)]
    log.info(f"Running {len(jobs)} batches ({config['ESTIMATOR_TRAJECTORIES']} trajectories) on {threads} worker(s)")
    if threads <= 1 or len(jobs) == 1:
        results = [_run_batch(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_batch, jobs))

    merged = {}
    for result in results:
        for key, stats in result['stats'].items():
            if key in merged:
                merged[key].merge(stats)
            else:
                merged[key] = RunningStats(stats.count, stats.mean.copy(), stats.m2.copy())
    return results, merged


# --- Helpers shared by the processors ---

def max_lag_time(config, spectrum):
    return config.get('ESTIMATOR_MAX_LAG') or DEFAULT_MAX_LAG_FACTOR * spectrum.tau_c


def fit_window(config, spectrum, force):
    window = config_utils.parse_window(config['ESTIMATOR_FIT_WINDOW'])
    if window is not None:
        return window
    scale = relaxation_time(config, spectrum, force)
    lo, hi = DEFAULT_FIT_WINDOW[0] * scale, DEFAULT_FIT_WINDOW[1] * scale
    t_max = config['DYNAMICS_T_MAX']
    if hi > t_max:
        log.warning(f"Default fit window [{lo:.3g}, {hi:.3g}] exceeds t_max={t_max}; using [{t_max / 2:.3g}, {t_max:.3g}]")
        lo, hi = t_max / 2.0, t_max
    return lo, hi


def max_abs_z(series, reference):
    """Largest |estimate - reference| / stderr over frames with a positive stderr."""
    reference = np.broadcast_to(np.asarray(reference, dtype=float), series.estimate.shape)
    usable = np.isfinite(series.stderr) & (series.stderr > 0)
    if not np.any(usable):
        return 0.0
    return float(np.max(np.abs(series.estimate[usable] - reference[usable]) / series.stderr[usable]))


def expected_zero(config):
    """<x> under a linear perturbation stays zero by the x -> -x symmetry of the unperturbed system."""
    return config['MALLIAVIN_PERTURBATION'] == "linear" and config['MALLIAVIN_OBSERVABLE'] == "x"


def _finalize(config, series):
    cap = config['ESTIMATOR_SE_CAP']
    if cap > 0 and not expected_zero(config):
        series = observables.cap_by_stderr(series, cap)
    return series.subsample(config['ESTIMATOR_OUTPUT_EVERY'])


def _write_side_artifacts(config, results, out_dir, observable=None):
    """Trajectory export of batch 0 and one checkpoint per batch."""
    artifacts = []
    first = results[0]
    if first.get('trajectory') is not None:
        extra = {'phi': observable} if observable is not None else None
        artifacts.append(csv_utils.write_trajectory(first['trajectory'], os.path.join(out_dir, 'trajectory.csv'),
                                                    observables=extra))
    for result in results:
        if result.get('final_state') is not None:
            path = checkpoint_path(out_dir, result['index'])
            artifacts.append(checkpoint_utils.save_state(result['final_state'], path))
    return artifacts


def _harmonic_case(config, spectrum, perturbation=None):
    return harmonic_oracle.HarmonicCase(k=config['DYNAMICS_K'], xi0=config['DYNAMICS_XI0'], spectrum=spectrum,
                                        perturbation=perturbation or config['MALLIAVIN_PERTURBATION'])


def _longtime_values(config, spectrum):
    """Closed-form long-time limits for the single harmonic particle, when they apply."""
    if config['DYNAMICS_FORCE'] != "harmonic" or config['DYNAMICS_N_PARTICLES'] * config['DYNAMICS_DIMENSION'] != 1:
        return {}
    values = {'chi_limit': 1.0 / config['DYNAMICS_K'],
              'variance_longtime': harmonic_oracle.variance_longtime(_harmonic_case(config, spectrum, "constant"))}
    values['second_sensitivity_longtime'] = harmonic_oracle.second_sensitivity_longtime(
        _harmonic_case(config, spectrum, "linear"))
    return values


# --- Processors, one per experiment kind ---

def _harmonic_artifacts(config, threads, out_dir):
    """Shared Monte Carlo part of harmonic-sensitivity and oracle-compare."""
    results, merged = run_batches(config, 'harmonic', threads)
    first = results[0]
    times = first['times']
    spectrum = build_spectrum(config)
    observable = observables.observable_from_name(config['MALLIAVIN_OBSERVABLE'], observable_index(config))
    artifacts = []

    sensitivity = EstimateSeries.from_stats(times, merged['sensitivity'])
    constant_x = config['MALLIAVIN_PERTURBATION'] == "constant" and config['MALLIAVIN_OBSERVABLE'] == "x"
    name = 'chi.csv' if constant_x else 'sensitivity.csv'
    artifacts.append(csv_utils.write_series(_finalize(config, sensitivity), os.path.join(out_dir, name)))

    terms = {key.split(':', 1)[1]: EstimateSeries.from_stats(times, stats)
             for key, stats in merged.items() if key.startswith('term:')}
    for label, series in terms.items():
        artifacts.append(csv_utils.write_series(series.subsample(config['ESTIMATOR_OUTPUT_EVERY']),
                                                os.path.join(out_dir, 'terms', f'{label}.csv')))
    for key, stats in merged.items():
        if key.startswith('weight:'):
            series = EstimateSeries.from_stats(times, stats).subsample(config['ESTIMATOR_OUTPUT_EVERY'])
            artifacts.append(csv_utils.write_series(series, os.path.join(out_dir, 'weights', f"{key.split(':')[1]}.csv")))
    variance = EstimateSeries.from_stats(times, merged['variance'])
    artifacts.append(csv_utils.write_series(variance.subsample(config['ESTIMATOR_OUTPUT_EVERY']),
                                            os.path.join(out_dir, 'variance.csv')))

    final_estimate, final_stderr = sensitivity.estimate[-1], sensitivity.stderr[-1]
    summary = {'t_final': float(times[-1]), 'sensitivity_final': float(final_estimate),
               'sensitivity_final_stderr': float(final_stderr),
               'variance_final': float(variance.estimate[-1]), 'variance_final_stderr': float(variance.stderr[-1]),
               'weight_max_abs_z': max(max_abs_z(EstimateSeries.from_stats(times, s), 0.0)
                                       for k, s in merged.items() if k.startswith('weight:'))}
    summary.update(_longtime_values(config, spectrum))
    if constant_x and config['DYNAMICS_FORCE'] == "harmonic":
        analytic = harmonic_oracle.chi_analytic(config['DYNAMICS_K'], config['DYNAMICS_XI0'], times)
        summary['chi_max_abs_z'] = max_abs_z(sensitivity, analytic)

    if 'finite_difference' in merged:
        fd = EstimateSeries.from_stats(times, merged['finite_difference'])
        artifacts.append(csv_utils.write_series(fd.subsample(config['ESTIMATOR_OUTPUT_EVERY']),
                                                os.path.join(out_dir, 'finite_difference.csv')))
        combined = np.sqrt(sensitivity.stderr ** 2 + fd.stderr ** 2)
        usable = combined > 0
        summary['fd_max_abs_z'] = float(np.max(np.abs(sensitivity.estimate - fd.estimate)[usable] / combined[usable]))

    artifacts.extend(_write_side_artifacts(config, results, out_dir, observable))
    return summary, artifacts, terms


def process_harmonic_sensitivity(config, threads, out_dir):
    summary, artifacts, _ = _harmonic_artifacts(config, threads, out_dir)
    return summary, artifacts


def process_oracle_compare(config, threads, out_dir):
    """Monte Carlo decomposition terms side by side with the moment oracle on the same grid."""
    if config['DYNAMICS_FORCE'] != "harmonic" or config['DYNAMICS_N_PARTICLES'] * config['DYNAMICS_DIMENSION'] != 1:
        raise ConfigError("oracle-compare needs a single harmonic particle in one dimension")
    summary, artifacts, terms = _harmonic_artifacts(config, threads, out_dir)
    case = _harmonic_case(config, build_spectrum(config))
    times = next(iter(terms.values())).t
    oracle_terms = harmonic_oracle.moment_oracle(case, ("decomposition", config['MALLIAVIN_OBSERVABLE']), times)

    every = config['ESTIMATOR_OUTPUT_EVERY']
    artifacts.append(csv_utils.write_curves(times[::every], {k: v[::every] for k, v in oracle_terms.items()},
                                            os.path.join(out_dir, 'oracle_decomposition.csv')))
    summary['term_max_abs_z'] = {label: max_abs_z(terms[label], oracle_terms[label]) for label in oracle_terms}
    summary['oracle_sensitivity_final'] = float(sum(v[-1] for v in oracle_terms.values()))
    return summary, artifacts


def process_ips_mobility(config, threads, out_dir):
    """Mobility, MSD and Einstein temperature of the interacting system."""
    results, merged = run_batches(config, 'ips', threads)
    first = results[0]
    times = first['times']
    spectrum, force = build_spectrum(config), build_force(config)
    dimension = config['DYNAMICS_DIMENSION']

    chi = EstimateSeries.from_stats(times, merged['chi'])
    msd = EstimateSeries.from_stats(times, merged['msd'])
    every = config['ESTIMATOR_OUTPUT_EVERY']
    artifacts = [csv_utils.write_series(chi.subsample(every), os.path.join(out_dir, 'chi.csv')),
                 csv_utils.write_series(msd.subsample(every), os.path.join(out_dir, 'msd.csv'))]

    einstein = observables.einstein_temperature(chi, msd, fit_window(config, spectrum, force), dimension)
    summary = {'mu': einstein.mu, 'D_sd': einstein.D_sd, 'T_eff_E': einstein.T_eff_E,
               'T_eff_E_stderr': einstein.stderr, 'T_eff_sp': spectrum.T_eff_sp,
               'T_eff_ratio': einstein.T_eff_E / spectrum.T_eff_sp, 'fit_window': list(einstein.window),
               'origins': config['ESTIMATOR_ORIGINS']}
    if isinstance(force, forces.ScreenedCoulomb):
        summary['box'] = list(force.box)
        summary['cutoff'] = force.cutoff

    if 'finite_difference' in merged:
        fd = EstimateSeries.from_stats(times, merged['finite_difference'])
        artifacts.append(csv_utils.write_series(fd.subsample(every), os.path.join(out_dir, 'finite_difference.csv')))
        combined = np.sqrt(chi.stderr ** 2 + fd.stderr ** 2)
        usable = combined > 0
        summary['fd_max_abs_z'] = float(np.max(np.abs(chi.estimate - fd.estimate)[usable] / combined[usable]))

    artifacts.extend(_write_side_artifacts(config, results, out_dir))
    return summary, artifacts


def process_noise_validation(config, threads, out_dir):
    """Empirical autocovariance of the generated noise against the model correlation."""
    results, merged = run_batches(config, 'noise', threads)
    first = results[0]
    spectrum = build_spectrum(config)
    lags = first['times']
    autocov = EstimateSeries.from_stats(lags, merged['autocov'])
    reference = noise.correlation(spectrum, lags)

    artifacts = [csv_utils.write_series(autocov, os.path.join(out_dir, 'autocov.csv')),
                 csv_utils.write_curves(lags, {'correlation': reference},
                                        os.path.join(out_dir, 'autocov_reference.csv'))]
    estimates = observables.spectral_estimates(autocov)
    target_psd0 = 2.0 * spectrum.xi0 * spectrum.T_eff_sp
    summary = {'psd0': estimates['psd0'], 'psd0_target': target_psd0,
               'psd0_relative_error': abs(estimates['psd0'] - target_psd0) / target_psd0,
               'tau_c': estimates['tau_c'], 'tau_c_target': spectrum.tau_c,
               'tau_c_relative_error': abs(estimates['tau_c'] - spectrum.tau_c) / spectrum.tau_c,
               'integration_window': estimates['window'],
               'autocov_max_abs_z': max_abs_z(autocov, reference)}
    summary.update(spectrum.describe())
    artifacts.extend(_write_side_artifacts(config, results, out_dir))
    return summary, artifacts


PROCESSORS = {
    'harmonic-sensitivity': process_harmonic_sensitivity,
    'ips-mobility': process_ips_mobility,
    'noise-validation': process_noise_validation,
    'oracle-compare': process_oracle_compare,
}


def process_experiment(config, threads=1, out_dir=None):
    """
    Runs one experiment end to end and writes its CSVs, summary.json and manifest.json.
    Returns the summary dict.
    """
    out_dir = out_dir or config['OUTPUT_DIR']
    name = config['EXPERIMENT_NAME']
    started_at = datetime.now(timezone.utc).isoformat()
    start = time.perf_counter()
    log.info(f"--- Starting experiment '{name}' ({config.kind}) ---")
    try:
        csv_utils.ensure_dir(out_dir)
        summary, artifacts = PROCESSORS[config.kind](config, threads, out_dir)
        summary = {'experiment': name, 'kind': config.kind, **summary}
        artifacts.append(csv_utils.write_json(summary, os.path.join(out_dir, 'summary.json')))
        manifest = {
            'experiment': name, 'kind': config.kind, 'config_path': config.path,
            'config_hash': config.config_hash(), 'config': config.canonical_lines(),
            'seed': config['RNG_SEED'], 'version': __version__, 'threads': threads,
            'started_at': started_at, 'wall_clock_seconds': time.perf_counter() - start,
            'artifacts': [os.path.relpath(a, out_dir) for a in artifacts],
        }
        csv_utils.write_json(manifest, os.path.join(out_dir, 'manifest.json'))
        log.info(f"--- Finished experiment '{name}' in {manifest['wall_clock_seconds']:.1f}s ---")
        return summary
    except SensitivityError as e:
        log.error(f"Experiment '{name}' failed: {e}", exc_info=True)
        raise
    except OSError as e:
        log.error(f"Experiment '{name}' failed writing artifacts: {e}", exc_info=True)
        raise ArtifactIOError(str(e)) from e


# --- Analytic-only commands ---

def process_oracle(config, out_dir=None):
    """Analytic chi(t), moment-oracle decomposition and long-time limits, without simulation."""
    out_dir = out_dir or config['OUTPUT_DIR']
    spectrum = build_spectrum(config)
    times = np.linspace(0.0, config['DYNAMICS_T_MAX'], config['ESTIMATOR_ORACLE_POINTS'])
    case = _harmonic_case(config, spectrum)
    log.info(f"--- Computing analytic curves for {spectrum.family} noise ---")

    artifacts = [csv_utils.write_series(EstimateSeries.exact(times, harmonic_oracle.chi_analytic(case.k, case.xi0, times)),
                                        os.path.join(out_dir, 'chi_analytic.csv'))]
    terms = harmonic_oracle.moment_oracle(case, ("decomposition", config['MALLIAVIN_OBSERVABLE']), times)
    artifacts.append(csv_utils.write_curves(times, terms, os.path.join(out_dir, 'oracle_decomposition.csv')))
    artifacts.append(csv_utils.write_series(EstimateSeries.exact(times, sum(terms.values())),
                                            os.path.join(out_dir, 'oracle_sensitivity.csv')))
    summary = {'kind': 'oracle', 'family': spectrum.family, 'perturbation': case.perturbation,
               'observable': config['MALLIAVIN_OBSERVABLE'],
               'variance_longtime': harmonic_oracle.variance_longtime(case),
               'second_sensitivity_longtime': harmonic_oracle.second_sensitivity_longtime(
                   _harmonic_case(config, spectrum, "linear"))}
    artifacts.append(csv_utils.write_json(summary, os.path.join(out_dir, 'oracle_summary.json')))
    return summary, artifacts


def describe_calibration(config):
    """Calibrated spectrum parameters plus the realization layout for the configured system size."""
    spectrum = build_spectrum(config)
    info = spectrum.describe()
    info['psd0'] = float(noise.psd_value(spectrum, 0.0))
    info['c0'] = float(noise.correlation(spectrum, 0.0))
    try:
        realization = noise.realize(spectrum, config['DYNAMICS_N_PARTICLES'] * config['DYNAMICS_DIMENSION'])
        info.update({'form': realization.form, 'q': realization.q, 'p': realization.p, 'n': realization.n})
    except ConfigError as e:
        info['realization'] = f"not available: {e}"
    return info


def validate_experiment(path):
    """
    Checks a config file without running it: unknown keys, missing keys, and numerical warnings.
    Returns a report dict with lists 'unknown', 'missing', 'warnings' and 'errors'.
    """
    raw = config_utils.read_raw(path)
    report = {'unknown': sorted(k for k in raw if k not in config_utils.SCHEMA),
              'missing': [], 'warnings': [], 'errors': []}
    kind = (raw.get('EXPERIMENT_KIND') or "").strip().lower()
    report['missing'] = ['EXPERIMENT_KIND'] if not kind else config_utils.missing_keys(kind, raw)
    if report['missing']:
        return report
    try:
        config = config_utils.parse_config(raw, path)
        spectrum, force = build_spectrum(config), build_force(config)
        noise.realize(spectrum, config['DYNAMICS_N_PARTICLES'] * config['DYNAMICS_DIMENSION'])
        sim = make_sim_config(config, spectrum, force, config['ESTIMATOR_BATCH_SIZE'])
        report['warnings'].extend(dynamics.check_time_step(sim))
        if config['RNG_SEED'] < 0:
            report['errors'].append("RNG_SEED must be non-negative")
        if config.kind == "noise-validation" and max_lag_time(config, spectrum) >= config['DYNAMICS_T_MAX']:
            report['errors'].append("ESTIMATOR_MAX_LAG must be shorter than DYNAMICS_T_MAX")
        if config.kind == "ips-mobility":
            lo, hi = fit_window(config, spectrum, force)
            if lo >= hi or hi > config['DYNAMICS_T_MAX']:
                report['errors'].append(f"Fit window [{lo}, {hi}] is outside [0, DYNAMICS_T_MAX]")
        if config.kind == "oracle-compare" and config['DYNAMICS_FORCE'] != "harmonic":
            report['errors'].append("oracle-compare needs DYNAMICS_FORCE=harmonic")
        resume = config['DYNAMICS_RESUME']
        if resume and config.kind == "noise-validation":
            report['errors'].append("DYNAMICS_RESUME applies to harmonic and IPS runs only")
        elif resume and not os.path.isfile(checkpoint_path(resume, 0)):
            report['errors'].append(f"No checkpoint at {checkpoint_path(resume, 0)}")
    except ConfigError as e:
        report['errors'].append(str(e))
    return report
