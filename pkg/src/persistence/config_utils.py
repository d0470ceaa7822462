# src/persistence/config_utils.py

import hashlib
import logging
import os
from dataclasses import dataclass, field, replace

from dotenv import dotenv_values

from src.errors import ConfigError

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - [%(name)s] %(message)s')
log = logging.getLogger(__name__)

# --- Schema ---
# key -> (type, default, doc). A default of None means "derived at run time" unless the key
# is listed as required for the experiment kind.
EXPERIMENT_KINDS = ("harmonic-sensitivity", "ips-mobility", "noise-validation", "oracle-compare")
NON_SEMANTIC_KEYS = {"OUTPUT_DIR"}

SCHEMA = {
    'EXPERIMENT_KIND': (str, None, "One of harmonic-sensitivity, ips-mobility, noise-validation, oracle-compare"),
    'EXPERIMENT_NAME': (str, "", "Label used in artifact names and the summary"),
    'RNG_SEED': (int, 0, "Root seed; batch b uses the stream (seed, b)"),

    'SPECTRUM_FAMILY': (str, None, "ou, rational or matern"),
    'SPECTRUM_T_EFF': (float, 1.0, "Single-particle effective temperature T_eff^sp"),
    'SPECTRUM_TAU_C': (float, None, "Correlation time tau_c (rms width of the correlation)"),
    'SPECTRUM_NU': (float, 1.5, "Matern smoothness nu (half-integer for simulation)"),
    'SPECTRUM_RATIONAL_R': (int, 1, "Number of rational peaks; r != 1 needs SPECTRUM_PEAKS"),
    'SPECTRUM_PEAKS': (str, "", "Explicit rational peaks 'sigma,omega,ell;sigma,omega,ell'"),

    'DYNAMICS_FORCE': (str, "harmonic", "harmonic, free or screened-coulomb"),
    'DYNAMICS_K': (float, 1.0, "Harmonic stiffness k"),
    'DYNAMICS_XI0': (float, 1.0, "Friction coefficient xi0"),
    'DYNAMICS_DT': (float, 1e-3, "Euler time step"),
    'DYNAMICS_T_MAX': (float, 10.0, "Recorded horizon per time origin"),
    'DYNAMICS_BURN_IN': (float, None, "Burn-in time before t=0 (default 20 max(tau_c, xi0/k))"),
    'DYNAMICS_N_PARTICLES': (int, 1, "Number of particles N"),
    'DYNAMICS_DIMENSION': (int, 1, "Spatial dimension d"),
    'DYNAMICS_A_V': (float, 475.0, "Screened-Coulomb amplitude A_V"),
    'DYNAMICS_KAPPA': (float, 24.0, "Screening parameter kappa"),
    'DYNAMICS_SIGMA_V': (float, 1.0, "Particle diameter sigma_V"),
    'DYNAMICS_DENSITY': (float, 0.51, "Number density N sigma_V^d / V used for the default box"),
    'DYNAMICS_BOX': (float, None, "Periodic box edge (overrides the density)"),
    'DYNAMICS_CUTOFF': (float, None, "Pair cutoff (default sigma_V + 10/kappa)"),
    'DYNAMICS_SKIN': (float, None, "Verlet skin (default 0.1 cutoff)"),
    'DYNAMICS_RECORD_EVERY': (int, 1, "Recording stride in steps"),
    'DYNAMICS_RESUME': (str, "", "Output directory of an earlier run; batch b starts from its checkpoints/batch_b.bin"),

    'MALLIAVIN_PERTURBATION': (str, "constant", "constant, linear or constant-all"),
    'MALLIAVIN_OBSERVABLE': (str, "x", "x or x2"),
    'MALLIAVIN_PARTICLE': (int, 0, "Perturbed particle for constant forces"),
    'MALLIAVIN_DIRECTION': (int, 0, "Perturbed direction for constant forces"),

    'ESTIMATOR_TRAJECTORIES': (int, 1000, "Trajectories in the ensemble"),
    'ESTIMATOR_BATCH_SIZE': (int, 500, "Trajectories per batch (one random stream per batch)"),
    'ESTIMATOR_ORIGINS': (int, 1, "Time origins per trajectory"),
    'ESTIMATOR_ORIGIN_SPACING': (float, None, "Gap between origins (default 5 max(tau_c, xi0/k))"),
    'ESTIMATOR_FIT_WINDOW': (str, "", "Einstein fit window 'lo,hi' (default 5..10 max(tau_c, xi0 sigma_V^2/T))"),
    'ESTIMATOR_FINITE_DIFFERENCE': (bool, False, "Also run the finite-difference oracle"),
    'ESTIMATOR_FD_TRAJECTORIES': (int, 0, "Trajectories for the finite-difference oracle (default: all)"),
    'ESTIMATOR_LAMBDA': (float, None, "Finite-difference step (default 0.01 k l)"),
    'ESTIMATOR_SE_CAP': (float, 0.2, "Cap series where stderr exceeds this fraction of the signal; 0 disables"),
    'ESTIMATOR_OUTPUT_EVERY': (int, 1, "Write every n-th frame to CSV"),
    'ESTIMATOR_MAX_LAG': (float, None, "Autocovariance lag range in time units (default 15 tau_c)"),
    'ESTIMATOR_ORACLE_POINTS': (int, 201, "Points of analytic curves"),

    'OUTPUT_DIR': (str, "results", "Artifact directory"),
    'OUTPUT_TRAJECTORY': (bool, False, "Export the first recorded trajectory to CSV"),
    'OUTPUT_CHECKPOINT': (bool, False, "Write the final state of every batch to checkpoints/batch_NNN.bin"),
}

REQUIRED = {
    'harmonic-sensitivity': ('SPECTRUM_FAMILY', 'SPECTRUM_TAU_C', 'MALLIAVIN_PERTURBATION', 'MALLIAVIN_OBSERVABLE'),
    'ips-mobility': ('SPECTRUM_FAMILY', 'SPECTRUM_TAU_C', 'DYNAMICS_N_PARTICLES'),
    'noise-validation': ('SPECTRUM_FAMILY', 'SPECTRUM_TAU_C'),
    'oracle-compare': ('SPECTRUM_FAMILY', 'SPECTRUM_TAU_C', 'MALLIAVIN_PERTURBATION', 'MALLIAVIN_OBSERVABLE'),
}


def _convert(key, raw):
    kind = SCHEMA[key][0]
    text = str(raw).strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"Key {key}: cannot parse '{text}' as {kind.__name__}") from None


@dataclass
class ExperimentConfig:
    """Typed, defaulted experiment configuration parsed from a flat KEY=value file."""
    values: dict
    path: str = ""
    unknown: list = field(default_factory=list)
    explicit: set = field(default_factory=set)

    @property
    def kind(self):
        return self.values['EXPERIMENT_KIND']

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        value = self.values.get(key)
        return default if value is None else value

    def with_overrides(self, **overrides):
        values = dict(self.values)
        for key, value in overrides.items():
            if value is not None:
                values[key] = _convert(key, value)
        return replace(self, values=values, explicit=self.explicit | {k for k, v in overrides.items() if v is not None})

    def canonical_lines(self):
        """Sorted KEY=value lines of every semantic key, used for hashing and the manifest."""
        lines = []
        for key in sorted(self.values):
            if key in NON_SEMANTIC_KEYS:
                continue
            value = self.values[key]
            lines.append(f"{key}={'' if value is None else repr(value)}")
        return lines

    def config_hash(self):
        return hashlib.sha256("\n".join(self.canonical_lines()).encode('utf-8')).hexdigest()


def read_raw(path):
    """Reads a dotenv-style file into a dict of strings."""
    if not path or not os.path.isfile(path):
        raise ConfigError(f"Config file not found: {path}")
    try:
        raw = dotenv_values(path)
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from e
    return {k.strip().upper(): v for k, v in raw.items() if k}


def missing_keys(kind, raw):
    return [key for key in REQUIRED.get(kind, ()) if raw.get(key) in (None, "")]


def parse_config(raw, path=""):
    """Applies the schema: typed values with defaults, unknown keys collected, required keys checked."""
    unknown = sorted(k for k in raw if k not in SCHEMA)
    kind = (raw.get('EXPERIMENT_KIND') or "").strip().lower()
    if not kind:
        raise ConfigError("Missing required key EXPERIMENT_KIND")
    if kind not in EXPERIMENT_KINDS:
        raise ConfigError(f"Unknown EXPERIMENT_KIND '{kind}'. Expected one of {EXPERIMENT_KINDS}")
    missing = missing_keys(kind, raw)
    if missing:
        raise ConfigError(f"Missing required keys for {kind}: {', '.join(missing)}")

    values = {}
    for key, (_, default, _) in SCHEMA.items():
        text = raw.get(key)
        values[key] = default if text in (None, "") else _convert(key, text)
    values['EXPERIMENT_KIND'] = kind
    values['SPECTRUM_FAMILY'] = values['SPECTRUM_FAMILY'].lower()
    if not values['EXPERIMENT_NAME']:
        values['EXPERIMENT_NAME'] = kind
    explicit = {k for k in raw if k in SCHEMA and raw[k] not in (None, "")}
    return ExperimentConfig(values=values, path=path, unknown=unknown, explicit=explicit)


def load_config(path):
    config = parse_config(read_raw(path), path)
    if config.unknown:
        log.warning(f"Ignoring unknown config keys: {', '.join(config.unknown)}")
    log.info(f"Loaded {config.kind} config from {path} (hash {config.config_hash()[:12]})")
    return config


def parse_peaks(text):
    """'s1,w1,l1;s2,w2,l2' -> [(s1, w1, l1), (s2, w2, l2)]."""
    peaks = []
    for chunk in filter(None, (c.strip() for c in text.split(';'))):
        parts = [p.strip() for p in chunk.split(',')]
        if len(parts) != 3:
            raise ConfigError(f"Rational peak '{chunk}' must be a sigma,omega,ell triple")
        try:
            peaks.append(tuple(float(p) for p in parts))
        except ValueError:
            raise ConfigError(f"Rational peak '{chunk}' has a non-numeric entry") from None
    return peaks


def parse_window(text):
    """'lo,hi' -> (lo, hi) or None when empty."""
    if not text:
        return None
    parts = [p.strip() for p in text.split(',')]
    try:
        lo, hi = (float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"Fit window '{text}' must be 'lo,hi'") from None
    return lo, hi


def reference_lines():
    """Markdown table rows documenting every key (used to keep docs/config_reference.md current)."""
    rows = ["| Key | Type | Default | Meaning |", "| --- | --- | --- | --- |"]
    for key, (kind, default, doc) in SCHEMA.items():
        shown = "derived" if default is None else repr(default)
        rows.append(f"| `{key}` | {kind.__name__} | {shown} | {doc} |")
    return rows
