# src/persistence/csv_utils.py

import json
import logging
import os

import numpy as np
import pandas as pd

from src.errors import ArtifactIOError
from src.processing.observables import EstimateSeries

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - [%(name)s] %(message)s')
log = logging.getLogger(__name__)

SERIES_COLUMNS = ['t', 'estimate', 'stderr', 'n_samples']


def ensure_dir(directory):
    try:
        os.makedirs(directory, exist_ok=True)
    except OSError as e:
        raise ArtifactIOError(f"Cannot create output directory {directory}: {e}") from e
    return directory


def write_frame(df, path):
    """Writes a DataFrame as CSV (pandas default float format is the shortest round-trip repr)."""
    try:
        ensure_dir(os.path.dirname(os.path.abspath(path)))
        df.to_csv(path, index=False, lineterminator='\n')
    except OSError as e:
        raise ArtifactIOError(f"Cannot write {path}: {e}") from e
    log.info(f"Wrote {len(df)} rows to {path}")
    return path


def write_series(series, path):
    return write_frame(series.to_frame(), path)


def read_series(path):
    try:
        df = pd.read_csv(path)
    except (OSError, pd.errors.ParserError) as e:
        raise ArtifactIOError(f"Cannot read series {path}: {e}") from e
    if list(df.columns) != SERIES_COLUMNS:
        raise ArtifactIOError(f"{path} is not an estimate series (columns {list(df.columns)})")
    return EstimateSeries(df['t'].to_numpy(), df['estimate'].to_numpy(),
                          df['stderr'].to_numpy(), df['n_samples'].to_numpy())


def write_curves(times, curves, path):
    """Several named curves on one time grid (oracle and decomposition outputs)."""
    data = {'t': np.asarray(times)}
    data.update({name: np.asarray(values) for name, values in curves.items()})
    return write_frame(pd.DataFrame(data), path)


def write_trajectory(trajectory, path, trajectory_index=0, coordinates=None, observables=None):
    """
    One recorded trajectory as CSV: t, x_1..x_n (or a subset of coordinates) and optional observable
    columns given as {name: callable(x) -> (F, M)}.
    """
    x = trajectory.x[:, trajectory_index]
    columns = range(x.shape[1]) if coordinates is None else coordinates
    data = {'t': trajectory.times}
    for c in columns:
        data[f'x_{c + 1}'] = x[:, c]
    for name, fn in (observables or {}).items():
        data[name] = np.asarray(fn(trajectory.x))[:, trajectory_index]
    return write_frame(pd.DataFrame(data), path)


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_json(data, path):
    try:
        ensure_dir(os.path.dirname(os.path.abspath(path)))
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(_jsonable(data), f, indent=2, sort_keys=True)
            f.write('\n')
    except (OSError, TypeError) as e:
        raise ArtifactIOError(f"Cannot write {path}: {e}") from e
    log.info(f"Wrote {path}")
    return path


def read_json(path):
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ArtifactIOError(f"Cannot read {path}: {e}") from e
