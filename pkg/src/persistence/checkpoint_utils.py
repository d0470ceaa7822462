# src/persistence/checkpoint_utils.py

import logging
import os

import numpy as np

from src.errors import ArtifactIOError
from src.processing.dynamics import SimState

log = logging.getLogger(__name__)

# Layout: magic, format version (uint32), then int64 dims (M, n, q, lead, steps),
# then little-endian float64 x (M*n), y (M*q), history (lead*M*n).
MAGIC = b"MWSSTATE"
FORMAT_VERSION = 1
_HEADER = len(MAGIC) + 4 + 5 * 8


def save_state(state, path):
    m, n = state.x.shape
    q = state.y.shape[1]
    lead = state.history.shape[0]
    dims = np.array([m, n, q, lead, state.steps], dtype='<i8')
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'wb') as f:
            f.write(MAGIC)
            f.write(np.array([FORMAT_VERSION], dtype='<u4').tobytes())
            f.write(dims.tobytes())
            for array in (state.x, state.y, state.history):
                f.write(np.ascontiguousarray(array, dtype='<f8').tobytes())
    except OSError as e:
        raise ArtifactIOError(f"Cannot write checkpoint {path}: {e}") from e
    log.info(f"Checkpoint written to {path} ({m} trajectories, step {state.steps})")
    return path


def load_state(path):
    try:
        with open(path, 'rb') as f:
            blob = f.read()
    except OSError as e:
        raise ArtifactIOError(f"Cannot read checkpoint {path}: {e}") from e
    if len(blob) < _HEADER or blob[:len(MAGIC)] != MAGIC:
        raise ArtifactIOError(f"{path} is not a simulation checkpoint")
    offset = len(MAGIC)
    version = int(np.frombuffer(blob, dtype='<u4', count=1, offset=offset)[0])
    if version != FORMAT_VERSION:
        raise ArtifactIOError(f"Checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    offset += 4
    m, n, q, lead, steps = (int(v) for v in np.frombuffer(blob, dtype='<i8', count=5, offset=offset))
    offset += 5 * 8

    sizes = (m * n, m * q, lead * m * n)
    if len(blob) != offset + 8 * sum(sizes):
        raise ArtifactIOError(f"Checkpoint {path} is truncated or has trailing bytes")
    arrays = []
    for size in sizes:
        arrays.append(np.frombuffer(blob, dtype='<f8', count=size, offset=offset).astype(float))
        offset += 8 * size
    x, y, history = arrays
    return SimState(x.reshape(m, n), y.reshape(m, q), history.reshape(lead, m, n), steps)
