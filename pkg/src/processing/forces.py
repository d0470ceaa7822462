# src/processing/forces.py

import logging
import math
from dataclasses import dataclass
from itertools import product

import numpy as np

from src.errors import ConfigError, NumericalError

log = logging.getLogger(__name__)

# --- Configuration ---
DEFAULT_DENSITY = 0.51           # N sigma_V^3 / V in reduced units
DEFAULT_CUTOFF_DECAYS = 10.0     # r_cut = sigma_V + 10 / kappa
DEFAULT_SKIN_FRACTION = 0.1      # Verlet skin as a fraction of the cutoff
MIN_CELLS_PER_DIM = 3
OVERLAP_FRACTION = 1e-9


# --- Force fields ---
# Every force field maps a batch of flat positions (M, N*d) to forces of the same shape.
# bind(m) returns the callable used by the integrator, which may carry per-trajectory state.

@dataclass(frozen=True)
class Free:
    """No deterministic force."""
    kind: str = "free"

    def evaluate(self, x):
        return np.zeros_like(x)

    def bind(self, m):
        return self.evaluate

    def stiffness(self):
        return 0.0


@dataclass(frozen=True)
class Harmonic:
    """F(x) = -k x componentwise."""
    k: float
    kind: str = "harmonic"

    def __post_init__(self):
        if not np.isfinite(self.k) or self.k <= 0:
            raise ConfigError(f"Harmonic stiffness must be positive, got {self.k}")

    def evaluate(self, x):
        return -self.k * x

    def bind(self, m):
        return self.evaluate

    def stiffness(self):
        return self.k


@dataclass(frozen=True)
class ScreenedCoulomb:
    """
    Repulsive pair potential V(r) = A_V exp(-kappa (r - sigma_V)) / r in a periodic box.
    Positions are kept unwrapped; the box is only used for minimum images and cell assignment.
    """
    A_V: float
    kappa: float
    sigma_V: float
    box: tuple
    n_particles: int
    dimension: int = 3
    cutoff: float | None = None
    skin: float | None = None
    kind: str = "screened-coulomb"

    def __post_init__(self):
        for name in ('A_V', 'kappa', 'sigma_V'):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        box = tuple(float(b) for b in np.broadcast_to(np.asarray(self.box, dtype=float), (self.dimension,)))
        object.__setattr__(self, 'box', box)
        if self.cutoff is None:
            object.__setattr__(self, 'cutoff', default_cutoff(self.kappa, self.sigma_V))
        if self.skin is None:
            object.__setattr__(self, 'skin', DEFAULT_SKIN_FRACTION * self.cutoff)
        if 2.0 * self.cutoff > min(box):
            log.warning(f"Cutoff {self.cutoff:.4g} exceeds half the box edge {min(box):.4g}; "
                        f"minimum-image pairs beyond L/2 are ignored.")

    @property
    def box_array(self):
        return np.asarray(self.box)

    def potential(self, r):
        r = np.asarray(r, dtype=float)
        return self.A_V * np.exp(-self.kappa * (r - self.sigma_V)) / r

    def pair_force(self, r):
        """Magnitude of the repulsive pair force, -V'(r)."""
        r = np.asarray(r, dtype=float)
        return self.A_V * np.exp(-self.kappa * (r - self.sigma_V)) * (self.kappa * r + 1.0) / r ** 2

    def curvature(self, r):
        """V''(r)."""
        r = np.asarray(r, dtype=float)
        kr = self.kappa * r
        return self.A_V * np.exp(-self.kappa * (r - self.sigma_V)) * (kr ** 2 + 2.0 * kr + 2.0) / r ** 3

    def typical_spacing(self):
        return (float(np.prod(self.box)) / self.n_particles) ** (1.0 / self.dimension)

    def stiffness(self):
        return float(self.curvature(self.typical_spacing()))

    def evaluate(self, x):
        m = x.shape[0]
        out = np.empty_like(x)
        for b in range(m):
            positions = x[b].reshape(self.n_particles, self.dimension)
            out[b] = coulomb_forces(positions, self).reshape(-1)
        return out

    def bind(self, m):
        return CoulombEvaluator(self, m)


class CoulombEvaluator:
    """Batch force evaluator holding one Verlet neighbour list per trajectory."""

    def __init__(self, params, m):
        self.params = params
        self.lists = [NeighborList(params) for _ in range(m)]

    def __call__(self, x):
        p = self.params
        out = np.empty_like(x)
        for b, nlist in enumerate(self.lists):
            positions = x[b].reshape(p.n_particles, p.dimension)
            out[b] = coulomb_forces(positions, p, pairs=nlist.pairs(positions)).reshape(-1)
        return out


# --- Geometry helpers ---

def default_cutoff(kappa, sigma_V):
    return sigma_V + DEFAULT_CUTOFF_DECAYS / kappa


def default_box(n_particles, sigma_V=1.0, density=DEFAULT_DENSITY, dimension=3):
    """Edge length of the cubic box with N sigma_V^d / L^d = density."""
    if n_particles < 1 or density <= 0:
        raise ConfigError(f"Need n_particles >= 1 and density > 0, got {n_particles}, {density}")
    return (n_particles * sigma_V ** dimension / density) ** (1.0 / dimension)


def cubic_lattice(n_particles, box, dimension=3):
    """First N sites of a simple cubic lattice filling the box, as an (N, d) array."""
    box = np.broadcast_to(np.asarray(box, dtype=float), (dimension,))
    per_side = math.ceil(round(n_particles ** (1.0 / dimension), 9))
    spacing = box / per_side
    sites = np.array(list(product(range(per_side), repeat=dimension)), dtype=float)[:n_particles]
    return (sites + 0.5) * spacing


def fcc_lattice(n_cells, box):
    """Face-centred cubic sites, 4 n_cells^3 of them, filling a cubic box."""
    box = np.broadcast_to(np.asarray(box, dtype=float), (3,))
    basis = np.array([[0.0, 0.0, 0.0], [0.5, 0.5, 0.0], [0.5, 0.0, 0.5], [0.0, 0.5, 0.5]])
    cells = np.array(list(product(range(n_cells), repeat=3)), dtype=float)
    sites = (cells[:, None, :] + basis[None, :, :] + 0.25).reshape(-1, 3)
    return sites * (box / n_cells)


def initial_lattice(n_particles, box, dimension=3):
    """FCC sites when N = 4 m^3 in three dimensions, otherwise the simple cubic lattice."""
    if dimension == 3:
        m = round((n_particles / 4.0) ** (1.0 / 3.0))
        if m >= 1 and 4 * m ** 3 == n_particles:
            return fcc_lattice(m, box)
    return cubic_lattice(n_particles, box, dimension)


def minimum_image(delta, box):
    return delta - box * np.round(delta / box)


def all_pairs(positions, box, radius):
    """Reference O(N^2) pair search: index arrays (i, j), i < j, with minimum-image distance < radius."""
    n = positions.shape[0]
    i, j = np.triu_indices(n, k=1)
    delta = minimum_image(positions[i] - positions[j], box)
    keep = np.einsum('pa,pa->p', delta, delta) < radius ** 2
    return i[keep], j[keep]


def cell_pairs(positions, box, radius):
    """
    Linked-cell pair search with cells of edge >= radius. Falls back to all_pairs when
    fewer than three cells fit along any direction.
    """
    n, d = positions.shape
    cells_per_dim = np.floor(box / radius).astype(int)
    if np.any(cells_per_dim < MIN_CELLS_PER_DIM):
        return all_pairs(positions, box, radius)

    wrapped = positions - box * np.floor(positions / box)
    coords = np.minimum((wrapped / (box / cells_per_dim)).astype(int), cells_per_dim - 1)
    strides = np.cumprod(np.concatenate(([1], cells_per_dim[:0:-1])))[::-1]
    cell_id = coords @ strides
    n_cells = int(np.prod(cells_per_dim))

    # Padded occupancy table, -1 marks an empty slot
    order = np.argsort(cell_id, kind='stable')
    counts = np.bincount(cell_id, minlength=n_cells)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    slot = np.arange(n) - starts[cell_id[order]]
    occupancy = -np.ones((n_cells, max(int(counts.max()), 1)), dtype=int)
    occupancy[cell_id[order], slot] = order

    pair_i, pair_j = [], []
    particles = np.arange(n)
    for offset in product((-1, 0, 1), repeat=d):
        neighbour = (coords + np.asarray(offset)) % cells_per_dim
        candidates = occupancy[neighbour @ strides]
        ii = np.broadcast_to(particles[:, None], candidates.shape)
        mask = candidates > ii
        pair_i.append(ii[mask])
        pair_j.append(candidates[mask])
    i = np.concatenate(pair_i)
    j = np.concatenate(pair_j)
    delta = minimum_image(positions[i] - positions[j], box)
    keep = np.einsum('pa,pa->p', delta, delta) < radius ** 2
    return i[keep], j[keep]


class NeighborList:
    """Verlet list built from the cell list with a skin, rebuilt once any particle moves skin/2."""

    def __init__(self, params):
        self.params = params
        self.reference = None
        self._pairs = None
        self.rebuilds = 0

    def pairs(self, positions):
        if self.reference is not None:
            moved = np.max(np.abs(positions - self.reference))
            if moved < 0.5 * self.params.skin / math.sqrt(self.params.dimension):
                return self._pairs
        self._pairs = cell_pairs(positions, self.params.box_array, self.params.cutoff + self.params.skin)
        self.reference = positions.copy()
        self.rebuilds += 1
        return self._pairs


def coulomb_forces(positions, params, pairs=None):
    """
    Screened-Coulomb forces on N particles, (N, d) -> (N, d), with minimum images and the cutoff
    of ``params``. Candidate ``pairs`` (i, j) may come from a neighbour list; distances are
    always re-checked against the cutoff.
    """
    positions = np.asarray(positions, dtype=float)
    box = params.box_array
    if pairs is None:
        pairs = cell_pairs(positions, box, params.cutoff)
    i, j = pairs
    n, d = positions.shape
    forces = np.zeros((n, d))
    if i.size == 0:
        return forces

    delta = minimum_image(positions[i] - positions[j], box)
    r = np.sqrt(np.einsum('pa,pa->p', delta, delta))
    if np.any(r < OVERLAP_FRACTION * params.sigma_V):
        bad = int(np.argmin(r))
        raise NumericalError(f"Overlapping particles {i[bad]} and {j[bad]} at distance {r[bad]:.3e}")
    inside = r < params.cutoff
    i, j, delta, r = i[inside], j[inside], delta[inside], r[inside]

    pair_vectors = (params.pair_force(r) / r)[:, None] * delta
    for a in range(d):
        forces[:, a] = (np.bincount(i, weights=pair_vectors[:, a], minlength=n)
                        - np.bincount(j, weights=pair_vectors[:, a], minlength=n))
    return forces


def build_force(kind, **params):
    """Creates a force field from its config name."""
    kind = str(kind).lower()
    if kind == "free":
        return Free()
    if kind == "harmonic":
        return Harmonic(k=float(params.get('k', 1.0)))
    if kind in ("screened-coulomb", "coulomb", "yukawa"):
        n_particles = int(params['n_particles'])
        dimension = int(params.get('dimension', 3))
        sigma_V = float(params.get('sigma_V', 1.0))
        box = params.get('box') or default_box(n_particles, sigma_V, params.get('density', DEFAULT_DENSITY), dimension)
        return ScreenedCoulomb(A_V=float(params.get('A_V', 475.0)), kappa=float(params.get('kappa', 24.0)),
                               sigma_V=sigma_V, box=box, n_particles=n_particles, dimension=dimension,
                               cutoff=params.get('cutoff'), skin=params.get('skin'))
    raise ConfigError(f"Unknown force field '{kind}'")
