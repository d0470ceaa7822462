# src/processing/malliavin.py

import logging
from dataclasses import dataclass, field
from math import comb

import numpy as np

from src.errors import ConfigError
from src.processing.observables import EstimateSeries

log = logging.getLogger(__name__)


# --- Perturbation descriptors ---
# Each descriptor gives F_hat(x) for a batch (..., M, n) and its directional derivative
# along a step, which is what the weights need instead of the full gradient.

@dataclass(frozen=True)
class ConstantForce:
    """
    Unit constant force on one coordinate (particle, direction), or on every coordinate
    separately when ``particle`` is None (one weight per coordinate).
    """
    particle: int | None = 0
    direction: int = 0
    dimension: int = 1
    name: str = "constant"

    @property
    def per_coordinate(self):
        return self.particle is None

    @property
    def index(self):
        return None if self.particle is None else self.particle * self.dimension + self.direction

    def force(self, x):
        if self.per_coordinate:
            raise ConfigError("A per-coordinate constant force cannot be applied as a single perturbation")
        out = np.zeros_like(x)
        out[..., self.index] = 1.0
        return out

    def values(self, x):
        return np.ones_like(x) if self.per_coordinate else self.force(x)

    def directional(self, x_from, x_to, dt):
        return None


@dataclass(frozen=True)
class LinearForce:
    """F_hat(x) = x."""
    name: str = "linear"
    per_coordinate: bool = False

    def force(self, x):
        return np.array(x, dtype=float, copy=True)

    values = force

    def directional(self, x_from, x_to, dt):
        return (x_to - x_from) / dt


@dataclass(frozen=True)
class Custom:
    """User-supplied F_hat; ``jacobian`` maps (..., n) -> (..., n, n) when given."""
    fn: object
    jacobian: object = None
    name: str = "custom"
    per_coordinate: bool = False

    def force(self, x):
        return np.asarray(self.fn(x), dtype=float)

    values = force

    def directional(self, x_from, x_to, dt):
        if self.jacobian is None:
            return (self.force(x_to) - self.force(x_from)) / dt
        return np.einsum('...ab,...b->...a', self.jacobian(x_from), (x_to - x_from) / dt)


def perturbation_from_name(name, particle=0, direction=0, dimension=1):
    name = str(name).lower()
    if name == "constant":
        return ConstantForce(particle=particle, direction=direction, dimension=dimension)
    if name in ("constant-all", "mobility"):
        return ConstantForce(particle=None, dimension=dimension)
    if name == "linear":
        return LinearForce()
    raise ConfigError(f"Unknown perturbation '{name}'. Expected constant, constant-all or linear.")


# --- Lift ---

@dataclass(frozen=True, eq=False)
class PerturbationLift:
    """
    Canonical right inverse of the output map: E(x) = e0 (x) F_hat(x), with e0 the scaled first
    basis vector of the per-component state (or of the first Brunowski block).
    """
    descriptor: object
    realization: object
    e0: np.ndarray
    coefficients: tuple = field(default=(), repr=False)

    @property
    def form(self):
        return self.realization.form

    @property
    def per_coordinate(self):
        return self.descriptor.per_coordinate

    def force(self, x):
        return self.descriptor.force(x)

    def E(self, x):
        """Lifted map in the full state space, shape (..., q) with component-major layout."""
        values = np.asarray(self.descriptor.force(x))
        return np.einsum('a,...c->...ac', self.e0, values).reshape(values.shape[:-1] + (-1,))

    def contract(self, values, coef_dw):
        """Weight increment from per-coordinate integrand values and coefficient-projected dW."""
        if values is None:
            return None
        if self.per_coordinate:
            return values * coef_dw
        return np.sum(values * coef_dw, axis=-1)


def _first_nonzero_inverse(row):
    row = np.asarray(row, dtype=float).ravel()
    nonzero = np.flatnonzero(row)
    if nonzero.size == 0:
        raise ConfigError("Output map C is identically zero; no perturbation can be lifted")
    e0 = np.zeros_like(row)
    e0[nonzero[0]] = 1.0 / row[nonzero[0]]
    return e0


def lift_perturbation(descriptor, realization):
    """Builds E (or E_bar in the Brunowski case) and the per-weight projection coefficients."""
    if realization.form == "brunowski":
        form = realization.brunowski
        e0 = _first_nonzero_inverse(form.c_bar)
        inject = np.linalg.solve(form.b_bar @ form.b_bar.T, form.b_bar)
        blocks = list(form.blocks) + [np.eye(form.b_bar.shape[0])]
        coefficients = tuple(form.scale ** (-j) * (blocks[j].T @ inject).T @ e0 for j in range(form.n_prime + 1))
    else:
        bbt = realization.block_B @ realization.block_B.T
        if abs(np.linalg.det(bbt)) < np.finfo(float).eps * max(np.max(np.abs(bbt)), 1.0):
            raise ConfigError("B B^T is singular; the realization is not in the nonsingular form")
        e0 = _first_nonzero_inverse(realization.block_C)
        inject = np.linalg.solve(bbt, realization.block_B)
        coefficients = ((realization.block_A.T @ inject).T @ e0, inject.T @ e0)
    return PerturbationLift(descriptor=descriptor, realization=realization, e0=e0, coefficients=coefficients)


# --- Weights ---

@dataclass
class WeightSet:
    """Accumulated weights p[(j, k)] on the trajectory frames; arrays (F, M) or (F, M, n) per coordinate."""
    times: np.ndarray
    weights: dict
    case: int
    n_prime: int

    def __getitem__(self, key):
        return self.weights[key]

    def keys(self):
        return self.weights.keys()

    def zero_like(self):
        return np.zeros_like(next(iter(self.weights.values())))


def _project(coef, dw, realization):
    """coef . dW per noise component: dW (..., M, p) -> (..., M, n)."""
    shaped = dw.reshape(dw.shape[:-1] + (realization.p0, realization.n))
    return np.einsum('p,...pc->...c', coef, shaped)


def _accumulate(increments):
    zero = np.zeros((1,) + increments.shape[1:])
    return np.concatenate([zero, np.cumsum(increments, axis=0)], axis=0)


def _weight_shape(x_shape, lift):
    return x_shape if lift.per_coordinate else x_shape[:2]


def _strided_constant_weights(trajectory, lift, keys_coefs):
    """Constant lifts need only the cumulative Wiener path, so any recording stride works."""
    if not isinstance(lift.descriptor, ConstantForce):
        raise ConfigError("Weights on a strided trajectory are only available for constant-force perturbations")
    values = lift.descriptor.values(trajectory.x[0])
    weights = {}
    for key, coef in keys_coefs.items():
        if coef is None:
            weights[key] = np.zeros(_weight_shape(trajectory.x.shape, lift))
        else:
            weights[key] = lift.contract(values, _project(coef, trajectory.w, lift.realization))
    return weights


def propagate_weights_case1(trajectory, lift, realization=None):
    """
    Left-point (Ito) accumulation of p00, p10, p11 along a recorded trajectory:
    dp00 = E(x_{i-1}) . A^T (BB^T)^-1 B dW_i
    dp10 = [grad E(x_{i-1}) (x_i - x_{i-1})/dt] . (BB^T)^-1 B dW_i
    dp11 = E(x_{i-1}) . (BB^T)^-1 B dW_i
    """
    realization = realization or lift.realization
    if realization.form != "nonsingular":
        raise ConfigError(f"Case-1 weights need a nonsingular BB^T realization, got '{realization.form}'")
    if trajectory.x.shape[-1] != realization.n or trajectory.w.shape[-1] != realization.p:
        raise ConfigError(f"Trajectory dimensions (n={trajectory.x.shape[-1]}, p={trajectory.w.shape[-1]}) "
                          f"do not match the realization (n={realization.n}, p={realization.p})")
    coef00, coef11 = lift.coefficients

    if trajectory.record_every != 1:
        weights = _strided_constant_weights(trajectory, lift, {(0, 0): coef00, (1, 0): None, (1, 1): coef11})
        return WeightSet(trajectory.times, weights, case=1, n_prime=1)

    x = trajectory.x
    dw = trajectory.increments()
    values = lift.descriptor.values(x[:-1])
    w00 = _accumulate(lift.contract(values, _project(coef00, dw, realization)))
    w11 = _accumulate(lift.contract(values, _project(coef11, dw, realization)))
    moving = lift.descriptor.directional(x[:-1], x[1:], trajectory.dt)
    if moving is None:
        w10 = np.zeros_like(w00)
    else:
        w10 = _accumulate(lift.contract(moving, _project(coef11, dw, realization)))
    return WeightSet(trajectory.times, {(0, 0): w00, (1, 0): w10, (1, 1): w11}, case=1, n_prime=1)


def propagate_weights_case2(trajectory, lift, realization=None):
    """
    Weights p_{j,k}, 0 <= k <= j <= n', for smooth noise in Brunowski form. The increment at step i
    pairs dW_i with the order-(j-k) backward difference of E_bar whose earliest point is x_{i-1};
    those positions depend on the noise only up to step i-1.
    """
    realization = realization or lift.realization
    if realization.form != "brunowski":
        raise ConfigError(f"Case-2 weights need a Brunowski realization, got '{realization.form}'")
    n_prime = realization.brunowski.n_prime
    coefs = lift.coefficients

    if trajectory.record_every != 1:
        keys = {(j, k): (coefs[j] if j == k else None) for j in range(n_prime + 1) for k in range(j + 1)}
        return WeightSet(trajectory.times, _strided_constant_weights(trajectory, lift, keys), case=2, n_prime=n_prime)

    n_steps = trajectory.n_frames - 1
    if n_steps < n_prime:
        raise ConfigError(f"Trajectory has {n_steps} steps, case-2 weights need at least n'={n_prime}")
    if trajectory.tail < n_prime - 1:
        raise ConfigError(f"Case-2 weights need {n_prime - 1} positions past the horizon, trajectory has {trajectory.tail}")

    dw = trajectory.increments()
    projected = [_project(c, dw, realization) for c in coefs]
    constant = isinstance(lift.descriptor, ConstantForce)
    values = lift.descriptor.values(trajectory.extended_positions())

    weights = {}
    for m in range(n_prime + 1):
        if m and constant:
            differences = None
        else:
            differences = np.diff(values, n=m, axis=0)[:n_steps] / trajectory.dt ** m
        for k in range(n_prime + 1 - m):
            j = k + m
            increments = lift.contract(differences, projected[j])
            if increments is None:
                weights[(j, k)] = np.zeros(_weight_shape(trajectory.x.shape, lift))
            else:
                weights[(j, k)] = _accumulate(increments)
    return WeightSet(trajectory.times, weights, case=2, n_prime=n_prime)


def propagate_weights(trajectory, lift):
    if lift.form == "brunowski":
        return propagate_weights_case2(trajectory, lift)
    return propagate_weights_case1(trajectory, lift)


# --- Observable derivatives and sensitivity estimators ---

def observable_derivatives(trajectory, observable, order):
    """[Phi, dPhi/dt, ..., d^order Phi/dt^order] as backward differences ending at each frame."""
    return [trajectory.backward_difference(observable, k) for k in range(order + 1)]


def decomposition_case1(trajectory, observable, weights):
    """Per-term samples Phi p00, Phi p10, dPhi/dt p11; their sum is the case-1 sensitivity."""
    if trajectory.n_frames < 2:
        raise ConfigError("Sensitivity estimates need at least two recorded frames")
    phi, dphi = observable_derivatives(trajectory, observable, 1)
    return {
        'phi_p00': phi * weights[(0, 0)],
        'phi_p10': phi * weights[(1, 0)],
        'dphi_p11': dphi * weights[(1, 1)],
    }


def decomposition_case2(trajectory, observable, weights, n_prime=None):
    """Per-term samples binom(j, k) d^kPhi/dt^k p_{j,k}; their sum is the case-2 sensitivity."""
    n_prime = weights.n_prime if n_prime is None else n_prime
    if n_prime != weights.n_prime:
        raise ConfigError(f"n'={n_prime} does not match the weights (n'={weights.n_prime})")
    if trajectory.n_frames < 2:
        raise ConfigError("Sensitivity estimates need at least two recorded frames")
    derivatives = observable_derivatives(trajectory, observable, n_prime)
    terms = {}
    for j in range(n_prime + 1):
        for k in range(j + 1):
            label = 'phi' if k == 0 else f'd{k}phi'
            terms[f'{label}_p{j}{k}'] = comb(j, k) * derivatives[k] * weights[(j, k)]
    return terms


def decomposition(trajectory, observable, weights):
    if weights.case == 2:
        return decomposition_case2(trajectory, observable, weights)
    return decomposition_case1(trajectory, observable, weights)


def sensitivity_samples(trajectory, observable, weights):
    """Per-trajectory sensitivity samples (F, M, ...) for either case."""
    return sum(decomposition(trajectory, observable, weights).values())


def sensitivity_case1(trajectory, observable, weights):
    """Ensemble estimate of <Phi (p00 + p10)> + <dPhi/dt p11> on the frame grid."""
    samples = sum(decomposition_case1(trajectory, observable, weights).values())
    return EstimateSeries.from_samples(trajectory.times, samples)


def sensitivity_case2(trajectory, observable, weights, n_prime=None):
    """Ensemble estimate of sum_k <d^kPhi/dt^k sum_j binom(j, k) p_{j,k}>."""
    samples = sum(decomposition_case2(trajectory, observable, weights, n_prime).values())
    return EstimateSeries.from_samples(trajectory.times, samples)


# --- Baseline for OU noise ---

def ou_baseline_weights(trajectory, descriptor, realization, force):
    """
    OU-only weights built from the equations of motion directly:
    q = (xi0 sigma)^-1 int F_hat . dw,  p = tau_p / (xi0^2 sigma) int [(F + f) . grad] F_hat . dw.
    Needs the noise path (record_noise=True) and every step recorded.
    """
    model = realization.model
    if model is None or model.family != "ou":
        raise ConfigError("The baseline estimator is only defined for Ornstein-Uhlenbeck noise")
    if trajectory.y is None or trajectory.record_every != 1:
        raise ConfigError("The baseline estimator needs the recorded noise path at every step")
    sigma, tau_p, xi0 = model.sigma_white, model.tau_p, trajectory.xi0
    dw = trajectory.increments()
    x_prev = trajectory.x[:-1]
    evaluate = force.evaluate if hasattr(force, "evaluate") else force
    flat = x_prev.reshape(-1, x_prev.shape[-1])
    total_force = evaluate(flat).reshape(x_prev.shape) + realization.output(trajectory.y[:-1])

    values = descriptor.values(x_prev)
    contract = (lambda v, d: v * d) if descriptor.per_coordinate else (lambda v, d: np.sum(v * d, axis=-1))
    q = _accumulate(contract(values, dw)) / (xi0 * sigma)
    if isinstance(descriptor, ConstantForce):
        p = np.zeros_like(q)
    else:
        # grad F_hat applied to (F + f)
        directional = descriptor.directional(x_prev, x_prev + total_force * trajectory.dt, trajectory.dt)
        p = _accumulate(contract(directional, dw)) * tau_p / (xi0 ** 2 * sigma)
    return {'q': q, 'p': p}


def ou_baseline_sensitivity(trajectory, observable, weights, realization):
    """Per-unit-force response xi0 [<Phi (q + p)> + tau_p <dPhi/dt q>] from the baseline weights."""
    tau_p, xi0 = realization.model.tau_p, trajectory.xi0
    phi, dphi = observable_derivatives(trajectory, observable, 1)
    samples = xi0 * (phi * (weights['q'] + weights['p']) + tau_p * dphi * weights['q'])
    return EstimateSeries.from_samples(trajectory.times, samples)
