# src/processing/harmonic_oracle.py

import logging
import math
from dataclasses import dataclass
from math import comb

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import block_diag

from src.errors import ConfigError, NumericalError
from src.processing import noise
from src.processing.malliavin import ConstantForce, LinearForce, lift_perturbation

log = logging.getLogger(__name__)

# --- Configuration ---
DEFAULT_RTOL = 1e-10
DEFAULT_ATOL = 1e-12
SMOOTHNESS_TOLERANCE = 1e-12
OBSERVABLES = ("x", "x2")


@dataclass(frozen=True)
class HarmonicCase:
    """Single particle in F(x) = -k x driven by one of the supported noise spectra."""
    k: float
    xi0: float
    spectrum: noise.SpectrumModel
    perturbation: str = "constant"

    def __post_init__(self):
        if self.k <= 0 or self.xi0 <= 0:
            raise ConfigError(f"Harmonic case needs k > 0 and xi0 > 0, got k={self.k}, xi0={self.xi0}")
        if self.spectrum.family not in noise.FAMILIES:
            raise ConfigError(f"Unsupported spectrum family '{self.spectrum.family}'")
        if self.perturbation not in ("constant", "linear"):
            raise ConfigError(f"Perturbation must be 'constant' or 'linear', got '{self.perturbation}'")

    @property
    def descriptor(self):
        return ConstantForce() if self.perturbation == "constant" else LinearForce()


# --- Closed forms ---

def chi_analytic(k, xi0, t):
    """Response of <x(t)> to a unit constant force switched on at t=0: (1 - exp(-k t / xi0)) / k."""
    if k <= 0 or xi0 <= 0:
        raise ConfigError(f"Need k > 0 and xi0 > 0, got k={k}, xi0={xi0}")
    t = np.asarray(t, dtype=float)
    return -np.expm1(-k * t / xi0) / k


def _matern_parameters(model):
    sigma2 = float(noise.psd_value(model, 0.0))
    ell = math.sqrt(2.0 * model.nu + 1.0) / model.tau_c
    return sigma2, ell


def _is_canonical_matern(model):
    return model.family == "matern" and abs(model.nu - 1.5) < 1e-12


def variance_longtime(case):
    """Stationary <x^2> of the unperturbed harmonic particle."""
    k, xi0, model = case.k, case.xi0, case.spectrum
    if model.family == "ou":
        return model.T_eff_sp / (k * (1.0 + k * model.tau_p / xi0))
    if model.family == "rational":
        rate = k / xi0
        return sum(p.ell * (rate + p.ell) * p.sigma ** 2 / (2.0 * k * xi0 * ((rate + p.ell) ** 2 + p.omega ** 2))
                   for p in model.peaks)
    if _is_canonical_matern(model):
        sigma2, ell = _matern_parameters(model)
        a = k / (xi0 * ell)
        return sigma2 / (4.0 * k * xi0) * (2.0 + a) / (1.0 + a) ** 2
    if model.family == "matern":
        return float(stationary_moments(case)[0, 0])
    raise ConfigError(f"Unsupported spectrum family '{model.family}'")


def second_sensitivity_longtime(case):
    """Long-time limit of d<x^2>/d lambda for the perturbation F_hat(x) = x (equal to -d variance / dk)."""
    if case.perturbation != "linear":
        raise ConfigError("The second sensitivity index is defined for the linear perturbation F_hat(x) = x")
    k, xi0, model = case.k, case.xi0, case.spectrum
    if model.family == "ou":
        tau = model.tau_p
        return model.T_eff_sp * xi0 * (xi0 + 2.0 * k * tau) / (k ** 2 * (xi0 + k * tau) ** 2)
    if model.family == "rational":
        total = 0.0
        for p in model.peaks:
            b = k / (xi0 * p.ell)
            g = p.omega / p.ell
            total += (p.sigma ** 2 / (2.0 * k ** 2 * xi0)
                      * ((2.0 * b + 1.0) * (b + 1.0) ** 2 + g ** 2) / ((b + 1.0) ** 2 + g ** 2) ** 2)
        return total
    if _is_canonical_matern(model):
        sigma2, ell = _matern_parameters(model)
        a = k / (xi0 * ell)
        return (sigma2 / (4.0 * k ** 2 * xi0) * (a + 2.0) / (a + 1.0) ** 2
                + sigma2 / (4.0 * k * xi0 ** 2 * ell) * ((a + 2.0) ** 2 - 1.0) / (a + 1.0) ** 4)
    if model.family == "matern":
        h = 1e-5 * k
        upper = HarmonicCase(k + h, xi0, model, "linear")
        lower = HarmonicCase(k - h, xi0, model, "linear")
        return -(variance_longtime(upper) - variance_longtime(lower)) / (2.0 * h)
    raise ConfigError(f"Unsupported spectrum family '{model.family}'")


# --- Joint linear system z = (x, y) ---

def joint_system(case):
    """dz = M z dt + G dW for z = (x, y) of a single particle; returns (M, G, realization)."""
    realization = noise.realize(case.spectrum, 1)
    q0, p0 = realization.q0, realization.p0
    M = np.zeros((1 + q0, 1 + q0))
    M[0, 0] = -case.k / case.xi0
    M[0, 1:] = realization.block_C[0] / case.xi0
    M[1:, 1:] = -realization.block_A
    G = np.zeros((1 + q0, p0))
    G[1:, :] = realization.block_B
    return M, G, realization


def stationary_moments(case):
    """Stationary covariance of z = (x, y)."""
    M, G, _ = joint_system(case)
    return noise.stationary_covariance(-M, G)


def _weight_generators(case, M, realization):
    """dp = (u + V z)^T dW for every weight of the case: {(j, k): (u, V)}."""
    lift = lift_perturbation(case.descriptor, realization)
    dim = M.shape[0]
    p0 = realization.p0
    linear = case.perturbation == "linear"

    rows = [np.eye(dim)[0]]
    n_prime = realization.brunowski.n_prime if realization.form == "brunowski" else 1
    for _ in range(n_prime):
        rows.append(rows[-1] @ M)

    generators = {}
    if realization.form == "brunowski":
        keys = [(j, k) for j in range(n_prime + 1) for k in range(j + 1)]
        coefficient = {key: lift.coefficients[key[0]] for key in keys}
    else:
        coef00, coef11 = lift.coefficients
        keys = [(0, 0), (1, 0), (1, 1)]
        coefficient = {(0, 0): coef00, (1, 0): coef11, (1, 1): coef11}

    for j, k in keys:
        kappa = coefficient[(j, k)]
        order = j - k
        u = np.zeros(p0)
        V = np.zeros((p0, dim))
        if linear:
            V = np.outer(kappa, rows[order])
        elif order == 0:
            u = kappa.copy()
        generators[(j, k)] = (u, V)
    return generators


@dataclass(frozen=True, eq=False)
class OracleTarget:
    """E[(c1 . z + z^T Q2 z)(t) p_{weight}(t)] times ``coefficient``."""
    weight: tuple
    c1: np.ndarray | None = None
    Q2: np.ndarray | None = None
    coefficient: float = 1.0
    label: str = ""


def _observable_forms(name, M, G, order):
    """Linear (c) or quadratic (Q) forms of d^k Phi / dt^k, k = 0..order, on the joint state."""
    dim = M.shape[0]
    e_x = np.eye(dim)[0]
    forms = []
    if name == "x":
        c = e_x.copy()
        for k in range(order + 1):
            forms.append((c, None))
            if k < order:
                if np.max(np.abs(c @ G)) > SMOOTHNESS_TOLERANCE:
                    raise NumericalError(f"Observable x is not {k + 1} times differentiable for this noise")
                c = M.T @ c
    elif name == "x2":
        Q = np.outer(e_x, e_x)
        for k in range(order + 1):
            forms.append((None, Q))
            if k < order:
                if np.max(np.abs(Q @ G)) > SMOOTHNESS_TOLERANCE:
                    raise NumericalError(f"Observable x^2 is not {k + 1} times differentiable for this noise")
                Q = Q @ M + M.T @ Q
    else:
        raise ConfigError(f"Oracle observables are polynomials of degree <= 2: one of {OBSERVABLES}, got '{name}'")
    return forms


def decomposition_targets(case, observable):
    """Targets labelled like the Monte Carlo decomposition terms; their sum is the sensitivity."""
    M, G, realization = joint_system(case)
    if realization.form == "brunowski":
        n_prime = realization.brunowski.n_prime
        forms = _observable_forms(observable, M, G, n_prime)
        targets = []
        for j in range(n_prime + 1):
            for k in range(j + 1):
                label = 'phi' if k == 0 else f'd{k}phi'
                c1, Q2 = forms[k]
                targets.append(OracleTarget((j, k), c1, Q2, float(comb(j, k)), f'{label}_p{j}{k}'))
        return targets
    forms = _observable_forms(observable, M, G, 1)
    return [OracleTarget((0, 0), *forms[0], 1.0, 'phi_p00'),
            OracleTarget((1, 0), *forms[0], 1.0, 'phi_p10'),
            OracleTarget((1, 1), *forms[1], 1.0, 'dphi_p11')]


def _moment_equations(case):
    M, G, realization = joint_system(case)
    S = noise.stationary_covariance(-M, G)
    generators = _weight_generators(case, M, realization)
    dim = M.shape[0]
    keys = list(generators)

    eye = np.eye(dim)
    block = block_diag(M, np.kron(M, eye) + np.kron(eye, M))
    system = block_diag(*([block] * len(keys)))
    forcing = []
    for key in keys:
        u, V = generators[key]
        source2 = G @ V @ S
        forcing.append(np.concatenate([G @ u, (source2 + source2.T).ravel()]))
    return keys, dim, system, np.concatenate(forcing)


def oracle_moments(case, t_grid, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL):
    """
    Integrates m1 = E[z p] and m2 = E[z z^T p] for every weight from zero initial conditions.
    Returns {(j, k): (m1 (T, dim), m2 (T, dim, dim))}.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or t_grid.size == 0 or np.any(np.diff(t_grid) < 0) or t_grid[0] < 0:
        raise ConfigError("t_grid must be a non-empty, non-decreasing grid of non-negative times")
    keys, dim, system, forcing = _moment_equations(case)
    size = dim + dim * dim

    if t_grid[-1] == 0:
        values = np.zeros((system.shape[0], t_grid.size))
    else:
        solution = solve_ivp(lambda t, y: system @ y + forcing, (0.0, float(t_grid[-1])), np.zeros(system.shape[0]),
                             method='Radau', t_eval=t_grid, rtol=rtol, atol=atol, jac=lambda t, y: system)
        if not solution.success:
            raise NumericalError(f"Moment oracle integration failed: {solution.message}")
        values = solution.y

    moments = {}
    for i, key in enumerate(keys):
        chunk = values[i * size:(i + 1) * size].T
        moments[key] = (chunk[:, :dim], chunk[:, dim:].reshape(-1, dim, dim))
    return moments


def _evaluate(target, moments):
    m1, m2 = moments[target.weight]
    value = np.zeros(m1.shape[0])
    if target.c1 is not None:
        value = value + m1 @ target.c1
    if target.Q2 is not None:
        value = value + np.einsum('ab,tab->t', target.Q2, m2)
    return target.coefficient * value


def moment_oracle(case, target, t_grid, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL):
    """
    Weighted average E[Phi p] on t_grid. ``target`` is an OracleTarget, a list of them (summed), or
    ("sensitivity" | "decomposition", observable) for the full estimator or its labelled terms.
    """
    if isinstance(target, tuple) and len(target) == 2 and isinstance(target[0], str):
        kind, observable = target
        targets = decomposition_targets(case, observable)
        moments = oracle_moments(case, t_grid, rtol, atol)
        terms = {t.label: _evaluate(t, moments) for t in targets}
        if kind == "decomposition":
            return terms
        if kind == "sensitivity":
            return sum(terms.values())
        raise ConfigError(f"Unknown oracle target kind '{kind}'")
    moments = oracle_moments(case, t_grid, rtol, atol)
    if isinstance(target, OracleTarget):
        return _evaluate(target, moments)
    return sum(_evaluate(t, moments) for t in target)
