# src/processing/noise.py

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import block_diag
from scipy.special import gammaln, kv

from src.errors import ConfigError, NumericalError

log = logging.getLogger(__name__)

# --- Configuration ---
FAMILIES = ("ou", "rational", "matern")
DEFAULT_MATERN_NU = 1.5
MAX_LYAPUNOV_BLOCK = 64        # vectorised solve is q^2 x q^2, keep q small
PSD_TOLERANCE = 1e-10          # relative tolerance on negative eigenvalues of Sigma_inf
HALF_INTEGER_TOLERANCE = 1e-12


# --- Domain Types ---

@dataclass(frozen=True)
class RationalPeak:
    """One (sigma_k, omega_k, ell_k) triple of the rational spectrum."""
    sigma: float
    omega: float
    ell: float


@dataclass(frozen=True)
class SpectrumModel:
    """A calibrated noise family with its effective temperature and correlation time."""
    family: str
    xi0: float
    T_eff_sp: float
    tau_c: float
    tau_p: float | None = None
    peaks: tuple = ()
    nu: float | None = None
    sigma_nu: float | None = None
    tau_nu: float | None = None

    @property
    def sigma_white(self):
        """Amplitude sqrt(2 xi0 T) of the white noise with the same temperature."""
        return math.sqrt(2.0 * self.xi0 * self.T_eff_sp)

    def describe(self):
        """Flat dict of the calibrated parameters (used by the calibrate command and manifests)."""
        info = {'family': self.family, 'xi0': self.xi0, 'T_eff_sp': self.T_eff_sp, 'tau_c': self.tau_c}
        if self.family == "ou":
            info['tau_p'] = self.tau_p
        elif self.family == "rational":
            for i, peak in enumerate(self.peaks, start=1):
                info[f'sigma_{i}'] = peak.sigma
                info[f'omega_{i}'] = peak.omega
                info[f'ell_{i}'] = peak.ell
        else:
            info['nu'] = self.nu
            info['sigma_nu'] = self.sigma_nu
            info['tau_nu'] = self.tau_nu
        return info


@dataclass(frozen=True, eq=False)
class BrunowskiForm:
    """Companion layout of a smooth noise, stored per noise component.

    The full matrices are ``scale`` times the unscaled companion matrix built from
    ``blocks`` (A_1..A_n'), with ``b_bar`` injecting noise into the last block only.
    """
    n_prime: int
    q_prime: int
    blocks: tuple
    b_bar: np.ndarray
    c_bar: np.ndarray
    scale: float = 1.0


@dataclass(frozen=True, eq=False)
class StateSpaceRealization:
    """Linear system dy = -A y dt + B dw, f = C y, for n i.i.d. noise components.

    All supported realizations are Kronecker products ``kron(block, I_n)``, so only the
    per-component blocks are stored; dense matrices are built on demand.
    """
    block_A: np.ndarray
    block_B: np.ndarray
    block_C: np.ndarray
    n: int
    form: str
    block_sigma_inf: np.ndarray
    brunowski: BrunowskiForm | None = None
    model: SpectrumModel | None = field(default=None, repr=False)

    @property
    def q0(self):
        return self.block_A.shape[0]

    @property
    def p0(self):
        return self.block_B.shape[1]

    @property
    def q(self):
        return self.q0 * self.n

    @property
    def p(self):
        return self.p0 * self.n

    @property
    def A(self):
        return np.kron(self.block_A, np.eye(self.n))

    @property
    def B(self):
        return np.kron(self.block_B, np.eye(self.n))

    @property
    def C(self):
        return np.kron(self.block_C, np.eye(self.n))

    @property
    def Sigma_inf(self):
        return np.kron(self.block_sigma_inf, np.eye(self.n))

    def evolve(self, y, dW, dt):
        """One explicit Euler step y' = (I - dt A) y + B dW for a batch y of shape (M, q)."""
        m = y.shape[0]
        y_r = y.reshape(m, self.q0, self.n)
        dw_r = dW.reshape(m, self.p0, self.n)
        out = y_r - dt * np.einsum('ab,mbc->mac', self.block_A, y_r)
        out += np.einsum('ap,mpc->mac', self.block_B, dw_r)
        return out.reshape(m, self.q)

    def output(self, y):
        """Noise force f = C y for a batch y of shape (..., q); returns shape (..., n)."""
        lead = y.shape[:-1]
        y_r = y.reshape(lead + (self.q0, self.n))
        return np.einsum('a,...ac->...c', self.block_C[0], y_r)


# --- Calibration ---

def _require_positive(**values):
    for name, value in values.items():
        if value is None or not np.isfinite(value) or value <= 0:
            raise ConfigError(f"{name} must be a positive finite number, got {value!r}")


def calibrate(family, xi0, T_eff_sp, tau_c, **family_options):
    """
    Builds a SpectrumModel with psd(0) = 2 xi0 T_eff_sp and rms correlation width tau_c.
    Rational spectra are auto-calibrated only for one peak; other peak counts need
    explicit ``peaks``. Matern spectra take ``nu`` (default 3/2).
    """
    family = str(family).lower()
    _require_positive(xi0=xi0, T_eff_sp=T_eff_sp, tau_c=tau_c)

    if family == "ou":
        return SpectrumModel("ou", xi0, T_eff_sp, tau_c, tau_p=tau_c / math.sqrt(2.0))

    if family == "rational":
        peaks = family_options.get('peaks')
        r = int(family_options.get('r', 1 if not peaks else len(peaks)))
        if peaks:
            peaks = tuple(p if isinstance(p, RationalPeak) else RationalPeak(*p) for p in peaks)
            for peak in peaks:
                _require_positive(sigma=peak.sigma, ell=peak.ell)
                if peak.omega < 0:
                    raise ConfigError(f"omega must be non-negative, got {peak.omega}")
            model = SpectrumModel("rational", xi0, T_eff_sp, tau_c, peaks=peaks)
            _warn_if_uncalibrated(model)
            return model
        if r != 1:
            raise ConfigError(f"Rational spectrum with r={r} needs explicit (sigma, omega, ell) triples.")
        sigma1 = math.sqrt(5.0) / 2.0 * math.sqrt(2.0 * xi0 * T_eff_sp)
        ell1 = 2.0 * math.sqrt(2.0) / 5.0 / tau_c
        peak = RationalPeak(sigma=sigma1, omega=ell1 / 2.0, ell=ell1)
        return SpectrumModel("rational", xi0, T_eff_sp, tau_c, peaks=(peak,))

    if family == "matern":
        nu = float(family_options.get('nu', DEFAULT_MATERN_NU))
        _require_positive(nu=nu)
        tau_nu = tau_c * math.sqrt(2.0 * nu / (2.0 * nu + 1.0))
        log_ratio = gammaln(nu) - gammaln(nu + 0.5)
        sigma_nu2 = xi0 * T_eff_sp * math.sqrt(2.0 * nu + 1.0) * math.exp(log_ratio) / (math.sqrt(math.pi) * tau_c)
        return SpectrumModel("matern", xi0, T_eff_sp, tau_c, nu=nu,
                             sigma_nu=math.sqrt(sigma_nu2), tau_nu=tau_nu)

    raise ConfigError(f"Unknown spectrum family '{family}'. Expected one of {FAMILIES}.")


def _warn_if_uncalibrated(model, rel_tol=1e-6):
    """Logs a warning when user-supplied rational peaks miss the requested T_eff or tau_c."""
    target = 2.0 * model.xi0 * model.T_eff_sp
    c0 = float(psd_value(model, 0.0))
    tau_c_actual = math.sqrt(_curvature_ratio(model))
    if abs(c0 - target) > rel_tol * target or abs(tau_c_actual - model.tau_c) > rel_tol * model.tau_c:
        log.warning(f"User-supplied rational peaks give psd(0)={c0:.6g} (target {target:.6g}) "
                    f"and tau_c={tau_c_actual:.6g} (target {model.tau_c:.6g}).")


def _curvature_ratio(model):
    """tau_c^2 = -psd''(0)/psd(0) in closed form for rational peaks."""
    num = 0.0
    den = 0.0
    for peak in model.peaks:
        gamma = peak.omega / peak.ell
        p1 = 2.0 * (1.0 - 3.0 * gamma ** 2) / (1.0 + gamma ** 2) ** 3
        num += p1 * peak.sigma ** 2 / peak.ell ** 2
        den += peak.sigma ** 2 / (1.0 + gamma ** 2)
    return num / den


# --- Spectra and correlations ---

def psd_value(model, omega):
    """Power spectral density of one noise component at angular frequency omega."""
    omega = np.asarray(omega, dtype=float)
    if model.family == "ou":
        return 2.0 * model.xi0 * model.T_eff_sp / (1.0 + (omega * model.tau_p) ** 2)
    if model.family == "rational":
        total = np.zeros_like(omega)
        for peak in model.peaks:
            s2 = peak.sigma ** 2
            total = total + 0.5 * (s2 / (1.0 + ((omega - peak.omega) / peak.ell) ** 2)
                                   + s2 / (1.0 + ((omega + peak.omega) / peak.ell) ** 2))
        return total
    if model.family == "matern":
        nu, tau = model.nu, model.tau_nu
        log_norm = (math.log(2.0) + 0.5 * math.log(math.pi) + gammaln(nu + 0.5)
                    + nu * math.log(2.0 * nu) - gammaln(nu) - 2.0 * nu * math.log(tau))
        base = 2.0 * nu / tau ** 2 + omega ** 2
        return model.sigma_nu ** 2 * np.exp(log_norm - (nu + 0.5) * np.log(base))
    raise ConfigError(f"Unknown spectrum family '{model.family}'.")


def correlation(model, t):
    """Stationary autocovariance c(t) of one noise component."""
    t = np.abs(np.asarray(t, dtype=float))
    if model.family == "ou":
        return model.xi0 * model.T_eff_sp / model.tau_p * np.exp(-t / model.tau_p)
    if model.family == "rational":
        total = np.zeros_like(t)
        for peak in model.peaks:
            total = total + 0.5 * peak.sigma ** 2 * peak.ell * np.exp(-t * peak.ell) * np.cos(peak.omega * t)
        return total
    if model.family == "matern":
        nu = model.nu
        u = math.sqrt(2.0 * nu) * t / model.tau_nu
        with np.errstate(invalid='ignore', divide='ignore'):
            shape = np.exp((1.0 - nu) * math.log(2.0) - gammaln(nu)) * u ** nu * kv(nu, u)
        shape = np.where(u == 0.0, 1.0, shape)
        shape = np.nan_to_num(shape, nan=0.0)
        return model.sigma_nu ** 2 * shape
    raise ConfigError(f"Unknown spectrum family '{model.family}'.")


def state_space_psd(realization, omega):
    """PSD of one output component implied by (A, B, C): |C (i w I + A)^-1 B|^2 summed over inputs."""
    omegas = np.atleast_1d(np.asarray(omega, dtype=float))
    eye = np.eye(realization.q0)
    values = np.empty_like(omegas)
    for i, w in enumerate(omegas):
        transfer = realization.block_C @ np.linalg.solve(1j * w * eye + realization.block_A, realization.block_B)
        values[i] = float(np.sum(np.abs(transfer) ** 2))
    return values if np.ndim(omega) else values[0]


# --- Lyapunov solve and stationary sampling ---

def stationary_covariance(A, B):
    """
    Solves A S + S A^T = B B^T by vectorisation (Kronecker sum), for -A stable.
    Returns the symmetric stationary covariance of dy = -A y dt + B dw.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    q = A.shape[0]
    if A.shape != (q, q) or B.shape[0] != q:
        raise ConfigError(f"Incompatible shapes A{A.shape}, B{B.shape} for the Lyapunov equation.")
    if q > MAX_LYAPUNOV_BLOCK:
        raise ConfigError(f"Lyapunov block of size {q} exceeds {MAX_LYAPUNOV_BLOCK}; solve per noise component.")
    eigenvalues = np.linalg.eigvals(A)
    if np.any(eigenvalues.real <= 0):
        raise NumericalError(f"-A is not stable: eigenvalues of A {eigenvalues}")

    eye = np.eye(q)
    kron_sum = np.kron(eye, A) + np.kron(A, eye)
    rhs = (B @ B.T).reshape(-1, order='F')
    try:
        sigma = np.linalg.solve(kron_sum, rhs).reshape(q, q, order='F')
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"Lyapunov solve failed: {e}") from e
    return 0.5 * (sigma + sigma.T)


def lyapunov_residual(A, B, sigma):
    """Max-norm residual of A S + S A^T - B B^T relative to max |B B^T|."""
    bbt = B @ B.T
    scale = max(np.max(np.abs(bbt)), np.finfo(float).tiny)
    return float(np.max(np.abs(A @ sigma + sigma @ A.T - bbt)) / scale)


def _symmetric_sqrt(sigma):
    eigenvalues, vectors = np.linalg.eigh(0.5 * (sigma + sigma.T))
    scale = max(np.max(np.abs(eigenvalues)), np.finfo(float).tiny) if eigenvalues.size else 1.0
    if eigenvalues.size and eigenvalues.min() < -PSD_TOLERANCE * scale:
        raise NumericalError(f"Stationary covariance is not positive semi-definite (min eigenvalue {eigenvalues.min():.3e}).")
    roots = np.sqrt(np.clip(eigenvalues, 0.0, None))
    return (vectors * roots) @ vectors.T


def sample_stationary(realization, rng, size=None):
    """
    Draws y0 ~ N(0, Sigma_inf) through the symmetric square root of the per-component block.
    Returns shape (q,) when size is None, else (size, q).
    """
    root = _symmetric_sqrt(realization.block_sigma_inf)
    m = 1 if size is None else int(size)
    z = rng.standard_normal((m, realization.q0, realization.n))
    y0 = np.einsum('ab,mbc->mac', root, z).reshape(m, realization.q)
    return y0[0] if size is None else y0


# --- Realizations ---

def _companion_blocks(realization_blocks, scale):
    """Unscaled companion matrix [[0, -I, ...], ..., [A_1, ..., A_n']] from per-component blocks."""
    n_prime = len(realization_blocks)
    b = realization_blocks[0].shape[0]
    unscaled = np.zeros((n_prime * b, n_prime * b))
    for k in range(n_prime - 1):
        unscaled[k * b:(k + 1) * b, (k + 1) * b:(k + 2) * b] = -np.eye(b)
    for k, block in enumerate(realization_blocks):
        unscaled[(n_prime - 1) * b:, k * b:(k + 1) * b] = block
    return scale * unscaled


def realize(model, n):
    """
    Builds the state-space realization of n i.i.d. components of the given spectrum and
    attaches its stationary covariance.
    """
    n = int(n)
    if n < 1:
        raise ConfigError(f"Number of noise components must be >= 1, got {n}")

    brunowski = None
    if model.family == "ou":
        sigma = model.sigma_white
        block_A = np.array([[1.0 / model.tau_p]])
        block_B = np.array([[sigma / model.tau_p]])
        block_C = np.array([[1.0]])
        form = "nonsingular"
    elif model.family == "rational":
        block_A = block_diag(*[np.array([[p.ell, -p.omega], [p.omega, p.ell]]) for p in model.peaks])
        block_B = block_diag(*[p.ell * np.eye(2) for p in model.peaks])
        block_C = np.zeros((1, 2 * len(model.peaks)))
        for k, peak in enumerate(model.peaks):
            block_C[0, 2 * k] = peak.sigma
        form = "nonsingular"
    elif model.family == "matern":
        r = model.nu + 0.5
        if abs(r - round(r)) > HALF_INTEGER_TOLERANCE or round(r) < 1:
            raise ConfigError(f"Matern realization needs a half-integer nu, got nu={model.nu}")
        r = int(round(r))
        ell = math.sqrt(2.0 * model.nu + 1.0) / model.tau_c
        sigma = math.sqrt(float(psd_value(model, 0.0)))
        blocks = tuple(np.array([[float(math.comb(r, k))]]) for k in range(r))
        block_A = _companion_blocks(blocks, ell)
        block_B = np.zeros((r, 1))
        block_B[-1, 0] = ell
        block_C = np.zeros((1, r))
        block_C[0, 0] = sigma
        brunowski = BrunowskiForm(n_prime=r, q_prime=n, blocks=blocks, b_bar=np.array([[1.0]]),
                                  c_bar=np.array([[sigma]]), scale=ell)
        form = "brunowski"
    else:
        raise ConfigError(f"Unknown spectrum family '{model.family}'.")

    sigma_inf = stationary_covariance(block_A, block_B)
    log.debug(f"Realized {model.family} noise: q0={block_A.shape[0]}, p0={block_B.shape[1]}, n={n}, form={form}")
    return StateSpaceRealization(block_A=block_A, block_B=block_B, block_C=block_C, n=n, form=form,
                                 block_sigma_inf=sigma_inf, brunowski=brunowski, model=model)
