# src/processing/dynamics.py

import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from src.errors import ConfigError, NumericalError
from src.processing import noise
from src.processing.forces import ScreenedCoulomb, initial_lattice

log = logging.getLogger(__name__)

# --- Configuration ---
DEFAULT_BURN_IN_FACTOR = 20.0     # burn-in = 20 max(tau_c, xi0/k) of simulated time
DT_WARNING_FRACTION = 1.0 / 20.0  # dt should stay below min(tau_c, xi0/k_max)/20


@dataclass(frozen=True)
class SimConfig:
    """Everything needed to integrate one batch of trajectories of the coupled (x, y) system."""
    dt: float
    t_max: float
    spectrum: noise.SpectrumModel
    force: object
    n_trajectories: int = 1
    n_particles: int = 1
    dimension: int = 1
    xi0: float = 1.0
    burn_in: float | None = None
    seed: int = 0
    record_every: int = 1
    lead: int = 0
    tail: int = 0
    record_noise: bool = False
    perturbation: object = None
    lam: float = 0.0
    x0: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.dt > 0 or not self.t_max >= 0:
            raise ConfigError(f"Need dt > 0 and t_max >= 0, got dt={self.dt}, t_max={self.t_max}")
        if self.n_trajectories < 1 or self.n_particles < 1 or self.dimension < 1:
            raise ConfigError("n_trajectories, n_particles and dimension must all be >= 1")
        if self.record_every < 1 or self.lead < 0 or self.tail < 0:
            raise ConfigError("record_every must be >= 1 and lead/tail must be >= 0")
        if self.n_steps % self.record_every:
            raise ConfigError(f"{self.n_steps} steps is not a multiple of record_every={self.record_every}")
        if self.lam and self.perturbation is None:
            raise ConfigError("A non-zero perturbation strength needs a perturbation force")

    @property
    def n(self):
        return self.n_particles * self.dimension

    @property
    def n_steps(self):
        return int(round(self.t_max / self.dt))

    @property
    def burn_in_steps(self):
        burn_in = self.burn_in
        if burn_in is None:
            k = self.force.stiffness()
            slowest = max(self.spectrum.tau_c, self.xi0 / k if k > 0 else 0.0)
            burn_in = DEFAULT_BURN_IN_FACTOR * slowest
        return max(int(round(burn_in / self.dt)), self.lead)


@dataclass
class SimState:
    """Resumable integrator state: current (x, y), the last ``lead`` positions, and the step counter."""
    x: np.ndarray
    y: np.ndarray
    history: np.ndarray
    steps: int = 0

    def copy(self):
        return SimState(self.x.copy(), self.y.copy(), self.history.copy(), self.steps)


@dataclass
class Trajectory:
    """
    Recorded batch of M trajectories.

    x[f] holds positions at frame f (time times[f]); w[f] is the cumulative Wiener path since t=0.
    Backward stencils for observable derivatives come from ``x_history`` (the ``lead`` steps
    before t=0) when every step is recorded, or from ``x_prev`` (the ``lead`` steps before every
    frame) on a coarser stride. ``x_tail`` holds ``tail`` positions past the horizon.
    """
    times: np.ndarray
    x: np.ndarray
    w: np.ndarray
    dt: float
    xi0: float
    record_every: int = 1
    lead: int = 0
    tail: int = 0
    x_history: np.ndarray | None = None
    x_prev: np.ndarray | None = None
    x_tail: np.ndarray | None = None
    y: np.ndarray | None = None
    box: np.ndarray | None = None
    final_state: SimState | None = None

    @property
    def n_frames(self):
        return self.x.shape[0]

    @property
    def n_trajectories(self):
        return self.x.shape[1]

    def increments(self):
        """Per-step Wiener increments dW_i, i = 1..F-1; only defined when every step is recorded."""
        if self.record_every != 1:
            raise ConfigError("Wiener increments per step need record_every = 1")
        return np.diff(self.w, axis=0)

    def extended_positions(self):
        """Positions x_0..x_{N+tail} (every step recorded)."""
        if self.record_every != 1:
            raise ConfigError("Per-step positions need record_every = 1")
        if not self.tail:
            return self.x
        return np.concatenate([self.x, self.x_tail], axis=0)

    def backward_difference(self, phi, order):
        """
        D_order phi(x) / dt^order at every frame, as a backward difference ending at the frame.
        ``phi`` must accept arrays with arbitrary leading axes (..., M, n).
        """
        if order == 0:
            return phi(self.x)
        if order > self.lead:
            raise ConfigError(f"Derivative of order {order} needs lead >= {order}, trajectory has {self.lead}")
        scale = self.dt ** order
        if self.record_every == 1:
            values = phi(np.concatenate([self.x_history[self.lead - order:], self.x], axis=0))
            return np.diff(values, n=order, axis=0) / scale
        stencil = np.concatenate([self.x_prev[:, self.lead - order:], self.x[:, None]], axis=1)
        return np.diff(phi(stencil), n=order, axis=1)[:, 0] / scale

    def select(self, index):
        """Copy restricted to one trajectory (the batch axis is kept with length 1)."""
        def pick(array, axis):
            return None if array is None else np.take(array, [index], axis=axis)
        return replace(self, x=pick(self.x, 1), w=pick(self.w, 1), x_history=pick(self.x_history, 1),
                       x_prev=pick(self.x_prev, 2), x_tail=pick(self.x_tail, 1), y=pick(self.y, 1),
                       final_state=None)


# --- Integrator ---

def _as_evaluator(force):
    return force if callable(force) else force.evaluate


def step(x, y, realization, force, xi0, dt, dW, extra_force=None):
    """
    One explicit Euler step of the coupled system:
    x' = x + dt/xi0 (F(x) + C y [+ extra]), y' = (I - dt A) y + B dW.
    Works on a single state (vectors) or a batch (rows).
    """
    single = np.ndim(x) == 1
    x2 = np.atleast_2d(np.asarray(x, dtype=float))
    y2 = np.atleast_2d(np.asarray(y, dtype=float))
    dW2 = np.atleast_2d(np.asarray(dW, dtype=float))

    drift = _as_evaluator(force)(x2) + realization.output(y2)
    if extra_force is not None:
        drift = drift + extra_force
    x_new = x2 + (dt / xi0) * drift
    y_new = realization.evolve(y2, dW2, dt)

    if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(y_new))):
        raise NumericalError(f"Non-finite state after Euler step with dt={dt}; reduce the time step.")
    if single:
        return x_new[0], y_new[0]
    return x_new, y_new


@dataclass
class _Context:
    realization: noise.StateSpaceRealization
    force: object
    xi0: float
    dt: float
    perturbation: object = None
    lam: float = 0.0

    def extra(self, x):
        if self.perturbation is None or not self.lam:
            return None
        return self.lam * self.perturbation.force(x)


def check_time_step(config):
    """Returns warning messages when dt is coarse relative to tau_c or the fastest force relaxation."""
    warnings = []
    scales = [config.spectrum.tau_c]
    k_max = config.force.stiffness()
    if k_max > 0:
        scales.append(config.xi0 / k_max)
    limit = DT_WARNING_FRACTION * min(scales)
    if config.dt > limit:
        warnings.append(f"dt too coarse: dt={config.dt:.3g} exceeds min(tau_c, xi0/k_max)/20 = {limit:.3g}")
    return warnings


def initial_positions(config, m):
    """Starting positions: explicit x0, a cubic lattice for interacting particles, otherwise the origin."""
    if config.x0 is not None:
        x0 = np.asarray(config.x0, dtype=float).reshape(-1)
        if x0.size != config.n:
            raise ConfigError(f"x0 has {x0.size} entries, expected {config.n}")
        return np.tile(x0, (m, 1))
    if isinstance(config.force, ScreenedCoulomb):
        lattice = initial_lattice(config.n_particles, config.force.box, config.dimension)
        return np.tile(lattice.reshape(-1), (m, 1))
    return np.zeros((m, config.n))


def _advance(ctx, rng, x, y, history, n_steps, on_step=None):
    sqrt_dt = math.sqrt(ctx.dt)
    m, p = x.shape[0], ctx.realization.p
    for s in range(1, n_steps + 1):
        dW = rng.standard_normal((m, p)) * sqrt_dt
        x_new, y = step(x, y, ctx.realization, ctx.force, ctx.xi0, ctx.dt, dW, ctx.extra(x))
        history.append(x)
        x = x_new
        if on_step is not None:
            on_step(s, x, dW)
    return x, y


def _stack_history(history, lead, m, n):
    if not lead:
        return np.empty((0, m, n))
    return np.stack(list(history))


def initial_state(config, rng, realization=None):
    """Stationary y0 and relaxed x after the burn-in; the perturbation is never applied here."""
    realization = realization or noise.realize(config.spectrum, config.n)
    m = config.n_trajectories
    ctx = _Context(realization, config.force.bind(m), config.xi0, config.dt)
    x = initial_positions(config, m)
    y = noise.sample_stationary(realization, rng, size=m)
    history = deque(maxlen=config.lead)
    n_burn = config.burn_in_steps
    log.debug(f"Burn-in: {n_burn} steps for {m} trajectories")
    x, y = _advance(ctx, rng, x, y, history, n_burn)
    return SimState(x, y, _stack_history(history, config.lead, m, config.n), n_burn)


def advance(config, rng, state, n_steps, realization=None):
    """Evolves a state for n_steps without recording (gaps between time origins)."""
    realization = realization or noise.realize(config.spectrum, config.n)
    ctx = _Context(realization, config.force.bind(state.x.shape[0]), config.xi0, config.dt)
    history = deque(state.history, maxlen=config.lead)
    x, y = _advance(ctx, rng, state.x, state.y, history, n_steps)
    return SimState(x, y, _stack_history(history, config.lead, *x.shape), state.steps + n_steps)


def simulate(config, rng, state=None, realization=None):
    """
    Integrates config.n_trajectories trajectories over [0, t_max], starting from ``state`` when
    given, else from a stationary noise state relaxed by the burn-in. Deterministic given rng.
    """
    for message in check_time_step(config):
        log.warning(message)
    realization = realization or noise.realize(config.spectrum, config.n)
    if state is None:
        state = initial_state(config, rng, realization)
    elif state.history.shape[0] < config.lead:
        raise ConfigError(f"Resumed state carries {state.history.shape[0]} history rows, need {config.lead}")

    m, n, p = state.x.shape[0], config.n, realization.p
    stride, lead = config.record_every, config.lead
    n_steps = config.n_steps
    n_frames = n_steps // stride + 1

    xs = np.empty((n_frames, m, n))
    ws = np.empty((n_frames, m, p))
    ys = np.empty((n_frames, m, realization.q)) if config.record_noise else None
    x_prev = np.empty((n_frames, lead, m, n)) if stride > 1 and lead else None
    x_tail = np.empty((config.tail, m, n))

    history = deque(state.history[state.history.shape[0] - lead:] if lead else (), maxlen=lead)
    w = np.zeros((m, p))
    current = {'y': state.y}

    def record(frame, x):
        xs[frame] = x
        ws[frame] = w
        if ys is not None:
            ys[frame] = current['y']
        if x_prev is not None:
            x_prev[frame] = np.stack(list(history))

    x_history = _stack_history(history, lead, m, n)
    record(0, state.x)

    ctx = _Context(realization, config.force.bind(m), config.xi0, config.dt, config.perturbation, config.lam)
    sqrt_dt = math.sqrt(config.dt)
    x, y = state.x, state.y
    for s in range(1, n_steps + config.tail + 1):
        dW = rng.standard_normal((m, p)) * sqrt_dt
        x_new, y = step(x, y, realization, ctx.force, config.xi0, config.dt, dW, ctx.extra(x))
        history.append(x)
        x = x_new
        if s <= n_steps:
            w = w + dW
            current['y'] = y
            if s % stride == 0:
                record(s // stride, x)
        else:
            x_tail[s - n_steps - 1] = x

    final = SimState(x, y, _stack_history(history, lead, m, n), state.steps + n_steps + config.tail)
    box = np.asarray(config.force.box) if isinstance(config.force, ScreenedCoulomb) else None
    times = np.arange(n_frames) * stride * config.dt
    return Trajectory(times=times, x=xs, w=ws, dt=config.dt, xi0=config.xi0, record_every=stride,
                      lead=lead, tail=config.tail, x_history=x_history if stride == 1 else None,
                      x_prev=x_prev, x_tail=x_tail, y=ys, box=box, final_state=final)


def with_perturbation(config, perturbation, lam):
    """Copy of config with the force perturbed by lam * F_hat(x) from t=0 on."""
    return replace(config, perturbation=perturbation, lam=lam)
