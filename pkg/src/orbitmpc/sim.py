"""Closed-loop simulation, baseline controller and spectral metrics.

The plant loop is a strict time recursion: first-order actuator states
driven by the applied inputs, a mu-sample ring buffer modelling the
transport delay, and an additive output disturbance,

    x[k+1] = A x[k] + B u[k],      y[k] = C x[k - mu] + d[k].

Controllers are duck-typed: anything with step(y) -> u (and reset()).
Provided here are the modal regularized-inverse baseline with an
integrating temporal filter (`ImcController`) and the full predictive
stack (`MpcController`: delayed observer -> linear-term update ->
constraint-set update -> fast-gradient solve, apply the first stage).

The performance metric is the integrated motion curve: the cumulative
one-sided power spectrum of each monitor, square-rooted, normalized so a
pure sinusoid of amplitude A integrates to its RMS value A/sqrt(2) (the
full curve endpoint then equals the time-domain RMS, by Parseval).
"""

from __future__ import annotations

import dataclasses
import time

import numpy as np

from . import fgm, fileio, qp
from .errors import ConfigError, DimensionError, NumericalError
from .model import PlantConfig, StateSpace, build_state_space
from .observer import ObserverState, update_fast

DISTURBANCE_KINDS = ("white", "random_walk", "sinusoid_mix", "file")


@dataclasses.dataclass(frozen=True, eq=False)
class SimTrace:
    """Time series of one closed-loop run."""

    y: np.ndarray
    u: np.ndarray
    d: np.ndarray
    dt: float

    @property
    def steps(self) -> int:
        return self.y.shape[0]


@dataclasses.dataclass(frozen=True)
class DisturbanceSpec:
    """What to inject at the output.

    kinds: 'white' (iid normal, scale sigma), 'random_walk' (cumulative
    white drive), 'sinusoid_mix' (spatially shaped tones given as
    (freq_hz, amplitude, spatial_mode_index) triples, on top of an iid
    noise floor of scale sigma), 'file' (CSV, one row per step).
    """

    kind: str = "white"
    sigma: float = 1.0
    seed: int = 0
    components: tuple = ()
    path: str | None = None
    dt: float | None = None

    def __post_init__(self):
        if self.kind not in DISTURBANCE_KINDS:
            raise ConfigError(f"unknown disturbance kind {self.kind!r}")
        if self.sigma < 0.0:
            raise ConfigError("sigma must be non-negative")


def spatial_mode_shape(mode: int, n_y: int) -> np.ndarray:
    """Orthonormal cosine shape across the monitors (DCT-II row)."""
    j = np.arange(n_y)
    if mode == 0:
        return np.full(n_y, 1.0 / np.sqrt(n_y))
    return np.sqrt(2.0 / n_y) * np.cos(np.pi * mode * (2 * j + 1) / (2 * n_y))


def disturbance(spec: DisturbanceSpec, T: int, n_y: int, dt: float | None = None) -> np.ndarray:
    """Generate a T x n_y disturbance series, deterministic per seed."""
    if T < 1:
        raise ConfigError("need T >= 1")
    dt = spec.dt if spec.dt is not None else dt
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "white":
        return rng.normal(0.0, spec.sigma, (T, n_y)) if spec.sigma > 0 else np.zeros((T, n_y))
    if spec.kind == "random_walk":
        steps = rng.normal(0.0, spec.sigma, (T, n_y)) if spec.sigma > 0 else np.zeros((T, n_y))
        return np.cumsum(steps, axis=0)
    if spec.kind == "sinusoid_mix":
        if dt is None:
            raise ConfigError("sinusoid_mix needs the sampling time")
        out = rng.normal(0.0, spec.sigma, (T, n_y)) if spec.sigma > 0 else np.zeros((T, n_y))
        t = np.arange(T) * dt
        for freq_hz, amplitude, mode in spec.components:
            if freq_hz >= 0.5 / dt:
                raise ConfigError(f"component at {freq_hz} Hz is not below Nyquist {0.5 / dt} Hz")
            out += np.outer(amplitude * np.sin(2.0 * np.pi * freq_hz * t), spatial_mode_shape(int(mode), n_y))
        return out
    # file
    if spec.path is None:
        raise ConfigError("file disturbance needs a path")
    data = fileio.read_matrix(spec.path)
    if data.shape[1] != n_y:
        raise ConfigError(f"{spec.path}: expected {n_y} columns, got {data.shape[1]}")
    if data.shape[0] < T:
        raise ConfigError(f"{spec.path}: only {data.shape[0]} rows, need {T}")
    return data[:T]


# ---------------------------------------------------------------------------
# Controllers
# ---------------------------------------------------------------------------

class ImcController:
    """Modal regularized-inverse controller with an integrating filter.

    Per mode: ŷ = U^T y is lag-filtered (first-order, `bandwidth_hz`),
    accumulated, and fed back as û = -(w_cl dt) k ⊙ s where
    k = sigma/(sigma^2 + lambda).  The (w_cl dt) factor places the loop
    crossover of a well-regularized mode near the configured bandwidth.
    With clip=True outputs are clamped to the amplitude/slew-rate box and
    the affected modes' integrators hold (conditional integration), the
    usual anti-windup guard.
    """

    def __init__(self, basis, k_imc, dt: float, bandwidth_hz: float = 200.0,
                 clip: bool = False, alpha=None, rho=None):
        self.U = basis.U
        self.V = basis.V
        self.k_imc = np.asarray(k_imc, dtype=float)
        self.dt = dt
        self.gain_scale = 2.0 * np.pi * bandwidth_hz * dt
        self.phi = np.exp(-2.0 * np.pi * bandwidth_hz * dt)
        self.clip = clip
        if clip and (alpha is None or rho is None):
            raise ConfigError("clipped baseline needs alpha and rho")
        self.alpha = None if alpha is None else np.asarray(alpha, dtype=float)
        self.rho = None if rho is None else np.asarray(rho, dtype=float)
        self.reset()

    def reset(self):
        r = self.k_imc.shape[0]
        self.lag = np.zeros(r)
        self.integ = np.zeros(r)
        self.u_prev = np.zeros(self.V.shape[0])

    def step(self, y_k: np.ndarray) -> np.ndarray:
        y_modal = self.U.T @ y_k
        self.lag = self.phi * self.lag + (1.0 - self.phi) * y_modal
        integ_prev = self.integ.copy()
        self.integ = self.integ + self.lag
        u_modal = -self.gain_scale * self.k_imc * self.integ
        u = self.V @ u_modal
        if not self.clip:
            self.u_prev = u
            return u
        lo = np.maximum(-self.alpha, self.u_prev - self.rho)
        hi = np.minimum(self.alpha, self.u_prev + self.rho)
        u_clipped = np.clip(u, lo, hi)
        if not np.array_equal(u_clipped, u):
            realized = self.V.T @ u_clipped
            commanded = u_modal
            blocked = np.abs(realized - commanded) > 1e-12 * (1.0 + np.abs(commanded))
            self.integ[blocked] = integ_prev[blocked]
        self.u_prev = u_clipped
        return u_clipped


class MpcController:
    """The online predictive stack: observer, q update, set update, solve.

    Per sample: build the QP linear term from the current state and
    disturbance estimates, recentre the constraint set on the previously
    applied input, run the fixed-budget fast-gradient solve warm-started
    at the previous solution, apply the first stage, then advance the
    observer with the applied input and this sample's measurement.
    """

    def __init__(self, ss: StateSpace, condensed: qp.CondensedQP, gain,
                 alpha, rho, i_max: int = fgm.DEFAULT_I_MAX, n_workers: int = 1):
        if condensed.n_u != ss.n_u:
            raise DimensionError("condensed QP does not match the plant dimensions")
        self.ss = ss
        self.qp = condensed
        self.gain = gain
        self.alpha = np.asarray(alpha, dtype=float)
        self.rho = np.asarray(rho, dtype=float)
        self.i_max = i_max
        self.n_workers = n_workers
        self.reset()

    def reset(self):
        self.observer = ObserverState.initial(self.ss, self.gain)
        self.u_prev = np.zeros(self.ss.n_u)
        self.warm = np.zeros(self.qp.N * self.ss.n_u)
        self.cset = qp.ConstraintSet(alpha=self.alpha, rho=self.rho,
                                     u_prev=self.u_prev, N=self.qp.N)

    def step(self, y_k: np.ndarray, timers: dict | None = None) -> np.ndarray:
        tic = time.perf_counter_ns() if timers is not None else 0
        q_vec = self.qp.linear_term(self.observer.x_hat, self.observer.d_hat)
        if timers is not None:
            now = time.perf_counter_ns()
            timers["q_update"] = timers.get("q_update", 0) + (now - tic)
            tic = now
        cset = qp.update_constraint_set(self.cset, self.u_prev)
        if cset.N == 2:
            cset._hexagons  # build the stage geometry as part of the set update
        self.cset = cset
        if timers is not None:
            now = time.perf_counter_ns()
            timers["set_update"] = timers.get("set_update", 0) + (now - tic)
        u_plan = fgm.solve(self.qp, q_vec, cset, self.warm,
                           i_max=self.i_max, n_workers=self.n_workers, timers=timers)
        u_k = u_plan[: self.ss.n_u].copy()
        tic = time.perf_counter_ns() if timers is not None else 0
        self.observer = update_fast(self.observer, u_k, y_k)
        if timers is not None:
            timers["observer"] = timers.get("observer", 0) + (time.perf_counter_ns() - tic)
        self.warm = u_plan
        self.u_prev = u_k
        return u_k


# ---------------------------------------------------------------------------
# Simulation loop
# ---------------------------------------------------------------------------

def simulate(plant: PlantConfig, controller, dist: DisturbanceSpec, T: int,
             u_override: np.ndarray | None = None) -> SimTrace:
    """Run the closed loop for T steps and collect the trace.

    `controller` may be None (uncontrolled); `u_override` drives the
    plant open-loop with a prescribed input sequence instead.
    """
    ss = build_state_space(plant)
    d = disturbance(dist, T, plant.n_y, dt=plant.dt)
    if u_override is not None:
        u_override = np.asarray(u_override, dtype=float)
        if u_override.shape != (T, plant.n_u):
            raise DimensionError(f"u_override shape {u_override.shape} != {(T, plant.n_u)}")
    if controller is not None and hasattr(controller, "reset"):
        controller.reset()
    mu = plant.mu
    x_hist = np.zeros((T + 1, plant.n_u))
    y_out = np.zeros((T, plant.n_y))
    u_out = np.zeros((T, plant.n_u))
    for k in range(T):
        x_delayed = x_hist[k - mu] if k >= mu else np.zeros(plant.n_u)
        y_k = ss.C @ x_delayed + d[k]
        if controller is not None:
            try:
                u_k = controller.step(y_k)
            except NumericalError as exc:
                raise NumericalError(f"controller failed at simulation step {k}: {exc}") from exc
        elif u_override is not None:
            u_k = u_override[k]
        else:
            u_k = np.zeros(plant.n_u)
        if not (np.all(np.isfinite(u_k)) and np.all(np.isfinite(y_k))):
            raise NumericalError(f"non-finite state at simulation step {k}")
        x_hist[k + 1] = ss.A * x_hist[k] + ss.B * u_k
        y_out[k] = y_k
        u_out[k] = u_k
    return SimTrace(y=y_out, u=u_out, d=d, dt=plant.dt)


# ---------------------------------------------------------------------------
# Integrated-motion metric
# ---------------------------------------------------------------------------

def ibm_from_signal(y: np.ndarray, dt: float):
    """Per-monitor integrated-motion curves.

    Returns (freqs_hz, curves) with curves shaped (n_freqs, n_y): entry
    (F, i) is the RMS motion of monitor i accumulated over all frequency
    bins up to F.  The signal mean is removed first; the last row equals
    the time-domain RMS of the detrended signal.
    """
    T = y.shape[0]
    if T < 2:
        raise ConfigError("need at least two samples for a spectrum")
    centred = y - y.mean(axis=0, keepdims=True)
    Y = np.fft.rfft(centred, axis=0)
    weights = np.full(Y.shape[0], 2.0 / T ** 2)
    weights[0] = 1.0 / T ** 2
    if T % 2 == 0:
        weights[-1] = 1.0 / T ** 2
    power = weights[:, None] * np.abs(Y) ** 2
    curves = np.sqrt(np.cumsum(power, axis=0))
    return np.fft.rfftfreq(T, dt), curves


def ibm(trace: SimTrace, monitor="average"):
    """Integrated-motion curve for one monitor or averaged across all."""
    freqs, curves = ibm_from_signal(trace.y, trace.dt)
    if monitor == "average":
        return freqs, curves.mean(axis=1)
    return freqs, curves[:, int(monitor)]


def ibm_at(freqs: np.ndarray, curve: np.ndarray, f_hz: float) -> float:
    """Curve value at the highest bin not above f_hz."""
    idx = np.searchsorted(freqs, f_hz, side="right") - 1
    return float(curve[max(idx, 0)])
