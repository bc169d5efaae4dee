"""Full RF ion motion versus the ponderomotive (pseudopotential) picture.

Units: lengths in d, time in units where the drive period is 2 pi / omega
(omega = 2 pi makes one time unit one RF period).  The ion obeys

    r'' = kappa cos(omega t) E(r)

with kappa the charge-to-mass ratio times the RF amplitude.  The secular
motion is governed by the potential per unit mass kappa^2 |E|^2 / (4 omega^2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.integrate import solve_ivp

from trapnet.bem import fibonacci_sphere
from trapnet.multipole import MultipoleField, field as multipole_field, jacobian

MIN_STEPS_PER_PERIOD = 50


class IntegrationError(ValueError):
    pass


class UnstableTrajectory(RuntimeError):
    pass


def _field_fn(source):
    if isinstance(source, MultipoleField):
        return lambda r: multipole_field(source, r)
    if hasattr(source, "field"):
        return source.field
    if callable(source):
        return source
    raise TypeError("field source must be a MultipoleField, have a .field method, or be callable")


@dataclass(frozen=True)
class IonState:
    """Position and velocity of one ion, or of N independent ions as (N, 3) arrays."""

    position: np.ndarray
    velocity: np.ndarray = None

    def __post_init__(self):
        pos = np.array(self.position, dtype=float)
        vel = np.zeros_like(pos) if self.velocity is None else np.array(self.velocity, dtype=float)
        if pos.shape[-1] != 3 or pos.ndim > 2 or vel.shape != pos.shape:
            raise ValueError("position and velocity must be matching (3,) or (N, 3) arrays")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel))):
            raise ValueError("ion state must be finite")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "velocity", vel)


@dataclass(frozen=True, eq=False)
class TrajectoryRecord:
    """Uniformly sampled trajectory; arrays are (T,) and (T, 3) or (T, N, 3)."""

    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    dt: float
    omega: float
    charge_to_mass: float
    sample_every: int = 1
    method: str = "rk4"
    meta: dict = dc_field(default_factory=dict)

    @property
    def sample_step(self) -> float:
        return self.dt * self.sample_every

    @property
    def samples_per_period(self) -> float:
        return (2 * math.pi / self.omega) / self.sample_step

    def to_csv(self, path) -> None:
        if self.positions.ndim != 2:
            raise ValueError("CSV export supports single-ion trajectories only")
        data = np.column_stack([self.times, self.positions, self.velocities])
        np.savetxt(path, data, delimiter=",", header="t,x,y,z,vx,vy,vz", comments="", fmt="%.12g")


def integrate(source, omega: float, charge_to_mass: float, initial: IonState, duration: float, dt: float,
              sample_every: int = 1, t0: float = 0.0) -> TrajectoryRecord:
    """Classical fourth-order Runge-Kutta in the time-dependent RF field."""
    if omega <= 0 or duration <= 0 or dt <= 0:
        raise IntegrationError("omega, duration and dt must be positive")
    period = 2 * math.pi / omega
    if dt > period / MIN_STEPS_PER_PERIOD * (1 + 1e-12):
        raise IntegrationError(f"dt={dt:g} exceeds period/{MIN_STEPS_PER_PERIOD} = {period / MIN_STEPS_PER_PERIOD:g}")
    if sample_every < 1:
        raise IntegrationError("sample_every must be >= 1")
    efield = _field_fn(source)
    shape = initial.position.shape
    n_steps = int(round(duration / dt))
    if abs(n_steps * dt - duration) > 1e-9 * max(1.0, duration):
        raise IntegrationError("duration must be an integer multiple of dt")

    def accel(t, r):
        e = np.asarray(efield(r.reshape(-1, 3)), dtype=float).reshape(shape)
        return charge_to_mass * math.cos(omega * t) * e

    r = initial.position.copy()
    v = initial.velocity.copy()
    n_samples = n_steps // sample_every + 1
    times = t0 + dt * sample_every * np.arange(n_samples)
    pos = np.empty((n_samples,) + shape)
    vel = np.empty((n_samples,) + shape)
    pos[0], vel[0] = r, v
    t = t0
    for step in range(1, n_steps + 1):
        a1 = accel(t, r)
        r2, v2 = r + 0.5 * dt * v, v + 0.5 * dt * a1
        a2 = accel(t + 0.5 * dt, r2)
        r3, v3 = r + 0.5 * dt * v2, v + 0.5 * dt * a2
        a3 = accel(t + 0.5 * dt, r3)
        r4, v4 = r + dt * v3, v + dt * a3
        a4 = accel(t + dt, r4)
        r = r + dt / 6.0 * (v + 2 * v2 + 2 * v3 + v4)
        v = v + dt / 6.0 * (a1 + 2 * a2 + 2 * a3 + a4)
        t = t0 + step * dt
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(v))):
            raise UnstableTrajectory(f"trajectory diverged at t={t:g}")
        if step % sample_every == 0:
            pos[step // sample_every], vel[step // sample_every] = r, v
    return TrajectoryRecord(times, pos, vel, dt, omega, charge_to_mass, sample_every)


# Mathieu-style parametrisation


def gradient_scale(source: MultipoleField, n_directions: int = 200) -> float:
    """Largest spectral norm of dE/dr over the unit ball's centre and surface.

    For a pure quadrupole this is the norm of the constant quadrupole tensor.
    """
    pts = np.vstack([np.zeros(3), fibonacci_sphere(n_directions)])
    jac = jacobian(source, pts)
    return float(np.max(np.linalg.norm(jac, ord=2, axis=(1, 2))))


def mathieu_q(charge_to_mass: float, gradient: float, omega: float) -> float:
    return 2.0 * charge_to_mass * gradient / omega**2


def charge_to_mass_for_q(q: float, gradient: float, omega: float) -> float:
    if gradient <= 0:
        raise ValueError("field has no gradient to define a Mathieu q")
    return q * omega**2 / (2.0 * gradient)


def mathieu_secular_frequency(q: float, omega: float, a: float = 0.0) -> float:
    """Lowest-order secular angular frequency beta * omega / 2, beta^2 = a + q^2 / 2."""
    beta2 = a + 0.5 * q * q
    if beta2 < 0:
        raise ValueError("parameters outside the lowest-order stability region")
    return math.sqrt(beta2) * omega / 2.0


def pseudopotential_per_mass(source, r, charge_to_mass: float, omega: float):
    e = np.atleast_2d(_field_fn(source)(np.atleast_2d(r)))
    u = charge_to_mass**2 / (4 * omega**2) * np.sum(e * e, axis=-1)
    return u if np.ndim(r) > 1 else float(u[0])


def pseudo_force(source, r, charge_to_mass: float, omega: float, h: float = 1e-5) -> np.ndarray:
    """-grad of the pseudopotential per unit mass; analytic for multipole fields."""
    r = np.atleast_2d(np.asarray(r, dtype=float))
    pref = charge_to_mass**2 / (4 * omega**2)
    if isinstance(source, MultipoleField):
        e = multipole_field(source, r)
        jac = jacobian(source, r)
        return -2 * pref * np.einsum("nij,ni->nj", jac, e)
    out = np.empty_like(r)
    for k in range(3):
        step = np.zeros(3)
        step[k] = h
        up = pseudopotential_per_mass(source, r + step, charge_to_mass, omega)
        dn = pseudopotential_per_mass(source, r - step, charge_to_mass, omega)
        out[:, k] = -(up - dn) / (2 * h)
    return out


# secular analysis


def secular_average(record: TrajectoryRecord) -> tuple[np.ndarray, np.ndarray]:
    """Boxcar average over one RF period; returns (times, positions) at window centres."""
    n = record.samples_per_period
    n_int = int(round(n))
    if abs(n - n_int) > 1e-6 or n_int < 2:
        raise ValueError("one RF period must span a whole number of samples")
    # trapezoid-weighted window over exactly one period
    w = np.ones(n_int + 1)
    w[0] = w[-1] = 0.5
    w /= n_int
    pos = record.positions
    flat = pos.reshape(len(pos), -1)
    avg = np.stack([np.convolve(flat[:, k], w, mode="valid") for k in range(flat.shape[1])], axis=1)
    times = record.times[n_int // 2: n_int // 2 + len(avg)] + (0.5 * record.sample_step if n_int % 2 else 0.0)
    return times, avg.reshape((len(avg),) + pos.shape[1:])


def micromotion_amplitude(record: TrajectoryRecord) -> np.ndarray:
    """Half peak-to-peak of position minus its secular average, per ion, over the last period."""
    t_sec, sec = secular_average(record)
    n = int(round(record.samples_per_period))
    start = n // 2
    resid = record.positions[start:start + len(sec)] - sec
    last = resid[-n:]
    return 0.5 * np.linalg.norm(last.max(axis=0) - last.min(axis=0), axis=-1)


def _crossing_period(t: np.ndarray, x: np.ndarray) -> tuple[float | None, int]:
    """Mean period from upward zero crossings of a mean-removed signal."""
    x = x - 0.5 * (x.max() + x.min())
    idx = np.nonzero((x[:-1] < 0) & (x[1:] >= 0))[0]
    if len(idx) < 2:
        return None, len(idx)
    tc = t[idx] - x[idx] * (t[idx + 1] - t[idx]) / (x[idx + 1] - x[idx])
    return float((tc[-1] - tc[0]) / (len(tc) - 1)), len(tc)


def pseudopotential_period(source, start: np.ndarray, charge_to_mass: float, omega: float,
                           t_max: float, rtol: float = 1e-10) -> float | None:
    """Period of motion in the pseudopotential released at rest from ``start``."""
    start = np.asarray(start, dtype=float)
    axis = start / np.linalg.norm(start)

    def rhs(_, y):
        return np.concatenate([y[3:], pseudo_force(source, y[:3], charge_to_mass, omega)[0]])

    def back_through_start(_, y):
        return float(np.dot(y[3:], axis))

    back_through_start.direction = -1.0
    sol = solve_ivp(rhs, (0, t_max), np.concatenate([start, np.zeros(3)]), method="DOP853",
                    rtol=rtol, atol=1e-14, events=back_through_start)
    ev = sol.t_events[0]
    ev = ev[ev > 1e-9]
    return float(ev[0]) if len(ev) else None


@dataclass(frozen=True)
class SecularReport:
    confined: bool
    axis: tuple
    amplitude: float
    observed_period: float | None
    predicted_period: float | None
    relative_error: float | None
    crossings: int
    status: str

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _check_growth(record: TrajectoryRecord, windows: int = 8, factor: float = 4.0,
                  ratio: float = 1.3) -> None:
    pos = record.positions
    if pos.ndim != 2:
        raise ValueError("secular comparison expects a single-ion trajectory")
    dev = np.linalg.norm(pos - pos[0], axis=1)
    chunks = np.array_split(dev, windows)
    peaks = np.array([c.max() for c in chunks])
    # uniform drift grows too, but with shrinking window-to-window ratios;
    # a parametric instability keeps multiplying the envelope
    ratios = peaks[windows // 2:] / np.maximum(peaks[windows // 2 - 1:-1], 1e-300)
    geometric = np.all(ratios > ratio)
    if (peaks[0] > 0 and np.all(np.diff(peaks) > 0) and geometric
            and peaks[-1] > factor * max(peaks[0], np.linalg.norm(pos[0]))):
        raise UnstableTrajectory(f"oscillation envelope grows monotonically ({peaks[0]:.3g} -> {peaks[-1]:.3g})")


def secular_compare(record: TrajectoryRecord, source, charge_to_mass: float | None = None,
                    center=(0.0, 0.0, 0.0)) -> SecularReport:
    """Compare the RF-averaged motion with motion in the pseudopotential.

    The dominant axis of the secular excursion is found by PCA; the observed
    period comes from its zero crossings and the prediction from releasing a
    particle at rest at the observed turning point.  A secular trajectory
    with fewer than two turning points in the run is reported as unconfined.
    """
    kappa = record.charge_to_mass if charge_to_mass is None else charge_to_mass
    _check_growth(record)
    t_sec, sec = secular_average(record)
    rel = sec - np.asarray(center, dtype=float)
    centered = rel - rel.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    axis = vt[0] if np.max(np.abs(vt[0])) > 0 else np.array([1.0, 0.0, 0.0])
    if axis[np.argmax(np.abs(axis))] < 0:
        axis = -axis
    coord = rel @ axis
    amplitude = float(0.5 * (coord.max() - coord.min()))
    vel = np.gradient(coord, t_sec)
    turning = int(np.sum(np.sign(vel[:-1]) * np.sign(vel[1:]) < 0))
    period, crossings = _crossing_period(t_sec, coord)
    if turning < 2 or period is None:
        return SecularReport(False, tuple(axis), amplitude, None, None, None, crossings, "unconfined")
    start = rel[np.argmax(np.abs(coord))]
    start = (np.dot(start, axis)) * axis + np.asarray(center, dtype=float)
    predicted = pseudopotential_period(source, start, kappa, record.omega, t_max=3 * period + 10)
    err = None if predicted is None else abs(period - predicted) / predicted
    return SecularReport(True, tuple(axis), amplitude, period, predicted, err, crossings, "confined")
