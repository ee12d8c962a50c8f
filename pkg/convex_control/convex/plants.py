"""Ground-truth simulators and synthetic datasets.

Every plant exposes the same surface: batched pure maps ``state_map`` and
``output_map`` over ``(s, e, u)`` with their vector-Jacobian products, a
``step`` that reads the exogenous signal at time ``t``, action bounds and a
physical envelope used to draw initial states. ``e`` is the exogenous
vector (outside temperature for the building, empty otherwise).
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, fields

import numpy as np
import pandas as pd
from django.conf import settings
from numpy.typing import ArrayLike

from .exceptions import DimensionMismatch, InvalidParameter
from .numeric import RngStream, as_array, seeded_stream

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PriceSignal:
    """Daily time-of-use tariff; hours are ``[peak_start, peak_end)``."""

    peak: float = 0.3
    off_peak: float = 0.1
    peak_start: float = 17.0
    peak_end: float = 21.0
    steps_per_day: int = 144

    def __post_init__(self):
        if self.peak < 0 or self.off_peak < 0:
            raise InvalidParameter('prices must be nonnegative')
        if self.steps_per_day < 1:
            raise InvalidParameter('steps_per_day must be >= 1')

    @classmethod
    def flat(cls, level: float = 0.1, steps_per_day: int = 144) -> 'PriceSignal':
        return cls(peak=level, off_peak=level, steps_per_day=steps_per_day)

    @classmethod
    def from_settings(cls, steps_per_day: int = 144, **overrides) -> 'PriceSignal':
        values = dict(settings.CONVEX_CONTROL['tou'])
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(steps_per_day=steps_per_day, **values)

    def hour(self, t) -> np.ndarray:
        return (np.asarray(t) % self.steps_per_day) * 24.0 / self.steps_per_day

    def is_peak(self, t) -> np.ndarray:
        h = self.hour(t)
        return (h >= self.peak_start) & (h < self.peak_end)

    def __call__(self, t):
        return np.where(self.is_peak(t), self.peak, self.off_peak).astype(np.float64)


def tou_price(profile: PriceSignal, t):
    if np.any(np.asarray(t) < 0):
        raise InvalidParameter('time index must be >= 0')
    out = profile(t)
    return float(out) if out.ndim == 0 else out


class Plant(ABC):
    name = 'plant'
    state_dim = 0
    action_dim = 0
    exo_dim = 0
    output_dim = 1
    # steps whose state the plant had to clip back into its physical range
    clip_events = 0

    action_low: np.ndarray
    action_high: np.ndarray
    state_low: np.ndarray
    state_high: np.ndarray

    def exogenous(self, t) -> np.ndarray:
        t = np.asarray(t)
        return np.zeros(t.shape + (self.exo_dim,))

    def initial_state(self, rng: RngStream) -> np.ndarray:
        return rng.uniform(self.state_low, self.state_high)

    @abstractmethod
    def state_map(self, s, e, u) -> np.ndarray:
        ...

    @abstractmethod
    def output_map(self, s, e, u) -> np.ndarray:
        ...

    @abstractmethod
    def state_vjp(self, s, e, u, upstream):
        """``(ds, de, du)`` for ``upstream · state_map``."""

    @abstractmethod
    def output_vjp(self, s, e, u, upstream):
        """``(ds, de, du)`` for ``upstream · output_map``."""

    def reward(self, s, u, s_next) -> np.ndarray:
        return -self.output_map(s, np.zeros(np.shape(s)[:-1] + (self.exo_dim,)), u)[..., 0]

    def step(self, s: ArrayLike, u: ArrayLike, t: int = 0):
        s = as_array(s, 'state')
        u = as_array(u, 'action')
        if s.shape[-1] != self.state_dim or u.shape[-1] != self.action_dim:
            raise DimensionMismatch(
                f'{self.name} expects {self.state_dim} states and {self.action_dim} actions, '
                f'got {s.shape[-1]} and {u.shape[-1]}'
            )
        e = self.exogenous(t)
        return self.state_map(s, e, u), self.output_map(s, e, u)

    def clip_action(self, u: ArrayLike) -> np.ndarray:
        return np.clip(u, self.action_low, self.action_high)

    def config(self) -> dict:
        params = {f.name: _plain(getattr(self.params, f.name)) for f in fields(self.params)}
        return {'kind': self.name, **params}


def _plain(value):
    if isinstance(value, tuple):
        return list(value)
    return value


@dataclass(frozen=True)
class PointMassParams:
    drag: float = 0.1
    gain: float = 1.0
    dt: float = 0.1
    reward_c: float = 0.5
    reward_alpha: float = 50.0
    velocity_range: float = 0.5


class PointMassPlant(Plant):
    """Planar double integrator with linear drag; state ``[x, y, vx, vy]``.

    The output is the per-step reward ``vx_next − c‖u/α‖²``.
    """

    name = 'point_mass'
    state_dim = 4
    action_dim = 2

    def __init__(self, params: PointMassParams | None = None):
        self.params = params or PointMassParams()
        if not 0.0 <= self.params.drag < 1.0:
            raise InvalidParameter('drag must be in [0, 1)')
        p = self.params
        self.action_low = -np.ones(2)
        self.action_high = np.ones(2)
        r = p.velocity_range
        self.state_low = np.array([0.0, 0.0, -r, -r])
        self.state_high = np.array([0.0, 0.0, r, r])
        a = np.eye(4)
        a[2, 2] = a[3, 3] = 1.0 - p.drag
        a[0, 2] = a[1, 3] = (1.0 - p.drag) * p.dt
        b = np.zeros((4, 2))
        b[2, 0] = b[3, 1] = p.gain * p.dt
        b[0, 0] = b[1, 1] = p.gain * p.dt * p.dt
        self.A, self.B = a, b

    @property
    def terminal_velocity(self) -> float:
        """Fixed point of the velocity update under full thrust."""
        return self.params.gain * self.params.dt / self.params.drag

    def state_map(self, s, e, u):
        return s @ self.A.T + u @ self.B.T

    def state_vjp(self, s, e, u, upstream):
        return upstream @ self.A, np.zeros(np.shape(upstream)[:-1] + (0,)), upstream @ self.B

    def _penalty_scale(self):
        return self.params.reward_c / self.params.reward_alpha ** 2

    def output_map(self, s, e, u):
        v_next = (1.0 - self.params.drag) * s[..., 2] + self.params.gain * self.params.dt * u[..., 0]
        return (v_next - self._penalty_scale() * np.sum(u * u, axis=-1))[..., None]

    def output_vjp(self, s, e, u, upstream):
        ds = np.zeros(np.shape(upstream)[:-1] + (4,))
        ds[..., 2] = upstream[..., 0] * (1.0 - self.params.drag)
        du = -2.0 * self._penalty_scale() * upstream[..., :1] * u
        du[..., 0] += upstream[..., 0] * self.params.gain * self.params.dt
        return ds, np.zeros(np.shape(upstream)[:-1] + (0,)), du

    def reward(self, s, u, s_next):
        return s_next[..., 2] - self._penalty_scale() * np.sum(np.asarray(u) ** 2, axis=-1)


def point_mass_step(plant: PointMassPlant, s: ArrayLike, u: ArrayLike):
    s = as_array(s, 'state')
    u = as_array(u, 'action')
    s_next = plant.state_map(s, np.zeros(0), u)
    return s_next, float(plant.reward(s, u, s_next))


@dataclass(frozen=True)
class RcThermalParams:
    zones: int = 4
    alpha: tuple = (0.02, 0.025, 0.03, 0.04)
    kappa: float = 0.01
    beta: tuple = (0.8, 0.8, 0.8, 0.8)
    c1: tuple = (1.5, 2.0, 2.5, 3.0)
    c2: tuple = (0.2, 0.2, 0.2, 0.2)
    base_load: float = 0.5
    steps_per_day: int = 144
    months: int = 12
    days_per_month: int = 30
    outside_mean: float = 10.0
    outside_daily_amplitude: float = 4.0
    outside_seasonal_amplitude: float = 3.0
    outside_noise: float = 0.3
    temperature_range: tuple = (18.0, 25.0)
    seed: int = 0


class RcThermalPlant(Plant):
    """Multi-zone RC network with a convex, nonlinear heating power map.

    ``T_next = T + α(w − T) + Σ_j κ(T_j − T) + β u`` for a ring of zones and
    ``y = Σ_i c1_i u_i² + c2_i |u_i| + base``.
    """

    name = 'rc_thermal'
    exo_dim = 1

    def __init__(self, params: RcThermalParams | None = None):
        self.params = p = params or RcThermalParams()
        n = p.zones
        for attr in ('alpha', 'beta', 'c1', 'c2'):
            if len(getattr(p, attr)) != n:
                raise DimensionMismatch(f'{attr} needs {n} entries, got {len(getattr(p, attr))}')
        if min(p.c1) < 0 or min(p.c2) < 0:
            raise InvalidParameter('power coefficients must be nonnegative for a convex power map')
        self.state_dim = n
        self.action_dim = n
        self.alpha = np.asarray(p.alpha, dtype=np.float64)
        self.beta = np.asarray(p.beta, dtype=np.float64)
        self.c1 = np.asarray(p.c1, dtype=np.float64)
        self.c2 = np.asarray(p.c2, dtype=np.float64)
        coupling = np.zeros((n, n))
        if n > 1:
            for i in range(n):
                for j in {(i - 1) % n, (i + 1) % n} - {i}:
                    coupling[i, j] = p.kappa
        self.A = np.eye(n) - np.diag(self.alpha) + coupling - np.diag(coupling.sum(axis=1))
        self.B_exo = self.alpha[:, None]
        self.action_low = np.zeros(n)
        self.action_high = np.ones(n)
        self.state_low = np.full(n, p.temperature_range[0])
        self.state_high = np.full(n, p.temperature_range[1])
        self._outside = self._outside_signal()

    @property
    def total_steps(self) -> int:
        p = self.params
        return p.months * p.days_per_month * p.steps_per_day

    @property
    def steps_per_month(self) -> int:
        return self.params.days_per_month * self.params.steps_per_day

    def _outside_signal(self) -> np.ndarray:
        p = self.params
        t = np.arange(self.total_steps)
        daily = -np.cos(2.0 * np.pi * t / p.steps_per_day)
        seasonal = np.cos(2.0 * np.pi * t / self.total_steps)
        noise = seeded_stream(p.seed, 7).gaussian(0.0, p.outside_noise, self.total_steps)
        return p.outside_mean + p.outside_daily_amplitude * daily - p.outside_seasonal_amplitude * seasonal + noise

    def exogenous(self, t):
        t = np.asarray(t, dtype=np.int64)
        return self._outside[t % self.total_steps][..., None]

    def state_map(self, s, e, u):
        return s @ self.A.T + e @ self.B_exo.T + u * self.beta

    def state_vjp(self, s, e, u, upstream):
        return upstream @ self.A, upstream @ self.B_exo, upstream * self.beta

    def output_map(self, s, e, u):
        u = np.asarray(u)
        return (np.sum(self.c1 * u * u + self.c2 * np.abs(u), axis=-1) + self.params.base_load)[..., None]

    def output_vjp(self, s, e, u, upstream):
        du = upstream[..., :1] * (2.0 * self.c1 * u + self.c2 * np.sign(u))
        shape = np.shape(upstream)[:-1]
        return np.zeros(shape + (self.state_dim,)), np.zeros(shape + (1,)), du

    def free_response(self, s0: ArrayLike, outside: float, steps: int) -> np.ndarray:
        """Temperatures after ``steps`` unforced steps at constant outside temperature."""
        s = as_array(s0, 's0')
        e = np.array([outside])
        for _ in range(steps):
            s = self.state_map(s, e, np.zeros(self.action_dim))
        return s


def rc_thermal_step(plant: RcThermalPlant, s: ArrayLike, u: ArrayLike, w: float):
    s = as_array(s, 'state')
    u = as_array(u, 'action')
    e = np.array([float(w)])
    return plant.state_map(s, e, u), float(plant.output_map(s, e, u)[0])


@dataclass(frozen=True)
class BatteryParams:
    efficiency: float = 0.5
    dt: float = 1.0
    power_limit: float = 0.2
    linear_wear: float = 0.1
    knee: float = 0.1
    knee_wear: float = 1.0
    quadratic_wear: float = 0.5
    initial_charge: float = 0.5


class BatteryPlant(Plant):
    """State of charge ``s_next = s + η u Δt`` with a convex degradation output."""

    name = 'battery'
    state_dim = 1
    action_dim = 1

    def __init__(self, params: BatteryParams | None = None):
        self.params = p = params or BatteryParams()
        if p.power_limit <= 0 or p.efficiency <= 0:
            raise InvalidParameter('power_limit and efficiency must be positive')
        self.action_low = np.array([-p.power_limit])
        self.action_high = np.array([p.power_limit])
        self.state_low = np.zeros(1)
        self.state_high = np.ones(1)
        self.gain = p.efficiency * p.dt

    def initial_state(self, rng):
        return np.array([self.params.initial_charge])

    def state_map(self, s, e, u):
        return s + self.gain * u

    def state_vjp(self, s, e, u, upstream):
        return upstream, np.zeros(np.shape(upstream)[:-1] + (0,)), self.gain * upstream

    def degradation(self, u) -> np.ndarray:
        p = self.params
        mag = np.abs(u)
        return p.linear_wear * mag + p.knee_wear * np.maximum(mag - p.knee, 0.0) + p.quadratic_wear * u * u

    def output_map(self, s, e, u):
        return self.degradation(np.asarray(u)[..., 0])[..., None]

    def output_vjp(self, s, e, u, upstream):
        p = self.params
        u0 = u[..., 0]
        slope = p.linear_wear * np.sign(u0) + p.knee_wear * (np.abs(u0) > p.knee) * np.sign(u0) + 2.0 * p.quadratic_wear * u0
        shape = np.shape(upstream)[:-1]
        return np.zeros(shape + (1,)), np.zeros(shape + (0,)), upstream * slope[..., None]

    def step(self, s, u, t=0):
        s_next, y = super().step(s, u, t)
        outside = (s_next < 0.0) | (s_next > 1.0)
        if np.any(outside):
            self.clip_events += int(np.count_nonzero(np.any(np.atleast_2d(outside), axis=-1)))
            logger.warning('battery charge %s left [0, 1]; clipped', s_next)
            s_next = np.clip(s_next, 0.0, 1.0)
        return s_next, y


def battery_step(plant: BatteryPlant, s: ArrayLike, u: ArrayLike):
    s_next, y = plant.step(np.atleast_1d(as_array(s, 'state')), np.atleast_1d(as_array(u, 'action')))
    return s_next, float(y[0])


def circles_dataset(n: int = 100, radii=(0.5, 1.0), noise: float = 0.05, seed: int = 0):
    """Two concentric noisy circles; inner points are labelled 0, outer 1."""
    if n < 2:
        raise InvalidParameter('circles dataset needs n >= 2')
    rng = seeded_stream(seed, 0)
    n_inner = n // 2
    labels = np.r_[np.zeros(n_inner), np.ones(n - n_inner)]
    radius = np.where(labels == 0.0, radii[0], radii[1])
    angle = rng.uniform(0.0, 2.0 * np.pi, n)
    if noise > 0:
        radius = radius + rng.gaussian(0.0, noise, n)
    points = np.c_[radius * np.cos(angle), radius * np.sin(angle)]
    return points, labels


PLANTS = {
    'point_mass': (PointMassPlant, PointMassParams),
    'rc_thermal': (RcThermalPlant, RcThermalParams),
    'battery': (BatteryPlant, BatteryParams),
}


def plant_from_config(config: dict) -> Plant:
    """Build a plant from ``{"kind": ..., <param>: ...}``; unknown keys are rejected."""
    config = dict(config)
    kind = config.pop('kind', None)
    if kind not in PLANTS:
        raise InvalidParameter(f'unknown plant {kind!r}; expected one of {sorted(PLANTS)}')
    plant_cls, params_cls = PLANTS[kind]
    names = {f.name for f in fields(params_cls)}
    unknown = set(config) - names
    if unknown:
        raise InvalidParameter(f'unknown {kind} parameters: {sorted(unknown)}')
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in config.items()}
    return plant_cls(params_cls(**values))


def plant_from_settings(kind: str, overrides: dict | None = None) -> Plant:
    """A plant with the ``settings.CONVEX_CONTROL`` defaults applied under ``overrides``.

    Changing the building's zone count repeats the per-zone default
    coefficients cyclically unless they are given explicitly.
    """
    config = {'kind': kind}
    section = settings.CONVEX_CONTROL
    if kind == 'rc_thermal':
        config['zones'] = section['building']['zones']
        config['days_per_month'] = section['building']['days_per_month']
    elif kind == 'point_mass':
        config['reward_c'] = section['point_mass']['reward_c']
        config['reward_alpha'] = section['point_mass']['reward_alpha']
    config.update(overrides or {})
    if kind == 'rc_thermal' and config['zones'] != RcThermalParams.zones:
        for name in ('alpha', 'beta', 'c1', 'c2'):
            config.setdefault(name, np.resize(getattr(RcThermalParams, name), config['zones']).tolist())
    return plant_from_config(config)


def exogenous_frame(plant: Plant, steps: int, start: int = 0, price: PriceSignal | None = None) -> pd.DataFrame:
    t = np.arange(start, start + steps)
    frame = pd.DataFrame({'t': t})
    values = plant.exogenous(t)
    for j in range(plant.exo_dim):
        frame[f'e{j}'] = values[:, j]
    if price is not None:
        frame['price'] = price(t)
    return frame
