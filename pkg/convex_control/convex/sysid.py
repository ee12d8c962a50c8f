"""Dataset plumbing for system identification.

Rollouts, [−1, 1] normalization, sliding windows for the output model ``f``
and the state model ``g``, train/test splits and DAGGER-style aggregation.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Protocol, Sequence

import numpy as np
import pandas as pd
from django.conf import settings
from numpy.typing import ArrayLike

from .exceptions import (
    ConvexControlError, DimensionMismatch, EmptyData, InvalidParameter, RolloutError, SolverDivergence,
)
from .numeric import as_array, seeded_stream
from .plants import Plant

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class Rollout:
    """States ``s_0..s_H`` with actions, exogenous inputs and outputs for ``t < H``."""

    states: np.ndarray
    actions: np.ndarray
    outputs: np.ndarray
    exogenous: np.ndarray
    rewards: np.ndarray | None = None
    plant: str = ''
    seed: int = 0
    index: int = 0
    start: int = 0

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        horizon = len(self.states) - 1
        for name in ('actions', 'outputs', 'exogenous'):
            value = np.asarray(getattr(self, name), dtype=np.float64)
            if value.ndim == 1:
                value = value[:, None]
            if len(value) != horizon:
                raise DimensionMismatch(f'{name} has {len(value)} rows, expected {horizon}')
            setattr(self, name, value)
        if self.rewards is not None:
            self.rewards = np.asarray(self.rewards, dtype=np.float64).reshape(horizon)

    @property
    def horizon(self) -> int:
        return len(self.actions)

    def __len__(self):
        return self.horizon


@dataclass(frozen=True)
class FrameLayout:
    """Column layout of a raw frame ``[s; e; u]``.

    The network sees ``[s; e; u; −u]``: states and exogenous inputs form the
    unexpanded monotone block.
    """

    state_dim: int
    exo_dim: int
    action_dim: int
    output_dim: int = 1

    @classmethod
    def for_plant(cls, plant: Plant) -> 'FrameLayout':
        return cls(plant.state_dim, plant.exo_dim, plant.action_dim, plant.output_dim)

    @property
    def monotone_dim(self) -> int:
        return self.state_dim + self.exo_dim

    @property
    def frame_dim(self) -> int:
        return self.state_dim + self.exo_dim + self.action_dim

    def columns(self) -> list[str]:
        return (
            [f's{i}' for i in range(self.state_dim)]
            + [f'e{i}' for i in range(self.exo_dim)]
            + [f'u{i}' for i in range(self.action_dim)]
        )

    def frames(self, rollout: Rollout) -> np.ndarray:
        return np.hstack([rollout.states[:-1], rollout.exogenous, rollout.actions])

    def split_frame(self, frames: np.ndarray):
        s = frames[..., :self.state_dim]
        e = frames[..., self.state_dim:self.monotone_dim]
        u = frames[..., self.monotone_dim:]
        return s, e, u


@dataclass(eq=False)
class NormalizationSpec:
    """Per-dimension affine maps ``x -> 2(x − low)/(high − low) − 1`` for inputs and outputs."""

    input_low: np.ndarray
    input_high: np.ndarray
    output_low: np.ndarray
    output_high: np.ndarray

    def __post_init__(self):
        for name in ('input_low', 'input_high', 'output_low', 'output_high'):
            setattr(self, name, as_array(getattr(self, name), name).reshape(-1))
        if self.input_low.shape != self.input_high.shape or self.output_low.shape != self.output_high.shape:
            raise DimensionMismatch('low and high bounds must have the same length')
        if np.any(self.input_high <= self.input_low) or np.any(self.output_high <= self.output_low):
            raise InvalidParameter('normalization needs high > low in every dimension')

    @classmethod
    def fit(cls, inputs: ArrayLike, outputs: ArrayLike) -> 'NormalizationSpec':
        """Data ranges; constant dimensions are widened by one unit on each side."""
        inputs = as_array(inputs, 'inputs')
        outputs = as_array(outputs, 'outputs')
        if inputs.size == 0 or outputs.size == 0:
            raise EmptyData('cannot fit a normalization to empty data')
        inputs = inputs.reshape(-1, inputs.shape[-1])
        outputs = outputs.reshape(-1, outputs.shape[-1])
        lo_in, hi_in = _widen(inputs.min(axis=0), inputs.max(axis=0))
        lo_out, hi_out = _widen(outputs.min(axis=0), outputs.max(axis=0))
        return cls(lo_in, hi_in, lo_out, hi_out)

    @property
    def input_scale(self) -> np.ndarray:
        return 2.0 / (self.input_high - self.input_low)

    @property
    def output_scale(self) -> np.ndarray:
        return 2.0 / (self.output_high - self.output_low)

    def normalize(self, x):
        return (np.asarray(x) - self.input_low) * self.input_scale - 1.0

    def denormalize(self, z):
        return (np.asarray(z) + 1.0) / self.input_scale + self.input_low

    def normalize_output(self, y):
        return (np.asarray(y) - self.output_low) * self.output_scale - 1.0

    def denormalize_output(self, z):
        return (np.asarray(z) + 1.0) / self.output_scale + self.output_low

    def same_inputs(self, other: 'NormalizationSpec') -> bool:
        return np.array_equal(self.input_low, other.input_low) and np.array_equal(self.input_high, other.input_high)


def _widen(low, high):
    flat = high - low < 1e-12
    return np.where(flat, low - 1.0, low), np.where(flat, high + 1.0, high)


class Policy(Protocol):
    def __call__(self, step: int, t: int, state: np.ndarray, frames: np.ndarray) -> np.ndarray:
        ...


class RandomPolicy:
    """Uniform actions in the plant's bounds."""

    def __init__(self, plant: Plant, rng):
        self.plant = plant
        self.rng = rng

    def __call__(self, step, t, state, frames):
        return self.rng.uniform(self.plant.action_low, self.plant.action_high)


class NoisyPolicy:
    """Adds Gaussian noise with standard deviation ``sigma`` in normalized action units, then clips."""

    def __init__(self, plant: Plant, policy: Policy, sigma: float, rng):
        if sigma < 0:
            raise InvalidParameter('noise sigma must be >= 0')
        self.plant = plant
        self.policy = policy
        self.sigma = sigma
        self.rng = rng

    def __call__(self, step, t, state, frames):
        u = self.policy(step, t, state, frames)
        if self.sigma == 0.0:
            return u
        half_range = (self.plant.action_high - self.plant.action_low) / 2.0
        noise = self.rng.gaussian(0.0, self.sigma, np.shape(u)) * half_range
        return self.plant.clip_action(u + noise)


def simulate(
    plant: Plant,
    policy: Policy,
    horizon: int,
    s0: ArrayLike,
    start: int = 0,
    index: int = 0,
    seed: int = 0,
) -> Rollout:
    """Roll ``policy`` through the plant for ``horizon`` steps from ``s0`` at time ``start``."""
    layout = FrameLayout.for_plant(plant)
    states = np.empty((horizon + 1, plant.state_dim))
    actions = np.empty((horizon, plant.action_dim))
    outputs = np.empty((horizon, plant.output_dim))
    exo = np.empty((horizon, plant.exo_dim))
    rewards = np.empty(horizon)
    frames = np.empty((horizon, layout.frame_dim))
    states[0] = s0
    for k in range(horizon):
        t = start + k
        u = np.asarray(policy(k, t, states[k], frames[:k]), dtype=np.float64).reshape(plant.action_dim)
        if not np.all(np.isfinite(u)):
            raise SolverDivergence(f'policy returned a non-finite action at step {k}: {u}')
        try:
            s_next, y = plant.step(states[k], u, t)
        except ConvexControlError as exc:
            raise RolloutError(str(exc), index) from exc
        if not np.all(np.isfinite(s_next)):
            raise RolloutError(f'plant state became non-finite at step {k}', index)
        states[k + 1], actions[k], outputs[k] = s_next, u, y
        exo[k] = plant.exogenous(t)
        rewards[k] = plant.reward(states[k], u, s_next)
        frames[k] = np.concatenate([states[k], exo[k], u])
    return Rollout(states, actions, outputs, exo, rewards, plant=plant.name, seed=seed, index=index, start=start)


def collect_random_rollouts(
    plant: Plant,
    n: int,
    horizon: int,
    seed: int = 0,
    start: int = 0,
    stride: int | None = None,
    first_index: int = 0,
    workers: int = 1,
) -> list[Rollout]:
    """``n`` rollouts under uniform random actions.

    Rollout ``i`` draws from stream ``(seed, first_index + i)`` and starts at
    ``start + i * stride`` (``stride`` defaults to ``horizon``, so rollouts
    tile the exogenous calendar).
    """
    if n < 1:
        raise InvalidParameter(f'need at least one rollout, got {n}')
    if horizon < 0:
        raise InvalidParameter('horizon must be >= 0')
    stride = horizon if stride is None else stride

    def one(i: int) -> Rollout:
        index = first_index + i
        rng = seeded_stream(seed, index)
        s0 = plant.initial_state(rng)
        return simulate(plant, RandomPolicy(plant, rng), horizon, s0, start + i * stride, index, seed)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rollouts = list(pool.map(one, range(n)))
    else:
        rollouts = [one(i) for i in range(n)]
    logger.info('collected %d random %s rollouts of %d steps', n, plant.name, horizon)
    return rollouts


@dataclass(eq=False)
class WindowSet:
    """Sliding windows of ``n_w + 1`` raw frames with the targets of their last frame."""

    inputs: np.ndarray
    outputs: np.ndarray
    states: np.ndarray
    next_states: np.ndarray
    layout: FrameLayout

    def __len__(self):
        return len(self.inputs)

    def targets(self, target: str = 'output', delta: bool = False) -> np.ndarray:
        if target == 'output':
            return self.outputs
        if target == 'state':
            return self.next_states - self.states if delta else self.next_states
        raise InvalidParameter(f"target must be 'output' or 'state', got {target!r}")

    def subset(self, idx) -> 'WindowSet':
        return replace(
            self, inputs=self.inputs[idx], outputs=self.outputs[idx],
            states=self.states[idx], next_states=self.next_states[idx],
        )


def make_windows(rollouts, n_w: int, layout: FrameLayout | None = None) -> WindowSet:
    """Stride-1 windows ending at every ``τ ≥ n_w``; targets are ``y_τ`` and ``s_{τ+1}``."""
    if isinstance(rollouts, Rollout):
        rollouts = [rollouts]
    if not rollouts:
        raise EmptyData('no rollouts to window')
    if n_w < 0:
        raise InvalidParameter('memory window must be >= 0')
    first = rollouts[0]
    layout = layout or FrameLayout(
        first.states.shape[1], first.exogenous.shape[1], first.actions.shape[1], first.outputs.shape[1]
    )
    inputs, outputs, states, next_states = [], [], [], []
    for r in rollouts:
        if r.horizon <= n_w:
            raise InvalidParameter(f'rollout of length {r.horizon} is too short for memory window {n_w}')
        frames = layout.frames(r)
        view = np.lib.stride_tricks.sliding_window_view(frames, n_w + 1, axis=0)
        inputs.append(np.moveaxis(view, -1, 1))
        outputs.append(r.outputs[n_w:])
        states.append(r.states[n_w:-1])
        next_states.append(r.states[n_w + 1:])
    return WindowSet(
        np.ascontiguousarray(np.concatenate(inputs)), np.concatenate(outputs),
        np.concatenate(states), np.concatenate(next_states), layout,
    )


def split(data, ratio: float, seed: int = 0, shuffle: bool = False):
    """``(train, test)`` with ``round(ratio * n)`` training items.

    Without ``shuffle`` the split is chronological: the first items train.
    """
    if not 0.0 < ratio < 1.0:
        raise InvalidParameter(f'split ratio must be in (0, 1), got {ratio}')
    n = len(data)
    n_train = int(round(ratio * n))
    if n_train == 0 or n_train == n:
        raise EmptyData(f'ratio {ratio} on {n} items leaves one side empty')
    order = seeded_stream(seed, 0).permutation(n) if shuffle else np.arange(n)
    train_idx, test_idx = order[:n_train], order[n_train:]
    if isinstance(data, (list, tuple)):
        return [data[i] for i in train_idx], [data[i] for i in test_idx]
    return data[train_idx], data[test_idx]


def split_rollout(rollout: Rollout, ratio: float) -> tuple[Rollout, Rollout]:
    """Chronological split of one long rollout; the boundary state belongs to both halves."""
    if not 0.0 < ratio < 1.0:
        raise InvalidParameter(f'split ratio must be in (0, 1), got {ratio}')
    b = int(round(ratio * rollout.horizon))
    if b == 0 or b == rollout.horizon:
        raise EmptyData(f'ratio {ratio} on {rollout.horizon} steps leaves one side empty')

    def part(lo, hi):
        return replace(
            rollout,
            states=rollout.states[lo:hi + 1], actions=rollout.actions[lo:hi],
            outputs=rollout.outputs[lo:hi], exogenous=rollout.exogenous[lo:hi],
            rewards=None if rollout.rewards is None else rollout.rewards[lo:hi],
            start=rollout.start + lo,
        )

    return part(0, b), part(b, rollout.horizon)


def multistep_error(state_model, rollout: Rollout, n_w: int, steps: int, layout: FrameLayout | None = None) -> np.ndarray:
    """Open-loop state RMSE after 1..``steps`` predictions, over every feasible start.

    ``state_model.evaluate(windows)`` must return next states for a batch of
    raw windows.
    """
    layout = layout or FrameLayout(
        rollout.states.shape[1], rollout.exogenous.shape[1], rollout.actions.shape[1], rollout.outputs.shape[1]
    )
    frames = layout.frames(rollout)
    starts = np.arange(n_w, rollout.horizon - steps + 1)
    if len(starts) == 0:
        raise InvalidParameter(f'rollout of length {rollout.horizon} is too short for {steps} steps after window {n_w}')
    offsets = np.arange(-n_w, steps)
    sim = frames[starts[:, None] + offsets[None, :]].copy()
    errors = np.empty(steps)
    for j in range(steps):
        window = sim[:, j:j + n_w + 1]
        predicted, _ = state_model.evaluate(window)
        truth = rollout.states[starts + j + 1]
        errors[j] = np.sqrt(np.mean((predicted - truth) ** 2))
        if j + 1 < steps:
            sim[:, n_w + j + 1, :layout.state_dim] = predicted
    return errors


def rollouts_to_frame(rollouts: Sequence[Rollout]) -> pd.DataFrame:
    """One row per time step; each rollout ends with a row holding only its final state."""
    parts = []
    for r in rollouts:
        layout = FrameLayout(r.states.shape[1], r.exogenous.shape[1], r.actions.shape[1], r.outputs.shape[1])
        h = r.horizon
        frame = pd.DataFrame({'rollout': np.full(h + 1, r.index), 't': r.start + np.arange(h + 1)})
        body = np.full((h + 1, layout.frame_dim + layout.output_dim), np.nan)
        body[:, :layout.state_dim] = r.states
        body[:h, layout.state_dim:layout.frame_dim] = np.hstack([r.exogenous, r.actions])
        body[:h, layout.frame_dim:] = r.outputs
        columns = layout.columns() + [f'y{i}' for i in range(layout.output_dim)]
        frame = pd.concat([frame, pd.DataFrame(body, columns=columns)], axis=1)
        if r.rewards is not None:
            frame['reward'] = np.r_[r.rewards, np.nan]
        parts.append(frame)
    if not parts:
        raise EmptyData('no rollouts to write')
    return pd.concat(parts, ignore_index=True)


def rollouts_from_frame(frame: pd.DataFrame, plant: str = '', seed: int = 0) -> list[Rollout]:
    def block(prefix):
        cols = [c for c in frame.columns if c[0] == prefix and c[1:].isdigit()]
        return sorted(cols, key=lambda c: int(c[1:]))

    s_cols, e_cols, u_cols, y_cols = block('s'), block('e'), block('u'), block('y')
    missing = [name for name, cols in (('state', s_cols), ('action', u_cols), ('output', y_cols)) if not cols]
    if missing or 'rollout' not in frame or 't' not in frame:
        raise DimensionMismatch(f'dataset is missing columns: {missing or ["rollout", "t"]}')
    rollouts = []
    for index, group in frame.groupby('rollout', sort=False):
        group = group.sort_values('t')
        body = group.iloc[:-1]
        rewards = body['reward'].to_numpy() if 'reward' in group else None
        rollouts.append(Rollout(
            states=group[s_cols].to_numpy(),
            actions=body[u_cols].to_numpy(),
            outputs=body[y_cols].to_numpy(),
            exogenous=body[e_cols].to_numpy() if e_cols else np.empty((len(body), 0)),
            rewards=rewards, plant=plant, seed=seed, index=int(index), start=int(group['t'].iloc[0]),
        ))
    return rollouts


@dataclass(frozen=True)
class DaggerConfig:
    iters: int = 6
    rollouts: int = 10
    horizon: int = 200
    mix: float = 0.1
    noise_sigma: float = 0.001
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if not 0.0 <= self.mix <= 1.0:
            raise InvalidParameter('mix must be in [0, 1]')
        if self.noise_sigma < 0 or self.iters < 0 or self.rollouts < 1:
            raise InvalidParameter('noise_sigma and iters must be >= 0, rollouts >= 1')

    @property
    def random_count(self) -> int:
        return max(1, int(round(self.mix * self.rollouts)))

    @property
    def on_policy_count(self) -> int:
        return self.rollouts - self.random_count

    @classmethod
    def from_settings(cls, **overrides) -> 'DaggerConfig':
        names = {f.name for f in fields(cls)}
        section = settings.CONVEX_CONTROL['sysid']
        values = {'seed': settings.CONVEX_CONTROL['seed'], 'iters': section['dagger_iters']}
        values.update({k: v for k, v in section.items() if k in names})
        values.update({k: v for k, v in overrides.items() if k in names and v is not None})
        return cls(**values)


@dataclass
class DaggerResult:
    dataset: list
    model: object
    history: list = field(default_factory=list)


def dagger_aggregate(
    plant: Plant,
    fit: Callable[[list], object],
    controller_factory: Callable[[object], Policy],
    initial: list,
    config: DaggerConfig,
    validate: Callable[[object], float] | None = None,
    model=None,
) -> DaggerResult:
    """Grow ``initial`` by on-policy and fresh random rollouts, refitting after each iteration.

    Each iteration adds ``on_policy_count`` noisy controller rollouts and
    ``random_count`` uniform-action rollouts. ``validate(model)``, when
    given, scores each refitted model (e.g. average episode reward).
    """
    dataset = list(initial)
    if not dataset:
        raise EmptyData('DAGGER needs an initial dataset')
    model = fit(dataset) if model is None else model
    next_index = max(r.index for r in dataset) + 1
    history = []
    for it in range(config.iters):
        controller = controller_factory(model)
        fresh = []
        diverged = None
        for i in range(config.on_policy_count):
            index = next_index + i
            rng = seeded_stream(config.seed, index)
            policy = NoisyPolicy(plant, controller, config.noise_sigma, rng)
            try:
                fresh.append(simulate(
                    plant, policy, config.horizon, plant.initial_state(rng),
                    index * config.horizon, index, config.seed,
                ))
            except SolverDivergence as exc:
                diverged = {'rollout': index, 'error': str(exc)}
                break
        next_index += config.on_policy_count
        if diverged is not None:
            # the iteration's rollouts are discarded; the model and dataset carry over
            next_index += config.random_count
            logger.warning('DAGGER iteration %d aborted on rollout %d: %s', it + 1, diverged['rollout'],
                           diverged['error'])
            history.append({'iteration': it + 1, 'size': len(dataset), 'aborted': True, **diverged})
            continue
        fresh += collect_random_rollouts(
            plant, config.random_count, config.horizon, config.seed,
            start=next_index * config.horizon, first_index=next_index, workers=config.workers,
        )
        next_index += config.random_count
        dataset += fresh
        model = fit(dataset)
        entry = {
            'iteration': it + 1, 'size': len(dataset), 'aborted': False,
            'on_policy': config.on_policy_count, 'random': config.random_count,
        }
        if validate is not None:
            entry['validation'] = float(validate(model))
        history.append(entry)
        logger.info('DAGGER iteration %d: %d rollouts %s', it + 1, len(dataset),
                    f"validation {entry['validation']:.4g}" if 'validation' in entry else '')
    return DaggerResult(dataset, model, history)
