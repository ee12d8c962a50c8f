"""Optimization over the inputs of convex models.

``single_shot_minimize`` handles one ICNN over a box. ``mpc_solve`` runs
projected Adam over a whole action sequence pushed through an output model
``f`` and a state model ``g``: at step ``τ`` both read the window of the
last ``n_w + 1`` raw frames ``[s; e; u]``, ``f`` gives ``y_τ`` and ``g``
gives ``s_{τ+1}``. Models are wrapped in adapters that evaluate a batch of
windows and pull gradients back onto the raw frames, so restarts and
shooting candidates share one batched pass.
"""

from __future__ import annotations

import itertools
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np
import pandas as pd
from django.conf import settings
from numpy.typing import ArrayLike
from scipy.linalg import lstsq

from .exceptions import (
    DimensionMismatch, EmptyData, InfeasibleProblem, InvalidParameter, SingularRegression, SolverDivergence,
)
from .icnn import IcnnModel, TrainingConfig, collapse_gradient, expand, train_icnn
from .icrnn import IcrnnModel, RecurrentTrainingConfig, train_icrnn
from .numeric import Adam, as_array, seeded_stream
from .plants import Plant, PriceSignal
from .sysid import FrameLayout, NormalizationSpec, Rollout, WindowSet, make_windows, simulate

logger = logging.getLogger(__name__)


# Cost

@dataclass(frozen=True)
class CostTerms:
    """A cost resolved over one horizon; arrays are indexed by step."""

    output_weights: np.ndarray
    action_price: np.ndarray
    action_quadratic: float
    state_linear: np.ndarray
    state_quadratic: float
    state_reference: np.ndarray

    def value_and_grads(self, y: np.ndarray, u: np.ndarray, s_next: np.ndarray):
        """Total cost per batch row and its partials w.r.t. ``y``, ``u`` and ``s_next``."""
        gap = s_next - self.state_reference
        value = (
            np.sum(self.output_weights * y, axis=(1, 2))
            + np.sum(self.action_price * u, axis=(1, 2))
            + self.action_quadratic * np.sum(u * u, axis=(1, 2))
            + np.sum(self.state_linear * s_next, axis=(1, 2))
            + self.state_quadratic * np.sum(gap * gap, axis=(1, 2))
        )
        dy = np.broadcast_to(self.output_weights, y.shape)
        du = self.action_price + 2.0 * self.action_quadratic * u
        ds = self.state_linear + 2.0 * self.state_quadratic * gap
        return value, dy, du, ds


@dataclass(frozen=True)
class CostSpec:
    """Stage cost ``w(τ)·y_τ + p(τ)·u_τ + r‖u_τ‖² + c·s_{τ+1} + q‖s_{τ+1} − ref‖²``.

    ``output_price`` and ``action_price`` are functions of the absolute time
    index, so a receding-horizon run sees the tariff move with it.
    """

    kind: str = 'energy'
    output_weight: float = 1.0
    output_price: Callable | None = None
    action_price: Callable | None = None
    action_quadratic: float = 0.0
    state_linear: tuple | None = None
    state_quadratic: float = 0.0
    state_reference: float | tuple = 0.0

    @classmethod
    def energy(cls) -> 'CostSpec':
        return cls('energy')

    @classmethod
    def tou(cls, price: PriceSignal) -> 'CostSpec':
        return cls('tou', output_price=price)

    @classmethod
    def reward(cls, state_dim: int, velocity_index: int, c: float = 0.5, alpha: float = 50.0) -> 'CostSpec':
        """Negated ``v_next − c‖u/α‖²``."""
        linear = [0.0] * state_dim
        linear[velocity_index] = -1.0
        return cls('reward', output_weight=0.0, action_quadratic=c / alpha ** 2, state_linear=tuple(linear))

    @classmethod
    def quadratic(cls, q: float = 1.0, reference=0.0, r: float = 0.0, output_weight: float = 0.0) -> 'CostSpec':
        return cls('quadratic', output_weight=output_weight, state_quadratic=q, state_reference=reference,
                   action_quadratic=r)

    def terms(self, times: np.ndarray, output_dim: int, action_dim: int, state_dim: int) -> CostTerms:
        n = len(times)
        w = np.full((n, output_dim), float(self.output_weight))
        if self.output_price is not None:
            w = w * np.asarray(self.output_price(times), dtype=np.float64).reshape(n, -1)
        p = np.zeros((n, action_dim))
        if self.action_price is not None:
            p = p + np.asarray(self.action_price(times), dtype=np.float64).reshape(n, -1)
        c = np.zeros(state_dim) if self.state_linear is None else np.asarray(self.state_linear, dtype=np.float64)
        if c.shape != (state_dim,):
            raise DimensionMismatch(f'state_linear needs {state_dim} entries, got {c.shape}')
        ref = np.broadcast_to(np.asarray(self.state_reference, dtype=np.float64), (n, state_dim))
        return CostTerms(w, p, float(self.action_quadratic), c, float(self.state_quadratic), ref)

    def structural_check(self, state_model_affine: bool = False) -> dict:
        """Whether the cost composes convexly with convex, state-monotone models."""
        broken, state_notes = [], []
        if self.output_weight < 0:
            broken.append('negative output weight: cost is not nondecreasing in y')
        if self.action_quadratic < 0:
            broken.append('negative action quadratic: cost is not convex in u')
        if self.state_linear is not None and min(self.state_linear) < 0:
            state_notes.append('negative state coefficient: cost decreases in s')
        if self.state_quadratic > 0:
            state_notes.append('state tracking term is not monotone in s')
        monotone = not state_notes
        # a non-monotone state term stays convex only through an affine state model
        convex = not broken and (monotone or state_model_affine)
        return {'kind': self.kind, 'monotone_in_state': monotone, 'convex': convex, 'notes': broken + state_notes}


OBJECTIVES = ('energy', 'tou', 'reward', 'quadratic')


def cost_for_plant(plant: Plant, objective: str, price: PriceSignal | None = None) -> CostSpec:
    """The cost a named objective means on a given plant."""
    if objective not in OBJECTIVES:
        raise InvalidParameter(f'unknown objective {objective!r}; expected one of {list(OBJECTIVES)}')
    defaults = settings.CONVEX_CONTROL
    if plant.name == 'point_mass':
        if objective == 'reward':
            return CostSpec.reward(plant.state_dim, 2, plant.params.reward_c, plant.params.reward_alpha)
        if objective == 'quadratic':
            return CostSpec.quadratic(q=1.0, r=plant.params.reward_c / plant.params.reward_alpha ** 2)
        raise InvalidParameter(f'{objective} objective does not apply to the point mass; use reward or quadratic')
    if objective == 'reward':
        raise InvalidParameter(f'reward objective only applies to the point mass, not {plant.name}')
    if objective == 'energy':
        return CostSpec.energy()
    if objective == 'tou':
        price = price or PriceSignal.from_settings(getattr(plant.params, 'steps_per_day', 144))
        if plant.name == 'battery':
            # grid draw is the charging power; degradation stays unpriced
            return CostSpec('tou', action_price=lambda t: price(t)[:, None])
        return CostSpec.tou(price)
    if plant.name == 'battery':
        reference = defaults['battery']['target_charge']
    else:
        reference = defaults['building']['fixed_setpoint']
    return CostSpec.quadratic(q=1.0, reference=reference, output_weight=1.0)


# Model adapters

def _split_norm(normalization, width, out_width):
    if normalization is None:
        # identity: (x + 1) * 1 - 1
        return np.full(width, -1.0), np.ones(width), np.full(out_width, -1.0), np.ones(out_width)
    return (normalization.input_low, normalization.input_scale,
            normalization.output_low, normalization.output_scale)


class ModelAdapter(ABC):
    window = 0
    output_dim = 1
    normalization = None

    @abstractmethod
    def evaluate(self, windows: np.ndarray):
        """``(out, cache)`` for a batch of raw-frame windows."""

    @abstractmethod
    def pullback(self, cache, upstream: np.ndarray) -> np.ndarray:
        """Gradient of ``upstream · out`` with respect to the windows."""


class _NetworkAdapter(ModelAdapter):
    """Shared normalization, state-delta and ``[s; e; u] -> [s; e; u; −u]`` handling."""

    def __init__(self, model, layout: FrameLayout, delta: bool = False):
        self.model = model
        self.layout = layout
        self.delta = delta
        self.normalization = model.normalization
        self.output_dim = model.output_dim
        if delta and self.output_dim != layout.state_dim:
            raise DimensionMismatch('a state-delta model must output one value per state')
        if self.normalization is not None and len(self.normalization.input_low) != layout.frame_dim:
            raise DimensionMismatch(
                f'normalization covers {len(self.normalization.input_low)} inputs, frames have {layout.frame_dim}'
            )
        self._in_low, self._in_scale, self._out_low, self._out_scale = _split_norm(
            self.normalization, layout.frame_dim, self.output_dim
        )

    def _network_input(self, windows):
        z = (windows - self._in_low) * self._in_scale - 1.0
        return expand(z, self.layout.monotone_dim)

    def _output(self, out_n, windows):
        out = (out_n + 1.0) / self._out_scale + self._out_low
        if self.delta:
            out = out + windows[:, -1, :self.layout.state_dim]
        return out

    def _input_grad(self, d_hat, upstream, length):
        d_z = collapse_gradient(d_hat, self.layout.monotone_dim, self.layout.action_dim)
        d_x = d_z * self._in_scale
        if self.delta:
            d_x[:, length - 1, :self.layout.state_dim] += upstream
        return d_x


class IcrnnAdapter(_NetworkAdapter):
    def __init__(self, model: IcrnnModel, layout: FrameLayout, delta: bool = False):
        if model.state_dim != layout.monotone_dim or model.action_dim != layout.action_dim:
            raise DimensionMismatch(
                f'ICRNN expects {model.state_dim}+{model.action_dim} inputs, '
                f'frames carry {layout.monotone_dim}+{layout.action_dim}'
            )
        super().__init__(model, layout, delta)
        self.window = model.window

    def evaluate(self, windows):
        out_n, cache = self.model.forward_windows(self._network_input(windows))
        return self._output(out_n, windows), (cache, windows.shape[1])

    def pullback(self, cache, upstream):
        net_cache, length = cache
        _, d_hat = self.model.pullback_windows(net_cache, upstream / self._out_scale)
        return self._input_grad(d_hat, upstream, length)


class IcnnAdapter(_NetworkAdapter):
    """Memoryless ICNN over the last frame of each window."""

    def __init__(self, model: IcnnModel, layout: FrameLayout, delta: bool = False):
        if model.state_dim != layout.monotone_dim or model.input_dim != layout.action_dim:
            raise DimensionMismatch(
                f'ICNN expects {model.state_dim}+{model.input_dim} inputs, '
                f'frames carry {layout.monotone_dim}+{layout.action_dim}'
            )
        super().__init__(model, layout, delta)

    def evaluate(self, windows):
        last = windows[:, -1:]
        x_hat = self._network_input(last)[:, 0]
        pre, acts = self.model.forward_cache(x_hat)
        return self._output(acts[-1], last), (x_hat, pre, acts, windows.shape[1])

    def pullback(self, cache, upstream):
        x_hat, pre, acts, length = cache
        _, d_hat = self.model.backward(x_hat, pre, acts, upstream / self._out_scale, need_params=False)
        d_x = np.zeros((len(x_hat), length, self.layout.frame_dim))
        d_x[:, -1:] = self._input_grad(d_hat[:, None], upstream, 1)
        return d_x


class AffineAdapter(ModelAdapter):
    """``out = [x; 1] @ coef`` on the last frame; ``coef`` has shape (frame_dim + 1, out)."""

    def __init__(self, coef: ArrayLike, layout: FrameLayout):
        self.coef = as_array(coef, 'coef')
        if self.coef.shape[0] != layout.frame_dim + 1:
            raise DimensionMismatch(f'coef needs {layout.frame_dim + 1} rows, got {self.coef.shape[0]}')
        self.layout = layout
        self.output_dim = self.coef.shape[1]

    def evaluate(self, windows):
        return windows[:, -1] @ self.coef[:-1] + self.coef[-1], windows.shape[1]

    def pullback(self, cache, upstream):
        d_x = np.zeros((len(upstream), cache, self.layout.frame_dim))
        d_x[:, -1] = upstream @ self.coef[:-1].T
        return d_x


class OracleAdapter(ModelAdapter):
    """The plant's own equations."""

    def __init__(self, plant: Plant, target: str = 'output'):
        if target not in ('output', 'state'):
            raise InvalidParameter(f"target must be 'output' or 'state', got {target!r}")
        self.plant = plant
        self.target = target
        self.layout = FrameLayout.for_plant(plant)
        self.output_dim = plant.output_dim if target == 'output' else plant.state_dim

    def evaluate(self, windows):
        s, e, u = self.layout.split_frame(windows[:, -1])
        fn = self.plant.output_map if self.target == 'output' else self.plant.state_map
        return fn(s, e, u), (s, e, u, windows.shape[1])

    def pullback(self, cache, upstream):
        s, e, u, length = cache
        vjp = self.plant.output_vjp if self.target == 'output' else self.plant.state_vjp
        ds, de, du = vjp(s, e, u, upstream)
        d_x = np.zeros((len(upstream), length, self.layout.frame_dim))
        d_x[:, -1] = np.concatenate([ds, de, du], axis=-1)
        return d_x


def fit_window_model(windows: WindowSet, kind: str = 'icrnn', target: str = 'output', delta: bool = False,
                     config=None, model=None):
    """Train an ICNN or ICRNN on a WindowSet in normalized units.

    The normalization is fitted on the training frames and targets and is
    attached to the returned model, so its adapter maps raw frames to raw
    predictions. ICNNs read the last frame of each window only.
    """
    if len(windows) == 0:
        raise EmptyData('no training windows')
    layout = windows.layout
    targets = windows.targets(target, delta)
    norm = NormalizationSpec.fit(windows.inputs, targets)
    z = norm.normalize(windows.inputs)
    t_n = norm.normalize_output(targets)
    if kind == 'icnn':
        config = config or TrainingConfig.from_settings()
        model, history = train_icnn(z[:, -1], t_n, config, state_dim=layout.monotone_dim, model=model)
    elif kind == 'icrnn':
        config = config or RecurrentTrainingConfig.from_settings(window=windows.inputs.shape[1] - 1)
        model, history = train_icrnn(expand(z, layout.monotone_dim), t_n, config, layout.monotone_dim, model=model)
    else:
        raise InvalidParameter(f"kind must be 'icnn' or 'icrnn', got {kind!r}")
    model.normalization = norm
    return model, history


def adapter_for(model, layout: FrameLayout, delta: bool = False) -> ModelAdapter:
    if isinstance(model, IcrnnModel):
        return IcrnnAdapter(model, layout, delta)
    if isinstance(model, IcnnModel):
        return IcnnAdapter(model, layout, delta)
    raise InvalidParameter(f'no adapter for {type(model).__name__}')


# Problem and solver

@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 2000
    tol: float = 1e-6
    lr: float = 0.05
    lr_decay_steps: int = 200
    restarts: int = 3
    penalty_weight: float = 10.0
    penalty_rounds: int = 3
    violation_threshold: float = 1e-3
    shooting_k: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.tol < 0 or self.max_iters < 0:
            raise InvalidParameter('lr must be positive; tol and max_iters must be >= 0')
        if self.restarts < 1 or self.penalty_rounds < 1 or self.shooting_k < 1:
            raise InvalidParameter('restarts, penalty_rounds and shooting_k must be >= 1')

    @classmethod
    def from_settings(cls, **overrides) -> 'SolverConfig':
        names = {f.name for f in fields(cls)}
        values = {'seed': settings.CONVEX_CONTROL['seed']}
        values.update({k: v for k, v in settings.CONVEX_CONTROL['mpc'].items() if k in names})
        values.update({k: v for k, v in overrides.items() if k in names and v is not None})
        return cls(**values)


@dataclass(eq=False)
class MpcProblem:
    """One finite-horizon problem from time ``t0`` and state ``state``.

    ``history`` holds the ``n_w`` raw frames before ``t0``; ``exogenous``
    the known exogenous inputs for ``t0 .. t0 + T − 1``.
    """

    output_model: ModelAdapter
    state_model: ModelAdapter
    cost: CostSpec
    horizon: int
    layout: FrameLayout
    action_low: np.ndarray
    action_high: np.ndarray
    state: np.ndarray
    history: np.ndarray | None = None
    exogenous: np.ndarray | None = None
    state_low: np.ndarray | None = None
    state_high: np.ndarray | None = None
    t0: int = 0

    def __post_init__(self):
        if self.horizon < 1:
            raise InvalidParameter(f'horizon must be >= 1, got {self.horizon}')
        lay = self.layout
        self.action_low = np.broadcast_to(as_array(self.action_low, 'action_low'), (lay.action_dim,)).copy()
        self.action_high = np.broadcast_to(as_array(self.action_high, 'action_high'), (lay.action_dim,)).copy()
        if np.any(self.action_low > self.action_high):
            raise InfeasibleProblem(f'empty action box: low {self.action_low} > high {self.action_high}')
        for name in ('state_low', 'state_high'):
            value = getattr(self, name)
            if value is not None:
                setattr(self, name, np.broadcast_to(as_array(value, name), (lay.state_dim,)).copy())
        if self.state_low is not None and self.state_high is not None and np.any(self.state_low > self.state_high):
            raise InfeasibleProblem('empty state band: low > high')
        self.state = as_array(self.state, 'state').reshape(lay.state_dim)
        if self.output_model.window != self.state_model.window:
            raise DimensionMismatch(
                f'output and state models use memory windows {self.output_model.window} '
                f'and {self.state_model.window}'
            )
        f_norm, g_norm = self.output_model.normalization, self.state_model.normalization
        if f_norm is not None and g_norm is not None and not f_norm.same_inputs(g_norm):
            raise InvalidParameter('output and state models carry incompatible normalization specs')
        if self.state_model.output_dim != lay.state_dim:
            raise DimensionMismatch(
                f'state model predicts {self.state_model.output_dim} values, plant has {lay.state_dim} states'
            )
        n_w = self.window
        if self.history is None:
            self.history = np.zeros((n_w, lay.frame_dim))
        self.history = np.asarray(self.history, dtype=np.float64).reshape(-1, lay.frame_dim)
        if len(self.history) != n_w:
            raise DimensionMismatch(f'history needs {n_w} frames, got {len(self.history)}')
        if self.exogenous is None:
            self.exogenous = np.zeros((self.horizon, lay.exo_dim))
        self.exogenous = np.asarray(self.exogenous, dtype=np.float64).reshape(self.horizon, lay.exo_dim)

    @property
    def window(self) -> int:
        return self.output_model.window

    @property
    def has_state_bounds(self) -> bool:
        return self.state_low is not None or self.state_high is not None

    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.horizon)

    def clip(self, u: np.ndarray) -> np.ndarray:
        return np.clip(u, self.action_low, self.action_high)

    def cost_terms(self) -> CostTerms:
        lay = self.layout
        return self.cost.terms(self.times(), self.output_model.output_dim, lay.action_dim, lay.state_dim)


@dataclass
class MpcSolution:
    actions: np.ndarray
    objective: float
    penalized_objective: float
    iterations: int
    grad_norm: float
    predicted_outputs: np.ndarray
    predicted_states: np.ndarray
    violation: float = 0.0
    flagged: bool = False
    restart: int = 0


def _violation(s_next, problem):
    over = np.zeros(s_next.shape[:1])
    if problem.state_high is not None:
        over = np.maximum(over, np.max(s_next - problem.state_high, axis=(1, 2)))
    if problem.state_low is not None:
        over = np.maximum(over, np.max(problem.state_low - s_next, axis=(1, 2)))
    return np.maximum(over, 0.0)


def evaluate_sequences(problem: MpcProblem, actions: np.ndarray, terms: CostTerms | None = None,
                       penalty_weight: float = 0.0, need_grad: bool = True):
    """Predicted cost of a batch of action sequences (B, T, n_u), with its gradient.

    Returns ``(penalized, cost, grad, outputs, next_states)``; ``grad`` is
    ``None`` when ``need_grad`` is false.
    """
    lay = problem.layout
    terms = terms or problem.cost_terms()
    b, horizon = actions.shape[0], problem.horizon
    n_w, n_s = problem.window, lay.state_dim
    frames = np.empty((b, n_w + horizon, lay.frame_dim))
    frames[:, :n_w] = problem.history
    s = np.broadcast_to(problem.state, (b, n_s))
    outputs = np.empty((b, horizon, problem.output_model.output_dim))
    next_states = np.empty((b, horizon, n_s))
    caches = []
    for k in range(horizon):
        frames[:, n_w + k, :n_s] = s
        frames[:, n_w + k, n_s:lay.monotone_dim] = problem.exogenous[k]
        frames[:, n_w + k, lay.monotone_dim:] = actions[:, k]
        window = frames[:, k:k + n_w + 1]
        outputs[:, k], f_cache = problem.output_model.evaluate(window)
        next_states[:, k], g_cache = problem.state_model.evaluate(window)
        caches.append((f_cache, g_cache))
        s = next_states[:, k]
    cost, d_y, d_u, d_s = terms.value_and_grads(outputs, actions, next_states)
    penalized = cost.copy()
    d_pen = np.zeros_like(next_states)
    if penalty_weight > 0 and problem.has_state_bounds:
        if problem.state_high is not None:
            over = np.maximum(next_states - problem.state_high, 0.0)
            penalized += penalty_weight * np.sum(over * over, axis=(1, 2))
            d_pen += 2.0 * penalty_weight * over
        if problem.state_low is not None:
            under = np.maximum(problem.state_low - next_states, 0.0)
            penalized += penalty_weight * np.sum(under * under, axis=(1, 2))
            d_pen -= 2.0 * penalty_weight * under
    if not need_grad:
        return penalized, cost, None, outputs, next_states
    d_frames = np.zeros_like(frames)
    for k in range(horizon - 1, -1, -1):
        ds_next = d_s[:, k] + d_pen[:, k]
        if k + 1 < horizon:
            ds_next = ds_next + d_frames[:, n_w + k + 1, :n_s]
        f_cache, g_cache = caches[k]
        d_frames[:, k:k + n_w + 1] += problem.output_model.pullback(f_cache, d_y[:, k])
        d_frames[:, k:k + n_w + 1] += problem.state_model.pullback(g_cache, ds_next)
    grad = d_u + d_frames[:, n_w:, lay.monotone_dim:]
    return penalized, cost, grad, outputs, next_states


def _gradient_mapping_norm(problem, u, grad):
    step = u - problem.clip(u - grad)
    return np.linalg.norm(step.reshape(len(u), -1), axis=1)


def _descend(problem: MpcProblem, terms: CostTerms, start: np.ndarray, config: SolverConfig, weight: float):
    """Projected Adam on every row of ``start``; returns the best iterate per row."""
    low, high = problem.action_low, problem.action_high
    params = {'u': problem.clip(start).copy()}
    adam = Adam(lr=config.lr, projection={'u': lambda w: np.clip(w, low, high, out=w)})
    best_u = params['u'].copy()
    best_val = np.full(len(start), np.inf)
    grad_norm = np.full(len(start), np.inf)
    iterations = 0
    for it in range(config.max_iters + 1):
        penalized, _, grad, _, _ = evaluate_sequences(problem, params['u'], terms, weight, need_grad=True)
        if not np.all(np.isfinite(penalized)) or not np.all(np.isfinite(grad)):
            raise SolverDivergence(f'MPC objective became non-finite at iteration {it}')
        improved = penalized < best_val
        best_val[improved] = penalized[improved]
        best_u[improved] = params['u'][improved]
        grad_norm = _gradient_mapping_norm(problem, params['u'], grad)
        iterations = it
        if it == config.max_iters or np.all(grad_norm < config.tol):
            break
        adam.step(params, {'u': grad}, lr=config.lr / (1.0 + it / config.lr_decay_steps))
    return best_u, best_val, iterations, grad_norm


def _initial_sequences(problem: MpcProblem, restarts: int, warm_start, seed: int) -> np.ndarray:
    shape = (problem.horizon, problem.layout.action_dim)
    starts = [problem.clip(np.zeros(shape))]
    if warm_start is not None and restarts > 1:
        starts.append(problem.clip(np.asarray(warm_start, dtype=np.float64).reshape(shape)))
    rng = seeded_stream(seed, 1000)
    while len(starts) < restarts:
        starts.append(rng.uniform(problem.action_low, problem.action_high, shape))
    return np.stack(starts[:restarts])


def mpc_solve(problem: MpcProblem, config: SolverConfig | None = None, warm_start: ArrayLike | None = None,
              seed: int | None = None) -> MpcSolution:
    """Minimize the predicted cost over the horizon's action sequence.

    Restarts are the zero sequence, the warm start and uniform draws, solved
    as one batch. State bounds enter as a quadratic penalty whose weight is
    multiplied by 10 per round until the best restart's violation is under
    the threshold; what remains is reported and flagged, never hidden.
    """
    config = config or SolverConfig.from_settings()
    seed = config.seed if seed is None else seed
    terms = problem.cost_terms()
    starts = _initial_sequences(problem, config.restarts, warm_start, seed)
    rounds = config.penalty_rounds if problem.has_state_bounds else 1
    weight = config.penalty_weight if problem.has_state_bounds else 0.0
    total_iters = 0
    current = starts
    for rnd in range(rounds):
        current, values, iters, grad_norm = _descend(problem, terms, current, config, weight)
        total_iters += iters
        _, _, _, _, s_next = evaluate_sequences(problem, current, terms, weight, need_grad=False)
        violation = _violation(s_next, problem)
        if violation[int(np.argmin(values))] <= config.violation_threshold or rnd == rounds - 1:
            break
        weight *= 10.0
        logger.debug('penalty round %d: violation %.3g, weight -> %.3g', rnd + 1, violation.min(), weight)
    best = int(np.argmin(values))
    actions = current[best]
    if warm_start is not None:
        warm = problem.clip(np.asarray(warm_start, dtype=np.float64).reshape(actions.shape))
        warm_val, *_ = evaluate_sequences(problem, warm[None], terms, weight, need_grad=False)
        if warm_val[0] < values[best]:
            actions, best = warm, -1
    penalized, cost, _, outputs, s_next = evaluate_sequences(problem, actions[None], terms, weight, need_grad=False)
    violation = float(_violation(s_next, problem)[0])
    flagged = violation > config.violation_threshold
    if flagged:
        logger.warning('MPC at t=%d exits with state-bound violation %.4g', problem.t0, violation)
    logger.debug('MPC at t=%d: objective %.6g after %d iterations, grad norm %.3g',
                 problem.t0, cost[0], total_iters, grad_norm[max(best, 0)])
    return MpcSolution(
        actions=actions.copy(), objective=float(cost[0]), penalized_objective=float(penalized[0]),
        iterations=total_iters, grad_norm=float(grad_norm[max(best, 0)]),
        predicted_outputs=outputs[0], predicted_states=s_next[0],
        violation=violation, flagged=flagged, restart=best,
    )


def _best_of(problem: MpcProblem, candidates: np.ndarray, weight: float, chunk: int = 512) -> MpcSolution:
    terms = problem.cost_terms()
    penalized = np.concatenate([
        evaluate_sequences(problem, candidates[i:i + chunk], terms, weight, need_grad=False)[0]
        for i in range(0, len(candidates), chunk)
    ])
    best = int(np.argmin(penalized))
    pen, cost, _, outputs, s_next = evaluate_sequences(problem, candidates[best:best + 1], terms, weight,
                                                      need_grad=False)
    violation = float(_violation(s_next, problem)[0])
    return MpcSolution(
        actions=candidates[best].copy(), objective=float(cost[0]), penalized_objective=float(pen[0]),
        iterations=0, grad_norm=float('nan'), predicted_outputs=outputs[0], predicted_states=s_next[0],
        violation=violation, restart=best,
    )


def random_shooting(problem: MpcProblem, k: int, seed: int = 0, penalty_weight: float | None = None) -> MpcSolution:
    """Best of ``k`` uniform action sequences; ties go to the lowest index."""
    if k < 1:
        raise InvalidParameter(f'shooting needs k >= 1, got {k}')
    if penalty_weight is None:
        penalty_weight = settings.CONVEX_CONTROL['mpc']['penalty_weight']
    rng = seeded_stream(seed, 0)
    shape = (k, problem.horizon, problem.layout.action_dim)
    candidates = rng.uniform(problem.action_low, problem.action_high, shape)
    return _best_of(problem, candidates, penalty_weight)


def lattice_oracle(problem: MpcProblem, resolution: float, max_points: int = 2_000_000) -> MpcSolution:
    """Exhaustive search over a regular grid of action sequences."""
    if resolution <= 0:
        raise InvalidParameter('lattice resolution must be positive')
    axes = [np.arange(lo, hi + resolution / 2.0, resolution).clip(lo, hi)
            for lo, hi in zip(problem.action_low, problem.action_high)]
    per_step = list(itertools.product(*axes))
    count = len(per_step) ** problem.horizon
    if count > max_points:
        raise InvalidParameter(f'lattice has {count} points, more than {max_points}')
    levels = np.asarray(per_step)
    grid = np.stack(np.meshgrid(*([np.arange(len(levels))] * problem.horizon), indexing='ij'), axis=-1)
    candidates = levels[grid.reshape(-1, problem.horizon)]
    return _best_of(problem, candidates, settings.CONVEX_CONTROL['mpc']['penalty_weight'])


def single_shot_minimize(model, low: ArrayLike, high: ArrayLike, config: SolverConfig | None = None,
                         seed: int | None = None):
    """Projected Adam on ``model.forward`` over a box; returns ``(argmin, value)``.

    ``model`` needs ``forward`` and ``grad_input`` over a batch of inputs.
    Starts from the box centre plus ``restarts − 1`` uniform draws.
    """
    config = config or SolverConfig.from_settings()
    seed = config.seed if seed is None else seed
    low = np.atleast_1d(as_array(low, 'low'))
    high = np.atleast_1d(as_array(high, 'high'))
    if np.any(low > high):
        raise InfeasibleProblem(f'empty box: low {low} > high {high}')
    rng = seeded_stream(seed, 2000)
    starts = [(low + high) / 2.0] + [rng.uniform(low, high) for _ in range(config.restarts - 1)]
    params = {'u': np.stack(starts)}
    adam = Adam(lr=config.lr, projection={'u': lambda w: np.clip(w, low, high, out=w)})
    best_u, best_val = params['u'].copy(), np.full(len(starts), np.inf)
    for it in range(config.max_iters + 1):
        value = np.sum(model.forward(params['u']), axis=-1)
        if not np.all(np.isfinite(value)):
            raise SolverDivergence(f'objective became non-finite at iteration {it}')
        improved = value < best_val
        best_val[improved] = value[improved]
        best_u[improved] = params['u'][improved]
        grad = model.grad_input(params['u'])
        step = params['u'] - np.clip(params['u'] - grad, low, high)
        if it == config.max_iters or np.all(np.linalg.norm(step, axis=1) < config.tol):
            break
        adam.step(params, {'u': grad}, lr=config.lr / (1.0 + it / config.lr_decay_steps))
    best = int(np.argmin(best_val))
    logger.debug('single-shot minimum %.6g at %s', best_val[best], best_u[best])
    return best_u[best], float(best_val[best])


# Linear baseline

@dataclass
class LinearFit:
    output_model: AffineAdapter
    state_model: AffineAdapter
    output_rmse: float
    state_rmse: float


def fit_linear_models(rollouts, layout: FrameLayout | None = None) -> LinearFit:
    """Least-squares affine ``y_τ`` and ``s_{τ+1}`` on the frame ``[s; e; u; 1]``."""
    windows = make_windows(rollouts, 0, layout)
    layout = windows.layout
    x = np.hstack([windows.inputs[:, 0], np.ones((len(windows), 1))])
    coef_y, _, rank, _ = lstsq(x, windows.outputs)
    if rank < x.shape[1]:
        raise SingularRegression(f'regressor matrix has rank {rank} < {x.shape[1]}')
    coef_s, *_ = lstsq(x, windows.next_states)
    y_rmse = float(np.sqrt(np.mean((x @ coef_y - windows.outputs) ** 2)))
    s_rmse = float(np.sqrt(np.mean((x @ coef_s - windows.next_states) ** 2)))
    logger.info('linear fit: output rmse %.4g, state rmse %.4g', y_rmse, s_rmse)
    return LinearFit(AffineAdapter(coef_y, layout), AffineAdapter(coef_s, layout), y_rmse, s_rmse)


def adapter_rmse(adapter: ModelAdapter, windows, target: str = 'output', normalization=None) -> float:
    """RMSE of an adapter on a WindowSet, optionally in normalized output units."""
    predicted, _ = adapter.evaluate(windows.inputs[:, -(adapter.window + 1):])
    truth = windows.outputs if target == 'output' else windows.next_states
    if normalization is not None:
        predicted = normalization.normalize_output(predicted)
        truth = normalization.normalize_output(truth)
    return float(np.sqrt(np.mean((predicted - truth) ** 2)))


# Controllers and closed loop

class ZeroController:
    def __init__(self, plant: Plant):
        self.plant = plant
        self.last_info = {}

    def __call__(self, step, t, state, frames):
        return self.plant.clip_action(np.zeros(self.plant.action_dim))


class SetpointController:
    """Thermostat for the RC building: the action that lands each zone on the setpoint next step."""

    def __init__(self, plant, setpoint: float | None = None):
        if not hasattr(plant, 'beta'):
            raise InvalidParameter(f'setpoint control needs an RC thermal plant, got {plant.name}')
        self.plant = plant
        self.setpoint = settings.CONVEX_CONTROL['building']['fixed_setpoint'] if setpoint is None else setpoint
        self.last_info = {}

    def __call__(self, step, t, state, frames):
        drift = self.plant.state_map(state, self.plant.exogenous(t), np.zeros(self.plant.action_dim))
        return self.plant.clip_action((self.setpoint - drift) / self.plant.beta)


class MpcController:
    """Receding-horizon controller: solve, apply the first action, shift the solution as the next warm start."""

    method = 'mpc'

    def __init__(self, plant: Plant, output_model: ModelAdapter, state_model: ModelAdapter, cost: CostSpec,
                 horizon: int, config: SolverConfig | None = None, state_low=None, state_high=None,
                 shooting_k: int | None = None):
        self.plant = plant
        self.output_model = output_model
        self.state_model = state_model
        self.cost = cost
        self.horizon = horizon
        self.config = config or SolverConfig.from_settings()
        self.state_low = state_low
        self.state_high = state_high
        self.shooting_k = shooting_k or self.config.shooting_k
        self.layout = FrameLayout.for_plant(plant)
        self.previous = None
        self.last_info = {}

    def history(self, t: int, state: np.ndarray, frames: np.ndarray) -> np.ndarray:
        """Last ``n_w`` frames, padded at the front with resting frames at the initial state."""
        n_w = self.output_model.window
        if n_w == 0:
            return np.zeros((0, self.layout.frame_dim))
        have = frames[-n_w:]
        missing = n_w - len(have)
        if missing <= 0:
            return have
        first_state = have[0, :self.layout.state_dim] if len(have) else state
        first_t = t - len(have)
        rest = self.plant.clip_action(np.zeros(self.layout.action_dim))
        pad = [np.concatenate([first_state, self.plant.exogenous(first_t - j), rest]) for j in range(missing, 0, -1)]
        return np.vstack(pad + [have]) if len(have) else np.vstack(pad)

    def problem(self, t: int, state: np.ndarray, frames: np.ndarray) -> MpcProblem:
        times = t + np.arange(self.horizon)
        return MpcProblem(
            self.output_model, self.state_model, self.cost, self.horizon, self.layout,
            self.plant.action_low, self.plant.action_high, state,
            history=self.history(t, state, frames), exogenous=self.plant.exogenous(times),
            state_low=self.state_low, state_high=self.state_high, t0=t,
        )

    def solve(self, step: int, problem: MpcProblem) -> MpcSolution:
        warm = None
        if self.previous is not None:
            warm = np.vstack([self.previous[1:], self.previous[-1:]])
        return mpc_solve(problem, self.config, warm_start=warm, seed=self.config.seed + step)

    def __call__(self, step, t, state, frames):
        solution = self.solve(step, self.problem(t, state, frames))
        self.previous = solution.actions
        self.last_info = {
            'objective': solution.objective, 'iterations': solution.iterations,
            'violation': solution.violation, 'flagged': solution.flagged,
        }
        return solution.actions[0]


class ShootingController(MpcController):
    method = 'shooting'

    def solve(self, step, problem):
        return random_shooting(problem, self.shooting_k, seed=self.config.seed + step,
                               penalty_weight=self.config.penalty_weight)


@dataclass
class Trajectory:
    rollout: Rollout
    info: list = field(default_factory=list)
    clip_events: int = 0

    def to_frame(self, cost: CostSpec | None = None) -> pd.DataFrame:
        r = self.rollout
        h = r.horizon
        frame = pd.DataFrame({'t': r.start + np.arange(h)})
        for i in range(r.states.shape[1]):
            frame[f's{i}'] = r.states[:h, i]
        for i in range(r.exogenous.shape[1]):
            frame[f'e{i}'] = r.exogenous[:, i]
        for i in range(r.actions.shape[1]):
            frame[f'u{i}'] = r.actions[:, i]
        for i in range(r.outputs.shape[1]):
            frame[f'y{i}'] = r.outputs[:, i]
        if cost is not None:
            frame['cost'] = stage_costs(self, cost)
        for key in ('objective', 'iterations', 'violation'):
            frame[key] = [entry.get(key, np.nan) for entry in self.info]
        return frame


def stage_costs(trajectory: Trajectory, cost: CostSpec) -> np.ndarray:
    r = trajectory.rollout
    if r.horizon == 0:
        return np.zeros(0)
    terms = cost.terms(r.start + np.arange(r.horizon), r.outputs.shape[1], r.actions.shape[1], r.states.shape[1])
    per_step = []
    for k in range(r.horizon):
        step_terms = CostTerms(
            terms.output_weights[k:k + 1], terms.action_price[k:k + 1], terms.action_quadratic,
            terms.state_linear, terms.state_quadratic, terms.state_reference[k:k + 1],
        )
        value, *_ = step_terms.value_and_grads(r.outputs[None, k:k + 1], r.actions[None, k:k + 1],
                                               r.states[None, k + 1:k + 2])
        per_step.append(value[0])
    return np.asarray(per_step)


def receding_horizon_run(plant: Plant, controller, episode: int, s0: ArrayLike, start: int = 0) -> Trajectory:
    """Closed loop: at every step the controller acts on the true plant state."""
    if episode < 0:
        raise InvalidParameter('episode length must be >= 0')
    s0 = as_array(s0, 's0')
    if s0.shape != (plant.state_dim,):
        raise DimensionMismatch(f'{plant.name} has {plant.state_dim} states, initial state has shape {s0.shape}')
    info = []

    def policy(step, t, state, frames):
        u = controller(step, t, state, frames)
        info.append(dict(getattr(controller, 'last_info', {})))
        return u

    clipped_before = plant.clip_events
    rollout = simulate(plant, policy, episode, s0, start=start)
    clipped = plant.clip_events - clipped_before
    logger.info('closed loop on %s: %d steps, %d clipped states', plant.name, episode, clipped)
    return Trajectory(rollout, info, clipped)


def trajectory_metrics(trajectory: Trajectory, cost: CostSpec | None = None, price: PriceSignal | None = None,
                       band: tuple | None = None) -> dict:
    r = trajectory.rollout
    energy = r.outputs.sum(axis=1) if r.horizon else np.zeros(0)
    metrics = {
        'steps': r.horizon,
        'energy': float(energy.sum()),
        'reward': float(r.rewards.sum()) if r.rewards is not None else 0.0,
    }
    if cost is not None:
        metrics['total_cost'] = float(stage_costs(trajectory, cost).sum())
    if price is not None:
        peak = price.is_peak(r.start + np.arange(r.horizon))
        metrics['peak_energy'] = float(energy[peak].sum())
    if band is not None:
        visited = r.states[1:]
        over = np.maximum(visited - band[1], 0.0)
        under = np.maximum(band[0] - visited, 0.0)
        worst = np.maximum(over, under)
        metrics['max_band_violation'] = float(worst.max()) if worst.size else 0.0
        metrics['band_violation_steps'] = int(np.sum(np.any(worst > 0, axis=1))) if worst.size else 0
    iterations = [entry['iterations'] for entry in trajectory.info if 'iterations' in entry]
    metrics['mean_iterations'] = float(np.mean(iterations)) if iterations else 0.0
    metrics['flagged_solves'] = int(sum(1 for entry in trajectory.info if entry.get('flagged')))
    metrics['clip_events'] = trajectory.clip_events
    return metrics


def savings(baseline: float, value: float) -> float:
    """Percent reduction of ``value`` relative to ``baseline``."""
    if baseline == 0:
        return 0.0
    return 100.0 * (baseline - value) / baseline


def rc_mpc_baseline(plant: Plant, train, test, cost: CostSpec, horizon: int, episode: int, s0: ArrayLike,
                    start: int = 0, config: SolverConfig | None = None, state_low=None, state_high=None) -> dict:
    """Fit the linear state-space baseline, score it on ``test`` and run it in closed loop."""
    fit = fit_linear_models(train)
    test_windows = make_windows(test, 0, FrameLayout.for_plant(plant))
    controller = MpcController(plant, fit.output_model, fit.state_model, cost, horizon, config,
                               state_low, state_high)
    trajectory = receding_horizon_run(plant, controller, episode, s0, start)
    return {
        'fit': fit,
        'test_output_rmse': adapter_rmse(fit.output_model, test_windows, 'output'),
        'test_state_rmse': adapter_rmse(fit.state_model, test_windows, 'state'),
        'trajectory': trajectory,
        'metrics': trajectory_metrics(trajectory, cost),
    }


def constraint_effect_study(plant: Plant, make_controller: Callable[[tuple | None], object], bands, episode: int,
                            s0: ArrayLike, start: int, price: PriceSignal) -> list[dict]:
    """Closed-loop TOU runs under each comfort band; ``None`` means unconstrained."""
    rows = []
    for band in bands:
        trajectory = receding_horizon_run(plant, make_controller(band), episode, s0, start)
        metrics = trajectory_metrics(trajectory, price=price, band=band)
        rows.append({'band': 'none' if band is None else f'{band[0]:g}-{band[1]:g}', **metrics})
    return rows
