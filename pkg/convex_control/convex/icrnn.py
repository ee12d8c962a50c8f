"""Input-convex recurrent networks.

    z_t = ReLU(U x̂_t + W z_{t-1} + D2 x̂_{t-1} + b_h)
    y_t = V z_t + D1 z_{t-1} + D3 x̂_t + b_y

with ``x̂_t = [s_t; u_t; −u_t]``. States are not duplicated, so the unrolled
map is convex in the action sequence and nondecreasing in the states when
all six weight matrices are nonnegative.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields, replace
from typing import TYPE_CHECKING, Sequence

import numpy as np
from django.conf import settings
from numpy.typing import ArrayLike

from .exceptions import DimensionMismatch, EmptyData, InvalidParameter
from .icnn import collapse_gradient, fit_parameters
from .numeric import RngStream, as_array, relu_grad, seeded_stream

if TYPE_CHECKING:
    from .sysid import NormalizationSpec

logger = logging.getLogger(__name__)

WEIGHT_NAMES = ('U', 'W', 'V', 'D1', 'D2', 'D3')


@dataclass
class HiddenState:
    z: np.ndarray
    previous_input: np.ndarray

    def __post_init__(self):
        self.z = as_array(self.z, 'z')
        self.previous_input = as_array(self.previous_input, 'previous input')


@dataclass(eq=False)
class IcrnnModel:
    U: np.ndarray
    W: np.ndarray
    V: np.ndarray
    D1: np.ndarray
    D2: np.ndarray
    D3: np.ndarray
    b_h: np.ndarray
    b_y: np.ndarray
    state_dim: int = 0
    window: int = 12
    normalization: 'NormalizationSpec | None' = None

    def __post_init__(self):
        for name in WEIGHT_NAMES + ('b_h', 'b_y'):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        h, m = self.U.shape
        o = self.V.shape[0]
        expected = {
            'W': (h, h), 'V': (o, h), 'D1': (o, h), 'D2': (h, m), 'D3': (o, m),
            'b_h': (h,), 'b_y': (o,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionMismatch(f'{name} must have shape {shape}, got {getattr(self, name).shape}')
        if (m - self.state_dim) < 2 or (m - self.state_dim) % 2:
            raise DimensionMismatch(
                f'input width {m} does not split into {self.state_dim} state dims and an expanded action'
            )
        if self.window < 0:
            raise InvalidParameter('memory window must be >= 0')

    @property
    def kind(self) -> str:
        return 'icrnn'

    @property
    def hidden_dim(self) -> int:
        return self.U.shape[0]

    @property
    def input_dim(self) -> int:
        return self.U.shape[1]

    @property
    def action_dim(self) -> int:
        return (self.input_dim - self.state_dim) // 2

    @property
    def output_dim(self) -> int:
        return self.V.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in WEIGHT_NAMES + ('b_h', 'b_y')}

    def constrained_names(self) -> list[str]:
        return list(WEIGHT_NAMES)

    def copy(self) -> 'IcrnnModel':
        return replace(self, **{name: value.copy() for name, value in self.params().items()})

    def initial_state(self, batch: int) -> HiddenState:
        return HiddenState(np.zeros((batch, self.hidden_dim)), np.zeros((batch, self.input_dim)))

    def forward_cache(self, x_hat: np.ndarray, state: HiddenState | None = None):
        """Run the recursion over ``x_hat`` of shape (batch, length, input_dim)."""
        batch, length, _ = x_hat.shape
        state = state or self.initial_state(batch)
        z_prev = np.broadcast_to(state.z, (batch, self.hidden_dim))
        x_prev = np.broadcast_to(state.previous_input, (batch, self.input_dim))
        zs, pre = [z_prev], []
        y = np.empty((batch, length, self.output_dim))
        for t in range(length):
            x_t = x_hat[:, t]
            a = x_t @ self.U.T + z_prev @ self.W.T + x_prev @ self.D2.T + self.b_h
            z = np.maximum(a, 0.0)
            y[:, t] = z @ self.V.T + z_prev @ self.D1.T + x_t @ self.D3.T + self.b_y
            pre.append(a)
            zs.append(z)
            z_prev, x_prev = z, x_t
        cache = (x_hat, np.broadcast_to(state.previous_input, (batch, self.input_dim)), zs, pre)
        return y, cache

    def forward(self, x_hat: ArrayLike, state: HiddenState | None = None):
        x_hat = self._sequence(x_hat)
        y, cache = self.forward_cache(x_hat, state)
        return y, np.stack(cache[2][1:], axis=1)

    def backward(self, cache, d_y: np.ndarray, need_params: bool = True, truncation: int | None = None):
        """Backpropagation through time.

        ``d_y`` has shape (batch, length, output_dim). With ``truncation = n``
        each output only propagates through its last ``n + 1`` frames;
        ``None`` or ``n >= length - 1`` is exact BPTT.
        """
        x_hat = cache[0]
        length = x_hat.shape[1]
        grads = {name: np.zeros_like(value) for name, value in self.params().items()} if need_params else {}
        d_x = np.zeros_like(x_hat)
        if truncation is None or truncation >= length - 1:
            self._reverse(cache, d_y, length - 1, 0, grads, d_x, need_params)
        else:
            for t0 in range(length):
                if not np.any(d_y[:, t0]):
                    continue
                only = np.zeros_like(d_y)
                only[:, t0] = d_y[:, t0]
                self._reverse(cache, only, t0, max(0, t0 - truncation), grads, d_x, need_params)
        return grads, d_x

    def _reverse(self, cache, d_y, t_hi, t_lo, grads, d_x, need_params):
        x_hat, x_prev0, zs, pre = cache
        batch = x_hat.shape[0]
        carry_z = np.zeros((batch, self.hidden_dim))
        carry_x = np.zeros((batch, self.input_dim))
        for t in range(t_hi, t_lo - 1, -1):
            dy = d_y[:, t]
            z_t, z_prev = zs[t + 1], zs[t]
            x_t = x_hat[:, t]
            x_prev = x_hat[:, t - 1] if t > 0 else x_prev0
            delta = (dy @ self.V + carry_z) * relu_grad(pre[t])
            if need_params:
                grads['V'] += dy.T @ z_t
                grads['D1'] += dy.T @ z_prev
                grads['D3'] += dy.T @ x_t
                grads['b_y'] += dy.sum(axis=0)
                grads['U'] += delta.T @ x_t
                grads['W'] += delta.T @ z_prev
                grads['D2'] += delta.T @ x_prev
                grads['b_h'] += delta.sum(axis=0)
            d_x[:, t] += delta @ self.U + dy @ self.D3 + carry_x
            carry_z = delta @ self.W + dy @ self.D1
            carry_x = delta @ self.D2

    def forward_windows(self, windows: np.ndarray):
        """Last output of each window, hidden state reset at the window start."""
        y, cache = self.forward_cache(windows)
        return y[:, -1], cache

    def pullback_windows(self, cache, upstream: np.ndarray, need_params: bool = False):
        x_hat = cache[0]
        d_y = np.zeros((x_hat.shape[0], x_hat.shape[1], self.output_dim))
        d_y[:, -1] = upstream
        return self.backward(cache, d_y, need_params=need_params)

    def assemble(self, states: ArrayLike, actions: ArrayLike) -> np.ndarray:
        """Frames ``[s; u; −u]`` from state and action sequences of equal length."""
        states = as_array(states, 'states')
        actions = as_array(actions, 'actions')
        if states.ndim == 1:
            states = states.reshape(len(actions), -1)
        if actions.ndim == 1:
            actions = actions[:, None]
        if states.shape[-1] != self.state_dim or actions.shape[-1] != self.action_dim:
            raise DimensionMismatch(
                f'expected {self.state_dim} state and {self.action_dim} action dims, '
                f'got {states.shape[-1]} and {actions.shape[-1]}'
            )
        if len(states) != len(actions):
            raise DimensionMismatch('state and action sequences differ in length')
        return np.concatenate([states, actions, -actions], axis=-1)

    def _sequence(self, x_hat: ArrayLike) -> np.ndarray:
        x_hat = as_array(x_hat, 'ICRNN input')
        if x_hat.ndim == 2:
            x_hat = x_hat[None]
        if x_hat.ndim != 3 or x_hat.shape[1] == 0:
            raise DimensionMismatch('ICRNN input must be a nonempty (batch, length, features) array')
        if x_hat.shape[2] != self.input_dim:
            raise DimensionMismatch(f'expected {self.input_dim} input features, got {x_hat.shape[2]}')
        return x_hat


def init_icrnn(
    state_dim: int,
    action_dim: int,
    hidden: int,
    output_dim: int = 1,
    window: int = 12,
    rng: RngStream | None = None,
) -> IcrnnModel:
    rng = rng or seeded_stream(0)
    m = state_dim + 2 * action_dim

    def draw(rows, cols):
        return np.abs(rng.gaussian(0.0, 1.0 / cols, (rows, cols)))

    return IcrnnModel(
        U=draw(hidden, m), W=draw(hidden, hidden), V=draw(output_dim, hidden),
        D1=draw(output_dim, hidden), D2=draw(hidden, m), D3=draw(output_dim, m),
        b_h=np.zeros(hidden), b_y=np.zeros(output_dim),
        state_dim=state_dim, window=window,
    )


def stack_sequences(sequences) -> np.ndarray:
    lengths = {len(seq) for seq in sequences}
    if not lengths:
        raise EmptyData('empty batch of sequences')
    if len(lengths) > 1:
        raise DimensionMismatch(f'ragged batch: sequence lengths {sorted(lengths)}')
    return np.stack([np.asarray(seq, dtype=np.float64) for seq in sequences])


def icrnn_forward(model: IcrnnModel, x_hat: ArrayLike, z0: HiddenState | None = None):
    """Outputs and hidden states for one sequence or a batch of sequences."""
    return model.forward(x_hat, z0)


def icrnn_bptt(model: IcrnnModel, sequences, targets, truncation: int | None = None):
    """MSE over every output of every sequence, and its exact gradients."""
    x_hat = model._sequence(stack_sequences(sequences) if isinstance(sequences, (list, tuple)) else sequences)
    targets = np.asarray(targets, dtype=np.float64).reshape(x_hat.shape[0], x_hat.shape[1], model.output_dim)
    y, cache = model.forward_cache(x_hat)
    residual = y - targets
    grads, _ = model.backward(cache, 2.0 * residual / residual.size, truncation=truncation)
    return float(np.mean(residual ** 2)), grads


def icrnn_grad_actions(
    model: IcrnnModel,
    states: ArrayLike,
    actions: ArrayLike,
    output_weights: ArrayLike | None = None,
) -> np.ndarray:
    """Gradient of ``Σ_t w·y_t`` w.r.t. every action, states held fixed."""
    x_hat = model.assemble(states, actions)[None]
    y, cache = model.forward_cache(x_hat)
    d_y = np.ones_like(y) if output_weights is None else np.broadcast_to(
        np.asarray(output_weights, dtype=np.float64), y.shape
    ).copy()
    _, d_x = model.backward(cache, d_y, need_params=False)
    full = collapse_gradient(d_x[0], model.state_dim, model.action_dim)
    return full[:, model.state_dim:]


@dataclass(frozen=True)
class RecurrentTrainingConfig:
    hidden: int = 32
    window: int = 12
    epochs: int = 60
    lr: float = 1e-3
    batch_size: int = 512
    seed: int = 0
    log_every: int = 10
    delta: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise InvalidParameter(f'learning rate must be positive, got {self.lr}')
        if self.hidden < 1 or self.batch_size < 1 or self.epochs < 0:
            raise InvalidParameter('hidden and batch_size must be >= 1, epochs >= 0')

    @classmethod
    def from_settings(cls, **overrides) -> 'RecurrentTrainingConfig':
        names = {f.name for f in fields(cls)}
        values = {'seed': settings.CONVEX_CONTROL['seed']}
        values.update({k: v for k, v in settings.CONVEX_CONTROL['icrnn'].items() if k in names})
        values.update({k: v for k, v in overrides.items() if k in names and v is not None})
        return cls(**values)


def train_icrnn(
    windows: ArrayLike,
    targets: ArrayLike,
    config: RecurrentTrainingConfig,
    state_dim: int,
    model: IcrnnModel | None = None,
) -> tuple[IcrnnModel, list[float]]:
    """Fit an ICRNN on windows of ``n_w + 1`` frames against each window's final target."""
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3 or len(windows) == 0:
        raise EmptyData('training needs a nonempty (count, n_w + 1, features) window array')
    targets = np.asarray(targets, dtype=np.float64).reshape(len(windows), -1)
    if model is None:
        action_dim = (windows.shape[2] - state_dim) // 2
        model = init_icrnn(
            state_dim, action_dim, config.hidden, targets.shape[1],
            window=windows.shape[1] - 1, rng=seeded_stream(config.seed, 0),
        )
    else:
        model = model.copy()
    model._sequence(windows[:1])

    def loss_and_grads(idx):
        out, cache = model.forward_windows(windows[idx])
        residual = out - targets[idx]
        grads, _ = model.pullback_windows(cache, 2.0 * residual / residual.size, need_params=True)
        return float(np.mean(residual ** 2)), grads

    history = fit_parameters(model.params(), model.constrained_names(), loss_and_grads, len(windows), config, 'icrnn')
    return model, history


def window_rmse(model: IcrnnModel, windows: np.ndarray, targets: np.ndarray) -> float:
    out, _ = model.forward_windows(np.asarray(windows, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.float64).reshape(out.shape)
    return float(np.sqrt(np.mean((out - targets) ** 2)))
