"""Input-convex feedforward networks.

Layer i computes ``z_i = σ(W_i z_{i-1} + D_i x̂ + b_i)`` with ``z_0 = x̂`` and no
passthrough on the first layer. Hidden layers use ReLU, the output layer is
the identity. The network input is ``x̂ = [s; u; −u]``: an optional monotone
block ``s`` followed by the expanded action. With every ``W_i`` and ``D_i``
nonnegative the map is convex and nondecreasing in ``x̂``, hence convex in
``(s, u)`` and nondecreasing in ``s``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields, replace
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np
from django.conf import settings
from numpy.typing import ArrayLike

from .exceptions import DimensionMismatch, EmptyData, InvalidParameter, SolverDivergence
from .numeric import Adam, RngStream, as_array, clamp_nonnegative, relu_grad, seeded_stream

if TYPE_CHECKING:
    from .sysid import NormalizationSpec

logger = logging.getLogger(__name__)


def expand(x: np.ndarray, state_dim: int = 0) -> np.ndarray:
    """``[s; u]`` -> ``[s; u; −u]`` along the last axis."""
    s = x[..., :state_dim]
    u = x[..., state_dim:]
    return np.concatenate([s, u, -u], axis=-1)


def collapse_gradient(g_hat: np.ndarray, state_dim: int, action_dim: int) -> np.ndarray:
    """Chain rule through ``v = −u``: gradient w.r.t. ``[s; u]`` from one w.r.t. ``[s; u; v]``."""
    g_s = g_hat[..., :state_dim]
    g_u = g_hat[..., state_dim:state_dim + action_dim]
    g_v = g_hat[..., state_dim + action_dim:state_dim + 2 * action_dim]
    return np.concatenate([g_s, g_u - g_v], axis=-1)


@dataclass(eq=False)
class IcnnModel:
    input_dim: int
    weights: list
    passthrough: list
    biases: list
    state_dim: int = 0
    normalization: 'NormalizationSpec | None' = None

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.passthrough = [np.asarray(d, dtype=np.float64) for d in self.passthrough]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        self._check_shapes()

    def _check_shapes(self):
        k = len(self.weights)
        if self.input_dim < 1 or self.state_dim < 0:
            raise DimensionMismatch('input_dim must be >= 1 and state_dim >= 0')
        if k < 1:
            raise DimensionMismatch('an ICNN needs at least the output layer')
        if len(self.biases) != k or len(self.passthrough) != k - 1:
            raise DimensionMismatch(
                f'{k} layers need {k} biases and {k - 1} passthrough matrices, '
                f'got {len(self.biases)} and {len(self.passthrough)}'
            )
        fan_in = self.network_input_dim
        for i, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            if w.ndim != 2 or w.shape[1] != fan_in:
                raise DimensionMismatch(f'W{i} must have {fan_in} columns, got shape {w.shape}')
            if b.shape != (w.shape[0],):
                raise DimensionMismatch(f'b{i} must have shape ({w.shape[0]},), got {b.shape}')
            if i > 1:
                d = self.passthrough[i - 2]
                if d.shape != (w.shape[0], self.network_input_dim):
                    raise DimensionMismatch(
                        f'D{i} must have shape ({w.shape[0]}, {self.network_input_dim}), got {d.shape}'
                    )
            fan_in = w.shape[0]

    @property
    def kind(self) -> str:
        return 'icnn'

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def widths(self) -> list[int]:
        return [w.shape[0] for w in self.weights[:-1]]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def raw_dim(self) -> int:
        return self.state_dim + self.input_dim

    @property
    def network_input_dim(self) -> int:
        return self.state_dim + 2 * self.input_dim

    def params(self) -> dict[str, np.ndarray]:
        """Named views of every parameter; updating them updates the model."""
        out = {}
        for i, w in enumerate(self.weights, start=1):
            out[f'W{i}'] = w
        for i, d in enumerate(self.passthrough, start=2):
            out[f'D{i}'] = d
        for i, b in enumerate(self.biases, start=1):
            out[f'b{i}'] = b
        return out

    def constrained_names(self) -> list[str]:
        return [name for name in self.params() if name[0] in 'WD']

    def copy(self) -> 'IcnnModel':
        return replace(
            self,
            weights=[w.copy() for w in self.weights],
            passthrough=[d.copy() for d in self.passthrough],
            biases=[b.copy() for b in self.biases],
        )

    def forward(self, x: ArrayLike) -> np.ndarray:
        x = self._raw_input(x)
        out = self.forward_expanded(expand(x, self.state_dim))
        return out

    def forward_expanded(self, x_hat: ArrayLike) -> np.ndarray:
        x_hat = np.asarray(x_hat, dtype=np.float64)
        if x_hat.shape[-1] != self.network_input_dim:
            raise DimensionMismatch(
                f'expected expanded input of size {self.network_input_dim}, got {x_hat.shape[-1]}'
            )
        single = x_hat.ndim == 1
        pre, acts = self.forward_cache(np.atleast_2d(x_hat))
        return acts[-1][0] if single else acts[-1]

    def forward_cache(self, x_hat: np.ndarray):
        pre, acts = [], [x_hat]
        z = x_hat
        last = self.depth - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = z @ w.T + b
            if i > 0:
                a = a + x_hat @ self.passthrough[i - 1].T
            pre.append(a)
            z = np.maximum(a, 0.0) if i < last else a
            acts.append(z)
        return pre, acts

    def backward(self, x_hat, pre, acts, upstream, need_params: bool = True):
        """Reverse pass; returns ``(param_grads, grad wrt x̂)`` summed over the batch."""
        grads = {}
        d_hat = np.zeros_like(x_hat)
        dz = upstream
        last = self.depth - 1
        for i in range(last, -1, -1):
            delta = dz * relu_grad(pre[i]) if i < last else dz
            if need_params:
                grads[f'W{i + 1}'] = delta.T @ acts[i]
                grads[f'b{i + 1}'] = delta.sum(axis=0)
                if i > 0:
                    grads[f'D{i + 1}'] = delta.T @ x_hat
            if i > 0:
                d_hat += delta @ self.passthrough[i - 1]
                dz = delta @ self.weights[i]
            else:
                d_hat += delta @ self.weights[0]
        return grads, d_hat

    def grad_input(self, x: ArrayLike, output_weights: ArrayLike | None = None) -> np.ndarray:
        """Gradient of ``output_weights · f`` w.r.t. the raw input ``[s; u]``."""
        x = self._raw_input(x)
        single = x.ndim == 1
        x2 = np.atleast_2d(x)
        x_hat = expand(x2, self.state_dim)
        pre, acts = self.forward_cache(x_hat)
        upstream = np.ones_like(acts[-1]) if output_weights is None else np.broadcast_to(
            np.asarray(output_weights, dtype=np.float64), acts[-1].shape
        ).copy()
        _, d_hat = self.backward(x_hat, pre, acts, upstream, need_params=False)
        g = collapse_gradient(d_hat, self.state_dim, self.input_dim)
        return g[0] if single else g

    def _raw_input(self, x: ArrayLike) -> np.ndarray:
        x = as_array(x, 'ICNN input')
        if x.ndim == 0:
            x = x.reshape(1)
        if x.shape[-1] != self.raw_dim:
            raise DimensionMismatch(f'expected input of size {self.raw_dim}, got {x.shape[-1]}')
        return x


def init_icnn(
    input_dim: int,
    widths: Sequence[int],
    output_dim: int = 1,
    state_dim: int = 0,
    rng: RngStream | None = None,
) -> IcnnModel:
    """Weights ~ |N(0, (1/fan_in)^2)| so the model starts feasible; biases zero."""
    rng = rng or seeded_stream(0)
    n_in = state_dim + 2 * input_dim
    sizes = list(widths) + [output_dim]
    weights, passthrough, biases = [], [], []
    fan_in = n_in
    for i, n_out in enumerate(sizes):
        weights.append(np.abs(rng.gaussian(0.0, 1.0 / fan_in, (n_out, fan_in))))
        if i > 0:
            passthrough.append(np.abs(rng.gaussian(0.0, 1.0 / n_in, (n_out, n_in))))
        biases.append(np.zeros(n_out))
        fan_in = n_out
    return IcnnModel(input_dim, weights, passthrough, biases, state_dim=state_dim)


def icnn_forward(model: IcnnModel, u: ArrayLike) -> np.ndarray:
    return model.forward(u)


def icnn_grad_input(model: IcnnModel, u: ArrayLike) -> np.ndarray:
    return model.grad_input(u)


def mse_loss_and_grads(model: IcnnModel, inputs: np.ndarray, targets: np.ndarray):
    """Mean squared error over every output entry and its parameter gradients."""
    if np.size(inputs) == 0:
        raise EmptyData('cannot compute a loss on an empty batch')
    inputs = np.atleast_2d(model._raw_input(inputs))
    targets = np.asarray(targets, dtype=np.float64).reshape(len(inputs), -1)
    if targets.shape[1] != model.output_dim:
        raise DimensionMismatch(f'targets have {targets.shape[1]} columns, model outputs {model.output_dim}')
    x_hat = expand(inputs, model.state_dim)
    pre, acts = model.forward_cache(x_hat)
    residual = acts[-1] - targets
    loss = float(np.mean(residual ** 2))
    grads, _ = model.backward(x_hat, pre, acts, 2.0 * residual / residual.size)
    return loss, grads


def icnn_grad_params(model: IcnnModel, inputs: ArrayLike, targets: ArrayLike) -> dict[str, np.ndarray]:
    _, grads = mse_loss_and_grads(model, np.asarray(inputs, dtype=np.float64), targets)
    return grads


def project_nonnegative(model: IcnnModel) -> IcnnModel:
    projected = model.copy()
    for name in projected.constrained_names():
        clamp_nonnegative(projected.params()[name])
    return projected


def negative_weights(model) -> list[tuple[str, tuple[int, ...], float]]:
    """Locations of constrained weights below zero, for ICNN and ICRNN models."""
    found = []
    params = model.params()
    for name in model.constrained_names():
        for index in np.argwhere(params[name] < 0.0):
            idx = tuple(int(i) for i in index)
            found.append((name, idx, float(params[name][idx])))
    return found


def relu_count(model: IcnnModel) -> int:
    return int(sum(model.widths))


@dataclass(frozen=True)
class TrainingConfig:
    widths: tuple = (16,)
    epochs: int = 200
    lr: float = 1e-3
    batch_size: int = 512
    seed: int = 0
    log_every: int = 20

    def __post_init__(self):
        if self.lr <= 0:
            raise InvalidParameter(f'learning rate must be positive, got {self.lr}')
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidParameter('epochs must be >= 0 and batch_size >= 1')

    @classmethod
    def from_settings(cls, section: str = 'icnn', **overrides) -> 'TrainingConfig':
        names = {f.name for f in fields(cls)}
        values = {'seed': settings.CONVEX_CONTROL['seed']}
        values.update({k: v for k, v in settings.CONVEX_CONTROL[section].items() if k in names})
        values.update({k: v for k, v in overrides.items() if k in names and v is not None})
        values['widths'] = tuple(values.get('widths', cls.widths))
        return cls(**values)


def fit_parameters(
    params: dict[str, np.ndarray],
    constrained: Sequence[str],
    loss_and_grads: Callable[[np.ndarray], tuple[float, dict]],
    n_samples: int,
    config,
    label: str = 'model',
) -> list[float]:
    """Minibatch Adam with a nonnegativity projection after every step.

    Returns the per-epoch mean training loss.
    """
    adam = Adam(lr=config.lr, projection={name: clamp_nonnegative for name in constrained})
    rng = seeded_stream(config.seed, 1)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n_samples)
        total = 0.0
        for start in range(0, n_samples, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = loss_and_grads(idx)
            if not np.isfinite(loss):
                raise SolverDivergence(f'{label} training diverged at epoch {epoch}')
            adam.step(params, grads)
            total += loss * len(idx)
        history.append(total / n_samples)
        if config.log_every and (epoch + 1) % config.log_every == 0:
            logger.info('%s epoch %d/%d loss %.6g', label, epoch + 1, config.epochs, history[-1])
        else:
            logger.debug('%s epoch %d loss %.6g', label, epoch + 1, history[-1])
    return history


def train_icnn(
    inputs: ArrayLike,
    targets: ArrayLike,
    config: TrainingConfig,
    state_dim: int = 0,
    model: IcnnModel | None = None,
) -> tuple[IcnnModel, list[float]]:
    """Fit an ICNN by projected Adam on the mean squared error.

    ``inputs`` rows are raw ``[s; u]`` vectors (``state_dim`` monotone entries
    first). Passing ``model`` continues training from it.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 1:
        inputs = inputs[:, None]
    if inputs.size == 0 or len(inputs) == 0:
        raise EmptyData('training data is empty')
    targets = np.asarray(targets, dtype=np.float64).reshape(len(inputs), -1)
    if model is None:
        input_dim = inputs.shape[1] - state_dim
        model = init_icnn(input_dim, config.widths, targets.shape[1], state_dim, seeded_stream(config.seed, 0))
    else:
        model = model.copy()
    x_hat = expand(model._raw_input(inputs), model.state_dim)
    params = model.params()

    def loss_and_grads(idx):
        xb = x_hat[idx]
        pre, acts = model.forward_cache(xb)
        residual = acts[-1] - targets[idx]
        grads, _ = model.backward(xb, pre, acts, 2.0 * residual / residual.size)
        return float(np.mean(residual ** 2)), grads

    history = fit_parameters(params, model.constrained_names(), loss_and_grads, len(inputs), config, 'icnn')
    return model, history


def rmse(model, inputs: ArrayLike, targets: ArrayLike) -> float:
    pred = model.forward(inputs)
    targets = np.asarray(targets, dtype=np.float64).reshape(pred.shape)
    return float(np.sqrt(np.mean((pred - targets) ** 2)))


def classify_circles(
    points: ArrayLike, labels: ArrayLike, config: TrainingConfig | None = None,
) -> tuple[IcnnModel, list[float]]:
    """Convex classifier for the two-circles data: squared loss on {0, 1} labels.

    The model output is a logit-like score whose sublevel sets are convex.
    """
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if not np.all((labels == 0.0) | (labels == 1.0)):
        raise InvalidParameter('labels must be 0 or 1')
    if len(np.unique(labels)) < 2:
        raise InvalidParameter('classifier needs both classes in the training data')
    config = config or TrainingConfig.from_settings('circles')
    model, history = train_icnn(points, labels, config)
    logger.info('circles classifier trained, final loss %.4g', history[-1] if history else float('nan'))
    return model, history


def classification_accuracy(model: IcnnModel, points: ArrayLike, labels: ArrayLike, threshold: float = 0.5) -> float:
    predicted = (model.forward(points)[:, 0] > threshold).astype(np.float64)
    return float(np.mean(predicted == np.asarray(labels, dtype=np.float64)))
