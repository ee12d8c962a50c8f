"""Dense numeric helpers shared by every toolkit module.

Vectors and matrices are plain float64 numpy arrays. Random streams are
PCG64 generators keyed by ``(seed, stream_id)`` so work split across
rollouts or restarts stays reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .exceptions import InvalidParameter, NonFiniteValue

Vector = NDArray[np.float64]


def as_array(x: ArrayLike, name: str = 'array') -> NDArray[np.float64]:
    arr = np.asarray(x, dtype=np.float64)
    check_finite(arr, name)
    return arr


def check_finite(x: NDArray[np.float64], name: str = 'array') -> None:
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(np.atleast_1d(x)))[0]
        raise NonFiniteValue(f'{name} has a non-finite entry at index {tuple(bad)}')


def relu(x: ArrayLike) -> NDArray[np.float64]:
    """Elementwise max(x, 0)."""
    arr = as_array(x, 'relu input')
    return np.maximum(arr, 0.0)


def relu_grad(x: NDArray[np.float64]) -> NDArray[np.float64]:
    # subgradient at 0 is 0
    return (x > 0.0).astype(np.float64)


def finite_difference_gradient(
    f: Callable[[Vector], float],
    x: ArrayLike,
    h: float = 1e-5,
    relative: bool = False,
) -> Vector:
    """Central-difference gradient of a scalar function.

    With ``relative=True`` the step for coordinate i is ``h * max(1, |x_i|)``.
    """
    if h <= 0:
        raise InvalidParameter(f'finite-difference step must be positive, got {h}')
    x = np.array(as_array(x, 'x'), copy=True)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        step = h * max(1.0, abs(flat[i])) if relative else h
        original = flat[i]
        flat[i] = original + step
        f_plus = float(f(x))
        flat[i] = original - step
        f_minus = float(f(x))
        flat[i] = original
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad.reshape(x.shape)


def relative_error(a: ArrayLike, b: ArrayLike, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


class RngStream:
    """Deterministic random stream identified by ``(seed, stream_id)``."""

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        sequence = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        self._generator = np.random.Generator(np.random.PCG64(sequence))

    def __repr__(self):
        return f'RngStream(seed={self.seed}, stream_id={self.stream_id})'

    def uniform(self, low=0.0, high=1.0, size=None) -> NDArray[np.float64]:
        return self._generator.uniform(low, high, size)

    def gaussian(self, mean=0.0, std=1.0, size=None) -> NDArray[np.float64]:
        return self._generator.normal(mean, std, size)

    def integers(self, low, high=None, size=None):
        return self._generator.integers(low, high, size)

    def permutation(self, n: int) -> NDArray[np.int64]:
        return self._generator.permutation(n)


def seeded_stream(seed: int, stream_id: int = 0) -> RngStream:
    return RngStream(seed, stream_id)


@dataclass
class Adam:
    """Adam over a dict of named arrays, with an optional post-step projection.

    ``projection`` maps a parameter name to a callable applied in place after
    the update; parameters without an entry are left unconstrained.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    projection: Mapping[str, Callable[[NDArray[np.float64]], None]] = field(default_factory=dict)
    t: int = 0
    _m: dict = field(default_factory=dict, repr=False)
    _v: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.lr <= 0:
            raise InvalidParameter(f'learning rate must be positive, got {self.lr}')

    def step(self, params: dict, grads: dict, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for name, grad in grads.items():
            if name not in self._m:
                self._m[name] = np.zeros_like(grad)
                self._v[name] = np.zeros_like(grad)
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            params[name] -= lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            project = self.projection.get(name)
            if project is not None:
                project(params[name])


def clamp_nonnegative(w: NDArray[np.float64]) -> None:
    np.maximum(w, 0.0, out=w)
