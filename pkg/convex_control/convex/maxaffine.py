"""Max-of-affine functions and their exact ReLU-network counterparts."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike
from scipy.linalg import lstsq

from .exceptions import DimensionMismatch, EmptyData, InvalidParameter, UnsupportedArchitecture
from .icnn import IcnnModel
from .numeric import as_array, seeded_stream

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class MaxAffine:
    """``x -> max_i (a_i · x + b_i)``; ``slopes`` is (K, d), ``intercepts`` is (K,)."""

    slopes: np.ndarray
    intercepts: np.ndarray

    def __post_init__(self):
        self.slopes = as_array(self.slopes, 'slopes')
        self.intercepts = as_array(self.intercepts, 'intercepts').reshape(-1)
        if self.slopes.ndim == 1:
            self.slopes = self.slopes[:, None]
        if len(self.slopes) == 0:
            raise EmptyData('a max-affine function needs at least one piece')
        if self.slopes.ndim != 2 or len(self.intercepts) != len(self.slopes):
            raise DimensionMismatch(
                f'{len(self.slopes)} slopes but {len(self.intercepts)} intercepts'
            )

    @classmethod
    def from_pieces(cls, pieces) -> 'MaxAffine':
        slopes = [np.atleast_1d(np.asarray(a, dtype=np.float64)) for a, _ in pieces]
        intercepts = [float(b) for _, b in pieces]
        if not slopes:
            raise EmptyData('a max-affine function needs at least one piece')
        return cls(np.vstack(slopes), np.asarray(intercepts))

    @property
    def kind(self) -> str:
        return 'maxaffine'

    @property
    def n_pieces(self) -> int:
        return len(self.slopes)

    @property
    def input_dim(self) -> int:
        return self.slopes.shape[1]

    def pieces(self) -> list[tuple[np.ndarray, float]]:
        return [(a.copy(), float(b)) for a, b in zip(self.slopes, self.intercepts)]

    def affine_values(self, x: ArrayLike) -> np.ndarray:
        x = as_array(x, 'x')
        if x.ndim == 0:
            x = x.reshape(1)
        if x.shape[-1] != self.input_dim:
            raise DimensionMismatch(f'expected input of size {self.input_dim}, got {x.shape[-1]}')
        return x @ self.slopes.T + self.intercepts

    def evaluate(self, x: ArrayLike):
        values = self.affine_values(x)
        out = values.max(axis=-1)
        return float(out) if out.ndim == 0 else out

    def argmax(self, x: ArrayLike):
        # np.argmax returns the first maximal index
        out = np.argmax(self.affine_values(x), axis=-1)
        return int(out) if np.ndim(out) == 0 else out


def maxaffine_eval(m: MaxAffine, x: ArrayLike):
    return m.evaluate(x)


def _split(a: np.ndarray) -> np.ndarray:
    """Nonnegative weights on ``[x; −x]`` reproducing ``a · x``."""
    return np.concatenate([np.maximum(a, 0.0), np.maximum(-a, 0.0)])[None, :]


def compile_to_icnn(m: MaxAffine) -> IcnnModel:
    """Exact nonnegative-weight network for ``m`` using ``K − 1`` ReLUs.

    Folds ``max(ℓ_1, …, ℓ_K)`` left to right with
    ``max(p, ℓ_{i+1}) = ℓ_{i+1} + ReLU(p − ℓ_{i+1})``; every layer after the
    first carries the running maximum through a unit weight and injects the
    affine difference through the passthrough on ``[x; −x]``.
    """
    a, b = m.slopes, m.intercepts
    d, k = m.input_dim, m.n_pieces
    if k == 1:
        return IcnnModel(d, [_split(a[0])], [], [b[:1].copy()])
    weights = [_split(a[0] - a[1])]
    passthrough = []
    biases = [np.array([b[0] - b[1]])]
    for i in range(1, k - 1):
        weights.append(np.ones((1, 1)))
        passthrough.append(_split(a[i] - a[i + 1]))
        biases.append(np.array([b[i] - b[i + 1]]))
    weights.append(np.ones((1, 1)))
    passthrough.append(_split(a[-1]))
    biases.append(np.array([b[-1]]))
    return IcnnModel(d, weights, passthrough, biases)


def enumerate_pieces(model: IcnnModel) -> MaxAffine:
    """All ``2^K`` activation patterns of a one-hidden-layer ICNN as affine pieces.

    Piece ``j`` switches hidden unit ``i`` off when bit ``i`` of ``j`` is set,
    so piece 0 has every unit active. Duplicates are kept.
    """
    if model.depth != 2:
        raise UnsupportedArchitecture(
            f'piece enumeration needs exactly one hidden layer, model has {model.depth - 1}'
        )
    if model.state_dim:
        raise UnsupportedArchitecture('piece enumeration needs a model without a monotone state block')
    if model.output_dim != 1:
        raise UnsupportedArchitecture('piece enumeration needs a scalar output')
    if np.any(model.passthrough[0] != 0.0):
        raise UnsupportedArchitecture(
            'piece enumeration needs zero passthrough weights; only the single-layer form is supported'
        )
    out_w = model.weights[1][0]
    if np.any(out_w < 0.0):
        raise UnsupportedArchitecture('piece enumeration needs nonnegative output weights')
    d = model.input_dim
    w1 = model.weights[0]
    unit_slopes = w1[:, :d] - w1[:, d:]
    k = len(out_w)
    codes = np.arange(2 ** k)[:, None]
    active = 1.0 - ((codes >> np.arange(k)) & 1)
    slopes = active @ (out_w[:, None] * unit_slopes)
    intercepts = active @ (out_w * model.biases[0]) + model.biases[1][0]
    logger.debug('enumerated %d pieces from %d hidden units', len(slopes), k)
    return MaxAffine(slopes, intercepts)


def deduplicate(m: MaxAffine) -> MaxAffine:
    """Drop pieces whose coefficients exactly repeat an earlier piece."""
    rows = np.hstack([m.slopes, m.intercepts[:, None]])
    _, first = np.unique(rows, axis=0, return_index=True)
    keep = np.sort(first)
    return MaxAffine(m.slopes[keep], m.intercepts[keep])


def _lstsq_piece(x1: np.ndarray, y: np.ndarray) -> np.ndarray:
    coef, *_ = lstsq(x1, y)
    return coef


def _reseed(x: np.ndarray, labels: np.ndarray, residual: np.ndarray, k: int, size: int) -> np.ndarray:
    """Give each empty cell the ``size`` points nearest the worst-fit point not yet moved."""
    labels = labels.copy()
    moved = np.zeros(len(x), dtype=bool)
    order = np.argsort(-np.abs(residual), kind='stable')
    for cell in np.flatnonzero(np.bincount(labels, minlength=k) == 0):
        free = order[~moved[order]]
        if len(free) == 0:
            break
        distance = ((x - x[free[0]]) ** 2).sum(axis=1)
        distance[moved] = np.inf
        near = np.argsort(distance, kind='stable')[:size]
        labels[near] = cell
        moved[near] = True
    return labels


def _alternate(x, x1, y, labels, k, iterations):
    """Best iterate of the partition/refit loop started from ``labels``."""
    best, best_rmse = None, np.inf
    size = max(1, min(x1.shape[1], len(x) // k))
    for _ in range(max(1, iterations)):
        cells = np.unique(labels)
        coefs = np.vstack([_lstsq_piece(x1[labels == c], y[labels == c]) for c in cells])
        values = x1 @ coefs.T
        residual = values.max(axis=1) - y
        err = float(np.sqrt(np.mean(residual ** 2)))
        if err < best_rmse:
            best, best_rmse = MaxAffine(coefs[:, :-1], coefs[:, -1]), err
        new_labels = cells[np.argmax(values, axis=1)]
        if len(np.unique(new_labels)) < k:
            new_labels = _reseed(x, new_labels, residual, k, size)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return best, best_rmse


def fit_cpl(
    inputs: ArrayLike,
    targets: ArrayLike,
    k: int,
    iterations: int = 50,
    seed: int = 0,
    restarts: int = 5,
    warm_start: MaxAffine | None = None,
) -> MaxAffine:
    """Least-squares convex piecewise-linear fit by alternating partition and refit.

    Each restart seeds the partition from ``k`` random data points (nearest
    point wins), then alternates a least-squares fit per cell with
    reassignment to the maximal piece. A cell that loses all its points is
    re-seeded around the worst-fit point, so the fit keeps ``k`` pieces
    while the data allow it. The best iterate by RMSE over all restarts is
    returned.

    ``warm_start`` (at most ``k`` pieces) adds one more restart from its
    partition and competes as a candidate itself, so refitting with more
    pieces never does worse than the fit it started from.
    """
    x = as_array(inputs, 'inputs')
    if x.ndim == 1:
        x = x[:, None]
    y = as_array(targets, 'targets').reshape(-1)
    n = len(x)
    if n == 0:
        raise EmptyData('cannot fit a max-affine function to no data')
    if len(y) != n:
        raise DimensionMismatch(f'{n} inputs but {len(y)} targets')
    if k < 1 or k > n:
        raise InvalidParameter(f'piece count must be in [1, {n}], got {k}')
    x1 = np.hstack([x, np.ones((n, 1))])
    starts = []
    best, best_rmse = None, np.inf
    if warm_start is not None:
        if warm_start.input_dim != x.shape[1] or warm_start.n_pieces > k:
            raise InvalidParameter(
                f'warm start needs input size {x.shape[1]} and at most {k} pieces, '
                f'got {warm_start.input_dim} and {warm_start.n_pieces}'
            )
        best = warm_start
        best_rmse = float(np.sqrt(np.mean((warm_start.evaluate(x) - y) ** 2)))
        starts.append(('warm', warm_start.argmax(x)))
    for restart in range(max(1, restarts)):
        rng = seeded_stream(seed, restart)
        centers = x[rng.permutation(n)[:k]]
        starts.append((restart, np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(axis=-1), axis=1)))
    for name, labels in starts:
        candidate, err = _alternate(x, x1, y, labels, k, iterations)
        logger.debug('cpl restart %s: %d pieces, rmse %.6g', name, candidate.n_pieces, err)
        if err < best_rmse:
            best, best_rmse = candidate, err
    logger.info('cpl fit: %d pieces, rmse %.6g', best.n_pieces, best_rmse)
    return best
