"""Falsifiable checks behind the convexity and representation claims.

Each suite returns a ``VerificationReport``; a failing check is report
content, not an exception.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidParameter, UnsupportedArchitecture
from .icnn import IcnnModel, init_icnn, mse_loss_and_grads, negative_weights, relu_count
from .icrnn import IcrnnModel, icrnn_bptt, icrnn_grad_actions, init_icrnn
from .maxaffine import MaxAffine, compile_to_icnn, enumerate_pieces
from .numeric import finite_difference_gradient, relative_error, seeded_stream

logger = logging.getLogger(__name__)

CONVEXITY_TOL = 1e-8
GRADIENT_TOL = 1e-4
EXACTNESS_TOL = 1e-9


@dataclass
class VerificationReport:
    suite: str
    passed: bool
    max_violation: float
    samples: int
    offending: dict | None = None
    negative_weights: list = field(default_factory=list)
    details: dict = field(default_factory=dict)


def _chunks(n, size=10_000):
    for start in range(0, n, size):
        yield start, min(n, start + size)


def _point_dim(target) -> int:
    if isinstance(target, MaxAffine):
        return target.input_dim
    if isinstance(target, IcnnModel):
        return target.raw_dim
    if isinstance(target, IcrnnModel):
        return (target.window + 1) * (target.state_dim + target.action_dim)
    raise InvalidParameter(f'cannot verify a {type(target).__name__}')


def _per_output(target, x):
    if isinstance(target, IcnnModel):
        return target.forward(x)
    if isinstance(target, IcrnnModel):
        length = target.window + 1
        seq = x.reshape(len(x), length, -1)
        x_hat = np.concatenate([seq, -seq[..., target.state_dim:]], axis=-1)
        y, _ = target.forward_cache(x_hat)
        return y[:, -1]
    return target.evaluate(x)[:, None]


def convexity(target, samples: int = 100_000, seed: int = 0, radius: float = 2.0) -> VerificationReport:
    """Midpoint convexity over random pairs in ``[−radius, radius]^d`` plus the weight-sign audit.

    For recurrent models the points are whole ``[s; u]`` sequences of
    ``n_w + 1`` frames and the checked map is the last output.
    """
    dim = _point_dim(target)
    rng = seeded_stream(seed, 0)
    worst, offending = -np.inf, None
    for lo, hi in _chunks(samples):
        a = rng.uniform(-radius, radius, (hi - lo, dim))
        b = rng.uniform(-radius, radius, (hi - lo, dim))
        gap = _per_output(target, (a + b) / 2.0) - (_per_output(target, a) + _per_output(target, b)) / 2.0
        gap = gap.max(axis=-1)
        i = int(np.argmax(gap))
        if gap[i] > worst:
            worst, offending = float(gap[i]), {'a': a[i].tolist(), 'b': b[i].tolist()}
    negatives = [] if isinstance(target, MaxAffine) else negative_weights(target)
    passed = worst <= CONVEXITY_TOL and not negatives
    logger.info('convexity: max violation %.3g over %d pairs, %d negative weights', worst, samples, len(negatives))
    return VerificationReport(
        'convexity', passed, max(worst, 0.0), samples,
        offending if worst > CONVEXITY_TOL else None,
        [{'name': n, 'index': list(idx), 'value': v} for n, idx, v in negatives],
    )


def _param_check(params, loss_fn, grads, rng, entries):
    """Compare analytic parameter gradients with central differences on sampled entries."""
    worst = 0.0
    names = sorted(params)
    for _ in range(entries):
        name = names[int(rng.integers(len(names)))]
        arr = params[name]
        idx = tuple(int(rng.integers(n)) for n in arr.shape)
        original = arr[idx]

        def f(v, arr=arr, idx=idx):
            arr[idx] = v[0]
            return loss_fn()

        numeric = finite_difference_gradient(f, np.array([original]), relative=True)[0]
        arr[idx] = original
        worst = max(worst, relative_error(grads[name][idx], numeric, floor=1e-6))
    return worst


def gradients(target, samples: int = 100, seed: int = 0) -> VerificationReport:
    """Analytic input, parameter and BPTT gradients against central differences."""
    rng = seeded_stream(seed, 0)
    worst_input, worst_param, worst_point = 0.0, 0.0, None
    if isinstance(target, MaxAffine):
        target = compile_to_icnn(target)
    if not isinstance(target, (IcnnModel, IcrnnModel)):
        raise InvalidParameter(f'cannot check gradients of a {type(target).__name__}')
    model = target.copy()
    if isinstance(model, IcnnModel):
        for _ in range(samples):
            x = rng.uniform(-2.0, 2.0, model.raw_dim)
            g = model.grad_input(x)
            fd = finite_difference_gradient(lambda z: float(model.forward(z).sum()), x, relative=True)
            err = relative_error(g, fd, floor=1e-6)
            if err > worst_input:
                worst_input, worst_point = err, x.tolist()
        inputs = rng.uniform(-2.0, 2.0, (8, model.raw_dim))
        targets = rng.gaussian(0.0, 1.0, (8, model.output_dim))
        _, grads = mse_loss_and_grads(model, inputs, targets)
        worst_param = _param_check(
            model.params(), lambda: mse_loss_and_grads(model, inputs, targets)[0], grads, rng, samples,
        )
    elif isinstance(model, IcrnnModel):
        length = max(model.window + 1, 2)
        for _ in range(samples):
            s = rng.uniform(-2.0, 2.0, (length, model.state_dim))
            u = rng.uniform(-2.0, 2.0, (length, model.action_dim))
            g = icrnn_grad_actions(model, s, u)

            def total(flat, s=s):
                x_hat = model.assemble(s, flat.reshape(length, model.action_dim))[None]
                return float(model.forward_cache(x_hat)[0].sum())

            fd = finite_difference_gradient(total, u.reshape(-1), relative=True).reshape(u.shape)
            err = relative_error(g, fd, floor=1e-6)
            if err > worst_input:
                worst_input, worst_point = err, u.tolist()
        seqs = rng.uniform(-1.0, 1.0, (4, length, model.input_dim))
        seqs[..., model.state_dim + model.action_dim:] = -seqs[..., model.state_dim:model.state_dim + model.action_dim]
        targets = rng.gaussian(0.0, 1.0, (4, length, model.output_dim))
        _, grads = icrnn_bptt(model, seqs, targets)
        worst_param = _param_check(
            model.params(), lambda: icrnn_bptt(model, seqs, targets)[0], grads, rng, samples,
        )
    worst = max(worst_input, worst_param)
    passed = worst < GRADIENT_TOL
    logger.info('gradients: input rel. err %.3g, parameter rel. err %.3g', worst_input, worst_param)
    return VerificationReport(
        'gradients', passed, worst, samples,
        {'point': worst_point} if not passed and worst_input >= worst_param else None,
        details={'input_error': worst_input, 'parameter_error': worst_param},
    )


def theorem1(target: MaxAffine, samples: int = 100_000, seed: int = 0, radius: float = 10.0) -> VerificationReport:
    """Compiled network equals the max-affine function and uses exactly ``K − 1`` ReLUs."""
    if not isinstance(target, MaxAffine):
        raise InvalidParameter('the compilation check needs a max-affine target')
    model = compile_to_icnn(target)
    rng = seeded_stream(seed, 0)
    worst, offending = 0.0, None
    for lo, hi in _chunks(samples):
        x = rng.uniform(-radius, radius, (hi - lo, target.input_dim))
        dev = np.abs(model.forward(x)[:, 0] - target.evaluate(x))
        i = int(np.argmax(dev))
        if dev[i] > worst:
            worst, offending = float(dev[i]), {'x': x[i].tolist()}
    relus = relu_count(model)
    passed = worst < EXACTNESS_TOL and relus == target.n_pieces - 1 and not negative_weights(model)
    return VerificationReport(
        'theorem1', passed, worst, samples, offending if worst >= EXACTNESS_TOL else None,
        details={'pieces': target.n_pieces, 'relu_count': relus},
    )


def theorem2(target: IcnnModel, samples: int = 10_000, seed: int = 0, radius: float = 2.0) -> VerificationReport:
    """Enumerated ``2^K`` pieces bound the network from below and their max reproduces it."""
    if not isinstance(target, IcnnModel):
        raise UnsupportedArchitecture('piece enumeration needs a one-hidden-layer ICNN target')
    pieces = enumerate_pieces(target)
    k = target.widths[0]
    rng = seeded_stream(seed, 0)
    worst, above, offending = 0.0, 0.0, None
    for lo, hi in _chunks(samples):
        x = rng.uniform(-radius, radius, (hi - lo, target.input_dim))
        f = target.forward(x)[:, 0]
        values = pieces.affine_values(x)
        dev = np.abs(values.max(axis=1) - f)
        above = max(above, float((values - f[:, None]).max()))
        i = int(np.argmax(dev))
        if dev[i] > worst:
            worst, offending = float(dev[i]), {'x': x[i].tolist()}
    passed = worst < EXACTNESS_TOL and above <= EXACTNESS_TOL and pieces.n_pieces == 2 ** k
    return VerificationReport(
        'theorem2', passed, max(worst, above), samples, offending if not passed else None,
        details={'hidden_units': k, 'pieces': pieces.n_pieces},
    )


SUITES = {
    'convexity': convexity,
    'gradients': gradients,
    'theorem1': theorem1,
    'theorem2': theorem2,
}


def run_suite(suite: str, target, samples: int | None = None, seed: int = 0) -> VerificationReport:
    if suite not in SUITES:
        raise InvalidParameter(f'unknown suite {suite!r}; expected one of {sorted(SUITES)}')
    kwargs = {'seed': seed}
    if samples is not None:
        kwargs['samples'] = samples
    return SUITES[suite](target, **kwargs)


DEFAULT_TARGETS = {
    'convexity': 'icnn',
    'gradients': 'icnn',
    'theorem1': 'maxaffine',
    'theorem2': 'icnn',
}


def random_target(kind: str, pieces: int = 8, dim: int = 3, seed: int = 0):
    """A random instance to run a suite on when no model file is given.

    ICNNs have one hidden layer of ``pieces`` units and zero passthrough, so
    every suite accepts them.
    """
    rng = seeded_stream(seed, 500)
    if kind == 'maxaffine':
        return MaxAffine(rng.gaussian(0.0, 1.0, (pieces, dim)), rng.gaussian(0.0, 1.0, pieces))
    if kind == 'icnn':
        model = init_icnn(dim, [pieces], rng=rng)
        model.passthrough[0][:] = 0.0
        model.biases[0][:] = rng.gaussian(0.0, 1.0, pieces)
        return model
    if kind == 'icrnn':
        return init_icrnn(1, dim, pieces, window=3, rng=rng)
    raise InvalidParameter(f'no random {kind!r} target; expected icnn, icrnn or maxaffine')
