"""Per-operation gradient-check cases shared by the unit and acceptance suites.

Each case maps a seed to a list of ``(loss_fn, inputs)`` pairs. Inputs are
drawn away from kinks so central differences are valid.
"""

import numpy as np

from hsfuse import tensor as T
from hsfuse.tensor import Tensor


def leaf(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def away_from(rng, shape, kinks, margin=1e-2, low=-2.0, high=2.0):
    """Random values at least ``margin`` away from every kink."""
    x = rng.uniform(low, high, shape)
    for k in kinks:
        near = np.abs(x - k) < margin
        x[near] = k + np.where(x[near] >= k, margin, -margin) * 2
    return x


def weighted_sum(t, seed):
    # A fixed random linear functional makes every output element matter.
    w = np.random.default_rng(seed + 1000).normal(size=t.shape)
    return T.reduce_sum(T.mul(t, Tensor(w)))


def elementwise(seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng.normal(size=(2, 3, 3)))
    b = leaf(rng.normal(size=(2, 3, 3)))
    c = leaf(rng.normal(size=(1, 3, 3)))  # broadcast over channels
    return [(lambda: weighted_sum(T.add(a, c), seed), (a, c)),
            (lambda: weighted_sum(T.sub(a, b), seed), (a, b)),
            (lambda: weighted_sum(T.mul(a, c), seed), (a, c)),
            (lambda: weighted_sum(T.scale(a, -1.7), seed), (a,))]


def activations(seed):
    rng = np.random.default_rng(seed)
    x = leaf(away_from(rng, (2, 4, 4), [0.0]))
    u = leaf(away_from(rng, (2, 4, 4), [0.0, 1.0], low=-1.0, high=2.0))
    return [(lambda: weighted_sum(T.leaky_relu(x, 0.2), seed), (x,)),
            (lambda: weighted_sum(T.clamp01(u), seed), (u,))]


def softmax(seed):
    x = leaf(np.random.default_rng(seed).normal(size=(3, 3, 4)))
    return [(lambda: weighted_sum(T.softmax(x, axis), seed), (x,)) for axis in ("channel", "spatial")]


def log_and_normalize(seed):
    x = leaf(np.random.default_rng(seed).uniform(0.2, 2.0, (3, 4)))
    return [(lambda: weighted_sum(T.log(x), seed), (x,)),
            (lambda: weighted_sum(T.normalize_sum(x, axis=0), seed), (x,)),
            (lambda: weighted_sum(T.normalize_sum(x), seed), (x,))]


def reductions(seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng.normal(size=(2, 3, 3)))
    b = leaf(rng.normal(size=(3, 3, 3)))
    return [(lambda: weighted_sum(T.concat_channels(a, b), seed), (a, b)),
            (lambda: weighted_sum(T.reduce_sum(a, axis=0, keepdims=True), seed), (a,)),
            (lambda: weighted_sum(T.reduce_sum(a, axis=(1, 2)), seed), (a,)),
            (lambda: T.mean(T.mul(a, a)), (a,))]


def linear_maps(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng.normal(size=(2, 5, 5)))
    k = leaf(rng.normal(size=(3, 2, 3, 3)))
    bias = leaf(rng.normal(size=3))
    w = leaf(rng.normal(size=(2, 4)))
    y = leaf(rng.normal(size=(2, 6, 6)))
    psf = leaf(rng.uniform(0.1, 1.0, (3, 3)))
    return [(lambda: weighted_sum(T.conv2d(x, k, bias, padding=1), seed), (x, k, bias)),
            (lambda: weighted_sum(T.conv2d(x, k), seed), (x, k)),
            (lambda: weighted_sum(T.channel_matmul(x, w), seed), (x, w)),
            (lambda: weighted_sum(T.block_filter(y, psf), seed), (y, psf)),
            (lambda: weighted_sum(T.avg_pool(y, 2), seed), (y,))]


def losses(seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng.uniform(0.05, 0.95, (2, 4, 4)))
    target = rng.uniform(0.05, 0.95, (2, 4, 4))
    target = np.where(np.abs(target - a.data) < 1e-2, target + 0.05, target)
    mask = (rng.uniform(size=(4, 4)) < 0.7).astype(float)
    mask[0, 0] = 1.0
    return [(lambda: T.l1_loss(a, target), (a,)),
            (lambda: T.l1_loss(a, target, mask=mask), (a,)),
            (lambda: T.kl_div(0.01, a), (a,)),
            (lambda: T.kl_div(0.01, a, mask=mask, reduction="mean"), (a,))]


OP_CASES = {fn.__name__: fn for fn in
            (elementwise, activations, softmax, log_and_normalize, reductions, linear_maps, losses)}


def worst_error(case: str, seed: int) -> float:
    return max(T.gradcheck(fn, inputs) for fn, inputs in OP_CASES[case](seed))
