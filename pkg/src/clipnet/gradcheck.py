"""Finite-difference verification of every differentiable operation.

``gradcheck`` compares reverse-mode gradients against central differences
in float64. ``standard_suite`` runs the op families the engine is built
from over many seeded random shapes and reports the max relative error
per family; anything at or above 1e-4 is a failure.
"""

import numpy as np

from . import functional as F
from . import nn
from .errors import ContractError, ParameterError
from .rng import DropoutRng
from .tensor import Tape, Tensor, backward
from .train import weighted_cross_entropy

TOLERANCE = 1e-4
DEFAULT_EPSILON = 1e-5
DEFAULT_SEEDS = 20


def gradcheck(fn, inputs, epsilon=DEFAULT_EPSILON):
    """Max relative error between tape gradients and central differences.

    ``fn`` must map the float64 input tensors to a scalar tensor. The
    relative error per coordinate uses denominator max(|a|, |n|, 1e-8).
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ParameterError(f"epsilon must be in [1e-7, 1e-3], got {epsilon}")
    for t in inputs:
        if t.dtype != np.float64:
            raise ParameterError(f"gradcheck inputs must be float64, got {t.dtype}")
    tape = Tape()
    for t in inputs:
        t.attach(tape)
    out = fn(*inputs)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ContractError("gradcheck needs fn to return a scalar tensor")
    backward(out)
    analytic = [np.zeros(t.shape) if t.grad is None else np.array(t.grad, dtype=np.float64) for t in inputs]
    detached = [t.detach() for t in inputs]

    def evaluate():
        result = fn(*detached)
        if result.size != 1:
            raise ContractError("gradcheck needs fn to return a scalar tensor")
        return float(result.data)

    max_err = 0.0
    for t, ana in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = evaluate()
            flat[i] = orig - epsilon
            f_minus = evaluate()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = ana_flat[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if err > max_err:
                max_err = err
    return max_err


def _rand(gen, shape, scale=1.0):
    return Tensor((gen.standard_normal(size=shape) * scale).astype(np.float64))


def _projector(gen, shape):
    """Fixed random projection to a scalar; catches permuted/misplaced gradients."""
    proj = Tensor(gen.standard_normal(size=shape).astype(np.float64))

    def scalarize(t):
        return (t * proj).sum()

    return scalarize


def _check_conv2d(seed, impl, epsilon=DEFAULT_EPSILON):
    gen = np.random.default_rng(seed)
    stride = 2 if seed % 2 else 1
    pad = (1, 0) if stride == 2 else 1
    x = _rand(gen, (2, 2, 6, 6))
    w = _rand(gen, (3, 2, 3, 3), scale=0.5)
    b = _rand(gen, (3,), scale=0.5)
    hout = (6 + (2 if stride == 1 else 1) - 3) // stride + 1
    scalarize = _projector(gen, (2, 3, hout, hout))

    def fn(x, w, b):
        return scalarize(F.conv2d(x, w, b, stride=stride, padding=pad, impl=impl))

    return gradcheck(fn, [x, w, b], epsilon)


def _check_causal_conv1d(seed, epsilon=DEFAULT_EPSILON):
    gen = np.random.default_rng(seed)
    dilation = (1, 2, 4)[seed % 3]
    k = 2 + seed % 2
    x = _rand(gen, (2, 3, 7))
    w = _rand(gen, (4, 3, k), scale=0.5)
    b = _rand(gen, (4,), scale=0.5)
    scalarize = _projector(gen, (2, 4, 7))

    def fn(x, w, b):
        return scalarize(F.causal_conv1d(x, w, b, dilation=dilation))

    return gradcheck(fn, [x, w, b], epsilon)


def _check_batchnorm2d(seed, mode, epsilon=DEFAULT_EPSILON):
    gen = np.random.default_rng(seed)
    x = _rand(gen, (3, 4, 2, 2))
    gamma = _rand(gen, (4,), scale=0.5)
    beta = _rand(gen, (4,), scale=0.5)
    rm = gen.standard_normal(4)
    rv = np.abs(gen.standard_normal(4)) + 0.5
    scalarize = _projector(gen, (3, 4, 2, 2))

    def fn(x, gamma, beta):
        mean = Tensor(rm.copy())
        var = Tensor(rv.copy())
        return scalarize(F.batchnorm2d(x, gamma, beta, mean, var, mode))

    return gradcheck(fn, [x, gamma, beta], epsilon)


def _check_linear(seed, epsilon=DEFAULT_EPSILON):
    gen = np.random.default_rng(seed)
    x = _rand(gen, (3, 4))
    w = _rand(gen, (5, 4), scale=0.5)
    b = _rand(gen, (5,), scale=0.5)
    scalarize = _projector(gen, (3, 5))

    def fn(x, w, b):
        return scalarize(F.linear(x, w, b))

    return gradcheck(fn, [x, w, b], epsilon)


def _check_softmax_ce(seed, epsilon=DEFAULT_EPSILON):
    gen = np.random.default_rng(seed)
    logits = _rand(gen, (4, 5), scale=2.0)
    targets = gen.integers(0, 5, size=4)
    weights = np.abs(gen.standard_normal(5)) + 0.2

    def fn(logits):
        return weighted_cross_entropy(logits, targets, weights)

    return gradcheck(fn, [logits], epsilon)


def _check_pointwise_pool(seed, epsilon=DEFAULT_EPSILON):
    gen = np.random.default_rng(seed)
    # Keep values away from relu kinks and maxpool argmax ties.
    x = Tensor((gen.standard_normal(size=(2, 3, 6, 6)) * 2.0 + 0.37).astype(np.float64))
    scalarize = _projector(gen, (2, 3))

    def fn(x):
        h = F.dropout(F.relu(x), 0.2, rng=DropoutRng(seed), mode="train")
        h = F.maxpool2d(h, 2, 2)
        return scalarize(F.global_avgpool2d(h))

    return gradcheck(fn, [x], epsilon)


def _check_temporal_block(seed, epsilon=DEFAULT_EPSILON):
    gen = np.random.default_rng(seed)
    spec = nn.TemporalBlockSpec(
        in_channels=3, out_channels=4, kernel=3, dilation=(1, 2)[seed % 2], dropout_p=0.2
    )
    x = _rand(gen, (2, 3, 6))
    w1 = _rand(gen, (4, 3, 3), scale=0.5)
    b1 = _rand(gen, (4,), scale=0.2)
    w2 = _rand(gen, (4, 4, 3), scale=0.5)
    b2 = _rand(gen, (4,), scale=0.2)
    wm = _rand(gen, (4, 3, 1), scale=0.5)
    bm = _rand(gen, (4,), scale=0.2)
    scalarize = _projector(gen, (2, 4, 6))

    def fn(x, w1, b1, w2, b2, wm, bm):
        store = nn.ParamStore()
        store.add("blk.conv1.weight", w1)
        store.add("blk.conv1.bias", b1)
        store.add("blk.conv2.weight", w2)
        store.add("blk.conv2.bias", b2)
        store.add("blk.match.weight", wm)
        store.add("blk.match.bias", bm)
        out = nn.temporal_block(x, spec, store, "blk", "train", dropout_rng=DropoutRng(seed))
        return scalarize(out)

    return gradcheck(fn, [x, w1, b1, w2, b2, wm, bm], epsilon)


def _check_basic_block2d(seed, epsilon=DEFAULT_EPSILON):
    gen = np.random.default_rng(seed)
    stride = 2 if seed % 2 else 1
    x = _rand(gen, (2, 3, 6, 6))
    w1 = _rand(gen, (3, 3, 3, 3), scale=0.5)
    g1, be1 = _rand(gen, (3,), 0.5), _rand(gen, (3,), 0.5)
    w2 = _rand(gen, (3, 3, 3, 3), scale=0.5)
    g2, be2 = _rand(gen, (3,), 0.5), _rand(gen, (3,), 0.5)
    inputs = [x, w1, g1, be1, w2, g2, be2]
    if stride != 1:
        wp = _rand(gen, (3, 3, 1, 1), scale=0.5)
        gp, bep = _rand(gen, (3,), 0.5), _rand(gen, (3,), 0.5)
        inputs += [wp, gp, bep]
    scalarize = _projector(gen, (2, 3, 6 // stride, 6 // stride))

    def fn(x, w1, g1, be1, w2, g2, be2, wp=None, gp=None, bep=None):
        store = nn.ParamStore()
        store.add("blk.conv1.weight", w1)
        store.add("blk.bn1.gamma", g1)
        store.add("blk.bn1.beta", be1)
        store.add("blk.bn1.running_mean", Tensor(np.zeros(3)), trainable=False)
        store.add("blk.bn1.running_var", Tensor(np.ones(3)), trainable=False)
        store.add("blk.conv2.weight", w2)
        store.add("blk.bn2.gamma", g2)
        store.add("blk.bn2.beta", be2)
        store.add("blk.bn2.running_mean", Tensor(np.zeros(3)), trainable=False)
        store.add("blk.bn2.running_var", Tensor(np.ones(3)), trainable=False)
        if wp is not None:
            store.add("blk.proj.weight", wp)
            store.add("blk.bnp.gamma", gp)
            store.add("blk.bnp.beta", bep)
            store.add("blk.bnp.running_mean", Tensor(np.zeros(3)), trainable=False)
            store.add("blk.bnp.running_var", Tensor(np.ones(3)), trainable=False)
        out = nn.basic_block2d(x, store, "blk", stride, "train")
        return scalarize(out)

    return gradcheck(fn, inputs, epsilon)


_SUITE = {
    "conv2d": lambda seed, eps: _check_conv2d(seed, "im2col", eps),
    "conv2d_direct": lambda seed, eps: _check_conv2d(seed, "direct", eps),
    "causal_conv1d": _check_causal_conv1d,
    "batchnorm2d_train": lambda seed, eps: _check_batchnorm2d(seed, "train", eps),
    "batchnorm2d_eval": lambda seed, eps: _check_batchnorm2d(seed, "eval", eps),
    "linear": _check_linear,
    "softmax_ce": _check_softmax_ce,
    "pointwise_pool": _check_pointwise_pool,
    "temporal_block": _check_temporal_block,
    "basic_block2d": _check_basic_block2d,
}


def suite_ops():
    return list(_SUITE)


def run_op_check(name, seeds=DEFAULT_SEEDS, epsilon=DEFAULT_EPSILON):
    """Max relative error for one op family over the given number of seeds."""
    if name not in _SUITE:
        raise ParameterError(f"unknown gradcheck op {name!r}; known: {', '.join(_SUITE)}")
    check = _SUITE[name]
    return max(check(seed, epsilon) for seed in range(seeds))


def standard_suite(seeds=DEFAULT_SEEDS, ops=None, epsilon=DEFAULT_EPSILON):
    """Run every op family; returns {name: max relative error}."""
    names = suite_ops() if ops is None else list(ops)
    return {name: run_op_check(name, seeds, epsilon) for name in names}
