"""Parameter registry, initialization, and the two residual building blocks.

Blocks are pure functions over a ParamStore slice selected by a dotted
name prefix, so the same code serves the full-size and desk-scale models
and every parameter has a stable checkpoint name.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .errors import ConfigurationError, DimensionError, GeometryError, ParameterError
from .tensor import Tensor


class ParamStore:
    """Ordered name -> tensor registry with a trainable/buffer flag per entry.

    Iteration order is insertion order, which fixes checkpoint layout.
    """

    def __init__(self):
        self._entries = {}
        self._flags = {}

    def add(self, name, tensor, trainable=True):
        if name in self._entries:
            raise ParameterError(f"duplicate parameter name {name!r}")
        self._entries[name] = tensor
        self._flags[name] = bool(trainable)
        return tensor

    def __getitem__(self, name):
        try:
            return self._entries[name]
        except KeyError:
            raise ConfigurationError(f"missing parameter {name!r}") from None

    def __contains__(self, name):
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return list(self._entries.items())

    def is_trainable(self, name):
        try:
            return self._flags[name]
        except KeyError:
            raise ConfigurationError(f"missing parameter {name!r}") from None

    def trainable_items(self):
        return [(n, t) for n, t in self._entries.items() if self._flags[n]]

    def buffer_items(self):
        return [(n, t) for n, t in self._entries.items() if not self._flags[n]]

    def attach_all(self, tape):
        for _, t in self.trainable_items():
            t.attach(tape)

    def num_scalars(self, trainable_only=True):
        pairs = self.trainable_items() if trainable_only else self.items()
        return sum(t.size for _, t in pairs)


def he_init(shape, fan_in, rng, dtype=np.float32):
    """Normal draws with variance 2/fan_in from the given generator."""
    if fan_in < 1:
        raise ParameterError(f"fan_in must be >= 1, got {fan_in}")
    data = rng.standard_normal(size=shape) * math.sqrt(2.0 / fan_in)
    return Tensor(data.astype(dtype))


def zeros(shape, dtype=np.float32):
    return Tensor(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=np.float32):
    return Tensor(np.ones(shape, dtype=dtype))


def floor_pad(size, kernel, stride, pad):
    """(before, after) padding pair reproducing floor-mode conv geometry.

    Shrinks the trailing pad so the output extent divides exactly; the
    dropped cells are exactly the ones floor-mode arithmetic never reads.
    """
    r = (size + 2 * pad - kernel) % stride
    after = pad - r
    if after < 0:
        raise GeometryError(
            f"no exact padding for extent {size}, kernel {kernel}, stride {stride}, pad {pad}"
        )
    return (pad, after)


def init_batchnorm(store, prefix, channels, dtype=np.float32):
    store.add(f"{prefix}.gamma", ones((channels,), dtype))
    store.add(f"{prefix}.beta", zeros((channels,), dtype))
    store.add(f"{prefix}.running_mean", zeros((channels,), dtype), trainable=False)
    store.add(f"{prefix}.running_var", ones((channels,), dtype), trainable=False)


def apply_batchnorm(x, store, prefix, mode, momentum=0.1, epsilon=1e-5):
    return F.batchnorm2d(
        x,
        store[f"{prefix}.gamma"],
        store[f"{prefix}.beta"],
        store[f"{prefix}.running_mean"],
        store[f"{prefix}.running_var"],
        mode,
        momentum=momentum,
        epsilon=epsilon,
    )


# -- 2D residual basic block ---------------------------------------------------


def init_basic_block2d(store, prefix, in_channels, out_channels, stride, rng, dtype=np.float32):
    """Register two 3x3 convs with batchnorms, plus a 1x1 projection
    shortcut when the stride or channel count changes."""
    store.add(f"{prefix}.conv1.weight", he_init((out_channels, in_channels, 3, 3), in_channels * 9, rng, dtype))
    init_batchnorm(store, f"{prefix}.bn1", out_channels, dtype)
    store.add(f"{prefix}.conv2.weight", he_init((out_channels, out_channels, 3, 3), out_channels * 9, rng, dtype))
    init_batchnorm(store, f"{prefix}.bn2", out_channels, dtype)
    if stride != 1 or in_channels != out_channels:
        store.add(f"{prefix}.proj.weight", he_init((out_channels, in_channels, 1, 1), in_channels, rng, dtype))
        init_batchnorm(store, f"{prefix}.bnp", out_channels, dtype)


def basic_block2d(x, store, prefix, stride, mode, conv_impl="im2col"):
    """relu(conv-bn-relu-conv-bn(x) + shortcut(x)); shortcut is the identity
    unless stride or channels change, in which case a 1x1 projection with
    its own batchnorm is required in the store."""
    if x.data.ndim != 4:
        raise DimensionError(f"basic_block2d input must be 4-d, got {x.data.ndim}-d")
    w1 = store[f"{prefix}.conv1.weight"]
    out_channels, in_channels = w1.shape[0], w1.shape[1]
    if x.shape[1] != in_channels:
        raise DimensionError(
            f"basic_block2d channel mismatch at axis 1: input has {x.shape[1]}, block expects {in_channels}"
        )
    pad1 = floor_pad(x.shape[2], 3, stride, 1)
    h = F.conv2d(x, w1, None, stride=stride, padding=pad1, impl=conv_impl)
    h = apply_batchnorm(h, store, f"{prefix}.bn1", mode)
    h = F.relu(h)
    h = F.conv2d(h, store[f"{prefix}.conv2.weight"], None, stride=1, padding=1, impl=conv_impl)
    h = apply_batchnorm(h, store, f"{prefix}.bn2", mode)
    if stride == 1 and in_channels == out_channels:
        shortcut = x
    else:
        if f"{prefix}.proj.weight" not in store:
            raise ConfigurationError(
                f"block {prefix!r} changes shape (stride {stride}, {in_channels}->{out_channels}) "
                f"but has no projection parameters"
            )
        s = F.subsample2d(x, stride)
        s = F.conv2d(s, store[f"{prefix}.proj.weight"], None, stride=1, padding=0, impl=conv_impl)
        shortcut = apply_batchnorm(s, store, f"{prefix}.bnp", mode)
    return F.relu(h + shortcut)


def basic_block2d_param_count(in_channels, out_channels, stride):
    """Closed-form trainable scalar count for one 2D basic block."""
    n = out_channels * in_channels * 9 + out_channels * out_channels * 9
    n += 2 * (2 * out_channels)
    if stride != 1 or in_channels != out_channels:
        n += out_channels * in_channels + 2 * out_channels
    return n


# -- dilated causal temporal block ----------------------------------------------


@dataclass(frozen=True)
class TemporalBlockSpec:
    in_channels: int
    out_channels: int
    kernel: int
    dilation: int
    dropout_p: float

    def __post_init__(self):
        if self.kernel < 1:
            raise ParameterError(f"kernel must be >= 1, got {self.kernel}")
        if self.dilation < 1:
            raise ParameterError(f"dilation must be >= 1, got {self.dilation}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ParameterError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    def receptive_field(self):
        return 1 + 2 * (self.kernel - 1) * self.dilation


def init_temporal_block(store, prefix, spec, rng, dtype=np.float32):
    cin, cout, k = spec.in_channels, spec.out_channels, spec.kernel
    store.add(f"{prefix}.conv1.weight", he_init((cout, cin, k), cin * k, rng, dtype))
    store.add(f"{prefix}.conv1.bias", zeros((cout,), dtype))
    store.add(f"{prefix}.conv2.weight", he_init((cout, cout, k), cout * k, rng, dtype))
    store.add(f"{prefix}.conv2.bias", zeros((cout,), dtype))
    if cin != cout:
        store.add(f"{prefix}.match.weight", he_init((cout, cin, 1), cin, rng, dtype))
        store.add(f"{prefix}.match.bias", zeros((cout,), dtype))


def temporal_block(x, spec, store, prefix, mode, dropout_rng=None):
    """y = relu(dropout(relu(cconv2(dropout(relu(cconv1(x)))))) + match(x)).

    match is the identity when channel counts agree, otherwise the 1x1
    channel-matching conv registered under the block prefix.
    """
    if x.data.ndim != 3:
        raise DimensionError(f"temporal_block input must be 3-d, got {x.data.ndim}-d")
    if x.shape[1] != spec.in_channels:
        raise DimensionError(
            f"temporal_block channel mismatch at axis 1: input has {x.shape[1]}, "
            f"spec expects {spec.in_channels}"
        )
    h = F.causal_conv1d(x, store[f"{prefix}.conv1.weight"], store[f"{prefix}.conv1.bias"], dilation=spec.dilation)
    h = F.relu(h)
    h = F.dropout(h, spec.dropout_p, rng=dropout_rng, mode=mode)
    h = F.causal_conv1d(h, store[f"{prefix}.conv2.weight"], store[f"{prefix}.conv2.bias"], dilation=spec.dilation)
    h = F.relu(h)
    h = F.dropout(h, spec.dropout_p, rng=dropout_rng, mode=mode)
    if spec.in_channels == spec.out_channels:
        shortcut = x
    else:
        shortcut = F.causal_conv1d(
            x, store[f"{prefix}.match.weight"], store[f"{prefix}.match.bias"], dilation=1
        )
    return F.relu(h + shortcut)


def temporal_block_param_count(spec):
    """Closed-form trainable scalar count for one temporal block."""
    cin, cout, k = spec.in_channels, spec.out_channels, spec.kernel
    n = cout * cin * k + cout + cout * cout * k + cout
    if cin != cout:
        n += cout * cin + cout
    return n
