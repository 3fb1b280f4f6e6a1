"""Differentiable operations for the spatio-temporal classifier.

Convolutions come in two implementations behind one contract: "direct"
is the nested-loop reference used as a test oracle, "im2col" is the fast
path the models run on. Padding arguments accept an int (symmetric) or a
(before, after) pair applied to each spatial axis, which is how strided
layers keep the exact-geometry contract while matching standard
floor-mode convolution arithmetic.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import (
    DegenerateStatisticsError,
    DimensionError,
    GeometryError,
    NumericError,
    ParameterError,
)
from .tensor import Tensor, make_op_output


def _as_pair(padding):
    if isinstance(padding, (tuple, list)):
        before, after = padding
    else:
        before = after = padding
    if before < 0 or after < 0:
        raise ParameterError(f"padding must be non-negative, got {padding}")
    return int(before), int(after)


def _out_extent(size, k, before, after, stride, axis_name):
    span = size + before + after - k
    if span < 0 or span % stride != 0:
        raise GeometryError(
            f"output extent along {axis_name} is not a positive integer: "
            f"({size} + {before} + {after} - {k}) / {stride} + 1"
        )
    return span // stride + 1


def _check_dtype(reference, label_pairs):
    for label, t in label_pairs:
        if t is not None and t.dtype != reference:
            raise DimensionError(f"{label} dtype {t.dtype} does not match input dtype {reference}")


# -- 2D convolution ----------------------------------------------------------


def conv2d(x, weight, bias=None, stride=1, padding=0, impl="im2col"):
    """Cross-correlation of [N,Cin,H,W] with [Cout,Cin,kh,kw] plus bias.

    Output extents must come out as positive integers for the given
    stride/padding, otherwise a GeometryError is raised.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d input must be 4-d, got {x.data.ndim}-d")
    if weight.data.ndim != 4:
        raise DimensionError(f"conv2d weight must be 4-d, got {weight.data.ndim}-d")
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise DimensionError(
            f"conv2d channel mismatch at axis 1: input has {cin}, weight expects {cin_w}"
        )
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(
            f"conv2d bias mismatch at axis 0: got {bias.shape}, expected ({cout},)"
        )
    _check_dtype(x.dtype, [("weight", weight), ("bias", bias)])
    pt, pb = _as_pair(padding)
    pl, pr = pt, pb
    hout = _out_extent(h, kh, pt, pb, stride, "height")
    wout = _out_extent(w, kw, pl, pr, stride, "width")
    if impl == "im2col":
        return _conv2d_im2col(x, weight, bias, stride, (pt, pb, pl, pr), hout, wout)
    if impl == "direct":
        return _conv2d_direct(x, weight, bias, stride, (pt, pb, pl, pr), hout, wout)
    raise ParameterError(f"unknown conv2d impl {impl!r}")


def _pad_nchw(arr, pt, pb, pl, pr, value=0.0):
    if pt == pb == pl == pr == 0:
        return arr
    return np.pad(
        arr, ((0, 0), (0, 0), (pt, pb), (pl, pr)), mode="constant", constant_values=value
    )


def _conv2d_im2col(x, weight, bias, stride, pads, hout, wout):
    pt, pb, pl, pr = pads
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    xp = _pad_nchw(x.data, pt, pb, pl, pr)
    sn, sc, sh, sw = xp.strides
    windows = as_strided(
        xp,
        shape=(n, hout, wout, cin, kh, kw),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw),
    )
    cols = windows.reshape(n * hout * wout, cin * kh * kw)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(n, hout, wout, cout).transpose(0, 3, 1, 2))
    cols = np.ascontiguousarray(cols)

    def backward_fn(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * hout * wout, cout)
        dw = (gmat.T @ cols).reshape(weight.shape)
        dcols = (gmat @ wmat).reshape(n, hout, wout, cin, kh, kw)
        dxp = np.zeros((n, cin, h + pt + pb, w + pl + pr), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + hout * stride : stride, j : j + wout * stride : stride] += (
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        dx = dxp[:, :, pt : pt + h, pl : pl + w]
        db = None if bias is None else gmat.sum(axis=0)
        return dx, dw, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    if bias is None:
        return make_op_output("conv2d", out, inputs, lambda g: backward_fn(g)[:2])
    return make_op_output("conv2d", out, inputs, backward_fn)


def _conv2d_direct(x, weight, bias, stride, pads, hout, wout):
    pt, pb, pl, pr = pads
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    xp = _pad_nchw(x.data, pt, pb, pl, pr)
    out = np.zeros((n, cout, hout, wout), dtype=x.dtype)
    for ni in range(n):
        for co in range(cout):
            for oh in range(hout):
                for ow in range(wout):
                    window = xp[ni, :, oh * stride : oh * stride + kh, ow * stride : ow * stride + kw]
                    out[ni, co, oh, ow] = np.sum(window * weight.data[co])
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward_fn(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(weight.data)
        for ni in range(n):
            for co in range(cout):
                for oh in range(hout):
                    for ow in range(wout):
                        hs, ws = oh * stride, ow * stride
                        window = xp[ni, :, hs : hs + kh, ws : ws + kw]
                        dxp[ni, :, hs : hs + kh, ws : ws + kw] += g[ni, co, oh, ow] * weight.data[co]
                        dw[co] += g[ni, co, oh, ow] * window
        dx = dxp[:, :, pt : pt + h, pl : pl + w]
        db = None if bias is None else g.sum(axis=(0, 2, 3))
        return dx, dw, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    if bias is None:
        return make_op_output("conv2d", out, inputs, lambda g: backward_fn(g)[:2])
    return make_op_output("conv2d", out, inputs, backward_fn)


# -- dilated causal 1D convolution -------------------------------------------


def causal_conv1d(x, weight, bias=None, dilation=1):
    """Causal conv over [N,Cin,L]: output at t sees inputs at times <= t only.

    Left zero-padding of (k-1)*dilation keeps the output length equal to
    the input length; k may exceed L.
    """
    if x.data.ndim != 3:
        raise DimensionError(f"causal_conv1d input must be 3-d, got {x.data.ndim}-d")
    if dilation < 1:
        raise ParameterError(f"dilation must be >= 1, got {dilation}")
    n, cin, length = x.shape
    cout, cin_w, k = weight.shape
    if cin != cin_w:
        raise DimensionError(
            f"causal_conv1d channel mismatch at axis 1: input has {cin}, weight expects {cin_w}"
        )
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(
            f"causal_conv1d bias mismatch at axis 0: got {bias.shape}, expected ({cout},)"
        )
    _check_dtype(x.dtype, [("weight", weight), ("bias", bias)])
    pad = (k - 1) * dilation
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, 0)))
    out = np.zeros((n, cout, length), dtype=x.dtype)
    wdata = weight.data
    for j in range(k):
        seg = xp[:, :, j * dilation : j * dilation + length]
        out += np.einsum("oc,ncl->nol", wdata[:, :, j], seg, optimize=True)
    if bias is not None:
        out += bias.data[None, :, None]

    def backward_fn(g):
        dw = np.zeros_like(wdata)
        dxp = np.zeros_like(xp)
        for j in range(k):
            seg = xp[:, :, j * dilation : j * dilation + length]
            dw[:, :, j] = np.einsum("nol,ncl->oc", g, seg, optimize=True)
            dxp[:, :, j * dilation : j * dilation + length] += np.einsum(
                "oc,nol->ncl", wdata[:, :, j], g, optimize=True
            )
        dx = dxp[:, :, pad:]
        db = None if bias is None else g.sum(axis=(0, 2))
        return dx, dw, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    if bias is None:
        return make_op_output("causal_conv1d", out, inputs, lambda g: backward_fn(g)[:2])
    return make_op_output("causal_conv1d", out, inputs, backward_fn)


# -- batch normalization ------------------------------------------------------


def batchnorm2d(x, gamma, beta, running_mean, running_var, mode, momentum=0.1, epsilon=1e-5):
    """Per-channel normalization of [N,C,H,W].

    Train mode normalizes by batch statistics and folds them into the
    running buffers as (1-momentum)*old + momentum*batch; eval mode uses
    the running buffers. The buffers are plain tensors mutated in place
    and never receive gradients.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"batchnorm2d input must be 4-d, got {x.data.ndim}-d")
    n, c, h, w = x.shape
    for label, t in (("gamma", gamma), ("beta", beta)):
        if t.shape != (c,):
            raise DimensionError(f"batchnorm2d {label} mismatch at axis 0: got {t.shape}, expected ({c},)")
    _check_dtype(x.dtype, [("gamma", gamma), ("beta", beta)])
    if mode == "train":
        count = n * h * w
        if count < 2:
            raise DegenerateStatisticsError(
                "batchnorm2d in train mode needs at least 2 elements per channel"
            )
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean.data *= 1.0 - momentum
        running_mean.data += momentum * mean.astype(running_mean.dtype)
        running_var.data *= 1.0 - momentum
        running_var.data += momentum * var.astype(running_var.dtype)
    elif mode == "eval":
        mean = running_mean.data.astype(x.dtype)
        var = running_var.data.astype(x.dtype)
    else:
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    invstd = 1.0 / np.sqrt(var + epsilon)
    xhat = (x.data - mean[None, :, None, None]) * invstd[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    if mode == "train":

        def backward_fn(g):
            count = n * h * w
            dbeta = g.sum(axis=(0, 2, 3))
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dxhat = g * gamma.data[None, :, None, None]
            sum_dxhat = dxhat.sum(axis=(0, 2, 3))
            sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))
            dx = (invstd[None, :, None, None] / count) * (
                count * dxhat
                - sum_dxhat[None, :, None, None]
                - xhat * sum_dxhat_xhat[None, :, None, None]
            )
            return dx.astype(x.dtype, copy=False), dgamma, dbeta

    else:

        def backward_fn(g):
            dbeta = g.sum(axis=(0, 2, 3))
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dx = g * (gamma.data * invstd)[None, :, None, None]
            return dx.astype(x.dtype, copy=False), dgamma, dbeta

    return make_op_output("batchnorm2d", out.astype(x.dtype, copy=False), (x, gamma, beta), backward_fn)


# -- pointwise and pooling ----------------------------------------------------


def relu(x):
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return make_op_output("relu", out, (x,), lambda g: (g * mask,))


def dropout(x, p, rng=None, mode="train"):
    """Zero each element with probability p and rescale survivors by 1/(1-p).

    Eval mode (and p == 0) is the exact identity. The mask comes from the
    counter-based ``rng`` stream so seeded runs reproduce bit-for-bit.
    """
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ParameterError("train-mode dropout with p > 0 needs an rng stream")
    keep = rng.mask(x.shape, p)
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    out = np.where(keep, x.data * scale, 0).astype(x.dtype, copy=False)
    return make_op_output("dropout", out, (x,), lambda g: (np.where(keep, g * scale, 0),))


def maxpool2d(x, k, stride, padding=0):
    """Max pooling with floor geometry; padded cells hold -inf."""
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2d input must be 4-d, got {x.data.ndim}-d")
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    n, c, h, w = x.shape
    pt, pb = _as_pair(padding)
    if k > h + pt + pb or k > w + pt + pb:
        raise GeometryError(f"maxpool2d window {k} exceeds padded input {h + pt + pb}x{w + pt + pb}")
    hout = _out_extent(h, k, pt, pb, stride, "height")
    wout = _out_extent(w, k, pt, pb, stride, "width")
    xp = _pad_nchw(x.data, pt, pb, pt, pb, value=-np.inf)
    sn, sc, sh, sw = xp.strides
    windows = as_strided(
        xp,
        shape=(n, c, hout, wout, k, k),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
    ).reshape(n, c, hout, wout, k * k)
    flat_arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, flat_arg[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(out)

    def backward_fn(g):
        dxp = np.zeros_like(xp)
        ni, ci, hi, wi = np.ogrid[0:n, 0:c, 0:hout, 0:wout]
        rows = hi * stride + flat_arg // k
        cols = wi * stride + flat_arg % k
        np.add.at(dxp, (ni, ci, rows, cols), g)
        return (dxp[:, :, pt : pt + h, pt : pt + w],)

    return make_op_output("maxpool2d", out, (x,), backward_fn)


def subsample2d(x, stride):
    """Keep every stride-th row and column starting at (0, 0).

    Used by projection shortcuts so a 1x1 kernel never has to sample
    padding: slicing applies the floor rule, the conv stays exact.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"subsample2d input must be 4-d, got {x.data.ndim}-d")
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    if stride == 1:
        return x
    out = np.ascontiguousarray(x.data[:, :, ::stride, ::stride])

    def backward_fn(g):
        dx = np.zeros(x.shape, dtype=g.dtype)
        dx[:, :, ::stride, ::stride] = g
        return (dx,)

    return make_op_output("subsample2d", out, (x,), backward_fn)


def global_avgpool2d(x):
    """Mean over the spatial axes: [N,C,H,W] -> [N,C]."""
    if x.data.ndim != 4:
        raise DimensionError(f"global_avgpool2d input must be 4-d, got {x.data.ndim}-d")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward_fn(g):
        scale = np.asarray(1.0 / (h * w), dtype=g.dtype)
        return (np.broadcast_to(g[:, :, None, None] * scale, (n, c, h, w)).copy(),)

    return make_op_output("global_avgpool2d", out.astype(x.dtype, copy=False), (x,), backward_fn)


def flatten(x):
    """Collapse all axes after the batch axis: [N,...] -> [N,prod]."""
    if x.data.ndim < 1:
        raise DimensionError("flatten needs at least a batch axis")
    n = x.shape[0]
    return x.reshape((n, -1))


# -- linear and softmax -------------------------------------------------------


def linear(x, weight, bias=None):
    """Affine map [N,F] @ [O,F]^T + [O]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError(
            f"linear expects 2-d input and weight, got {x.data.ndim}-d and {weight.data.ndim}-d"
        )
    n, f = x.shape
    o, f_w = weight.shape
    if f != f_w:
        raise DimensionError(f"linear mismatch at axis 1: input has {f}, weight expects {f_w}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"linear bias mismatch at axis 0: got {bias.shape}, expected ({o},)")
    _check_dtype(x.dtype, [("weight", weight), ("bias", bias)])
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward_fn(g):
        dx = g @ weight.data
        dw = g.T @ x.data
        db = None if bias is None else g.sum(axis=0)
        return dx, dw, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    if bias is None:
        return make_op_output("linear", out, inputs, lambda g: backward_fn(g)[:2])
    return make_op_output("linear", out, inputs, backward_fn)


def softmax(x):
    """Row-wise softmax of [N,K], computed with max subtraction."""
    if x.data.ndim != 2:
        raise DimensionError(f"softmax input must be 2-d, got {x.data.ndim}-d")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax input contains non-finite values")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return make_op_output("softmax", y.astype(x.dtype, copy=False), (x,), backward_fn)


# -- sequence helpers ---------------------------------------------------------


def last_step(x):
    """Pick the final time index of [N,C,L] -> [N,C]."""
    if x.data.ndim != 3:
        raise DimensionError(f"last_step input must be 3-d, got {x.data.ndim}-d")
    n, c, length = x.shape
    out = np.ascontiguousarray(x.data[:, :, -1])

    def backward_fn(g):
        dx = np.zeros((n, c, length), dtype=g.dtype)
        dx[:, :, -1] = g
        return (dx,)

    return make_op_output("last_step", out, (x,), backward_fn)


def mean_over_time(x):
    """Mean over the time axis of [N,L,F] -> [N,F]; order-invariant."""
    if x.data.ndim != 3:
        raise DimensionError(f"mean_over_time input must be 3-d, got {x.data.ndim}-d")
    n, length, f = x.shape
    out = x.data.mean(axis=1)

    def backward_fn(g):
        scale = np.asarray(1.0 / length, dtype=g.dtype)
        return (np.broadcast_to(g[:, None, :] * scale, (n, length, f)).copy(),)

    return make_op_output("mean_over_time", out.astype(x.dtype, copy=False), (x,), backward_fn)
