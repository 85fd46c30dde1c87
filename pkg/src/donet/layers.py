"""Differentiable layers: convolutions, pooling, batch norm, ConvLSTM, attention gate.

Convolutions are lowered to a single GEMM through an explicit column
buffer laid out as (N*Ho*Wo, C*kH*kW); the transposed convolution is
the adjoint of that lowering, so ``conv2d`` and ``conv_transpose2d`` with a
shared kernel satisfy <conv(x), y> = <x, tconv(y)> up to rounding.
"""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError
from .tensor import (
    DEFAULT_DTYPE,
    Tensor,
    _result,
    add,
    attach_zero_grad,
    channel_scale,
    hadamard,
    relu,
    scale_by_map,
    sigmoid,
    split_channels,
    tanh,
)


def conv_output_size(size, k, stride=1, padding=0, dilation=1):
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _to_rows(x, padding):
    """(N, C, H, W) -> zero-padded channels-last (N, H+2p, W+2p, C).

    Conv outputs are channels-last arrays viewed as NCHW, and elementwise
    ufuncs keep that memory order, so for most inputs this is free.
    """
    xh = x.transpose(0, 2, 3, 1)
    if padding:
        return np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    return np.ascontiguousarray(xh)


def _im2col(xh, kh, kw, stride, dilation, ho, wo):
    """Column buffer of shape (N*Ho*Wo, kH*kW*C) from a padded channels-last array.

    Columns are ordered (i, j, c) so every tap copies a contiguous run of
    channels; kernels are permuted to match with :func:`_taps_last`.
    """
    n, _, _, c = xh.shape
    eh, ew = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    win = sliding_window_view(xh, (eh, ew), axis=(1, 2))
    win = win[:, :stride * (ho - 1) + 1:stride, :stride * (wo - 1) + 1:stride, :,
              ::dilation, ::dilation]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)


def _col2im(cols, shape, hp, wp, stride, dilation):
    """Adjoint of :func:`_im2col`. ``shape`` is (N, Ho, Wo, kH, kW, C)."""
    n, ho, wo, kh, kw, c = shape
    cols = cols.reshape(shape)
    out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(kh):
        r = i * dilation
        for j in range(kw):
            s = j * dilation
            out[:, r:r + hspan:stride, s:s + wspan:stride] += cols[:, :, :, i, j]
    return out


def _taps_last(w):
    """(A, B, kH, kW) -> (A, kH*kW*B), matching the column order of :func:`_im2col`."""
    a, b, kh, kw = w.shape
    return np.ascontiguousarray(w.transpose(0, 2, 3, 1)).reshape(a, kh * kw * b)


def _taps_first(w2, shape):
    """Inverse of :func:`_taps_last` for a gradient of kernel shape ``shape``."""
    a, b, kh, kw = shape
    return np.ascontiguousarray(w2.reshape(a, kh, kw, b).transpose(0, 3, 1, 2))


def _from_rows(rows, n, h, w):
    """(N*H*W, C) rows -> (N, C, H, W) view over channels-last memory."""
    return rows.reshape(n, h, w, -1).transpose(0, 3, 1, 2)


def conv2d(x, weight, bias=None, stride=1, padding=0, dilation=1):
    """Cross-correlation of ``x`` (N, Cin, H, W) with ``weight`` (Cout, Cin, kH, kW)."""
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {wcin}")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: non-positive output extent {(ho, wo)} for input {x.shape}")
    xh = _to_rows(x.data, padding)
    cols = _im2col(xh, kh, kw, stride, dilation, ho, wo)
    w2 = _taps_last(weight.data)
    rows = cols @ w2.T
    if bias is not None:
        rows += bias.data.reshape(1, cout)
    out = _from_rows(rows, n, ho, wo)
    hp, wp = xh.shape[1:3]

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gx = None
        if x.requires_grad:
            q = dilation * (kh - 1) - padding
            if stride == 1 and kh == kw and q >= 0:
                # gather form: correlate the padded gradient with the flipped kernel
                gh = g2.reshape(n, ho, wo, cout)
                if q:
                    gh = np.pad(gh, ((0, 0), (q, q), (q, q), (0, 0)))
                flipped = _taps_last(weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                gx = _from_rows(_im2col(gh, kh, kw, 1, dilation, h, w) @ flipped.T, n, h, w)
            else:
                dxh = _col2im(g2 @ w2, (n, ho, wo, kh, kw, cin), hp, wp, stride, dilation)
                if padding:
                    dxh = dxh[:, padding:hp - padding, padding:wp - padding]
                gx = dxh.transpose(0, 3, 1, 2)
        gw = _taps_first(g2.T @ cols, weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0).reshape(bias.shape)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, back, "conv2d")


def conv_transpose2d(x, weight, bias=None, stride=2, padding=0):
    """Transposed convolution; ``weight`` is (Cin, Cout, kH, kW).

    Output extent is stride*(H-1) + kH - 2*padding.
    """
    n, cin, h, w = x.shape
    wcin, cout, kh, kw = weight.shape
    if cin != wcin:
        raise ShapeError(f"conv_transpose2d: input has {cin} channels, kernel expects {wcin}")
    hf = stride * (h - 1) + kh
    wf = stride * (w - 1) + kw
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: non-positive output extent {(ho, wo)}")
    x2 = _to_rows(x.data, 0).reshape(-1, cin)
    w2 = _taps_last(weight.data)
    full = _col2im(x2 @ w2, (n, h, w, kh, kw, cout), hf, wf, stride, 1)
    if padding:
        full = full[:, padding:hf - padding, padding:wf - padding]
    if bias is not None:
        full += bias.data.reshape(1, 1, 1, cout)
    out = full.transpose(0, 3, 1, 2)

    def back(g):
        gcols = _im2col(_to_rows(g, padding), kh, kw, stride, 1, h, w)
        gx = None
        if x.requires_grad:
            gx = _from_rows(gcols @ w2.T, n, h, w)
        gw = _taps_first(x2.T @ gcols, weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3)).reshape(bias.shape)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, back, "conv_transpose2d")


def _blocks(x):
    """(N, C, H, W) -> (N, H/2, W/2, C, 4), block entries in row-major order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"2x2 pooling needs even extents, got {(h, w)}")
    xh = x.transpose(0, 2, 3, 1)
    return xh.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(
        n, h // 2, w // 2, c, 4)


def _unblocks(b, shape):
    n, c, h, w = shape
    xh = b.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
    return xh.transpose(0, 3, 1, 2)


def maxpool2x2(x):
    """Max over non-overlapping 2x2 blocks; ties route the gradient to the first
    element in row-major order."""
    blocks = _blocks(x.data)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    shape = x.shape

    def back(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g.transpose(0, 2, 3, 1)[..., None], axis=-1)
        return (_unblocks(gb, shape),)

    return _result(out.transpose(0, 3, 1, 2), (x,), back, "maxpool2x2")


def avgpool2x2(x):
    blocks = _blocks(x.data)
    shape = x.shape

    def back(g):
        gh = g.transpose(0, 2, 3, 1)[..., None] * 0.25
        return (_unblocks(np.repeat(gh, 4, axis=-1), shape),)

    return _result(blocks.mean(axis=-1).transpose(0, 3, 1, 2), (x,), back, "avgpool2x2")


def batchnorm(x, scale, shift, running_mean, running_var, train, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization.

    In train mode the running statistics (plain arrays of shape (1, C, 1, 1))
    are updated in place, with the unbiased batch variance feeding the
    running variance.
    """
    n, c, h, w = x.shape
    if scale.shape != (1, c, 1, 1):
        raise ShapeError(f"batchnorm: scale {scale.shape} does not fit {x.shape}")
    xd = x.data
    gamma = scale.data
    if train:
        m = n * h * w
        if m < 2:
            raise ContractError("train-mode batchnorm needs at least 2 values per channel")
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        var = xd.var(axis=(0, 2, 3), keepdims=True)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        m = None
        mu, var = running_mean, running_var
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * invstd
    out = xhat * gamma + shift.data

    def back(g):
        gs = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
        gb = g.sum(axis=(0, 2, 3), keepdims=True)
        dxhat = g * gamma
        if train:
            gx = invstd / m * (m * dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                               - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        else:
            gx = dxhat * invstd
        return gx.astype(xd.dtype, copy=False), gs, gb

    return _result(out.astype(xd.dtype, copy=False), (x, scale, shift), back, "batchnorm")


# -- modules ----------------------------------------------------------------

class Module:
    """Container that discovers parameters and buffers from its attributes.

    Tensor attributes that require grad are parameters, other tensor
    attributes are buffers; Module attributes and lists of Modules are
    walked recursively in definition order, so names are stable.
    """

    def _children(self):
        for key, value in vars(self).items():
            if isinstance(value, (Tensor, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for i, item in enumerate(value):
                    yield f"{key}.{i}", item

    def named_tensors(self, prefix=""):
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            else:
                yield from value.named_tensors(name + ".")

    def named_parameters(self, prefix=""):
        return [(k, t) for k, t in self.named_tensors(prefix) if t.requires_grad]

    def named_buffers(self, prefix=""):
        return [(k, t) for k, t in self.named_tensors(prefix) if not t.requires_grad]

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for t in self.parameters():
            t.zero_grad()

    def to_dtype(self, dtype):
        for _, t in self.named_tensors():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self


def _param(data, name):
    return Tensor(data, requires_grad=True, name=name)


def he_normal(rng, shape, fan_in, dtype):
    std = math.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Conv2d(Module):
    """3x3 convolution by default, with "same" padding dilation*(k-1)/2."""

    def __init__(self, in_ch, out_ch, k=3, stride=1, padding=None, dilation=1,
                 bias=True, rng=None, dtype=DEFAULT_DTYPE):
        if padding is None:
            padding = dilation * (k - 1) // 2
        self.stride, self.padding, self.dilation = stride, padding, dilation
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = _param(he_normal(rng, (out_ch, in_ch, k, k), in_ch * k * k, dtype), "weight")
        self.bias = _param(np.zeros((1, out_ch, 1, 1), dtype=dtype), "bias") if bias else None

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class ConvTranspose2d(Module):
    def __init__(self, in_ch, out_ch, k=2, stride=2, padding=0, rng=None, dtype=DEFAULT_DTYPE):
        self.stride, self.padding = stride, padding
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_ch * max(1, (k * k) // (stride * stride))
        self.weight = _param(he_normal(rng, (in_ch, out_ch, k, k), fan_in, dtype), "weight")
        self.bias = _param(np.zeros((1, out_ch, 1, 1), dtype=dtype), "bias")

    @property
    def out_channels(self):
        return self.weight.shape[1]

    def __call__(self, x):
        return conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=DEFAULT_DTYPE):
        self.momentum, self.eps = momentum, eps
        self.scale = _param(np.ones((1, channels, 1, 1), dtype=dtype), "scale")
        self.shift = _param(np.zeros((1, channels, 1, 1), dtype=dtype), "shift")
        self.running_mean = Tensor(np.zeros((1, channels, 1, 1), dtype=dtype))
        self.running_var = Tensor(np.ones((1, channels, 1, 1), dtype=dtype))

    def __call__(self, x, train):
        return batchnorm(x, self.scale, self.shift, self.running_mean.data,
                         self.running_var.data, train, self.momentum, self.eps)


class ConvLSTMCell(Module):
    """Convolutional LSTM with per-channel (Hadamard) peephole weights.

    Gate pre-activations for (input, forget, cell, output) are produced by
    one 3x3 convolution of F_t and one of H_{t-1}, each with 4*hidden output
    channels; ``bias`` carries b_i, b_f, b_c, b_o in that order.
    """

    def __init__(self, in_ch, hidden, rng=None, dtype=DEFAULT_DTYPE, forget_bias=1.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.hidden = hidden
        self.W_F = _param(he_normal(rng, (4 * hidden, in_ch, 3, 3), in_ch * 9, dtype), "W_F")
        self.W_h = _param(he_normal(rng, (4 * hidden, hidden, 3, 3), hidden * 9, dtype), "W_h")
        bias = np.zeros((1, 4 * hidden, 1, 1), dtype=dtype)
        bias[:, hidden:2 * hidden] = forget_bias
        self.bias = _param(bias, "bias")
        self.W_ci = _param(np.zeros((1, hidden, 1, 1), dtype=dtype), "W_ci")
        self.W_cf = _param(np.zeros((1, hidden, 1, 1), dtype=dtype), "W_cf")
        self.W_co = _param(np.zeros((1, hidden, 1, 1), dtype=dtype), "W_co")

    def zero_state(self, like):
        n, _, h, w = like.shape
        z = np.zeros((n, self.hidden, h, w), dtype=like.dtype)
        return Tensor(z), Tensor(z.copy())

    def __call__(self, F_t, H_prev, C_prev):
        return convlstm_step(self, F_t, H_prev, C_prev)


def convlstm_step(cell, F_t, H_prev, C_prev):
    """One recurrence step; returns (H_t, C_t)."""
    hid = cell.hidden
    if H_prev.shape != C_prev.shape or H_prev.shape[1] != hid:
        raise ShapeError(f"convlstm_step: state shapes {H_prev.shape}, {C_prev.shape} "
                         f"do not match hidden={hid}")
    if F_t.shape[0] != H_prev.shape[0] or F_t.shape[2:] != H_prev.shape[2:]:
        raise ShapeError(f"convlstm_step: input {F_t.shape} vs state {H_prev.shape}")
    z = conv2d(F_t, cell.W_F, cell.bias, padding=1)
    if H_prev.requires_grad or H_prev.data.any():
        z = add(z, conv2d(H_prev, cell.W_h, None, padding=1))
    else:
        z = attach_zero_grad(z, cell.W_h)
    zi, zf, zc, zo = split_channels(z, [hid] * 4)
    i_t = sigmoid(add(zi, channel_scale(C_prev, cell.W_ci)))
    f_t = sigmoid(add(zf, channel_scale(C_prev, cell.W_cf)))
    C_t = add(hadamard(f_t, C_prev), hadamard(i_t, tanh(zc)))
    O_t = sigmoid(add(zo, channel_scale(C_t, cell.W_co)))
    H_t = hadamard(O_t, tanh(C_t))
    return H_t, C_t


class AttentionGate(Module):
    """Additive attention: alpha = sigmoid(psi(relu(Wq*R + Wk*H))), output alpha∘H.

    ``R`` is the gating signal, ``H`` the skip feature being filtered.
    """

    def __init__(self, skip_ch, gate_ch, inter_ch=None, rng=None, dtype=DEFAULT_DTYPE):
        rng = rng if rng is not None else np.random.default_rng(0)
        inter_ch = inter_ch or max(1, skip_ch // 2)
        self.query = Conv2d(gate_ch, inter_ch, k=1, rng=rng, dtype=dtype)
        self.key = Conv2d(skip_ch, inter_ch, k=1, bias=False, rng=rng, dtype=dtype)
        self.psi = Conv2d(inter_ch, 1, k=1, rng=rng, dtype=dtype)

    def coefficients(self, H_t, R_t):
        if H_t.shape[0] != R_t.shape[0] or H_t.shape[2:] != R_t.shape[2:]:
            raise ShapeError(f"attention_gate: skip {H_t.shape} vs gate {R_t.shape}")
        return sigmoid(self.psi(relu(add(self.query(R_t), self.key(H_t)))))

    def __call__(self, H_t, R_t):
        return scale_by_map(H_t, self.coefficients(H_t, R_t))


def attention_gate(gate, H_t, R_t):
    return gate(H_t, R_t)
