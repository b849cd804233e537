"""Differentiable layers on rank-3 ``(batch, channels, time)`` arrays.

Padding convention for every convolution: zero padding with ``K // 2`` frames
on the left and ``K - 1 - K // 2`` on the right, so a stride-1 convolution
keeps the time length. Convolutions are cross-correlations (no kernel flip).
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import ShapeError, Tensor, as_tensor, make_node


def _check_rank(x: np.ndarray, rank: int, what: str):
    if x.ndim != rank:
        raise ShapeError(f"{what}: expected rank {rank}, got shape {x.shape}")


def _pads(width: int) -> tuple[int, int]:
    left = width // 2
    return left, width - 1 - left


def _im2col(x: np.ndarray, width: int, stride: int) -> tuple[np.ndarray, int]:
    """Rows of the returned matrix are flattened ``(channel, tap)`` windows."""
    batch, channels, length = x.shape
    left, right = _pads(width)
    xp = np.pad(x, ((0, 0), (0, 0), (left, right)))
    windows = sliding_window_view(xp, width, axis=2)[:, :, ::stride, :]
    out_len = windows.shape[2]
    cols = windows.transpose(0, 2, 1, 3).reshape(batch * out_len, channels * width)
    return cols, out_len


def _col2im(cols: np.ndarray, batch: int, channels: int, length: int, width: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`_im2col` (scatter-add windows back onto the time axis)."""
    left, right = _pads(width)
    out_len = cols.shape[0] // batch
    taps = cols.reshape(batch, out_len, channels, width).transpose(0, 2, 1, 3)
    xp = np.zeros((batch, channels, length + left + right), dtype=cols.dtype)
    span = stride * (out_len - 1) + 1
    for k in range(width):
        xp[:, :, k : k + span : stride] += taps[:, :, :, k]
    return xp[:, :, left : left + length]


def _to_rows(y: np.ndarray) -> np.ndarray:
    b, c, t = y.shape
    return y.transpose(0, 2, 1).reshape(b * t, c)


def _from_rows(rows: np.ndarray, batch: int) -> np.ndarray:
    n, c = rows.shape
    return rows.reshape(batch, n // batch, c).transpose(0, 2, 1)


def _conv_apply(x: np.ndarray, w: np.ndarray, stride: int):
    cols, out_len = _im2col(x, w.shape[2], stride)
    out = _from_rows(cols @ w.reshape(w.shape[0], -1).T, x.shape[0])
    return out, cols


def _conv_adjoint(y: np.ndarray, w: np.ndarray, stride: int, length: int) -> np.ndarray:
    """Adjoint of the bias-free strided convolution with weights ``w``."""
    rows = _to_rows(y) @ w.reshape(w.shape[0], -1)
    return _col2im(rows, y.shape[0], w.shape[1], length, w.shape[2], stride)


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """Same-padded temporal convolution.

    ``x`` is ``(B, C_in, T)``, ``weight`` is ``(C_out, C_in, K)``; the output is
    ``(B, C_out, ceil(T / stride))``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check_rank(x.data, 3, "conv1d input")
    _check_rank(weight.data, 3, "conv1d weight")
    c_out, c_in, width = weight.shape
    batch, channels, length = x.shape
    if channels != c_in:
        raise ShapeError(f"conv1d: input channels {channels} != weight in-channels {c_in}")
    if width > length:
        raise ShapeError(f"conv1d: kernel time-width {width} exceeds input time length {length}")
    if bias is not None and as_tensor(bias).shape != (c_out,):
        raise ShapeError(f"conv1d: bias shape {as_tensor(bias).shape} != ({c_out},)")

    out, cols = _conv_apply(x.data, weight.data, stride)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None]
        parents.append(bias)

    def backward(g):
        rows = _to_rows(g)
        gx = gw = gb = None
        if x.requires_grad:
            gx = _col2im(rows @ weight.data.reshape(c_out, -1), batch, c_in, length, width, stride)
        if weight.requires_grad:
            gw = (rows.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        return (gx, gw, gb)

    return make_node(out, parents, backward)


def conv_transpose1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 2) -> Tensor:
    """Transposed temporal convolution that multiplies the time length by ``stride``.

    ``weight`` is ``(C_in, C_out, K)``. Without bias this is exactly the adjoint
    of ``conv1d(., weight, stride=stride)`` acting on length ``stride * T``
    signals, i.e. zero-insertion upsampling followed by the mirrored-padding
    correlation with the flipped kernel.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check_rank(x.data, 3, "conv_transpose1d input")
    _check_rank(weight.data, 3, "conv_transpose1d weight")
    c_in, c_out, width = weight.shape
    batch, channels, length = x.shape
    if channels != c_in:
        raise ShapeError(f"conv_transpose1d: input channels {channels} != weight in-channels {c_in}")
    if bias is not None and as_tensor(bias).shape != (c_out,):
        raise ShapeError(f"conv_transpose1d: bias shape {as_tensor(bias).shape} != ({c_out},)")
    out_len = stride * length

    out = _conv_adjoint(x.data, weight.data, stride, out_len)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None]
        parents.append(bias)

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad or weight.requires_grad:
            cols, _ = _im2col(g, width, stride)
            if x.requires_grad:
                gx = _from_rows(cols @ weight.data.reshape(c_in, -1).T, batch)
            if weight.requires_grad:
                gw = (_to_rows(x.data).T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        return (gx, gw, gb)

    return make_node(out, parents, backward)


def avg_pool1d(x: Tensor) -> Tensor:
    """Mean over non-overlapping pairs of frames (window 2, stride 2)."""
    x = as_tensor(x)
    _check_rank(x.data, 3, "avg_pool1d input")
    if x.shape[2] % 2:
        raise ShapeError(f"avg_pool1d: time length {x.shape[2]} is odd")
    out = 0.5 * (x.data[:, :, 0::2] + x.data[:, :, 1::2])

    def backward(g):
        return (np.repeat(0.5 * g, 2, axis=2),)

    return make_node(out, [x], backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``x`` of shape ``(B, F_in)`` and ``weight`` ``(F_out, F_in)``."""
    x, weight = as_tensor(x), as_tensor(weight)
    _check_rank(x.data, 2, "linear input")
    _check_rank(weight.data, 2, "linear weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[1]} != weight in-features {weight.shape[1]}")
    out = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb)

    return make_node(out, parents, backward)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    active = x.data > 0
    out = np.where(active, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        return (g * active,)

    return make_node(out, [x], backward)


def batchnorm1d(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over batch and time.

    In training mode the running statistics are updated in place (EMA with
    ``momentum``, unbiased variance); eval mode reads them only.
    """
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    _check_rank(x.data, 3, "batchnorm1d input")
    batch, channels, length = x.shape
    if scale.shape != (channels,) or shift.shape != (channels,):
        raise ShapeError(f"batchnorm1d: scale/shift must have shape ({channels},)")
    count = batch * length
    if training:
        if count < 2:
            raise ShapeError("batchnorm1d: training mode needs more than one element per channel")
        mean = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None]) * inv_std[None, :, None]
    out = xhat * scale.data[None, :, None] + shift.data[None, :, None]
    out = out.astype(x.dtype, copy=False)

    def backward(g):
        gscale = (g * xhat).sum(axis=(0, 2)) if scale.requires_grad else None
        gshift = g.sum(axis=(0, 2)) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * scale.data[None, :, None]
            if training:
                gx = (
                    gxhat
                    - gxhat.mean(axis=(0, 2), keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=(0, 2), keepdims=True)
                ) * inv_std[None, :, None]
            else:
                gx = gxhat * inv_std[None, :, None]
        return (gx, gscale, gshift)

    return make_node(out, [x, scale, shift], backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    logits = as_tensor(logits)
    _check_rank(logits.data, 2, "softmax_cross_entropy logits")
    labels = np.asarray(labels)
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise ShapeError(f"softmax_cross_entropy: labels shape {labels.shape} != ({batch},)")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {classes})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    rows = np.arange(batch)
    loss = -log_probs[rows, labels].mean()

    def backward(g):
        probs = np.exp(log_probs)
        probs[rows, labels] -= 1.0
        return (probs * (g / batch),)

    return make_node(np.asarray(loss, dtype=logits.dtype), [logits], backward)


def squared_error(pred: Tensor, target: np.ndarray, weight: Optional[np.ndarray] = None) -> Tensor:
    """Sum of squared residuals per sample, averaged over the leading batch axis.

    With ``weight`` (a 0/1 mask broadcastable to ``pred``) only weighted
    entries contribute; residuals are ``weight * (target - pred)``.
    """
    pred = as_tensor(pred)
    target = np.asarray(target)
    if target.shape != pred.shape:
        raise ShapeError(f"squared_error: target shape {target.shape} != prediction shape {pred.shape}")
    resid = target - pred.data
    if weight is not None:
        resid = weight * resid
    batch = pred.shape[0]
    loss = np.sum(resid * resid) / batch

    def backward(g):
        grad = resid * (-2.0 * g / batch)
        if weight is not None:
            grad = grad * weight
        return (grad.astype(pred.dtype, copy=False),)

    return make_node(np.asarray(loss, dtype=pred.dtype), [pred], backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        return (g, g)

    return make_node(a.data + b.data, [a, b], backward)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    original = x.shape

    def backward(g):
        return (g.reshape(original),)

    return make_node(x.data.reshape(shape), [x], backward)


def transpose(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    inverse = np.argsort(axes)

    def backward(g):
        return (g.transpose(inverse),)

    return make_node(x.data.transpose(axes), [x], backward)


def mean_time(x: Tensor) -> Tensor:
    """Global average over the time axis: ``(B, C, T) -> (B, C)``."""
    x = as_tensor(x)
    _check_rank(x.data, 3, "mean_time input")
    length = x.shape[2]

    def backward(g):
        return (np.repeat(g[:, :, None] / length, length, axis=2),)

    return make_node(x.data.mean(axis=2), [x], backward)
