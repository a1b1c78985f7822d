"""Differentiable neural-network operations on :class:`Tensor`.

Convolutions use a channels-last im2col matrix built with
``numpy.lib.stride_tricks.sliding_window_view`` and a single matmul;
the input gradient of a (strided) convolution is itself a stride-1
convolution of the zero-dilated upstream gradient with the flipped kernel.
"""

from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Tensor, as_tensor, is_grad_enabled

Triple = Union[int, Sequence[int]]

GROUP_NORM_EPS = 1e-5


def _triple(v: Triple, what: str) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ValueError(f"{what} must have 3 components, got {v}")
    return v


def _require_5d(x: Tensor, what: str) -> None:
    if x.ndim != 5:
        raise ValueError(f"{what} must be (B, C, L, H, W), got shape {x.shape}")


def _im2col(xp: np.ndarray, k, stride) -> tuple[np.ndarray, tuple[int, ...]]:
    """Rows ordered (B, Lo, Ho, Wo), columns (C, kL, kH, kW); returns the matrix and output dims."""
    xl = np.ascontiguousarray(xp.transpose(0, 2, 3, 4, 1))
    win = sliding_window_view(xl, k, axis=(1, 2, 3))[:, :: stride[0], :: stride[1], :: stride[2]]
    dims = win.shape[:4]
    return win.reshape(int(np.prod(dims)), -1), dims


def _conv_raw(xp: np.ndarray, w: np.ndarray, stride: tuple[int, int, int], keep_cols: bool = False):
    """Cross-correlate an already padded input; returns (B, O, Lo, Ho, Wo) (and the im2col matrix)."""
    cols, dims = _im2col(xp, w.shape[2:], stride)
    out = cols @ w.reshape(w.shape[0], -1).T
    out = np.ascontiguousarray(out.reshape(dims + (w.shape[0],)).transpose(0, 4, 1, 2, 3))
    return (out, cols) if keep_cols else out


def _conv_input_grad(g: np.ndarray, w: np.ndarray, padded_shape, stride) -> np.ndarray:
    """Gradient of ``_conv_raw`` w.r.t. its padded input."""
    k = w.shape[2:]
    B, O = g.shape[:2]
    dil = tuple((n - 1) * s + 1 for n, s in zip(g.shape[2:], stride))
    gd = np.zeros((B, O) + tuple(d + 2 * (kk - 1) for d, kk in zip(dil, k)), dtype=g.dtype)
    gd[
        :,
        :,
        k[0] - 1 : k[0] - 1 + dil[0] : stride[0],
        k[1] - 1 : k[1] - 1 + dil[1] : stride[1],
        k[2] - 1 : k[2] - 1 + dil[2] : stride[2],
    ] = g
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    part = _conv_raw(gd, wf, (1, 1, 1))
    if part.shape[2:] == tuple(padded_shape[2:]):
        return part
    full = np.zeros(padded_shape, dtype=g.dtype)
    full[:, :, : part.shape[2], : part.shape[3], : part.shape[4]] = part
    return full


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: Triple = 1,
    padding: Triple = 0,
) -> Tensor:
    """3D cross-correlation.

    Args:
        x: Input of shape (B, Cin, L, H, W).
        weight: Kernel of shape (Cout, Cin, kL, kH, kW).
        bias: Optional (Cout,) offsets.
        stride: Per-axis stride, each >= 1.
        padding: Per-axis zero padding on both sides.

    Returns:
        Tensor of shape (B, Cout, Lo, Ho, Wo).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _require_5d(x, "conv3d input")
    if weight.ndim != 5:
        raise ValueError(f"conv3d weight must be (Cout, Cin, kL, kH, kW), got shape {weight.shape}")
    stride = _triple(stride, "stride")
    padding = _triple(padding, "padding")
    if min(stride) < 1:
        raise ValueError(f"stride components must be >= 1, got {stride}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"channel axis (1) mismatch: input has {x.shape[1]} channels, weight expects {weight.shape[1]}"
        )
    names = ("time", "height", "width")
    for i in range(3):
        if weight.shape[2 + i] > x.shape[2 + i] + 2 * padding[i]:
            raise ValueError(
                f"{names[i]} axis ({2 + i}): kernel extent {weight.shape[2 + i]} exceeds "
                f"padded input extent {x.shape[2 + i] + 2 * padding[i]}"
            )
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"bias must have shape ({weight.shape[0]},), got {bias.shape}")

    pads = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
    xp = np.pad(x.data, pads) if any(padding) else x.data
    w = weight.data
    keep = weight.requires_grad and is_grad_enabled()
    out, cols = _conv_raw(xp, w, stride, keep_cols=True) if keep else (_conv_raw(xp, w, stride), None)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)

    in_shape = x.shape

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad and stride == (1, 1, 1) and all(p < kk for p, kk in zip(padding, w.shape[2:])):
            # stride 1: pad the upstream gradient just enough to land on the unpadded input
            k = w.shape[2:]
            gpad = np.pad(g, ((0, 0), (0, 0)) + tuple((kk - 1 - p, kk - 1 - p) for kk, p in zip(k, padding)))
            wf = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
            gx = _conv_raw(gpad, wf, stride)
        elif x.requires_grad:
            gxp = _conv_input_grad(g, w, xp.shape, stride)
            gx = gxp[
                :,
                :,
                padding[0] : padding[0] + in_shape[2],
                padding[1] : padding[1] + in_shape[3],
                padding[2] : padding[2] + in_shape[4],
            ]
        if weight.requires_grad:
            gm = g.transpose(0, 2, 3, 4, 1).reshape(-1, g.shape[1])
            gw = (gm.T @ cols).reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward)


def _dilate_pad(x: Tensor, stride: tuple[int, int, int], pad: tuple[int, int, int]) -> Tensor:
    B, C = x.shape[:2]
    dil = tuple((n - 1) * s + 1 for n, s in zip(x.shape[2:], stride))
    out = np.zeros((B, C) + tuple(d + 2 * p for d, p in zip(dil, pad)), dtype=x.data.dtype)
    sl = (slice(None), slice(None)) + tuple(
        slice(p, p + d, s) for p, d, s in zip(pad, dil, stride)
    )
    out[sl] = x.data
    return Tensor._make(out, (x,), lambda g: (np.ascontiguousarray(g[sl]),))


def _transpose_kernel(weight: Tensor) -> Tensor:
    # (Cin, Cout, k...) -> flipped (Cout, Cin, k...); an involution up to the axis swap.
    def flip(a):
        return np.ascontiguousarray(a[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))

    return Tensor._make(flip(weight.data), (weight,), lambda g: (flip(g),))


def conv_transpose3d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: Triple = (1, 2, 2),
    padding: Triple = 0,
) -> Tensor:
    """Transposed 3D convolution (the adjoint of :func:`conv3d`).

    ``weight`` has shape (Cin, Cout, kL, kH, kW). Output extents are
    ``(n - 1) * stride - 2 * padding + k`` per axis, so a (1, 2, 2) kernel at
    stride (1, 2, 2) doubles H and W and keeps L.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _require_5d(x, "conv_transpose3d input")
    stride = _triple(stride, "stride")
    padding = _triple(padding, "padding")
    if min(stride) < 1:
        raise ValueError(f"stride components must be >= 1, got {stride}")
    if weight.ndim != 5 or weight.shape[0] != x.shape[1]:
        raise ValueError(
            f"channel axis (1) mismatch: input has {x.shape[1]} channels, weight shape {weight.shape}"
        )
    k = weight.shape[2:]
    if any(p > kk - 1 for p, kk in zip(padding, k)):
        raise ValueError(f"padding {padding} must not exceed kernel extent - 1 ({k})")
    xd = _dilate_pad(x, stride, tuple(kk - 1 - p for kk, p in zip(k, padding)))
    return conv3d(xd, _transpose_kernel(weight), bias)


def maxpool3d(x: Tensor, kernel: Triple = (1, 2, 2)) -> Tensor:
    """Non-overlapping max pooling with stride equal to the kernel.

    Ties resolve to the first element in (time, row, column) scan order, so
    the gradient is routed to a single position.
    """
    x = as_tensor(x)
    _require_5d(x, "maxpool3d input")
    k = _triple(kernel, "kernel")
    B, C, L, H, W = x.shape
    for name, n, kk in zip(("time", "height", "width"), (L, H, W), k):
        if n % kk:
            raise ValueError(f"{name} extent {n} is not divisible by pool size {kk}")
    Lo, Ho, Wo = L // k[0], H // k[1], W // k[2]
    blocks = x.data.reshape(B, C, Lo, k[0], Ho, k[1], Wo, k[2])
    blocks = blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(B, C, Lo, Ho, Wo, -1)
    idx = np.argmax(blocks, axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((B, C, Lo, Ho, Wo, k[0] * k[1] * k[2]), dtype=g.dtype)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        gb = gb.reshape(B, C, Lo, Ho, Wo, k[0], k[1], k[2]).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        return (gb.reshape(B, C, L, H, W),)

    return Tensor._make(np.ascontiguousarray(out), (x,), backward)


def group_norm(
    x: Tensor,
    num_groups: int,
    weight: Optional[Tensor] = None,
    bias: Optional[Tensor] = None,
    eps: float = GROUP_NORM_EPS,
) -> Tensor:
    """Normalise each group of channels to zero mean, unit variance, then apply affine."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ValueError(f"group_norm needs at least (B, C), got {x.shape}")
    B, C = x.shape[:2]
    if num_groups < 1 or C % num_groups:
        raise ValueError(f"{C} channels are not divisible into {num_groups} groups")
    xg = x.data.reshape(B, num_groups, -1)
    n = xg.shape[-1]
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(x.shape)
    bshape = (1, C) + (1,) * (x.ndim - 2)
    gamma = None if weight is None else as_tensor(weight)
    beta = None if bias is None else as_tensor(bias)
    out = xhat * gamma.data.reshape(bshape) if gamma is not None else xhat.copy()
    if beta is not None:
        out += beta.data.reshape(bshape)

    red = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        gx = gg = gbeta = None
        if gamma is not None and gamma.requires_grad:
            gg = (g * xhat).sum(axis=red)
        if beta is not None and beta.requires_grad:
            gbeta = g.sum(axis=red)
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape) if gamma is not None else g
            dxhat = dxhat.reshape(B, num_groups, -1)
            xh = xhat.reshape(B, num_groups, -1)
            gx = (inv / n) * (
                n * dxhat
                - dxhat.sum(axis=-1, keepdims=True)
                - xh * (dxhat * xh).sum(axis=-1, keepdims=True)
            )
            gx = gx.reshape(x.shape)
        return gx, gg, gbeta

    parents = [x]
    parents.append(gamma if gamma is not None else Tensor(0.0))
    parents.append(beta if beta is not None else Tensor(0.0))
    return Tensor._make(out, tuple(parents), backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return Tensor._make(s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    xd = x.data
    return Tensor._make(xd * s, (x,), lambda g: (g * (s + xd * s * (1.0 - s)),))


def tabs(x: Tensor) -> Tensor:
    x = as_tensor(x)
    sgn = np.sign(x.data)
    return Tensor._make(np.abs(x.data), (x,), lambda g: (g * sgn,))


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return Tensor._make(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (B, Fin) and weight (Fout, Fin)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"feature axis (1) mismatch: input {x.shape}, weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    xd, wd = x.data, weight.data

    def backward(g):
        return g @ wd, g.T @ xd, (g.sum(axis=0) if bias is not None else None)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward)


def adaptive_avg_pool3d(x: Tensor) -> Tensor:
    """Global average over (L, H, W); output (B, C, 1, 1, 1)."""
    x = as_tensor(x)
    _require_5d(x, "adaptive_avg_pool3d input")
    return x.mean(axis=(2, 3, 4), keepdims=True)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise ValueError("concat needs at least one tensor")
    nd = xs[0].ndim
    if not -nd <= axis < nd:
        raise ValueError(f"axis {axis} out of range for rank {nd}")
    axis %= nd
    for t in xs[1:]:
        if t.ndim != nd or any(a != b for i, (a, b) in enumerate(zip(t.shape, xs[0].shape)) if i != axis):
            raise ValueError(f"concat shape mismatch off axis {axis}: {xs[0].shape} vs {t.shape}")
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis))
            for i in range(len(xs))
        )

    return Tensor._make(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), backward)


def dropout3d(x: Tensor, p: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Zero whole channels with probability ``p`` (inverted scaling). Identity when p == 0."""
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random((x.shape[0], x.shape[1], 1, 1, 1)) >= p) / (1.0 - p)
    return x * keep
