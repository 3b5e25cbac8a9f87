"""Volumetric primitives: 3D convolution, batch normalization, nearest upsampling, box sums."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .core import NonFiniteError, Tensor, as_tensor, make_result

_ACC = np.float64


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, out_sp: tuple[int, int, int]) -> np.ndarray:
    cin = xp.shape[0]
    s0, s1, s2, s3 = xp.strides
    view = as_strided(
        xp,
        shape=(cin, k, k, k) + out_sp,
        strides=(s0, s1, s2, s3, s1 * stride, s2 * stride, s3 * stride),
        writeable=False,
    )
    return view.reshape(cin * k ** 3, -1)


def conv3d(x, weight, bias=None, stride: int = 1, padding: int | None = None) -> Tensor:
    """Dense 3D cross-correlation, ``Cin x D x H x W`` -> ``Cout x D' x H' x W'``.

    Sums accumulate in float64 whatever the storage precision; the result is
    cast back to the input dtype.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 5:
        raise ValueError(f"conv3d expects 4D input and 5D weight, got {x.shape} and {weight.shape}")
    cout, cin, k, k1, k2 = weight.shape
    if not (k == k1 == k2):
        raise ValueError("conv3d kernels must be cubic")
    if k % 2 == 0:
        raise ValueError("conv3d kernel size must be odd")
    if x.shape[0] != cin:
        raise ValueError(f"conv3d channel mismatch: input has {x.shape[0]}, weight expects {cin}")
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    p = (k - 1) // 2 if padding is None else int(padding)
    b = None if bias is None else as_tensor(bias)
    if b is not None and b.shape != (cout,):
        raise ValueError(f"bias shape {b.shape} does not match {cout} output channels")

    sp = x.shape[1:]
    out_sp = tuple(conv_output_size(n, k, stride, p) for n in sp)
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp.astype(_ACC, copy=False), k, stride, out_sp)
    w2 = weight.data.reshape(cout, -1).astype(_ACC, copy=False)
    acc = w2 @ cols
    if b is not None:
        acc += b.data.astype(_ACC)[:, None]
    out = acc.reshape((cout,) + out_sp).astype(x.dtype, copy=False)
    xdtype, wdtype = x.dtype, weight.dtype
    padded_shape = xp.shape

    def back(g):
        g2 = g.reshape(cout, -1).astype(_ACC, copy=False)
        gw = (g2 @ cols.T).reshape(weight.shape).astype(wdtype) if weight.requires_grad else None
        gb = g2.sum(axis=1).astype(b.dtype) if (b is not None and b.requires_grad) else None
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape((cin, k, k, k) + out_sp)
            gxp = np.zeros(padded_shape, dtype=_ACC)
            D, H, W = out_sp
            for a in range(k):
                for bb in range(k):
                    for c in range(k):
                        gxp[:, a:a + stride * D:stride, bb:bb + stride * H:stride, c:c + stride * W:stride] += gcols[:, a, bb, c]
            if p:
                gxp = gxp[:, p:-p, p:-p, p:-p]
            gx = gxp.astype(xdtype)
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, weight, b) if b is not None else (x, weight)
    return make_result("conv3d", out, inputs, back)


def conv3d_macs(cin: int, cout: int, k: int, out_spatial) -> int:
    """Multiply-accumulate count of one dense conv layer."""
    return int(cout * cin * k ** 3 * int(np.prod(out_spatial)))


def depthwise_conv3d(x, weight, padding: int | None = None) -> Tensor:
    """Per-channel conv: ``weight`` is ``C x k x k x k``; same padding by default."""
    x, weight = as_tensor(x), as_tensor(weight)
    C, k = weight.shape[0], weight.shape[1]
    if k % 2 == 0:
        raise ValueError("depthwise kernel size must be odd")
    if x.shape[0] != C:
        raise ValueError("depthwise conv channel mismatch")
    p = (k - 1) // 2 if padding is None else int(padding)
    sp = x.shape[1:]
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p))).astype(_ACC, copy=False)
    out_sp = tuple(conv_output_size(n, k, 1, p) for n in sp)
    s0, s1, s2, s3 = xp.strides
    view = as_strided(xp, (C, k, k, k) + out_sp, (s0, s1, s2, s3, s1, s2, s3), writeable=False)
    wd = weight.data.astype(_ACC, copy=False)
    out = np.einsum("cabd,cabdxyz->cxyz", wd, view, optimize=True).astype(x.dtype, copy=False)

    def back(g):
        g = g.astype(_ACC, copy=False)
        gw = np.einsum("cxyz,cabdxyz->cabd", g, view, optimize=True).astype(weight.dtype) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=_ACC)
            D, H, W = out_sp
            for a in range(k):
                for b in range(k):
                    for c in range(k):
                        gxp[:, a:a + D, b:b + H, c:c + W] += wd[:, a, b, c, None, None, None] * g
            if p:
                gxp = gxp[:, p:-p, p:-p, p:-p]
            gx = gxp.astype(x.dtype)
        return gx, gw

    return make_result("depthwise_conv3d", out, (x, weight), back)


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------
@dataclass
class BatchNormState:
    """Per-channel BN affine (learnable) and running statistics (buffers)."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    frozen: bool = False
    num_batches: int = field(default=0)

    @classmethod
    def create(cls, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )


def batchnorm3d(x, bn: BatchNormState, training: bool = False) -> Tensor:
    """Normalize each channel of a ``C x D x H x W`` tensor.

    ``training=True`` normalizes with the statistics of ``x`` and updates the
    running buffers; otherwise (and always when ``bn.frozen``) the stored
    running statistics are used. A frozen BN passes no gradient to gamma/beta.
    """
    x = as_tensor(x)
    C = x.shape[0]
    if bn.gamma.shape != (C,) or bn.beta.shape != (C,) or bn.running_mean.shape != (C,):
        raise ValueError(f"batchnorm parameters are not sized for {C} channels")
    use_batch = training and not bn.frozen
    xd = x.data.astype(_ACC, copy=False)
    gamma = bn.gamma.data.astype(_ACC)
    beta = bn.beta.data.astype(_ACC)
    n = int(np.prod(x.shape[1:]))
    if use_batch:
        mu = xd.mean(axis=(1, 2, 3))
        var = xd.var(axis=(1, 2, 3))
    else:
        mu = bn.running_mean.astype(_ACC)
        var = bn.running_var.astype(_ACC)
    if bn.eps == 0 and (var <= 0).any():
        raise NonFiniteError("batchnorm: zero-variance channel with eps=0")
    inv = 1.0 / np.sqrt(var + bn.eps)
    xhat = (xd - mu[:, None, None, None]) * inv[:, None, None, None]
    out = (gamma[:, None, None, None] * xhat + beta[:, None, None, None]).astype(x.dtype, copy=False)

    if use_batch:
        m = bn.momentum
        unbiased = var * n / max(n - 1, 1)
        bn.running_mean = ((1 - m) * bn.running_mean + m * mu).astype(bn.running_mean.dtype)
        bn.running_var = ((1 - m) * bn.running_var + m * unbiased).astype(bn.running_var.dtype)
        bn.num_batches += 1

    frozen = bn.frozen

    def back(g):
        g = g.astype(_ACC, copy=False)
        gg = gb = None
        if not frozen:
            gg = (g * xhat).sum(axis=(1, 2, 3)).astype(bn.gamma.dtype)
            gb = g.sum(axis=(1, 2, 3)).astype(bn.beta.dtype)
        gx = None
        if x.requires_grad:
            gxhat = g * gamma[:, None, None, None]
            if use_batch:
                s1 = gxhat.mean(axis=(1, 2, 3), keepdims=True)
                s2 = (gxhat * xhat).mean(axis=(1, 2, 3), keepdims=True)
                gx = inv[:, None, None, None] * (gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv[:, None, None, None]
            gx = gx.astype(x.dtype)
        return gx, gg, gb

    return make_result("batchnorm3d", out, (x, bn.gamma, bn.beta), back)


# ---------------------------------------------------------------------------
# Resampling and window sums
# ---------------------------------------------------------------------------
def upsample_nearest2(x) -> Tensor:
    """Nearest-neighbour x2 upsampling of every spatial axis."""
    x = as_tensor(x)
    out = x.data.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)
    C, D, H, W = x.shape

    def back(g):
        return (g.reshape(C, D, 2, H, 2, W, 2).sum(axis=(2, 4, 6)),)

    return make_result("upsample_nearest2", out, (x,), back)


def _box_axis(a: np.ndarray, r: int, axis: int) -> np.ndarray:
    n = a.shape[axis]
    cs = np.cumsum(a, axis=axis, dtype=_ACC)
    zero_shape = list(a.shape)
    zero_shape[axis] = 1
    cs = np.concatenate([np.zeros(zero_shape, dtype=_ACC), cs], axis=axis)
    idx = np.arange(n)
    hi = np.minimum(idx + r, n - 1) + 1
    lo = np.maximum(idx - r, 0)
    return np.take(cs, hi, axis=axis) - np.take(cs, lo, axis=axis)


def box_sum_array(a: np.ndarray, window: int, axes=(1, 2, 3)) -> np.ndarray:
    """Sum over a cubic ``window`` centred on each voxel, clipped at the borders."""
    if window % 2 == 0:
        raise ValueError("window must be odd")
    r = window // 2
    out = a
    for ax in axes:
        out = _box_axis(out, r, ax)
    return out


def window_counts(spatial: tuple[int, int, int], window: int) -> np.ndarray:
    """Number of in-volume voxels inside each clipped window."""
    r = window // 2
    counts = []
    for n in spatial:
        idx = np.arange(n)
        counts.append((np.minimum(idx + r, n - 1) - np.maximum(idx - r, 0) + 1).astype(_ACC))
    return counts[0][:, None, None] * counts[1][None, :, None] * counts[2][None, None, :]


def box_sum3d(x, window: int) -> Tensor:
    """Clipped-window box sum of a ``C x D x H x W`` tensor in O(voxels).

    The clipped window relation is symmetric, so the adjoint is the same box sum.
    """
    x = as_tensor(x)
    out = box_sum_array(x.data, window).astype(x.dtype, copy=False)
    return make_result("box_sum3d", out, (x,), lambda g: (box_sum_array(g, window).astype(x.dtype),))
