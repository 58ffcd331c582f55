"""3D convolution kernels and their differentiable wrappers.

Layout is ``(batch, channels, x, y, z)``; weights are ``(out, in, kx, ky, kz)``.
``conv3d`` is a cross-correlation (no kernel flip). Three ops close under
differentiation: for ``T(x, w, g) = <conv3d(x, w), g>``

* ``conv3d_transpose(g, w)`` is ``dT/dx``,
* ``conv3d_weight(x, g)`` is ``dT/dw``,

and each op's backward is expressed through the other two.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, _make, active_tape

__all__ = [
    "conv3d_np",
    "conv3d_transpose_np",
    "conv3d_weight_np",
    "conv3d",
    "conv3d_transpose",
    "conv3d_weight",
    "conv_output_size",
]


def conv_output_size(n: int, k: int, stride: int = 1, padding: int = 0) -> int:
    return (n + 2 * padding - k) // stride + 1


def _pad(x: np.ndarray, lo, hi=None) -> np.ndarray:
    hi = lo if hi is None else hi
    if not any(lo) and not any(hi):
        return x
    return np.pad(x, ((0, 0), (0, 0)) + tuple(zip(lo, hi)))


def _im2col(x: np.ndarray, k, stride: int, padding: int) -> np.ndarray:
    """Patch matrix of shape ``(C, kx, ky, kz, B, X', Y', Z')``.

    Filled one kernel offset at a time; each copy is a strided slice, which
    is much cheaper than materializing a transposed sliding-window view.
    """
    xp = _pad(x, (padding,) * 3)
    b, c = x.shape[:2]
    out = [conv_output_size(n, kk, stride, padding) for n, kk in zip(x.shape[2:], k)]
    col = np.empty((c,) + tuple(k) + (b,) + tuple(out), dtype=x.dtype)
    xt = xp.transpose(1, 0, 2, 3, 4)
    s = stride
    for i in range(k[0]):
        for j in range(k[1]):
            for l in range(k[2]):
                col[:, i, j, l] = xt[:, :, i:i + s * out[0]:s, j:j + s * out[1]:s, l:l + s * out[2]:s]
    return col


def _check(x: np.ndarray, w: np.ndarray, what: str):
    if x.ndim != 5 or w.ndim != 5:
        raise ValueError(f"{what}: expected 5D input and weight, got {x.shape} and {w.shape}")


def _check_conv(x: np.ndarray, w: np.ndarray, padding: int):
    _check(x, w, "conv3d")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv3d: input has {x.shape[1]} channels, weight expects {w.shape[1]}")
    if any(n + 2 * padding < k for n, k in zip(x.shape[2:], w.shape[2:])):
        raise ValueError(f"conv3d: kernel {w.shape[2:]} larger than padded input {x.shape[2:]}")


def conv3d_np(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0, col=None) -> np.ndarray:
    if col is None:
        _check_conv(x, w, padding)
        col = _im2col(x, w.shape[2:], stride, padding)
    o = w.shape[0]
    out = w.reshape(o, -1) @ col.reshape(-1, int(np.prod(col.shape[4:])))
    return np.ascontiguousarray(out.reshape((o,) + col.shape[4:]).swapaxes(0, 1))


def conv3d_weight_np(x: np.ndarray, g: np.ndarray, stride: int, padding: int, kshape, col=None) -> np.ndarray:
    if col is None:
        col = _im2col(x, kshape, stride, padding)
    if col.shape[5:] != g.shape[2:]:
        raise ValueError(f"conv3d_weight: gradient spatial {g.shape[2:]} does not match {col.shape[5:]}")
    o = g.shape[1]
    gt = g.swapaxes(0, 1).reshape(o, -1)
    return (gt @ col.reshape(-1, gt.shape[1]).T).reshape((o,) + col.shape[:4])


def conv3d_transpose_np(g: np.ndarray, w: np.ndarray, stride: int, padding: int, in_spatial) -> np.ndarray:
    """Adjoint of :func:`conv3d_np` with respect to its input.

    ``g`` is ``(B, O, X', Y', Z')``, ``w`` is ``(O, C, k, k, k)``; the result
    has spatial shape ``in_spatial``.
    """
    _check(g, w, "conv3d_transpose")
    if g.shape[1] != w.shape[0]:
        raise ValueError(f"conv3d_transpose: input has {g.shape[1]} channels, weight expects {w.shape[0]}")
    k = w.shape[2:]
    for n, kk, m in zip(in_spatial, k, g.shape[2:]):
        if conv_output_size(n, kk, stride, padding) != m:
            raise ValueError(f"conv3d_transpose: spatial {g.shape[2:]} is not a conv output of {tuple(in_spatial)}")
    if padding == 0 and all(kk == stride for kk in k) and tuple(in_spatial) == tuple(m * stride for m in g.shape[2:]):
        # non-overlapping taps: every output voxel receives exactly one input voxel
        b, _, mx, my, mz = g.shape
        t = np.tensordot(g, w, axes=([1], [0]))  # (B, X, Y, Z, C, kx, ky, kz)
        t = t.transpose(0, 4, 1, 5, 2, 6, 3, 7)
        return np.ascontiguousarray(t).reshape(b, w.shape[1], mx * stride, my * stride, mz * stride)
    if stride > 1:
        dil = np.zeros(g.shape[:2] + tuple((m - 1) * stride + 1 for m in g.shape[2:]), dtype=g.dtype)
        dil[:, :, ::stride, ::stride, ::stride] = g
        g = dil
    # Full correlation with the flipped, channel-swapped kernel.
    lo = [kk - 1 - padding for kk in k]
    extra = [n + 2 * padding - (gd + kk - 1) for n, kk, gd in zip(in_spatial, k, g.shape[2:])]
    hi = [a + e for a, e in zip(lo, extra)]
    crop_lo = [max(0, -a) for a in lo]
    crop_hi = [max(0, -b) for b in hi]
    gp = _pad(g, [max(0, a) for a in lo], [max(0, b) for b in hi])
    if any(crop_lo) or any(crop_hi):
        gp = gp[(slice(None), slice(None)) + tuple(slice(a, s - b) for a, b, s in zip(crop_lo, crop_hi, gp.shape[2:]))]
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].swapaxes(0, 1))
    return conv3d_np(gp, wf, 1, 0)


def conv3d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    in_spatial = x.shape[2:]
    kshape = w.shape[2:]
    _check_conv(x.data, w.data, padding)
    # the patch matrix of x is reused by the weight gradient
    col = _im2col(x.data, kshape, stride, padding) if w.requires_grad and active_tape() is not None else None

    def backward(g, needs):
        return (conv3d_transpose(g, w, stride, padding, in_spatial) if needs[0] else None,
                conv3d_weight(x, g, stride, padding, kshape, col) if needs[1] else None)

    return _make(conv3d_np(x.data, w.data, stride, padding, col), (x, w), backward, "conv3d")


def conv3d_transpose(g: Tensor, w: Tensor, stride: int = 1, padding: int = 0, in_spatial=None) -> Tensor:
    """Transposed convolution; ``in_spatial`` defaults to ``(n - 1) * stride + k - 2 * padding``."""
    if in_spatial is None:
        in_spatial = tuple((m - 1) * stride + kk - 2 * padding for m, kk in zip(g.shape[2:], w.shape[2:]))
    in_spatial = tuple(in_spatial)
    kshape = w.shape[2:]

    def backward(u, needs):
        return (conv3d(u, w, stride, padding) if needs[0] else None,
                conv3d_weight(u, g, stride, padding, kshape) if needs[1] else None)

    data = conv3d_transpose_np(g.data, w.data, stride, padding, in_spatial)
    return _make(data, (g, w), backward, "conv3d_transpose")


def conv3d_weight(x: Tensor, g: Tensor, stride: int, padding: int, kshape, col=None) -> Tensor:
    in_spatial = x.shape[2:]

    def backward(v, needs):
        return (conv3d_transpose(g, v, stride, padding, in_spatial) if needs[0] else None,
                conv3d(x, v, stride, padding) if needs[1] else None)

    data = conv3d_weight_np(x.data, g.data, stride, padding, kshape, col)
    return _make(data, (x, g), backward, "conv3d_weight")
