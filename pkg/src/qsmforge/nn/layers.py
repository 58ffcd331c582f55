"""Layers for the 3D generator and critic.

Modules hold their parameters as :class:`Tensor` leaves. ``named_parameters``
returns them in a fixed, registration-based order, which is also the
checkpoint order.
"""
from __future__ import annotations

from collections import OrderedDict
from contextlib import contextmanager
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .conv import conv3d, conv3d_transpose
from .tensor import Tensor, _make, getitem, mean, power, reshape, where_positive

__all__ = [
    "Module",
    "Conv3d",
    "ConvTranspose3d",
    "BatchNorm3d",
    "leaky_relu",
    "avg_pool3d",
    "upsample_repeat",
    "crop_center",
    "batchnorm",
    "kaiming_std",
    "frozen_stats",
]

LEAKY_SLOPE = 0.2


def kaiming_std(fan_in: int, slope: float = LEAKY_SLOPE) -> float:
    """He-normal standard deviation with the leaky-ReLU gain ``sqrt(2 / (1 + slope^2))``."""
    return float(np.sqrt(2.0 / (1.0 + slope * slope)) / np.sqrt(fan_in))


# -- functional ops ------------------------------------------------------------------
def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    return where_positive(x, slope)


def avg_pool3d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping mean pool with window and stride ``k``."""
    b, c, nx, ny, nz = x.shape
    if nx % k or ny % k or nz % k:
        raise ValueError(f"avg_pool3d: spatial {x.shape[2:]} not divisible by {k}")
    data = x.data.reshape(b, c, nx // k, k, ny // k, k, nz // k, k).mean(axis=(3, 5, 7))
    return _make(data, (x,), lambda g, needs: (upsample_repeat(g, k, 1.0 / k ** 3),), "avg_pool3d")


def upsample_repeat(x: Tensor, k: int = 2, weight: float = 1.0) -> Tensor:
    """Nearest-neighbour upsampling times ``weight``; adjoint of ``avg_pool3d`` when ``weight = 1/k^3``."""
    data = x.data
    for axis in (2, 3, 4):
        data = np.repeat(data, k, axis=axis)
    if weight != 1.0:
        data = data * weight

    def backward(g, needs):
        # adjoint of repeat is block summation
        return (avg_pool3d(g, k) * (k ** 3 * weight),)

    return _make(data, (x,), backward, "upsample_repeat")


def crop_center(x: Tensor, margin: int) -> Tensor:
    if margin == 0:
        return x
    if margin < 0 or any(2 * margin >= n for n in x.shape[2:]):
        raise ValueError(f"crop margin {margin} too large for spatial {x.shape[2:]}")
    sl = slice(margin, -margin)
    return getitem(x, (slice(None), slice(None), sl, sl, sl))


def _channel(v: Tensor) -> Tensor:
    return reshape(v, (1, -1, 1, 1, 1))


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5,
              stats: Optional[Tuple[np.ndarray, np.ndarray]] = None):
    """Per-channel normalization over batch and space.

    With ``stats=None`` batch statistics are used (biased variance) and the
    returned tuple also carries ``(mean, unbiased_var)`` for the running
    averages. Otherwise ``stats = (mean, var)`` are constants.
    """
    axes = (0, 2, 3, 4)
    if stats is None:
        count = x.shape[0] * x.shape[2] * x.shape[3] * x.shape[4]
        if count < 2:
            raise ValueError("batchnorm in train mode needs at least 2 values per channel")
        mu = mean(x, axes, keepdims=True)
        xc = x - mu
        var = mean(xc * xc, axes, keepdims=True)
        xhat = xc * power(var + eps, -0.5)
        batch = (mu.data.reshape(-1), var.data.reshape(-1) * count / (count - 1))
    else:
        m, v = stats
        shape = (1, -1, 1, 1, 1)
        inv = Tensor((1.0 / np.sqrt(v + eps)).reshape(shape).astype(x.dtype))
        xhat = (x - Tensor(m.reshape(shape).astype(x.dtype))) * inv
        batch = None
    return xhat * _channel(gamma) + _channel(beta), batch


# -- modules ----------------------------------------------------------------------------
class Module:
    """Minimal container with ordered parameters, buffers and children."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self._children: "OrderedDict[str, Module]" = OrderedDict()
        self.training = True

    def param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def child(self, name: str, m: "Module") -> "Module":
        self._children[name] = m
        return m

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        out = [(prefix + k, v) for k, v in self._params.items()]
        for name, m in self._children.items():
            out.extend(m.named_parameters(f"{prefix}{name}."))
        return out

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> List[Tuple[str, np.ndarray]]:
        out = [(prefix + k, v) for k, v in self._buffers.items()]
        for name, m in self._children.items():
            out.extend(m.named_buffers(f"{prefix}{name}."))
        return out

    def modules(self) -> Iterator["Module"]:
        yield self
        for m in self._children.values():
            yield from m.modules()

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        for m in self.modules():
            for p in m._params.values():
                p.data = p.data.astype(dtype)
        return self

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else np.dtype(np.float64)

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Copies of parameters and buffers, keyed by dotted name."""
        state = OrderedDict((k, p.data.copy()) for k, p in self.named_parameters())
        state.update((k, b.copy()) for k, b in self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = [k for k in list(params) + [k for k, _ in self.named_buffers()] if k not in state]
        if missing:
            raise KeyError(f"state is missing {missing[:3]}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: checkpoint shape {state[k].shape} != model shape {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)
        for m_prefix, m in self._named_modules():
            for k in m._buffers:
                m._buffers[k] = np.array(state[m_prefix + k], dtype=np.float64)

    def _named_modules(self, prefix: str = ""):
        yield prefix, self
        for name, m in self._children.items():
            yield from m._named_modules(f"{prefix}{name}.")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv3d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int = 0, bias: bool = True, gain_slope: Optional[float] = LEAKY_SLOPE):
        super().__init__()
        self.stride, self.padding, self.k = stride, padding, k
        fan_in = c_in * k ** 3
        std = kaiming_std(fan_in, gain_slope) if gain_slope is not None else 1.0 / np.sqrt(fan_in)
        self.weight = self.param("weight", rng.normal(0.0, std, (c_out, c_in, k, k, k)))
        self.bias = self.param("bias", np.zeros(c_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = conv3d(x, self.weight, self.stride, self.padding)
        return y + _channel(self.bias) if self.bias is not None else y


class ConvTranspose3d(Module):
    """Transposed conv; weight is ``(c_in, c_out, k, k, k)`` (it is the adjoint of a c_out->c_in conv)."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 bias: bool = True):
        super().__init__()
        self.stride, self.k = stride, k
        # each output voxel of a k=s transposed conv sees c_in inputs
        fan_in = c_in * max(1, (k // stride) ** 3)
        self.weight = self.param("weight", rng.normal(0.0, kaiming_std(fan_in), (c_in, c_out, k, k, k)))
        self.bias = self.param("bias", np.zeros(c_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = conv3d_transpose(x, self.weight, self.stride, 0)
        return y + _channel(self.bias) if self.bias is not None else y


class BatchNorm3d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = self.param("gamma", np.ones(channels))
        self.beta = self.param("beta", np.zeros(channels))
        self._buffers["running_mean"] = np.zeros(channels)
        self._buffers["running_var"] = np.ones(channels)
        self.update_stats = True

    def forward(self, x: Tensor) -> Tensor:
        if not self.training:
            y, _ = batchnorm(x, self.gamma, self.beta, self.eps,
                             (self._buffers["running_mean"], self._buffers["running_var"]))
            return y
        y, (m, v) = batchnorm(x, self.gamma, self.beta, self.eps)
        if self.update_stats:
            a = self.momentum
            self._buffers["running_mean"] = (1 - a) * self._buffers["running_mean"] + a * m.astype(np.float64)
            self._buffers["running_var"] = (1 - a) * self._buffers["running_var"] + a * v.astype(np.float64)
        return y


@contextmanager
def frozen_stats(model: Module):
    """Batch statistics stay in use but running averages are not updated."""
    bns = [m for m in model.modules() if isinstance(m, BatchNorm3d)]
    saved = [m.update_stats for m in bns]
    for m in bns:
        m.update_stats = False
    try:
        yield model
    finally:
        for m, s in zip(bns, saved):
            m.update_stats = s
