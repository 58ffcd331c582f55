"""Generator (cropped 3D U-Net) and critic (strided conv stack).

Generator, depth ``d`` and base width ``b``::

    enc[i]  : [Conv 3^3 (no bias) - BN - LeakyReLU] x 2, width b * 2^i, then 2^3 average pool
    bottom  : same block, width b * 2^d
    dec[i]  : ConvTranspose k=2 s=2 (with bias), concat [skip, up], block back to b * 2^i
    head    : Conv 1^3 with bias to one channel, tanh, then crop ``margin`` voxels per face

Targets live in the tanh surrogate space, so the output tanh keeps
predictions inside (-1, 1) where ``from_surrogate`` is finite. It can be
switched off with ``output_activation="none"``.

Critic: ``blocks`` x [Conv 4^3 stride 2 pad 1 with bias - LeakyReLU] with
widths ``c, 2c, 4c, ...``, then a valid conv whose kernel spans the remaining
grid, giving one score per sample. No batch norm (per-sample gradient
penalties are ill-defined with cross-sample statistics).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .layers import BatchNorm3d, Conv3d, ConvTranspose3d, Module, avg_pool3d, crop_center, leaky_relu
from .tensor import Tensor, as_tensor, concat, reshape, tanh

__all__ = [
    "GeneratorSpec",
    "CriticSpec",
    "Generator",
    "Critic",
    "ModelSizeError",
    "build_generator",
    "build_critic",
    "generator_param_count",
    "critic_param_count",
]


class ModelSizeError(ValueError):
    """Incompatible sizes; the message names the offending layer."""


@dataclass(frozen=True)
class GeneratorSpec:
    input_size: int = 24
    output_size: int = 16
    depth: int = 2
    base_channels: int = 4
    kernel: int = 3
    leaky_slope: float = 0.2
    output_activation: str = "tanh"

    @property
    def margin(self) -> int:
        return (self.input_size - self.output_size) // 2

    @classmethod
    def paper_scale(cls, input_size: int = 64, output_size: int = 48) -> "GeneratorSpec":
        """Larger spec (depth 3, base 16); the true published widths are a guess."""
        return cls(input_size, output_size, depth=3, base_channels=16)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class CriticSpec:
    input_size: int = 16
    blocks: int = 4
    base_channels: int = 8
    kernel: int = 4
    leaky_slope: float = 0.2

    def to_dict(self):
        return asdict(self)


class _Block(Module):
    def __init__(self, c_in, c_out, spec: GeneratorSpec, rng):
        super().__init__()
        p = spec.kernel // 2
        self.slope = spec.leaky_slope
        self.conv1 = self.child("conv1", Conv3d(c_in, c_out, spec.kernel, rng, padding=p, bias=False,
                                                gain_slope=spec.leaky_slope))
        self.bn1 = self.child("bn1", BatchNorm3d(c_out))
        self.conv2 = self.child("conv2", Conv3d(c_out, c_out, spec.kernel, rng, padding=p, bias=False,
                                                gain_slope=spec.leaky_slope))
        self.bn2 = self.child("bn2", BatchNorm3d(c_out))

    def forward(self, x):
        x = leaky_relu(self.bn1(self.conv1(x)), self.slope)
        return leaky_relu(self.bn2(self.conv2(x)), self.slope)


class Generator(Module):
    def __init__(self, spec: GeneratorSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        b, d = spec.base_channels, spec.depth
        widths = [b * 2 ** i for i in range(d + 1)]
        self.enc = []
        c_in = 1
        for i in range(d):
            self.enc.append(self.child(f"enc{i}", _Block(c_in, widths[i], spec, rng)))
            c_in = widths[i]
        self.bottom = self.child("bottom", _Block(widths[d - 1] if d else 1, widths[d], spec, rng))
        self.up, self.dec = [], []
        for i in reversed(range(d)):
            self.up.append(self.child(f"up{i}", ConvTranspose3d(widths[i + 1], widths[i], 2, rng, stride=2)))
            self.dec.append(self.child(f"dec{i}", _Block(2 * widths[i], widths[i], spec, rng)))
        self.head = self.child("head", Conv3d(widths[0], 1, 1, rng, gain_slope=None))

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        skips = []
        for blk in self.enc:
            x = blk(x)
            skips.append(x)
            x = avg_pool3d(x, 2)
        x = self.bottom(x)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = dec(concat([skip, up(x)], axis=1))
        y = self.head(x)
        if self.spec.output_activation == "tanh":
            y = tanh(y)
        return crop_center(y, self.spec.margin)


class Critic(Module):
    def __init__(self, spec: CriticSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        self.convs = []
        c_in = 1
        for i in range(spec.blocks):
            c_out = spec.base_channels * 2 ** i
            self.convs.append(self.child(f"conv{i}", Conv3d(c_in, c_out, spec.kernel, rng, stride=2, padding=1,
                                                             gain_slope=spec.leaky_slope)))
            c_in = c_out
        k_final = spec.input_size // 2 ** spec.blocks
        self.final = self.child("final", Conv3d(c_in, 1, k_final, rng, gain_slope=None))

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        for conv in self.convs:
            x = leaky_relu(conv(x), self.spec.leaky_slope)
        y = self.final(x)
        return reshape(y, (y.shape[0], 1))


def _check_generator(spec: GeneratorSpec):
    if spec.depth < 1 or spec.base_channels < 1:
        raise ModelSizeError("generator: depth and base_channels must be >= 1")
    if spec.output_activation not in ("tanh", "none"):
        raise ModelSizeError(f"head: unknown output activation {spec.output_activation!r}")
    if spec.kernel % 2 == 0:
        raise ModelSizeError(f"enc0.conv1: kernel {spec.kernel} must be odd for same padding")
    if spec.input_size < spec.output_size or (spec.input_size - spec.output_size) % 2:
        raise ModelSizeError(f"crop: cannot crop {spec.input_size} to {spec.output_size} symmetrically")
    n = spec.input_size
    for i in range(spec.depth):
        if n % 2:
            raise ModelSizeError(f"enc{i}.pool: spatial size {n} is not divisible by 2")
        n //= 2
    if 2 * spec.margin >= spec.input_size:
        raise ModelSizeError(f"crop: margin {spec.margin} too large for {spec.input_size}")


def _check_critic(spec: CriticSpec):
    n = spec.input_size
    for i in range(spec.blocks):
        if n % 2:
            raise ModelSizeError(f"conv{i}: spatial size {n} is not divisible by 2 (input must be a multiple "
                                 f"of {2 ** spec.blocks})")
        n //= 2
    if n < 1:
        raise ModelSizeError(f"final: nothing left after {spec.blocks} stride-2 blocks")


def build_generator(spec: GeneratorSpec, rng: Optional[np.random.Generator] = None, dtype=np.float64) -> Generator:
    _check_generator(spec)
    rng = np.random.default_rng(0) if rng is None else rng
    return Generator(spec, rng).astype(dtype)


def build_critic(spec: CriticSpec, rng: Optional[np.random.Generator] = None, dtype=np.float64) -> Critic:
    _check_critic(spec)
    rng = np.random.default_rng(0) if rng is None else rng
    return Critic(spec, rng).astype(dtype)


def generator_param_count(spec: GeneratorSpec) -> int:
    k3 = spec.kernel ** 3
    w = [spec.base_channels * 2 ** i for i in range(spec.depth + 1)]

    def block(ci, co):
        return ci * co * k3 + co * co * k3 + 4 * co  # two bias-free convs, two BN (gamma, beta)

    total = block(1, w[0]) + sum(block(w[i - 1], w[i]) for i in range(1, spec.depth + 1))
    for i in range(spec.depth):
        total += w[i + 1] * w[i] * 8 + w[i] + block(2 * w[i], w[i])
    return total + w[0] + 1


def critic_param_count(spec: CriticSpec) -> int:
    total, c_in = 0, 1
    for i in range(spec.blocks):
        c_out = spec.base_channels * 2 ** i
        total += c_in * c_out * spec.kernel ** 3 + c_out
        c_in = c_out
    return total + c_in * (spec.input_size // 2 ** spec.blocks) ** 3 + 1
