"""Spectral dipole kernel and the susceptibility -> field forward model.

B0 is normalized to 1, so fields come out as a field shift in ppm of B0.
Multiplying by B0, gamma and TE to obtain phase is left to the caller.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .volume import (
    Orientation,
    Quantity,
    Spectrum,
    Volume,
    fft_forward,
    fft_inverse,
    frequency_coords,
)

__all__ = ["DipoleKernel", "build_kernel", "forward_field", "cone_mask", "kernel_volume"]


@dataclass(frozen=True)
class DipoleKernel:
    dims: tuple
    voxel_size_mm: tuple
    orientation: Orientation
    values: np.ndarray

    def __post_init__(self):
        self.values.setflags(write=False)


def _as_orientation(orientation) -> Orientation:
    if isinstance(orientation, Orientation):
        return orientation
    # Orientation() validates the norm and raises on non-unit input.
    return Orientation(tuple(orientation))


def build_kernel(
    dims: Sequence[int],
    voxel_size_mm: Sequence[float] = (1.0, 1.0, 1.0),
    orientation: Union[Orientation, Sequence[float]] = Orientation(),
) -> DipoleKernel:
    """Dipole kernel ``1/3 - (k.b)^2 / |k|^2`` on the wrapped FFT grid.

    The DC bin, where the expression is 0/0, is set to exactly 0. Nyquist
    bins of even-sized axes are symmetrized so the kernel stays even.
    """
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 2:
        raise ValueError(f"kernel needs dims >= 2 on every axis, got {dims}")
    orientation = _as_orientation(orientation)
    bx, by, bz = orientation.b0_direction
    fx, fy, fz = frequency_coords(dims, voxel_size_mm)
    kx, ky, kz = np.meshgrid(fx, fy, fz, indexing="ij")
    kb = kx * bx + ky * by + kz * bz
    k2 = kx * kx + ky * ky + kz * kz
    with np.errstate(invalid="ignore", divide="ignore"):
        values = 1.0 / 3.0 - kb * kb / k2
    values[0, 0, 0] = 0.0
    # On even grids the Nyquist index is its own mirror, so an oblique B0
    # breaks D(k) == D(-k) there. Averaging with the mirrored kernel restores
    # evenness and leaves every other bin unchanged bit for bit.
    mirror = values[np.ix_(*(-np.arange(n) % n for n in dims))]
    values = 0.5 * (values + mirror)
    np.clip(values, -2.0 / 3.0, 1.0 / 3.0, out=values)
    return DipoleKernel(dims, tuple(float(v) for v in voxel_size_mm), orientation, values)


def forward_field(chi: Volume, kernel: DipoleKernel) -> Volume:
    if chi.dims != kernel.dims:
        raise ValueError(f"susceptibility dims {chi.dims} do not match kernel dims {kernel.dims}")
    spec = fft_forward(chi)
    return fft_inverse(
        Spectrum(spec.data * kernel.values, chi.voxel_size_mm),
        quantity=Quantity.FIELD_SHIFT_PPM,
    )


def cone_mask(kernel: DipoleKernel, threshold: float) -> Volume:
    """Frequency bins where the kernel magnitude is below ``threshold``."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    mask = (np.abs(kernel.values) < threshold).astype(np.float64)
    return Volume(mask, kernel.voxel_size_mm, Quantity.MASK)


def kernel_volume(kernel: DipoleKernel) -> Volume:
    """The kernel as a plain volume, e.g. for ``.qvol`` export."""
    return Volume(kernel.values, kernel.voxel_size_mm, Quantity.ARBITRARY)
