"""Classical dipole inversions: TKD, closed-form Tikhonov and COSMOS.

All three act bin-by-bin in k-space and are linear in the input field.
The per-bin rules are exposed separately (``*_spectrum``) so they can be
checked on scalars.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dipole import DipoleKernel, build_kernel
from .volume import Orientation, Quantity, Spectrum, Volume, fft_forward, fft_inverse

__all__ = [
    "TkdConfig",
    "OrientedField",
    "UnderdeterminedWarning",
    "tkd_spectrum",
    "tikhonov_spectrum",
    "cosmos_spectrum",
    "tkd_invert",
    "tikhonov_invert",
    "cosmos_invert",
]

COSMOS_MIN_DENOMINATOR = 1e-10


class UnderdeterminedWarning(UserWarning):
    pass


@dataclass(frozen=True)
class TkdConfig:
    threshold: float = 0.15

    def __post_init__(self):
        if not 0.0 < self.threshold < 2.0 / 3.0:
            raise ValueError(f"TKD threshold must lie in (0, 2/3), got {self.threshold}")


@dataclass(frozen=True)
class OrientedField:
    field: Volume
    orientation: Orientation


def tkd_spectrum(y, d, threshold: float):
    """``y / d`` where ``|d| >= t``; ``y / (sign(d) t)`` inside the cone; 0 where ``d == 0``."""
    y = np.asarray(y)
    d = np.asarray(d, dtype=np.float64)
    divisor = np.where(np.abs(d) >= threshold, d, np.sign(d) * threshold)
    safe = np.where(divisor == 0, 1.0, divisor)
    return np.where(divisor == 0, 0.0, y / safe)


def tikhonov_spectrum(y, d, lam: float):
    """Minimizer of ``|d x - y|^2 + lam |x|^2``: ``d y / (d^2 + lam)``."""
    d = np.asarray(d, dtype=np.float64)
    return d * np.asarray(y) / (d * d + lam)


def cosmos_spectrum(ys: Sequence, ds: Sequence):
    """Per-bin least squares over orientations; bins with ``sum d^2 < 1e-10`` are 0."""
    num = sum(np.asarray(d) * np.asarray(y) for y, d in zip(ys, ds))
    den = sum(np.asarray(d, dtype=np.float64) ** 2 for d in ds)
    ok = den >= COSMOS_MIN_DENOMINATOR
    return np.where(ok, num / np.where(ok, den, 1.0), 0.0)


def _check(field: Volume, kernel: DipoleKernel):
    if field.dims != kernel.dims:
        raise ValueError(f"field dims {field.dims} do not match kernel dims {kernel.dims}")


def _finish(chi_k, field: Volume) -> Volume:
    chi_k = np.array(chi_k, dtype=np.complex128)
    chi_k[0, 0, 0] = 0.0
    return fft_inverse(Spectrum(chi_k, field.voxel_size_mm), quantity=Quantity.SUSCEPTIBILITY_PPM)


def tkd_invert(field: Volume, kernel: DipoleKernel, cfg: TkdConfig = TkdConfig()) -> Volume:
    _check(field, kernel)
    y = fft_forward(field).data
    return _finish(tkd_spectrum(y, kernel.values, cfg.threshold), field)


def tikhonov_invert(field: Volume, kernel: DipoleKernel, lam: float) -> Volume:
    if not lam > 0:
        raise ValueError(f"Tikhonov lambda must be positive, got {lam}")
    _check(field, kernel)
    y = fft_forward(field).data
    return _finish(tikhonov_spectrum(y, kernel.values, lam), field)


def cosmos_invert(fields: Sequence[OrientedField]) -> Volume:
    """Multi-orientation inversion with orientations given as kernel directions.

    A single orientation is accepted with an :class:`UnderdeterminedWarning`;
    it then reduces to plain division outside the exact zeros of the kernel.
    """
    fields = list(fields)
    if not fields:
        raise ValueError("COSMOS needs at least one oriented field")
    ref = fields[0].field
    for of in fields[1:]:
        if of.field.dims != ref.dims:
            raise ValueError(f"mismatched dims in COSMOS set: {of.field.dims} vs {ref.dims}")
    if len(fields) < 2:
        warnings.warn("COSMOS with one orientation is under-determined inside the magic-angle cone",
                      UnderdeterminedWarning, stacklevel=2)
    ys, ds = [], []
    for of in fields:
        ys.append(fft_forward(of.field).data)
        ds.append(build_kernel(ref.dims, ref.voxel_size_mm, of.orientation).values)
    return _finish(cosmos_spectrum(ys, ds), ref)
